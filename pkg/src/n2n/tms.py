"""Multichannel segmentation and the segmentation-based image score.

The segmenter is a small skip-fusion network: five stride-2 convolution
blocks, class-score heads at the 1/8, 1/16, and 1/32 scales fused by
learnable 2x upsampling and addition, then a single 8x upsampling back to
full resolution. Convolutions use circular padding, which makes the
pre-upsample score maps exactly shift-covariant at stride granularity.

Translated multichannel segmentation (TMS) feeds two identical
given-modality images plus one translated-modality image into the three
input channels; the (given, given, given) composition is the
single-modality baseline.

``fcn_score`` evaluates synthesized images by how well a segmenter trained
on real target-modality images segments them: mean pixel accuracy, per
class accuracy, and per-class Dice for the real and synthesized sets plus
the gap between them.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import metrics as metrics_mod
from . import volio
from .errors import ConfigError, ContractError, FormatError, TrainingDiverged
from .model import BN_EPS
from .runtime import derive_seed
from .train import read_array_file, write_array_file

ENCODER_WIDTHS = (64, 128, 256, 512, 512)
CHANNEL_TAGS = ("given", "translated")
SIZE_DIVISOR = 32


@dataclass(frozen=True)
class ChannelSpec:
    """Ordered triple of channel sources, e.g. (given, given, translated)."""

    channels: tuple

    def __post_init__(self):
        if len(self.channels) != 3:
            raise ContractError(f"exactly 3 channels required, got {len(self.channels)}")
        bad = [c for c in self.channels if c not in CHANNEL_TAGS]
        if bad:
            raise ContractError(f"unknown channel tags {bad}; expected {CHANNEL_TAGS}")

    @classmethod
    def parse(cls, text):
        if isinstance(text, cls):
            return text
        alias = {"g": "given", "t": "translated"}
        parts = [alias.get(p.strip().lower(), p.strip().lower()) for p in str(text).split(",")]
        return cls(tuple(parts))

    @property
    def needs_translated(self):
        return "translated" in self.channels

    def __str__(self):
        return ",".join(self.channels)


BASELINE_SPEC = ChannelSpec(("given", "given", "given"))
TMS_SPEC = ChannelSpec(("given", "given", "translated"))


def compose_tms(given, translated, spec=TMS_SPEC):
    """Stack HxW(x1) source images into an HxWx3 input per the channel spec."""
    spec = ChannelSpec.parse(spec)
    sources = {"given": np.asarray(given), "translated": None}
    if spec.needs_translated:
        if translated is None:
            raise ContractError(f"channel spec {spec} needs a translated image")
        sources["translated"] = np.asarray(translated)
    planes = []
    for tag in spec.channels:
        img = sources[tag]
        if img.ndim == 3:
            if img.shape[2] != 1:
                raise ContractError(f"{tag} image must be single-channel, got {img.shape}")
            img = img[:, :, 0]
        planes.append(img)
    if any(p.shape != planes[0].shape for p in planes):
        raise ContractError(
            f"channel sizes differ: {[p.shape for p in planes]}"
        )
    return np.stack(planes, axis=-1)


def _bilinear_kernel(factor):
    size = 2 * factor
    center = (size - 1) / 2.0
    rng = np.arange(size)
    kernel = (1 - np.abs(rng - center) / factor)[:, None] * (1 - np.abs(rng - center) / factor)[None, :]
    return torch.tensor(kernel, dtype=torch.float32)


class Segmenter(nn.Module):
    """Five-block encoder with three fused prediction heads (1/8, 1/16, 1/32).

    Each block halves the resolution with a stride-2 convolution and refines
    with a stride-1 convolution; all convolutions pad circularly so score
    maps stay exactly shift-covariant at stride granularity.
    """

    def __init__(self, n_classes=4, in_channels=3, width_multiplier=1.0):
        super().__init__()
        if n_classes < 2:
            raise ContractError(f"need at least 2 classes, got {n_classes}")
        widths = [max(1, round(w * width_multiplier)) for w in ENCODER_WIDTHS]
        self.n_classes = n_classes
        self.in_channels = in_channels
        self.width_multiplier = width_multiplier
        self.blocks = nn.ModuleList()
        prev = in_channels
        for width in widths:
            self.blocks.append(
                nn.Sequential(
                    nn.Conv2d(prev, width, 3, stride=2, padding=1, padding_mode="circular"),
                    nn.BatchNorm2d(width, eps=BN_EPS, track_running_stats=False),
                    nn.ReLU(),
                    nn.Conv2d(width, width, 3, stride=1, padding=1, padding_mode="circular"),
                    nn.BatchNorm2d(width, eps=BN_EPS, track_running_stats=False),
                    nn.ReLU(),
                )
            )
            prev = width
        self.head8 = nn.Conv2d(widths[2], n_classes, 1)
        self.head16 = nn.Conv2d(widths[3], n_classes, 1)
        self.head32 = nn.Conv2d(widths[4], n_classes, 1)
        self.up32 = nn.ConvTranspose2d(n_classes, n_classes, 4, stride=2, padding=1)
        self.up16 = nn.ConvTranspose2d(n_classes, n_classes, 4, stride=2, padding=1)
        self.up8 = nn.ConvTranspose2d(n_classes, n_classes, 16, stride=8, padding=4)

    def forward(self, x, return_heads=False):
        if x.shape[-1] % SIZE_DIVISOR or x.shape[-2] % SIZE_DIVISOR:
            raise ContractError(
                f"segmenter input size {tuple(x.shape[-2:])} must be divisible by {SIZE_DIVISOR}"
            )
        feats = []
        out = x
        for block in self.blocks:
            out = block(out)
            feats.append(out)
        s8 = self.head8(feats[2])
        s16 = self.head16(feats[3])
        s32 = self.head32(feats[4])
        fused16 = self.up32(s32) + s16
        fused8 = self.up16(fused16) + s8
        logits = self.up8(fused8)
        if return_heads:
            return logits, {"s8": s8, "s16": s16, "s32": s32}
        return logits


def init_segmenter(seed, n_classes=4, in_channels=3, width_multiplier=1.0):
    """Deterministic init: He-scaled conv weights (the net trains from
    scratch), upsamplers seeded as bilinear interpolation, unit norm scales."""
    model = Segmenter(n_classes, in_channels, width_multiplier)
    g = torch.Generator().manual_seed(int(seed))
    for module in model.modules():
        if isinstance(module, nn.ConvTranspose2d):
            factor = module.stride[0]
            kernel = _bilinear_kernel(factor)
            module.weight.data.zero_()
            for c in range(module.in_channels):
                module.weight.data[c, c] = kernel
            if module.bias is not None:
                module.bias.data.zero_()
        elif isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            module.weight.data.normal_(0.0, math.sqrt(2.0 / fan_in), generator=g)
            module.bias.data.zero_()
        elif isinstance(module, nn.BatchNorm2d):
            module.weight.data.fill_(1.0)
            module.bias.data.zero_()
    return model


def _image_to_batch(image):
    t = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    if t.ndim != 3:
        raise ContractError(f"expected HxWxC input, got {tuple(t.shape)}")
    return t.permute(2, 0, 1)[None]


def seg_forward(model: Segmenter, image):
    """Per-pixel class probabilities (HxWxK) for an HxWx3 input in [-1,1]."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits = model(_image_to_batch(image))
            probs = torch.softmax(logits, dim=1)
    finally:
        model.train(was_training)
    return probs[0].permute(1, 2, 0).numpy()


def predict_labels(model: Segmenter, image):
    return np.argmax(seg_forward(model, image), axis=-1).astype(np.int64)


@dataclass
class SegTrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.99
    weight_decay: float = 5e-4
    epochs: int = 20
    seed: int = 0
    width_multiplier: float = 1.0
    n_classes: int = 4
    channels: str = "given,given,translated"
    given: str = "A"
    batch_size: int = 1

    def __post_init__(self):
        self.channels = str(ChannelSpec.parse(self.channels))
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size != 1:
            raise ConfigError("batch_size is fixed at 1")


@dataclass
class SegTrainState:
    config: SegTrainConfig
    model: Segmenter
    optimizer: torch.optim.SGD
    epoch: int = 0
    step: int = 0


def init_seg_state(config: SegTrainConfig) -> SegTrainState:
    model = init_segmenter(
        config.seed, config.n_classes, in_channels=3, width_multiplier=config.width_multiplier
    )
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    return SegTrainState(config, model, optimizer)


def seg_train_step(state: SegTrainState, image, labels):
    """One SGD step of per-pixel cross-entropy on a composed image."""
    state.model.train(True)
    logits = state.model(_image_to_batch(image))
    target = torch.as_tensor(np.asarray(labels), dtype=torch.long)[None]
    loss = nn.functional.cross_entropy(logits, target)
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    value = float(loss.detach())
    if not np.isfinite(value):
        raise TrainingDiverged(state.step, {"cross_entropy": value})
    state.step += 1
    return value


def translated_slice_path(translated_dir, subject_id, index, tag="Bhat"):
    return f"{translated_dir}/{volio.slice_filename(subject_id, tag, index)}"


def load_seg_dataset(manifest, split, channel_spec, given="A", translated_dir=None):
    """Composed (image, labels) training items for a manifest split."""
    spec = ChannelSpec.parse(channel_spec)
    if spec.needs_translated and translated_dir is None:
        raise ConfigError(f"channel spec {spec} requires --translated images")
    items = []
    for sid in manifest.split_ids(split):
        entry = manifest.subject(sid)
        given_paths = entry["modalities"][given]
        if not isinstance(given_paths, list):
            raise ConfigError("manifest holds volumes; run the slicing step first")
        for k, rel in enumerate(given_paths):
            g = volio.normalize(volio.read_png(manifest.resolve(rel)))
            t = None
            if spec.needs_translated:
                t = volio.normalize(volio.read_png(translated_slice_path(translated_dir, sid, k)))
            image = compose_tms(g, t, spec)
            labels = volio.read_png(manifest.resolve(entry["labels"][k])).astype(np.int64)
            items.append((image, labels))
    return items


def seg_train(config: SegTrainConfig, manifest, split="partB", translated_dir=None, log=None):
    """Train the segmenter over shuffled slices of one split."""
    items = load_seg_dataset(
        manifest, split, config.channels, given=config.given, translated_dir=translated_dir
    )
    if not items:
        raise ConfigError(f"split {split!r} is empty")
    state = init_seg_state(config)
    for epoch in range(config.epochs):
        epoch_seed = derive_seed(config.seed, epoch)
        torch.manual_seed(epoch_seed)
        order = np.random.default_rng(epoch_seed).permutation(len(items))
        losses = [seg_train_step(state, *items[i]) for i in order]
        state.epoch = epoch + 1
        if log is not None:
            log({"epoch": state.epoch, "cross_entropy": float(np.mean(losses))})
    return state


def save_seg_checkpoint(state: SegTrainState, path):
    arrays = {}
    for key, value in state.model.state_dict().items():
        arrays[f"seg.{key}"] = value.detach().cpu().numpy()
    opt_sd = state.optimizer.state_dict()
    opt_meta = {"param_groups": opt_sd["param_groups"], "state_keys": {}}
    for pid, slots in opt_sd["state"].items():
        opt_meta["state_keys"][str(pid)] = sorted(slots)
        for slot, value in slots.items():
            arrays[f"opt.state.{pid}.{slot}"] = value.detach().cpu().numpy()
    meta = {
        "kind": "segmenter",
        "config": asdict(state.config),
        "epoch": state.epoch,
        "step": state.step,
        "optimizer": opt_meta,
    }
    write_array_file(path, meta, arrays)
    return path


def load_seg_checkpoint(path) -> SegTrainState:
    meta, arrays = read_array_file(path)
    if meta.get("kind") != "segmenter":
        raise FormatError(f"{path}: not a segmenter checkpoint")
    config = SegTrainConfig(**meta["config"])
    state = init_seg_state(config)
    model_sd = {
        key[len("seg.") :]: torch.from_numpy(arr.copy())
        for key, arr in arrays.items()
        if key.startswith("seg.")
    }
    state.model.load_state_dict(model_sd)
    opt_state = {}
    for pid, slots in meta["optimizer"]["state_keys"].items():
        opt_state[int(pid)] = {
            slot: torch.from_numpy(arrays[f"opt.state.{pid}.{slot}"].copy()) for slot in slots
        }
    state.optimizer.load_state_dict(
        {"param_groups": meta["optimizer"]["param_groups"], "state": opt_state}
    )
    state.epoch = meta["epoch"]
    state.step = meta["step"]
    return state


def segmentation_scores(model: Segmenter, images, labels, classes=None):
    """Mean pixel accuracy, per-class accuracy, and per-class Dice over a set."""
    if len(images) != len(labels):
        raise ContractError(f"image/label counts differ: {len(images)} vs {len(labels)}")
    if not images:
        raise ContractError("empty evaluation set")
    preds = [predict_labels(model, img) for img in images]
    stacked_pred = np.stack(preds)
    stacked_true = np.stack([np.asarray(l) for l in labels])
    if classes is None:
        classes = sorted(np.unique(stacked_true).tolist())
    accuracy_all = float((stacked_pred == stacked_true).mean())
    per_class_acc = {}
    per_class_dice = {}
    for cls in classes:
        mask = stacked_true == cls
        per_class_acc[str(cls)] = float((stacked_pred[mask] == cls).mean()) if mask.any() else 1.0
        per_class_dice[str(cls)] = metrics_mod.dice(stacked_true, stacked_pred, cls)
    return {
        "accuracy_all": accuracy_all,
        "accuracy_per_class": per_class_acc,
        "dice_per_class": per_class_dice,
    }


def fcn_score(model: Segmenter, real_images, fake_images, labels, classes=None):
    """Score real vs synthesized images through one fixed segmenter.

    The model is expected to have been trained on real target-modality
    images; the per-set scores and their gap quantify how plausibly the
    synthesized set imitates the real one.
    """
    real = segmentation_scores(model, real_images, labels, classes=classes)
    fake = segmentation_scores(model, fake_images, labels, classes=classes)
    gap = {
        "accuracy_all": real["accuracy_all"] - fake["accuracy_all"],
        "accuracy_per_class": {
            k: real["accuracy_per_class"][k] - fake["accuracy_per_class"][k]
            for k in real["accuracy_per_class"]
        },
        "dice_per_class": {
            k: real["dice_per_class"][k] - fake["dice_per_class"][k]
            for k in real["dice_per_class"]
        },
    }
    return {"real": real, "fake": fake, "gap": gap}
