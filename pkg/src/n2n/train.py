"""Alternating min-max training, checkpointing, and translation inference.

One training step on a pair (x, y) performs exactly one discriminator
update (when the loss mode has an adversarial term) followed by one
generator update, each from its own backward pass. Optimization uses Adam
with lr 2e-4 and betas (0.5, 0.999) by default; batch size is fixed at 1,
under which batch normalization behaves as instance normalization.

Checkpoints are single binary files (magic ``N2NCKPT1``, little-endian,
versioned): a JSON index of named arrays followed by their raw bytes, which
round-trips every parameter bit-exactly. Resuming restores models, both
optimizers, and the per-epoch RNG schedule, so a resumed run reproduces the
uninterrupted loss trace; a config-hash mismatch on resume is an error.
"""

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import model as nets
from . import volio
from .errors import ConfigError, ContractError, FormatError, TrainingDiverged
from .model import LossMode
from .runtime import derive_seed

CHECKPOINT_MAGIC = b"N2NCKPT1"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    loss_mode: str = "cgan+l1"
    lambda_l1: float = 100.0
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 1
    epochs: int = 400
    seed: int = 0
    width_multiplier: float = 1.0
    source: str = "A"
    target: str = "B"
    saturating_adversarial: bool = False
    manifest: str = ""
    checkpoint_dir: str = ""

    def __post_init__(self):
        self.loss_mode = LossMode.parse(self.loss_mode).value
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.lambda_l1 <= 0:
            raise ConfigError(f"lambda must be positive, got {self.lambda_l1}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size != 1:
            raise ConfigError("batch_size is fixed at 1 (instance-normalization contract)")
        if self.width_multiplier <= 0:
            raise ConfigError(f"width_multiplier must be positive, got {self.width_multiplier}")

    def hash(self):
        """Identity hash of the fields that must match for a resume to be
        sound; run-level fields (epochs, paths) stay out so a checkpoint can
        be trained longer or moved."""
        fields = asdict(self)
        for run_level in ("epochs", "manifest", "checkpoint_dir"):
            fields.pop(run_level)
        blob = json.dumps(fields, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class TrainState:
    config: TrainConfig
    generator: nets.Generator
    discriminator: nets.Discriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)


def init_state(config: TrainConfig) -> TrainState:
    gen, disc = nets.init_models(config.seed, config.width_multiplier)
    opt_g = torch.optim.Adam(
        gen.parameters(), lr=config.learning_rate, betas=(config.adam_beta1, config.adam_beta2)
    )
    opt_d = torch.optim.Adam(
        disc.parameters(), lr=config.learning_rate, betas=(config.adam_beta1, config.adam_beta2)
    )
    return TrainState(config, gen, disc, opt_g, opt_d)


def train_step(state: TrainState, pair):
    """One optimization step on a normalized (x, y) pair.

    Returns the scalar losses that were optimized; the combined generator
    loss always equals adversarial + lambda * l1 under cgan+l1.
    """
    mode = LossMode.parse(state.config.loss_mode)
    x, y = pair
    x = x if torch.is_tensor(x) else nets.to_torch(x)
    y = y if torch.is_tensor(y) else nets.to_torch(y)

    gen, disc = state.generator, state.discriminator
    gen.train(True)
    losses = {}

    fake = gen(x)

    if mode.adversarial:
        disc.train(True)
        state.opt_d.zero_grad()
        payoff = nets.loss_cgan(disc(x, y), disc(x, fake.detach()))
        d_loss = -payoff
        d_loss.backward()
        state.opt_d.step()
        losses["d_loss"] = float(d_loss.detach())

        g_adv = nets.generator_adversarial(
            disc(x, fake), saturating=state.config.saturating_adversarial
        )
        losses["g_adv"] = float(g_adv.detach())
    else:
        g_adv = None

    if mode.pixelwise:
        g_l1 = nets.loss_l1(y, fake)
        losses["g_l1"] = float(g_l1.detach())
    else:
        g_l1 = None

    g_total = nets.loss_combined(mode, adversarial=g_adv, l1=g_l1, lambda_l1=state.config.lambda_l1)
    state.opt_g.zero_grad()
    if mode.adversarial:
        # gradients flow through D during the generator update; drop them so
        # they never leak into the next discriminator step
        state.opt_d.zero_grad()
    g_total.backward()
    state.opt_g.step()
    if mode.adversarial:
        state.opt_d.zero_grad()
    losses["g_total"] = float(g_total.detach())

    if any(not math.isfinite(v) for v in losses.values()):
        raise TrainingDiverged(state.step, losses)
    state.step += 1
    return losses


def load_training_pairs(manifest, source, target, split="train"):
    """Normalized (x, y) slice tensors for each subject of a split, in
    manifest order."""
    pairs = []
    names = []
    for sid in manifest.split_ids(split):
        entry = manifest.subject(sid)
        try:
            src_paths = entry["modalities"][source]
            tgt_paths = entry["modalities"][target]
        except KeyError as err:
            raise ConfigError(f"subject {sid} lacks modality {err}") from err
        if not isinstance(src_paths, list):
            raise ConfigError(
                "manifest holds volume paths; run the slicing step first to get slice PNGs"
            )
        for src, tgt in zip(src_paths, tgt_paths):
            x = nets.to_torch(volio.normalize(volio.read_png(manifest.resolve(src))))
            y = nets.to_torch(volio.normalize(volio.read_png(manifest.resolve(tgt))))
            pairs.append((x, y))
            names.append(src)
    return pairs, names


def train(config: TrainConfig, manifest, resume=None, checkpoint_dir=None, log=None):
    """Train over shuffled pairs for config.epochs; returns the final state.

    Shuffling and dropout reseed per epoch from (seed, epoch), so a run
    resumed from an epoch-boundary checkpoint continues the exact trace of
    the uninterrupted run.
    """
    pairs, _ = load_training_pairs(manifest, config.source, config.target)
    if not pairs:
        raise ConfigError("training split is empty")

    if resume is not None:
        state = load_checkpoint(resume, expect_config=config)
    else:
        state = init_state(config)

    every = max(1, config.epochs // 10)
    for epoch in range(state.epoch, config.epochs):
        epoch_seed = derive_seed(config.seed, epoch)
        torch.manual_seed(epoch_seed)
        order = np.random.default_rng(epoch_seed).permutation(len(pairs))
        epoch_losses = []
        for idx in order:
            losses = train_step(state, pairs[idx])
            epoch_losses.append(losses)
        state.epoch = epoch + 1
        means = {
            k: float(np.mean([l[k] for l in epoch_losses]))
            for k in epoch_losses[0]
        }
        state.history.append({"epoch": state.epoch, **means})
        if log is not None:
            log(state.history[-1])
        if checkpoint_dir is not None and (state.epoch % every == 0 or state.epoch == config.epochs):
            save_checkpoint(state, f"{checkpoint_dir}/ckpt_epoch{state.epoch:04d}.n2nckpt")
    return state


def translate_image(gen, image_u8, stochastic=False, seed=0):
    """Translate one uint8 slice through the generator: normalize, forward,
    denormalize back to [0,255]."""
    out = nets.generator_forward(gen, volio.normalize(image_u8), stochastic=stochastic, seed=seed)
    return volio.denormalize(out)


def translate(checkpoint_or_state, images, stochastic=False, seed=0):
    """Translate a list of uint8 images; returns uint8 outputs 1:1."""
    if isinstance(checkpoint_or_state, TrainState):
        state = checkpoint_or_state
    else:
        state = load_checkpoint(checkpoint_or_state)
    return [
        translate_image(state.generator, img, stochastic=stochastic, seed=derive_seed(seed, i))
        for i, img in enumerate(images)
    ]


def _flatten_state_dict(prefix, sd, arrays):
    for key, value in sd.items():
        arrays[f"{prefix}.{key}"] = value.detach().cpu().numpy()


def _optimizer_arrays(prefix, opt, arrays):
    sd = opt.state_dict()
    meta = {"param_groups": sd["param_groups"], "state_keys": {}}
    for pid, slots in sd["state"].items():
        meta["state_keys"][str(pid)] = sorted(slots)
        for slot, value in slots.items():
            t = value if torch.is_tensor(value) else torch.tensor(value)
            arrays[f"{prefix}.state.{pid}.{slot}"] = t.detach().cpu().numpy()
    return meta


def save_checkpoint(state: TrainState, path):
    arrays = {}
    _flatten_state_dict("gen", state.generator.state_dict(), arrays)
    _flatten_state_dict("disc", state.discriminator.state_dict(), arrays)
    opt_meta = {
        "opt_g": _optimizer_arrays("opt_g", state.opt_g, arrays),
        "opt_d": _optimizer_arrays("opt_d", state.opt_d, arrays),
    }
    meta = {
        "kind": "translator",
        "config": asdict(state.config),
        "config_hash": state.config.hash(),
        "epoch": state.epoch,
        "step": state.step,
        "history": state.history,
        "optimizers": opt_meta,
    }
    write_array_file(path, meta, arrays)
    return path


def load_checkpoint(path, expect_config: TrainConfig = None) -> TrainState:
    meta, arrays = read_array_file(path)
    if meta.get("kind") != "translator":
        raise FormatError(f"{path}: not a translator checkpoint")
    config = TrainConfig(**meta["config"])
    if expect_config is not None and expect_config.hash() != meta["config_hash"]:
        raise ConfigError(
            "checkpoint config hash mismatch: "
            f"expected {expect_config.hash()[:12]}, found {meta['config_hash'][:12]}"
        )
    state = init_state(config)
    state.generator.load_state_dict(_unflatten(arrays, "gen"))
    state.discriminator.load_state_dict(_unflatten(arrays, "disc"))
    for name, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d)):
        opt.load_state_dict(_optimizer_state(meta["optimizers"][name], arrays, name))
    state.epoch = meta["epoch"]
    state.step = meta["step"]
    state.history = list(meta["history"])
    return state


def _unflatten(arrays, prefix):
    out = {}
    for key, value in arrays.items():
        if key.startswith(prefix + "."):
            out[key[len(prefix) + 1 :]] = torch.from_numpy(value.copy())
    return out


def _optimizer_state(meta, arrays, prefix):
    state = {}
    for pid, slots in meta["state_keys"].items():
        entry = {}
        for slot in slots:
            arr = arrays[f"{prefix}.state.{pid}.{slot}"]
            entry[slot] = torch.from_numpy(arr.copy())
        state[int(pid)] = entry
    return {"param_groups": meta["param_groups"], "state": state}


def write_array_file(path, meta, arrays):
    """Versioned binary container: magic, u32 version, u64 JSON length, JSON
    metadata with an array index, then raw little-endian array bytes."""
    index = []
    offset = 0
    payload = []
    for name in sorted(arrays):
        shape = list(np.shape(arrays[name]))  # before ascontiguousarray 1-d promotion
        arr = np.ascontiguousarray(arrays[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = arr.tobytes()
        index.append(
            {"name": name, "dtype": arr.dtype.str, "shape": shape, "offset": offset}
        )
        payload.append(blob)
        offset += len(blob)
    meta = dict(meta, arrays=index)
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in payload:
            fh.write(chunk)


def read_array_file(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    version = struct.unpack_from("<I", raw, len(CHECKPOINT_MAGIC))[0]
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    json_len = struct.unpack_from("<Q", raw, len(CHECKPOINT_MAGIC) + 4)[0]
    head = len(CHECKPOINT_MAGIC) + 12
    meta = json.loads(raw[head : head + json_len])
    base = head + json_len
    arrays = {}
    for spec in meta.pop("arrays"):
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        start = base + spec["offset"]
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
        arrays[spec["name"]] = arr.reshape(spec["shape"])
    return meta, arrays
