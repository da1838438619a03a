"""Command-line interface: one executable for the full pipeline.

Subcommands: phantom, slice, train, translate, eval, seg-train, seg-eval,
fcn-score, register, fuse, harness.

Flag values may also come from a JSON config file (--config); explicit
flags override file values. Every run writes an effective-config snapshot
next to its outputs, all randomness funnels through --seed, and the
N2N_THREADS environment variable caps worker parallelism.

Exit codes: 0 success, 1 usage error, 2 data/contract error.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import metrics as metrics_mod
from . import reporting, runtime, volio
from .errors import ConfigError, N2NError
from .phantom import DatasetManifest, generate_corpus, slice_corpus
from .runtime import derive_seed

PROG = "n2n"


class UsageError(Exception):
    def __init__(self, message, usage):
        super().__init__(message)
        self.usage = usage


class MissingOptionError(Exception):
    """A required option was supplied neither on the CLI nor in the config."""


class Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting with its default code 2."""

    def error(self, message):
        raise UsageError(message, self.format_usage())


SUBPARSERS = {}


def _add_common(parser):
    parser.add_argument("--config", metavar="PATH", help="JSON config file; flags override it")
    parser.add_argument("--seed", type=int, default=None, help="run seed (default 0)")
    parser.add_argument("--out", metavar="DIR", required=False, help="output directory")


def build_parser():
    SUBPARSERS.clear()
    parser = Parser(prog=PROG, description="cross-modality translation toolkit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("phantom", parents=[], help="generate a synthetic corpus", add_help=True)
    _add_common(p)
    p.add_argument("--subjects", type=int, default=None, help="number of subjects (default 10)")
    p.add_argument("--size", default=None, help="volume size D,H,W (default 16,64,64)")
    p.add_argument("--tumor-prob", type=float, default=None, dest="tumor_prob",
                   help="per-subject tumor probability (default 1.0)")

    p = sub.add_parser("slice", help="slice corpus volumes into training PNGs")
    _add_common(p)
    p.add_argument("--manifest", metavar="PATH", help="corpus manifest")
    p.add_argument("--slice-size", type=int, default=None, dest="slice_size",
                   help="output slice resolution (default 256)")

    p = sub.add_parser("train", help="train the translator")
    _add_common(p)
    p.add_argument("--manifest", metavar="PATH", help="sliced-corpus manifest")
    p.add_argument("--loss", choices=["l1", "cgan", "cgan+l1"], default=None,
                   help="loss mode (default cgan+l1)")
    p.add_argument("--lambda", type=float, default=None, dest="lambda_l1",
                   help="pixel-loss weight (default 100)")
    p.add_argument("--epochs", type=int, default=None, help="training epochs (default 400)")
    p.add_argument("--width-mult", type=float, default=None, dest="width_mult",
                   help="filter width multiplier (default 1.0)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default 2e-4)")
    p.add_argument("--beta1", type=float, default=None, help="Adam beta1 (default 0.5)")
    p.add_argument("--direction", choices=["a2b", "b2a"], default=None,
                   help="translation direction (default a2b)")
    p.add_argument("--resume", metavar="CKPT", default=None, help="checkpoint to resume from")
    p.add_argument("--saturating", action="store_const", const=True, default=None,
                   help="use the saturating adversarial term")

    p = sub.add_parser("translate", help="translate images through a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", metavar="CKPT", help="translator checkpoint")
    p.add_argument("--manifest", metavar="PATH", default=None, help="sliced-corpus manifest")
    p.add_argument("--split", default=None, help="manifest split to translate (default test)")
    p.add_argument("--images", metavar="DIR", default=None,
                   help="translate all PNGs in a directory instead of a manifest split")
    p.add_argument("--stochastic", action="store_const", const=True, default=None,
                   help="keep dropout active as the noise source")

    p = sub.add_parser("eval", help="image quality metrics between two slice sets")
    _add_common(p)
    p.add_argument("--real", metavar="DIR", help="reference images")
    p.add_argument("--fake", metavar="DIR", help="candidate images")
    p.add_argument("--metrics", default=None, help="comma list from mae,psnr,mi,ssim (default all)")

    p = sub.add_parser("seg-train", help="train the multichannel segmenter")
    _add_common(p)
    p.add_argument("--manifest", metavar="PATH", help="sliced-corpus manifest")
    p.add_argument("--split", default=None, help="training split (default partB)")
    p.add_argument("--channels", default=None, help="channel spec, e.g. g,g,t (default g,g,t)")
    p.add_argument("--translated", metavar="DIR", default=None,
                   help="directory of translated slices (required when channels use t)")
    p.add_argument("--classes", type=int, default=None, help="number of classes (default 4)")
    p.add_argument("--epochs", type=int, default=None, help="training epochs (default 20)")
    p.add_argument("--width-mult", type=float, default=None, dest="width_mult",
                   help="filter width multiplier (default 1.0)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default 1e-4)")
    p.add_argument("--given", default=None, help="given modality key (default A)")

    p = sub.add_parser("seg-eval", help="evaluate a segmenter on a manifest split")
    _add_common(p)
    p.add_argument("--checkpoint", metavar="CKPT", help="segmenter checkpoint")
    p.add_argument("--manifest", metavar="PATH", help="sliced-corpus manifest")
    p.add_argument("--split", default=None, help="evaluation split (default test)")
    p.add_argument("--channels", default=None, help="channel spec override (default: checkpoint's)")
    p.add_argument("--translated", metavar="DIR", default=None,
                   help="directory of translated slices for t channels")

    p = sub.add_parser("fcn-score", help="score synthesized images through a segmenter")
    _add_common(p)
    p.add_argument("--checkpoint", metavar="CKPT", help="segmenter trained on real images")
    p.add_argument("--fake", metavar="DIR", help="synthesized slices")
    p.add_argument("--real", metavar="DIR", default=None,
                   help="real target-modality slices (or use --manifest/--split)")
    p.add_argument("--labels", metavar="DIR", default=None,
                   help="ground-truth label slices (or use --manifest/--split)")
    p.add_argument("--manifest", metavar="PATH", default=None,
                   help="sliced-corpus manifest supplying real slices and labels")
    p.add_argument("--split", default=None, help="manifest split to score (default test)")

    p = sub.add_parser("register", help="register a moving image to a fixed image")
    _add_common(p)
    p.add_argument("--fixed", metavar="PNG", help="fixed image")
    p.add_argument("--moving", metavar="PNG", help="moving image")
    p.add_argument("--cost", choices=["ncc", "mi"], default=None,
                   help="similarity: ncc for same-modality, mi for cross-modality (default ncc)")
    p.add_argument("--backend", default=None,
                   help="builtin-affine (default) or an external command")

    p = sub.add_parser("fuse", help="fuse two deformation fields")
    _add_common(p)
    p.add_argument("--field1", metavar="FLD", help="translated-modality registration field")
    p.add_argument("--field2", metavar="FLD", help="given-modality registration field")
    p.add_argument("--weight", type=float, default=None, help="weight on field1 (default 0.5)")

    p = sub.add_parser("harness", help="known-rotation registration experiment")
    _add_common(p)
    p.add_argument("--manifest", metavar="PATH", help="corpus manifest (volumes)")
    p.add_argument("--angle", type=float, default=None, help="rotation in degrees (default 30)")
    p.add_argument("--subjects", default=None, help="comma list of subject ids (default: first 3)")
    p.add_argument("--checkpoint", metavar="CKPT", default=None,
                   help="translator checkpoint for the translated channel")
    p.add_argument("--stride", type=int, default=None, help="slice stride (default 8)")
    p.add_argument("--grid-step", type=float, default=None, dest="grid_step",
                   help="fusion weight grid step (default 0.01)")
    p.add_argument("--backend", default=None, help="registration backend")

    for name, action in sub.choices.items():
        SUBPARSERS[name] = action
    return parser


DEFAULTS = {
    "phantom": {"seed": 0, "subjects": 10, "size": "16,64,64", "tumor_prob": 1.0},
    "slice": {"seed": 0, "slice_size": 256},
    "train": {
        "seed": 0, "loss": "cgan+l1", "lambda_l1": 100.0, "epochs": 400,
        "width_mult": 1.0, "lr": 2e-4, "beta1": 0.5, "direction": "a2b",
        "resume": None, "saturating": False,
    },
    "translate": {"seed": 0, "split": "test", "manifest": None, "images": None,
                  "stochastic": False},
    "eval": {"seed": 0, "metrics": "mae,psnr,mi,ssim"},
    "seg-train": {"seed": 0, "split": "partB", "channels": "g,g,t", "translated": None,
                  "classes": 4, "epochs": 20, "width_mult": 1.0, "lr": 1e-4, "given": "A"},
    "seg-eval": {"seed": 0, "split": "test", "channels": None, "translated": None},
    "fcn-score": {"seed": 0, "real": None, "labels": None, "manifest": None, "split": "test"},
    "register": {"seed": 0, "cost": "ncc", "backend": "builtin-affine"},
    "fuse": {"seed": 0, "weight": 0.5},
    "harness": {"seed": 0, "angle": 30.0, "subjects": None, "checkpoint": None,
                "stride": 8, "grid_step": 0.01, "backend": None},
}


def resolve_options(args):
    """defaults < config file < explicit flags."""
    options = dict(DEFAULTS[args.command])
    options["out"] = None
    for key in ("manifest", "checkpoint", "real", "fake", "labels", "fixed", "moving",
                "field1", "field2"):
        options.setdefault(key, None)
    if args.config:
        with open(args.config) as fh:
            try:
                file_values = json.load(fh)
            except json.JSONDecodeError as err:
                raise ConfigError(f"config file {args.config}: {err}") from err
        unknown = set(file_values) - set(options)
        if unknown:
            raise ConfigError(
                f"unknown config keys {sorted(unknown)}; known: {sorted(options)}"
            )
        options.update(file_values)
    for key, value in vars(args).items():
        if key in ("command", "config"):
            continue
        if value is not None:
            options[key] = value
    return options


def require(options, *keys):
    missing = [k for k in keys if not options.get(k)]
    if missing:
        raise MissingOptionError(
            "missing required option(s): " + ", ".join("--" + m for m in missing)
        )


def prepare_out(options):
    require(options, "out")
    out = Path(options["out"])
    out.mkdir(parents=True, exist_ok=True)
    snapshot = {k: v for k, v in sorted(options.items())}
    reporting.save_json(out / "effective_config.json", snapshot)
    return out


def _sorted_pngs(directory):
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise ConfigError(f"no PNG files under {directory}")
    return paths


def cmd_phantom(options):
    out = prepare_out(options)
    size = tuple(int(v) for v in str(options["size"]).split(","))
    if len(size) != 3:
        raise ConfigError(f"--size must be D,H,W, got {options['size']!r}")
    manifest = generate_corpus(
        seed=options["seed"],
        n_subjects=options["subjects"],
        size=size,
        out_dir=out,
        tumor_probability=options["tumor_prob"],
    )
    print(f"wrote {len(manifest.subjects)} subjects under {out}")
    return 0


def cmd_slice(options):
    require(options, "manifest")
    out = prepare_out(options)
    manifest = DatasetManifest.load(options["manifest"])
    sliced = slice_corpus(manifest, out, size=options["slice_size"])
    n = sum(len(e["modalities"]["A"]) for e in sliced.subjects)
    print(f"wrote {n} slice pairs under {out}")
    return 0


def cmd_train(options):
    from . import train as train_mod

    require(options, "manifest")
    out = prepare_out(options)
    direction = options["direction"]
    source, target = ("A", "B") if direction == "a2b" else ("B", "A")
    config = train_mod.TrainConfig(
        loss_mode=options["loss"],
        lambda_l1=options["lambda_l1"],
        learning_rate=options["lr"],
        adam_beta1=options["beta1"],
        epochs=options["epochs"],
        seed=options["seed"],
        width_multiplier=options["width_mult"],
        source=source,
        target=target,
        saturating_adversarial=bool(options["saturating"]),
        manifest=str(options["manifest"]),
        checkpoint_dir=str(out),
    )
    manifest = DatasetManifest.load(options["manifest"])
    state = train_mod.train(
        config,
        manifest,
        resume=options["resume"],
        checkpoint_dir=str(out),
        log=lambda entry: print(
            f"epoch {entry['epoch']:4d} "
            + " ".join(f"{k}={v:.4f}" for k, v in entry.items() if k != "epoch")
        ),
    )
    final = out / "final.n2nckpt"
    train_mod.save_checkpoint(state, final)
    reporting.render_loss_history(state.history, out)
    print(f"checkpoint: {final}")
    return 0


def cmd_translate(options):
    from . import train as train_mod

    require(options, "checkpoint")
    out = prepare_out(options)
    state = train_mod.load_checkpoint(options["checkpoint"])
    tag = state.config.target + "hat"
    inputs, names, targets, target_names = [], [], [], []
    if options["images"]:
        for path in _sorted_pngs(options["images"]):
            inputs.append(volio.read_png(path))
            names.append(path.name)
    else:
        require(options, "manifest")
        manifest = DatasetManifest.load(options["manifest"])
        for sid in manifest.split_ids(options["split"]):
            entry = manifest.subject(sid)
            src = entry["modalities"][state.config.source]
            if not isinstance(src, list):
                raise ConfigError("manifest holds volumes; run the slicing step first")
            for k, rel in enumerate(src):
                inputs.append(volio.read_png(manifest.resolve(rel)))
                names.append(volio.slice_filename(sid, tag, k))
            for k, rel in enumerate(entry["modalities"][state.config.target]):
                targets.append(volio.read_png(manifest.resolve(rel)))
                target_names.append(volio.slice_filename(sid, state.config.target, k))
    outputs = train_mod.translate(
        state, inputs, stochastic=bool(options["stochastic"]), seed=options["seed"]
    )
    for name, img in zip(names, outputs):
        volio.write_png(out / name, img)
    if targets:
        # the matching real target slices, so `n2n eval` can compare directly
        target_dir = out / "targets"
        target_dir.mkdir(exist_ok=True)
        for name, img in zip(target_names, targets):
            volio.write_png(target_dir / name, img)
    provenance = {
        "checkpoint": str(options["checkpoint"]),
        "config_hash": state.config.hash(),
        "seed": options["seed"],
        "stochastic": bool(options["stochastic"]),
        "outputs": names,
    }
    reporting.save_json(out / "translate_manifest.json", provenance)
    figure_dir = out / "figures"
    figure_dir.mkdir(exist_ok=True)
    reporting.render_translation_samples(inputs, outputs, targets, figure_dir)
    print(f"translated {len(outputs)} images into {out}")
    return 0


def cmd_eval(options):
    require(options, "real", "fake")
    out = prepare_out(options)
    names = [m.strip() for m in str(options["metrics"]).split(",") if m.strip()]
    real = [volio.read_png(p) for p in _sorted_pngs(options["real"])]
    fake = [volio.read_png(p) for p in _sorted_pngs(options["fake"])]
    report = metrics_mod.evaluate_pairs(real, fake, names=tuple(names))
    reporting.render_metric_report(report, out)
    for name, entry in report.summary().items():
        print(f"{name}: {metrics_mod.format_mean_std(entry['mean'], entry['std'])}")
    return 0


def cmd_seg_train(options):
    from . import tms as tms_mod

    require(options, "manifest")
    out = prepare_out(options)
    config = tms_mod.SegTrainConfig(
        learning_rate=options["lr"],
        epochs=options["epochs"],
        seed=options["seed"],
        width_multiplier=options["width_mult"],
        n_classes=options["classes"],
        channels=options["channels"],
        given=options["given"],
    )
    manifest = DatasetManifest.load(options["manifest"])
    history = []
    state = tms_mod.seg_train(
        config,
        manifest,
        split=options["split"],
        translated_dir=options["translated"],
        log=lambda entry: (history.append(entry),
                           print(f"epoch {entry['epoch']:4d} ce={entry['cross_entropy']:.4f}"))[0],
    )
    path = out / "seg.n2nckpt"
    tms_mod.save_seg_checkpoint(state, path)
    reporting.render_loss_history(history, out)
    print(f"checkpoint: {path}")
    return 0


def cmd_seg_eval(options):
    from . import tms as tms_mod

    require(options, "checkpoint", "manifest")
    out = prepare_out(options)
    state = tms_mod.load_seg_checkpoint(options["checkpoint"])
    channels = options["channels"] or state.config.channels
    manifest = DatasetManifest.load(options["manifest"])
    items = tms_mod.load_seg_dataset(
        manifest,
        options["split"],
        channels,
        given=state.config.given,
        translated_dir=options["translated"],
    )
    scores = tms_mod.segmentation_scores(
        state.model,
        [img for img, _ in items],
        [lab for _, lab in items],
        classes=list(range(state.config.n_classes)),
    )
    reporting.render_seg_scores(scores, out)
    print(f"accuracy_all: {scores['accuracy_all']:.4f}")
    for cls, val in sorted(scores["dice_per_class"].items()):
        print(f"dice[{cls}]: {val:.4f}")
    return 0


def cmd_fcn_score(options):
    from . import tms as tms_mod

    require(options, "checkpoint", "fake")
    out = prepare_out(options)
    state = tms_mod.load_seg_checkpoint(options["checkpoint"])

    def compose_plane(image_u8):
        plane = volio.normalize(image_u8)
        return tms_mod.compose_tms(plane, None, tms_mod.BASELINE_SPEC)

    if options["manifest"]:
        manifest = DatasetManifest.load(options["manifest"])
        real, labels = [], []
        for sid in manifest.split_ids(options["split"]):
            entry = manifest.subject(sid)
            for rel in entry["modalities"][state.config.given]:
                real.append(compose_plane(volio.read_png(manifest.resolve(rel))))
            for rel in entry["labels"]:
                labels.append(volio.read_png(manifest.resolve(rel)).astype(np.int64))
    else:
        require(options, "real", "labels")
        real = [compose_plane(volio.read_png(p)) for p in _sorted_pngs(options["real"])]
        labels = [volio.read_png(p).astype(np.int64) for p in _sorted_pngs(options["labels"])]
    fake = [compose_plane(volio.read_png(p)) for p in _sorted_pngs(options["fake"])]
    report = tms_mod.fcn_score(
        state.model,
        real,
        fake,
        labels,
        classes=list(range(state.config.n_classes)),
    )
    reporting.render_fcn_score(report, out)
    print(f"accuracy_all real={report['real']['accuracy_all']:.4f} "
          f"fake={report['fake']['accuracy_all']:.4f} gap={report['gap']['accuracy_all']:.4f}")
    return 0


def cmd_register(options):
    from . import registration as reg

    require(options, "fixed", "moving")
    out = prepare_out(options)
    fixed = volio.read_png(options["fixed"]).astype(np.float64)
    moving = volio.read_png(options["moving"]).astype(np.float64)
    backend = options["backend"]
    if backend in (None, "builtin-affine"):
        backend = reg.BuiltinAffineBackend(cost=options["cost"])
    result = reg.register(fixed, moving, backend)
    reg.write_field(out / "field.fld", result.field)
    payload = {
        "converged": bool(result.converged),
        "cost": result.cost,
        "rotation_degrees": result.rotation_degrees(),
    }
    if result.transform is not None:
        payload["linear"] = result.transform.linear.tolist()
        payload["translation"] = result.transform.translation.tolist()
    reporting.save_json(out / "registration.json", payload)
    print(f"field: {out / 'field.fld'} (converged={result.converged})")
    return 0


def cmd_fuse(options):
    from . import registration as reg

    require(options, "field1", "field2")
    out = prepare_out(options)
    fused = reg.fuse_fields(
        reg.read_field(options["field1"]),
        reg.read_field(options["field2"]),
        options["weight"],
    )
    reg.write_field(out / "fused.fld", fused)
    print(f"fused field: {out / 'fused.fld'} (w={options['weight']})")
    return 0


def cmd_harness(options):
    from . import harness as harness_mod

    require(options, "manifest")
    out = prepare_out(options)
    subjects = None
    if options["subjects"]:
        subjects = [s.strip() for s in str(options["subjects"]).split(",") if s.strip()]
    manifest = DatasetManifest.load(options["manifest"])
    report = harness_mod.known_transform_harness(
        manifest,
        angle_degrees=options["angle"],
        subjects=subjects,
        checkpoint=options["checkpoint"],
        slice_stride=options["stride"],
        grid_step=options["grid_step"],
        backend=options["backend"],
    )
    reporting.render_harness_report(report, out)
    print(f"w*={report['w_star']:.2f} rotation_error={report['rotation_error_degrees']:.3f} deg")
    for w, entry in sorted(report["weights"].items()):
        print(f"w={w}: dice={entry['dice_mean']:.4f} dist={entry['dist']:.4f}")
    return 0


HANDLERS = {
    "phantom": cmd_phantom,
    "slice": cmd_slice,
    "train": cmd_train,
    "translate": cmd_translate,
    "eval": cmd_eval,
    "seg-train": cmd_seg_train,
    "seg-eval": cmd_seg_eval,
    "fcn-score": cmd_fcn_score,
    "register": cmd_register,
    "fuse": cmd_fuse,
    "harness": cmd_harness,
}


def dispatch(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"{PROG}: error: {err}", file=sys.stderr)
        print(err.usage, file=sys.stderr, end="")
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        options = resolve_options(args)
        runtime.configure_torch_threads()
        torch.manual_seed(derive_seed(options.get("seed", 0), 0xC11))
        return HANDLERS[args.command](options)
    except MissingOptionError as err:
        print(f"{PROG} {args.command}: error: {err}", file=sys.stderr)
        print(SUBPARSERS[args.command].format_usage(), file=sys.stderr, end="")
        return 1
    except (N2NError, OSError) as err:
        print(f"{PROG}: error: {err}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
