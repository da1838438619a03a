import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from n2n import volio
from n2n.cli import SUBPARSERS, build_parser, dispatch

HELP_DIR = Path(__file__).parent / "data" / "cli_help"


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tree_hashes(root, suffixes=(".json", ".csv", ".fld", ".n2nckpt", ".png", ".nii")):
    out = {}
    for path in sorted(Path(root).rglob("*")):
        if path.is_file() and path.suffix in suffixes and path.suffix != ".png" or (
            path.is_file() and path.suffix == ".png" and "figures" not in path.parts
        ):
            out[str(path.relative_to(root))] = sha(path)
    return out


def test_unknown_subcommand_exits_1(capsys):
    assert dispatch(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_no_subcommand_exits_1(capsys):
    assert dispatch([]) == 1


def test_unknown_flag_exits_1(capsys):
    assert dispatch(["phantom", "--bogus", "1"]) == 1
    err = capsys.readouterr().err
    assert "usage" in err


def test_missing_required_flag_exits_1_with_usage(capsys):
    assert dispatch(["eval", "--real", "/tmp/nowhere"]) == 1
    err = capsys.readouterr().err
    assert "--out" in err or "--fake" in err
    assert "usage: n2n eval" in err


def test_data_error_exits_2(tmp_path, capsys):
    assert (
        dispatch(
            ["slice", "--manifest", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]
        )
        == 2
    )


def test_bad_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"subjcts": 4}))
    assert dispatch(["phantom", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_config_file_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"subjects": 3, "seed": 9, "size": "16,64,64"}))
    out = tmp_path / "corpus"
    assert dispatch(["phantom", "--config", str(cfg), "--out", str(out), "--subjects", "4"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["subjects"]) == 4  # flag overrode the config file
    snapshot = json.loads((out / "effective_config.json").read_text())
    assert snapshot["seed"] == 9  # config file filled the unset flag
    assert snapshot["subjects"] == 4


def test_phantom_byte_identical_reruns(tmp_path):
    args = ["phantom", "--subjects", "3", "--seed", "5", "--size", "16,64,64"]
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert dispatch(args + ["--out", str(out1)]) == 0
    assert dispatch(args + ["--out", str(out2)]) == 0
    h1 = {k: v for k, v in tree_hashes(out1).items() if k != "effective_config.json"}
    h2 = {k: v for k, v in tree_hashes(out2).items() if k != "effective_config.json"}
    assert h1 == h2 and h1


def test_register_and_fuse_byte_identical(tmp_path, tiny_slices):
    fixed = tiny_slices.resolve(tiny_slices.subject("s000")["modalities"]["A"][8])
    moving = tiny_slices.resolve(tiny_slices.subject("s001")["modalities"]["A"][8])
    outs = []
    for tag in ("r1", "r2"):
        out = tmp_path / tag
        assert dispatch(["register", "--fixed", fixed, "--moving", moving,
                         "--out", str(out), "--seed", "1"]) == 0
        outs.append(out)
    assert sha(outs[0] / "field.fld") == sha(outs[1] / "field.fld")
    assert sha(outs[0] / "registration.json") == sha(outs[1] / "registration.json")

    fout1, fout2 = tmp_path / "f1", tmp_path / "f2"
    for fout in (fout1, fout2):
        assert dispatch(["fuse", "--field1", str(outs[0] / "field.fld"),
                         "--field2", str(outs[1] / "field.fld"),
                         "--weight", "0.25", "--out", str(fout)]) == 0
    assert sha(fout1 / "fused.fld") == sha(fout2 / "fused.fld")


def test_eval_report_blocks(tmp_path, tiny_slices):
    real_dir = tmp_path / "real"
    fake_dir = tmp_path / "fake"
    real_dir.mkdir()
    fake_dir.mkdir()
    rng = np.random.default_rng(0)
    for i in range(3):
        volio.write_png(real_dir / f"img_{i:04d}.png",
                        rng.integers(0, 256, (64, 64), dtype=np.uint8))
        volio.write_png(fake_dir / f"img_{i:04d}.png",
                        rng.integers(0, 256, (64, 64), dtype=np.uint8))
    out = tmp_path / "report"
    assert dispatch(["eval", "--real", str(real_dir), "--fake", str(fake_dir),
                     "--out", str(out), "--metrics", "mae,psnr,mi,ssim"]) == 0
    payload = json.loads((out / "report.json").read_text())
    assert set(payload) == {"mae", "psnr", "mi", "ssim"}
    assert (out / "report.csv").exists()
    assert (out / "report.png").exists()
    # identical rerun produces identical report bytes
    out2 = tmp_path / "report2"
    assert dispatch(["eval", "--real", str(real_dir), "--fake", str(fake_dir),
                     "--out", str(out2), "--metrics", "mae,psnr,mi,ssim"]) == 0
    assert sha(out / "report.json") == sha(out2 / "report.json")
    assert sha(out / "report.csv") == sha(out2 / "report.csv")


def test_effective_config_written(tmp_path):
    out = tmp_path / "corpus"
    assert dispatch(["phantom", "--subjects", "3", "--seed", "1", "--out", str(out)]) == 0
    snapshot = json.loads((out / "effective_config.json").read_text())
    assert snapshot["subjects"] == 3
    assert snapshot["tumor_prob"] == 1.0


def test_help_lists_every_flag_golden(capsys):
    build_parser()
    assert sorted(SUBPARSERS) == sorted(p.stem for p in HELP_DIR.glob("*.txt"))
    for name, sub in SUBPARSERS.items():
        golden = (HELP_DIR / f"{name}.txt").read_text()
        assert sub.format_help() == golden, f"help text for {name!r} drifted"
        for action in sub._actions:
            for opt in action.option_strings:
                assert opt in golden, f"{name}: {opt} missing from golden help"
