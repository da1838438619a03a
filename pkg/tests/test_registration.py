import math
import sys

import numpy as np
import pytest

from n2n import registration as reg
from n2n.errors import ContractError, FormatError
from n2n.registration import (
    AffineTransform,
    BuiltinAffineBackend,
    FusionCase,
    affine_to_field,
    estimate_affine,
    fuse_fields,
    landmark_dist,
    multi_atlas_combine,
    read_field,
    register,
    rotate_image,
    select_fusion_weight,
    warp,
    write_field,
)


def blob_image(seed, size=128, n=3):
    """Smooth multi-blob test image with a structured appearance."""
    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    img = np.zeros((size, size))
    for _ in range(n):
        cy, cx = rng.uniform(size * 0.25, size * 0.75, 2)
        ay, ax = rng.uniform(size * 0.08, size * 0.2, 2)
        level = rng.uniform(80, 220)
        img += level * np.exp(-(((ys - cy) / ay) ** 2 + ((xs - cx) / ax) ** 2))
    return np.clip(img, 0, 255)


def test_affine_to_field_identity():
    field = affine_to_field(AffineTransform.identity(), 8, 10)
    assert field.shape == (8, 10, 2)
    assert np.all(field == 0)


def test_affine_to_field_translation():
    t = AffineTransform(np.eye(2), np.array([3.0, 0.0]))
    field = affine_to_field(t, 6, 6)
    assert np.allclose(field[:, :, 0], 3.0)
    assert np.allclose(field[:, :, 1], 0.0)


def test_affine_to_field_rotation_fixes_center():
    field = affine_to_field(AffineTransform.rotation(math.pi / 2), 33, 33)
    assert np.allclose(field[16, 16], 0.0, atol=1e-12)
    assert not np.allclose(field[0, 0], 0.0)


def test_affine_inverse():
    t = AffineTransform.from_params(0.3, 0.1, 0.05, 2.0, -1.5)
    center = np.array([10.0, 12.0])
    p = np.array([4.0, 7.0])
    q = t.apply(p, center)
    back = t.inverse().apply(q, center)
    assert np.allclose(back, p, atol=1e-12)


def test_warp_zero_field_identity(rng):
    img = rng.uniform(0, 255, (32, 32))
    zero = np.zeros((32, 32, 2), dtype=np.float32)
    assert np.array_equal(warp(img, zero, "bilinear"), img)
    labels = rng.integers(0, 4, (32, 32))
    assert np.array_equal(warp(labels, zero, "nearest"), labels)


def test_warp_constant_shift(rng):
    img = rng.uniform(0, 255, (32, 32))
    field = np.zeros((32, 32, 2), dtype=np.float32)
    field[:, :, 0] = 5.0
    out = warp(img, field, "bilinear")
    assert np.allclose(out[:-5], img[5:])
    assert np.all(out[-5:] == 0)  # out-of-bounds reads background


def test_warp_labels_class_subset(rng):
    labels = rng.integers(0, 4, (32, 32))
    t = AffineTransform.from_params(0.4, 0.05, 0.0, 1.5, -2.0)
    out = warp(labels, affine_to_field(t, 32, 32), "nearest")
    assert set(np.unique(out)) <= set(np.unique(labels)) | {0}
    assert out.dtype == labels.dtype


def test_fuse_fields_examples(rng):
    a = np.full((4, 4, 2), (2.0, 0.0), dtype=np.float32)
    b = np.full((4, 4, 2), (0.0, 2.0), dtype=np.float32)
    assert np.array_equal(fuse_fields(a, b, 1.0), a)
    assert np.array_equal(fuse_fields(a, b, 0.0), b)
    mid = fuse_fields(a, b, 0.5)
    assert np.allclose(mid, 1.0)
    # linearity
    w = 0.3
    d1 = rng.normal(size=(4, 4, 2)).astype(np.float32)
    d2 = rng.normal(size=(4, 4, 2)).astype(np.float32)
    assert np.allclose(fuse_fields(d1, d2, w), w * d1 + (1 - w) * d2, atol=1e-7)
    with pytest.raises(ContractError):
        fuse_fields(a, b, 1.5)


def test_multi_atlas_combine():
    lab1 = np.zeros((4, 4), dtype=int)
    assert np.array_equal(multi_atlas_combine([lab1], 4), lab1)
    lab2 = np.full((4, 4), 2, dtype=int)
    assert np.array_equal(multi_atlas_combine([lab2, lab2, lab2], 4), lab2)
    lab3 = np.full((4, 4), 3, dtype=int)
    out = multi_atlas_combine([lab2, lab2, lab3], 4)
    assert np.all(out == 2)  # 2-vs-1 majority
    # tie between classes 1 and 2 resolves to the lowest id
    one = np.ones((2, 2), dtype=int)
    two = np.full((2, 2), 2, dtype=int)
    assert np.all(multi_atlas_combine([one, two], 4) == 1)


def test_landmark_dist_identity_and_shift():
    zero = np.zeros((64, 64, 2), dtype=np.float32)
    lms = [("L1", 10.0, 20.0, 3.0), ("L2", 40.0, 30.0, 8.0)]
    assert landmark_dist(zero, lms, lms, depth=16) == 0.0
    shifted = [(n, x + 3.0, y + 4.0, z) for n, x, y, z in lms]
    assert math.isclose(landmark_dist(zero, lms, shifted, depth=16), 5.0, abs_tol=1e-12)


def test_landmark_dist_missing_name():
    zero = np.zeros((8, 8, 2), dtype=np.float32)
    with pytest.raises(ContractError, match="L2"):
        landmark_dist(zero, [("L1", 1, 1, 1)], [("L2", 1, 1, 1)], depth=4)


def test_landmark_dist_through_known_affine():
    # moving landmarks at T(q); mapping through the field must recover q
    t = AffineTransform.from_params(math.radians(25), 0.02, 0.0, 1.0, -2.0)
    field = affine_to_field(t, 64, 64)
    center = reg.image_center(64, 64)
    fixed = [("L1", 20.0, 30.0, 2.0), ("L2", 44.0, 22.0, 5.0)]
    moving = []
    for name, x, y, z in fixed:
        my, mx = t.apply(np.array([y, x]), center)
        moving.append((name, float(mx), float(my), z))
    d = landmark_dist(field, fixed, moving, depth=8)
    assert d < 1e-4


def test_field_file_roundtrip(tmp_path, rng):
    field = rng.normal(size=(32, 48, 2)).astype(np.float32)
    path = tmp_path / "f.fld"
    write_field(path, field)
    raw = path.read_bytes()
    assert raw[:7] == b"N2NFLD1"
    assert len(raw) == 7 + 8 + 32 * 48 * 2 * 4
    back = read_field(path)
    assert np.array_equal(back, field)
    with pytest.raises(FormatError):
        path2 = tmp_path / "bad.fld"
        path2.write_bytes(b"NOTFLD!" + raw[7:])
        read_field(path2)


def test_register_self_is_near_identity():
    img = blob_image(1)
    result = register(img, img)
    mean_disp = np.linalg.norm(result.field, axis=-1).mean()
    assert mean_disp < 0.5
    assert result.converged


def test_register_recovers_30_degree_rotation():
    img = blob_image(2)
    fixed = rotate_image(img, 30.0)
    result = register(fixed, img)
    recovered = -result.rotation_degrees()
    assert abs(recovered - 30.0) < 1.0
    # landmarks planted on the moving image must land near their rotated spots
    center = reg.image_center(128, 128)
    pts = np.array([[40.0, 40.0], [64.0, 80.0], [90.0, 60.0]])
    errors = []
    for py, px in pts:
        fy, fx = reg.rotate_points_yx(np.array([py, px]), 30.0, center)
        wy, wx = reg.invert_field_at_point(result.field, py, px)
        errors.append(math.hypot(wy - fy, wx - fx))
    assert np.mean(errors) < 1.5


def test_register_planted_affine_self_consistency():
    # mean displacement error < 1 px over seeded mild transforms at 128x128;
    # warping the fixed image with T's field means registration must return
    # the pull-back field of T's inverse
    img = blob_image(3)
    h = w = 128
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    interior = (ys > 20) & (ys < 108) & (xs > 20) & (xs < 108)
    rng = np.random.default_rng(0)
    errors = []
    for _ in range(20):
        t = AffineTransform.from_params(
            rng.uniform(-0.3, 0.3),
            rng.uniform(-0.08, 0.08),
            rng.uniform(-0.08, 0.08),
            rng.uniform(-4, 4),
            rng.uniform(-4, 4),
        )
        moved = warp(img, affine_to_field(t, h, w))
        expected = affine_to_field(t.inverse(), h, w)
        result = register(img, moved)
        err = np.linalg.norm((result.field - expected)[interior], axis=-1).mean()
        errors.append(err)
    assert np.mean(errors) < 1.0


def test_register_cross_modality_mi_reduces_landmark_error():
    from n2n import phantom

    sub_f = phantom.generate_phantom_subject(seed=31, size=(16, 64, 64))
    sub_m = phantom.generate_phantom_subject(seed=32, size=(16, 64, 64))
    z = 8
    fixed = sub_f.vol_a.data[z].astype(np.float64)
    # displace the moving subject so there is real misalignment to recover
    shift = (5, -7)
    moving = np.roll(sub_m.vol_b.data[z].astype(np.float64), shift, axis=(0, 1))
    result = register(fixed, moving, BuiltinAffineBackend(cost="mi"))
    # in-plane landmarks at the interior-structure plane
    fixed_pts = [(n, x, y) for n, x, y, zz in sub_f.landmarks if n in ("L1", "L2", "L3", "L4", "L5")]
    moving_pts = {n: (x + shift[1], y + shift[0]) for n, x, y, zz in sub_m.landmarks}
    before, after = [], []
    for name, fx_, fy_ in fixed_pts:
        mx_, my_ = moving_pts[name]
        before.append(math.hypot(mx_ - fx_, my_ - fy_))
        wy, wx = reg.invert_field_at_point(result.field, my_, mx_)
        after.append(math.hypot(wx - fx_, wy - fy_))
    assert np.mean(after) < np.mean(before)


def test_register_shape_mismatch():
    with pytest.raises(ContractError):
        register(np.zeros((8, 8)), np.zeros((8, 9)))


def test_select_fusion_weight_boundary_and_tie():
    h = w = 32
    labels = np.zeros((h, w), dtype=int)
    labels[10:22, 10:22] = 1
    good = np.zeros((h, w, 2), dtype=np.float32)
    bad = np.full((h, w, 2), 6.0, dtype=np.float32)
    # translated field alone is perfect -> w* = 1
    fold = [[FusionCase(good, bad, labels, labels)]]
    assert select_fusion_weight(fold, grid_step=0.05) == 1.0
    # symmetric case: both fields identical -> tie resolves to the larger w
    fold = [[FusionCase(good, good.copy(), labels, labels)]]
    assert select_fusion_weight(fold, grid_step=0.05) == 1.0


def test_select_fusion_weight_recovers_planted_optimum():
    # two constant fields straddling the truth so that w*d1 + (1-w)*d2 hits
    # the exact alignment at w = 0.7; off-optimum weights drift by 30 px per
    # unit of w, making the Dice profile sharply unimodal
    h = w = 48
    labels = np.zeros((h, w), dtype=int)
    labels[16:32, 12:28] = 1
    s = np.array([4.0, -2.0])
    v = np.array([30.0, 30.0])
    d1 = np.zeros((h, w, 2), dtype=np.float32)
    d2 = np.zeros((h, w, 2), dtype=np.float32)
    d1[:, :] = s + 0.3 * v
    d2[:, :] = s - 0.7 * v
    fused_at = lambda wt: wt * d1[0, 0] + (1 - wt) * d2[0, 0]
    assert np.allclose(fused_at(0.7), s)
    # moving labels are the fixed labels displaced so that warping by s
    # realigns them: moving[p] = labels[p - s]
    minus_s = np.zeros((h, w, 2), dtype=np.float32)
    minus_s[:, :] = -s
    moving = warp(labels, minus_s, interp="nearest")
    folds = [[FusionCase(d1, d2, moving, labels)]]
    w_star = select_fusion_weight(folds, grid_step=0.01)
    assert abs(w_star - 0.70) <= 0.05


def test_external_backend_contract(tmp_path):
    # a stub backend that reads both PNGs and emits a constant (1.5, -2) field
    stub = tmp_path / "stub_backend.py"
    stub.write_text(
        "import sys, struct\n"
        "from PIL import Image\n"
        "import numpy as np\n"
        "fixed, moving, out = sys.argv[1:4]\n"
        "h, w = np.asarray(Image.open(fixed)).shape\n"
        "field = np.zeros((h, w, 2), dtype='<f4')\n"
        "field[:, :, 0] = 1.5\n"
        "field[:, :, 1] = -2.0\n"
        "with open(out, 'wb') as fh:\n"
        "    fh.write(b'N2NFLD1')\n"
        "    fh.write(struct.pack('<II', h, w))\n"
        "    fh.write(field.tobytes())\n"
    )
    img = blob_image(4, size=32)
    result = register(img, img, {"name": "external", "command": [sys.executable, str(stub)]})
    assert result.field.shape == (32, 32, 2)
    assert np.allclose(result.field[:, :, 0], 1.5)
    assert np.allclose(result.field[:, :, 1], -2.0)
    assert result.transform is None


def test_external_backend_failure(tmp_path):
    stub = tmp_path / "bad_backend.py"
    stub.write_text("import sys; sys.exit(3)\n")
    img = blob_image(5, size=32)
    with pytest.raises(FormatError, match="exit 3"):
        register(img, img, {"name": "external", "command": [sys.executable, str(stub)]})


def test_estimate_affine_from_field():
    t = AffineTransform.from_params(0.5, 0.05, 0.02, 3.0, -1.0)
    fitted = estimate_affine(affine_to_field(t, 64, 64))
    assert np.allclose(fitted.linear, t.linear, atol=1e-9)
    assert np.allclose(fitted.translation, t.translation, atol=1e-9)


def test_register_many_matches_serial():
    imgs = [blob_image(s, size=64) for s in range(4)]
    jobs = [(imgs[0], imgs[1]), (imgs[2], imgs[3])]
    serial = [register(f, m) for f, m in jobs]
    parallel = reg.register_many(jobs)
    for a, b in zip(serial, parallel):
        assert np.array_equal(a.field, b.field)
