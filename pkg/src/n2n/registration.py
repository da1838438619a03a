"""Registration backends, weighted deformation fusion, and evaluation.

Deformation fields follow the pull-back convention: for a fixed-image
coordinate p (row, col), the warped sample is ``moving[p + d(p)]``, so the
zero field is the identity warp. Fields are (H, W, 2) float32 arrays of
(dy, dx) displacements.

The builtin backend fits an affine transform (rotation, scale, shear,
translation about the image center) by three-level multiresolution
coordinate descent with step halving, minimizing negative normalized cross
correlation for same-modality pairs or negative 64-bin histogram mutual
information for cross-modality pairs. External tools plug in through a
subprocess contract: ``backend_cmd fixed.png moving.png out.fld``.

Registrations of distinct atlas pairs are independent; ``register_many``
runs them on a small thread pool capped by N2N_THREADS.
"""

import math
import struct
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from . import volio
from .errors import ContractError, FormatError
from .runtime import thread_count

FIELD_MAGIC = b"N2NFLD1"
MI_COST_BINS = 64
DEFAULT_LEVELS = 3
DEFAULT_MAX_ITER = 200
DEFAULT_TOL = 1e-6


@dataclass
class AffineTransform:
    """2x2 linear part + translation, acting on (y, x) pixel coordinates
    about the image center."""

    linear: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.linear = np.asarray(self.linear, dtype=np.float64).reshape(2, 2)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(2)
        if abs(np.linalg.det(self.linear)) <= 1e-8:
            raise ContractError("affine linear part is not invertible")

    @classmethod
    def identity(cls):
        return cls(np.eye(2), np.zeros(2))

    @classmethod
    def rotation(cls, radians):
        c, s = math.cos(radians), math.sin(radians)
        return cls(np.array([[c, -s], [s, c]]), np.zeros(2))

    @classmethod
    def from_params(cls, theta, log_scale, shear, ty, tx):
        c, s = math.cos(theta), math.sin(theta)
        rot = np.array([[c, -s], [s, c]])
        sh = np.array([[1.0, shear], [0.0, 1.0]])
        scale = math.exp(log_scale)
        return cls(rot @ sh * scale, np.array([ty, tx]))

    def apply(self, points_yx, center):
        pts = np.asarray(points_yx, dtype=np.float64).reshape(-1, 2)
        out = (pts - center) @ self.linear.T + center + self.translation
        return out.reshape(np.shape(points_yx))

    def inverse(self):
        inv = np.linalg.inv(self.linear)
        # T(p) = L(p-c)+c+t  =>  T^-1(q) = L^-1(q-c-t)+c = L^-1((q-c)) - L^-1 t + c
        return AffineTransform(inv, -inv @ self.translation)

    def rotation_angle(self):
        """Rotation component (radians) via polar decomposition."""
        l = self.linear
        return math.atan2(l[1, 0] - l[0, 1], l[0, 0] + l[1, 1])


def image_center(h, w):
    return np.array([(h - 1) / 2.0, (w - 1) / 2.0])


def affine_to_field(transform: AffineTransform, h, w):
    """Dense pull-back field d(p) = T(p) - p."""
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    pts = np.stack([ys, xs], axis=-1)
    mapped = transform.apply(pts.reshape(-1, 2), image_center(h, w)).reshape(h, w, 2)
    return (mapped - pts).astype(np.float32)


def _sample_bilinear(img, ys, xs):
    """Bilinear gather with out-of-bounds reads as 0."""
    h, w = img.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    out = np.zeros(ys.shape, dtype=np.float64)
    for dy, dx, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = np.zeros(ys.shape, dtype=np.float64)
        vals[valid] = img[yy[valid], xx[valid]]
        out += wgt * vals
    return out


def _sample_nearest(img, ys, xs):
    h, w = img.shape
    yy = np.floor(ys + 0.5).astype(np.int64)
    xx = np.floor(xs + 0.5).astype(np.int64)
    valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    out = np.zeros(ys.shape, dtype=img.dtype)
    out[valid] = img[yy[valid], xx[valid]]
    return out


def warp(image, field, interp="bilinear"):
    """Pull-back resampling of an image (or label map) through a field.

    Label maps should use nearest interpolation so class ids survive;
    samples falling outside the moving image read as 0/background.
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise ContractError(f"warp expects a 2D image, got {img.shape}")
    if field.shape != (img.shape[0], img.shape[1], 2):
        raise ContractError(f"field shape {field.shape} does not match image {img.shape}")
    ys, xs = np.meshgrid(
        np.arange(img.shape[0], dtype=np.float64),
        np.arange(img.shape[1], dtype=np.float64),
        indexing="ij",
    )
    sy = ys + field[:, :, 0]
    sx = xs + field[:, :, 1]
    if interp == "bilinear":
        return _sample_bilinear(img.astype(np.float64), sy, sx)
    if interp == "nearest":
        return _sample_nearest(img, sy, sx)
    raise ContractError(f"unknown interpolation {interp!r}")


def fuse_fields(d1, d2, w):
    """Pointwise convex combination w*d1 + (1-w)*d2 of two fields.

    d1 comes from the translated-modality registration, d2 from the
    given-modality registration.
    """
    if not 0.0 <= w <= 1.0:
        raise ContractError(f"fusion weight must be in [0,1], got {w}")
    if d1.shape != d2.shape:
        raise ContractError(f"field shapes differ: {d1.shape} vs {d2.shape}")
    if w == 1.0:
        return d1.copy()
    if w == 0.0:
        return d2.copy()
    return (w * d1.astype(np.float64) + (1.0 - w) * d2.astype(np.float64)).astype(np.float32)


def multi_atlas_combine(warped_labels, n_classes):
    """Average the one-hot encodings of n propagated label maps and take the
    per-pixel argmax; ties resolve to the lowest class id."""
    if not warped_labels:
        raise ContractError("no label maps to combine")
    shape = np.asarray(warped_labels[0]).shape
    votes = np.zeros(shape + (n_classes,), dtype=np.float64)
    for lab in warped_labels:
        lab = np.asarray(lab)
        if lab.shape != shape:
            raise ContractError("label maps must share one shape")
        for cls in range(n_classes):
            votes[:, :, cls] += lab == cls
    votes /= len(warped_labels)
    return np.argmax(votes, axis=-1).astype(np.int64)


def sample_field(field, y, x):
    """Bilinear field value at a continuous (y, x) position; clamped at the
    border so displacements extend smoothly."""
    h, w = field.shape[:2]
    yc = min(max(y, 0.0), h - 1.0)
    xc = min(max(x, 0.0), w - 1.0)
    y0, x0 = int(np.floor(yc)), int(np.floor(xc))
    y0 = min(y0, h - 2) if h > 1 else 0
    x0 = min(x0, w - 2) if w > 1 else 0
    fy, fx = yc - y0, xc - x0
    f00 = field[y0, x0]
    f01 = field[y0, min(x0 + 1, w - 1)]
    f10 = field[min(y0 + 1, h - 1), x0]
    f11 = field[min(y0 + 1, h - 1), min(x0 + 1, w - 1)]
    return (
        f00 * (1 - fy) * (1 - fx)
        + f01 * (1 - fy) * fx
        + f10 * fy * (1 - fx)
        + f11 * fy * fx
    )


def invert_field_at_point(field, qy, qx, iterations=80, tol=1e-9):
    """Find p with p + d(p) = q by fixed-point iteration (pull-back fields
    map fixed coordinates into moving space; landmark evaluation needs the
    inverse direction)."""
    py, px = qy, qx
    for _ in range(iterations):
        dy, dx = sample_field(field, py, px)
        ny, nx = qy - dy, qx - dx
        if abs(ny - py) < tol and abs(nx - px) < tol:
            return ny, nx
        py, px = ny, nx
    return py, px


def landmark_dist(fields, landmarks_fixed, landmarks_moving, depth):
    """Mean 3D Euclidean distance between fixed landmarks and moving
    landmarks mapped through the per-slice field (z unchanged).

    ``fields`` is a single (H, W, 2) field applied to every slice or a dict
    of z-index -> field; each landmark uses the field of its nearest mapped
    slice.
    """
    fixed = {name: (x, y, z) for name, x, y, z in landmarks_fixed}
    moving = {name: (x, y, z) for name, x, y, z in landmarks_moving}
    if set(fixed) != set(moving):
        raise ContractError(
            f"landmark names differ: fixed={sorted(fixed)} moving={sorted(moving)}"
        )
    if not fixed:
        raise ContractError("no landmarks to compare")
    dists = []
    for name in sorted(fixed):
        fx_, fy_, fz_ = fixed[name]
        mx_, my_, mz_ = moving[name]
        if not (0 <= mz_ <= depth - 1) or not (0 <= fz_ <= depth - 1):
            raise ContractError(f"landmark {name} z outside the stacked volume depth {depth}")
        field = _field_for_slice(fields, mz_)
        wy, wx = invert_field_at_point(field, my_, mx_)
        dists.append(math.sqrt((wx - fx_) ** 2 + (wy - fy_) ** 2 + (mz_ - fz_) ** 2))
    return float(np.mean(dists))


def _field_for_slice(fields, z):
    if isinstance(fields, dict):
        key = min(fields, key=lambda k: abs(k - z))
        return fields[key]
    return fields


def write_field(path, field):
    """Field file: magic, H, W (u32 little-endian), then H*W float32 (dy,dx)."""
    arr = np.ascontiguousarray(field, dtype="<f4")
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ContractError(f"expected an (H, W, 2) field, got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_field(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(FIELD_MAGIC)] != FIELD_MAGIC:
        raise FormatError(f"{path}: bad field magic")
    h, w = struct.unpack_from("<II", raw, len(FIELD_MAGIC))
    need = len(FIELD_MAGIC) + 8 + h * w * 2 * 4
    if len(raw) < need:
        raise FormatError(f"{path}: truncated field file")
    data = np.frombuffer(raw, dtype="<f4", count=h * w * 2, offset=len(FIELD_MAGIC) + 8)
    return data.reshape(h, w, 2).copy()


@dataclass
class RegistrationResult:
    field: np.ndarray
    transform: AffineTransform = None
    converged: bool = True
    cost: float = math.nan

    def rotation_degrees(self):
        if self.transform is not None:
            return math.degrees(self.transform.rotation_angle())
        return math.degrees(estimate_affine(self.field).rotation_angle())


def estimate_affine(field):
    """Least-squares affine fit to a dense field (for foreign backends)."""
    h, w = field.shape[:2]
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    center = image_center(h, w)
    p = np.stack([ys.ravel() - center[0], xs.ravel() - center[1]], axis=1)
    q = p + field.reshape(-1, 2)
    a = np.concatenate([p, np.ones((p.shape[0], 1))], axis=1)
    sol, *_ = np.linalg.lstsq(a, q, rcond=None)
    return AffineTransform(sol[:2].T, sol[2])


def _block_reduce(img, factor):
    h, w = img.shape
    hh, ww = h // factor * factor, w // factor * factor
    trimmed = img[:hh, :ww]
    return trimmed.reshape(hh // factor, factor, ww // factor, factor).mean(axis=(1, 3))


def _ncc_cost(fixed, warped):
    f = fixed - fixed.mean()
    m = warped - warped.mean()
    denom = math.sqrt(float((f * f).sum()) * float((m * m).sum()))
    if denom == 0.0:
        return 0.0
    return -float((f * m).sum()) / denom


def _mi_cost(fixed, warped, bins=MI_COST_BINS):
    lo_f, hi_f = float(fixed.min()), float(fixed.max())
    lo_w, hi_w = float(warped.min()), float(warped.max())
    if hi_f <= lo_f or hi_w <= lo_w:
        return 0.0
    hist, _, _ = np.histogram2d(
        fixed.ravel(), warped.ravel(), bins=bins, range=[[lo_f, hi_f], [lo_w, hi_w]]
    )
    p = hist / hist.sum()
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    mask = p > 0
    return -float(np.sum(p[mask] * np.log(p[mask] / (px @ py)[mask])))


def _warp_affine(moving, params, center):
    h, w = moving.shape
    transform = AffineTransform.from_params(*params)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    pts = np.stack([ys.ravel(), xs.ravel()], axis=1)
    mapped = transform.apply(pts, center)
    return _sample_bilinear(moving, mapped[:, 0].reshape(h, w), mapped[:, 1].reshape(h, w))


@dataclass
class BuiltinAffineBackend:
    """Derivative-free affine registration over (rotation, scale, shear,
    translation); ``cost`` is "ncc" for same-modality pairs or "mi" for
    cross-modality pairs."""

    cost: str = "ncc"
    levels: int = DEFAULT_LEVELS
    max_iter: int = DEFAULT_MAX_ITER
    tol: float = DEFAULT_TOL

    def cost_fn(self):
        if self.cost == "ncc":
            return _ncc_cost
        if self.cost == "mi":
            return _mi_cost
        raise ContractError(f"unknown cost {self.cost!r}; expected ncc or mi")


@dataclass
class ExternalBackend:
    """Subprocess contract: ``command fixed.png moving.png out.fld``."""

    command: list

    def __post_init__(self):
        if isinstance(self.command, str):
            self.command = [self.command]


def parse_backend(spec):
    if spec is None:
        return BuiltinAffineBackend()
    if isinstance(spec, (BuiltinAffineBackend, ExternalBackend)):
        return spec
    if isinstance(spec, dict):
        spec = dict(spec)
        name = spec.pop("name", "builtin-affine")
        if name == "builtin-affine":
            return BuiltinAffineBackend(**spec)
        if name == "external":
            return ExternalBackend(**spec)
        raise ContractError(f"unknown backend {name!r}")
    if isinstance(spec, str):
        if spec == "builtin-affine":
            return BuiltinAffineBackend()
        return ExternalBackend(spec.split())
    raise ContractError(f"cannot interpret backend spec {spec!r}")


def register(fixed, moving, backend=None) -> RegistrationResult:
    """Estimate the deformation aligning moving to fixed."""
    fixed = np.asarray(fixed, dtype=np.float64)
    moving = np.asarray(moving, dtype=np.float64)
    if fixed.shape != moving.shape:
        raise ContractError(f"image sizes differ: {fixed.shape} vs {moving.shape}")
    if fixed.ndim != 2:
        raise ContractError("registration operates on 2D images")
    backend = parse_backend(backend)
    if isinstance(backend, ExternalBackend):
        return _register_external(fixed, moving, backend)
    return _register_builtin(fixed, moving, backend)


def _register_external(fixed, moving, backend: ExternalBackend):
    with tempfile.TemporaryDirectory(prefix="n2nreg_") as tmp:
        tmp = Path(tmp)
        fpath, mpath, opath = tmp / "fixed.png", tmp / "moving.png", tmp / "out.fld"
        volio.write_png(fpath, np.clip(np.rint(fixed), 0, 255).astype(np.uint8))
        volio.write_png(mpath, np.clip(np.rint(moving), 0, 255).astype(np.uint8))
        proc = subprocess.run(
            backend.command + [str(fpath), str(mpath), str(opath)],
            capture_output=True,
            text=True,
        )
        if proc.returncode != 0:
            raise FormatError(
                f"external backend failed (exit {proc.returncode}): {proc.stderr.strip()}"
            )
        field = read_field(opath)
    if field.shape[:2] != fixed.shape:
        raise FormatError(
            f"external backend field shape {field.shape[:2]} does not match image {fixed.shape}"
        )
    return RegistrationResult(field=field, transform=None, converged=True)


_PARAM_STEPS = np.array([0.12, 0.05, 0.05, 2.0, 2.0])  # theta, log_scale, shear, ty, tx
_MIN_STEP_SCALE = 1e-3


def _register_builtin(fixed, moving, backend: BuiltinAffineBackend):
    cost_fn = backend.cost_fn()
    h, w = fixed.shape
    factors = [2 ** (backend.levels - 1 - i) for i in range(backend.levels)]
    params = np.zeros(5)
    converged = True
    best_cost = math.inf
    for level, factor in enumerate(factors):
        if factor > 1:
            fixed_l = _block_reduce(fixed, factor)
            moving_l = _block_reduce(moving, factor)
        else:
            fixed_l, moving_l = fixed, moving
        if level > 0:
            params[3] *= factors[level - 1] / factor
            params[4] *= factors[level - 1] / factor
        params, best_cost, level_ok = _coordinate_descent(
            fixed_l, moving_l, params, cost_fn, backend.max_iter, backend.tol
        )
        converged = converged and level_ok
    transform = AffineTransform.from_params(*params)
    return RegistrationResult(
        field=affine_to_field(transform, h, w),
        transform=transform,
        converged=converged,
        cost=best_cost,
    )


def _coordinate_descent(fixed, moving, params, cost_fn, max_iter, tol):
    center = image_center(*fixed.shape)
    params = params.copy()
    steps = _PARAM_STEPS.copy()
    best = cost_fn(fixed, _warp_affine(moving, params, center))
    for _ in range(max_iter):
        gain = 0.0
        for i in range(len(params)):
            for sign in (1.0, -1.0):
                candidate = params.copy()
                candidate[i] += sign * steps[i]
                cost = cost_fn(fixed, _warp_affine(moving, candidate, center))
                if cost < best - 1e-15:
                    gain += best - cost
                    best = cost
                    params = candidate
                    break
        if gain < tol:
            if np.all(steps < _PARAM_STEPS * _MIN_STEP_SCALE):
                return params, best, True
            steps *= 0.5
    return params, best, False


def register_many(jobs, backend=None):
    """Register a batch of (fixed, moving) pairs; independent registrations
    run on a thread pool capped by N2N_THREADS, results in job order."""
    backend = parse_backend(backend)
    workers = min(thread_count(), max(len(jobs), 1))
    if workers <= 1:
        return [register(f, m, backend) for f, m in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda fm: register(fm[0], fm[1], backend), jobs))


@dataclass
class FusionCase:
    """One evaluation unit for fusion-weight selection: both candidate
    fields plus the label pair they propagate between."""

    field_translated: np.ndarray
    field_given: np.ndarray
    moving_labels: np.ndarray
    fixed_labels: np.ndarray


def _fused_dice(case: FusionCase, w, classes):
    fused = fuse_fields(case.field_translated, case.field_given, w)
    propagated = warp(case.moving_labels, fused, interp="nearest")
    return float(
        np.mean([metrics_mod.dice(case.fixed_labels, propagated, cls) for cls in classes])
    )


def select_fusion_weight(folds, grid_step=0.01, classes=None):
    """Grid-search w in {0, grid_step, ..., 1} maximizing mean validation
    Dice of the fused result across folds; ties resolve to the larger w."""
    if not folds or not any(folds):
        raise ContractError("no cross-validation cases supplied")
    if classes is None:
        present = set()
        for fold in folds:
            for case in fold:
                present |= set(np.unique(case.fixed_labels).tolist())
        classes = sorted(c for c in present if c != 0)
    if not classes:
        raise ContractError("no foreground classes to score")
    grid = np.round(np.arange(0.0, 1.0 + grid_step / 2, grid_step), 10)
    best_w, best_score = None, -math.inf
    for w in grid:
        fold_scores = [
            np.mean([_fused_dice(case, w, classes) for case in fold]) for fold in folds if fold
        ]
        score = float(np.mean(fold_scores))
        if score >= best_score:  # >= keeps the larger w on ties
            best_score, best_w = score, float(w)
    return best_w


def rotate_image(image, degrees, interp="bilinear"):
    """Rotate content by the given angle about the image center."""
    h, w = np.asarray(image).shape
    transform = AffineTransform.rotation(-math.radians(degrees))
    return warp(image, affine_to_field(transform, h, w), interp=interp)


def rotate_points_yx(points_yx, degrees, center):
    return AffineTransform.rotation(math.radians(degrees)).apply(points_yx, center)
