"""Image quality and overlap metrics with aggregate reporting.

All metrics operate on the [0,255] intensity scale and are implemented
directly from their defining formulas:

* ``mae``: mean absolute pixel difference.
* ``psnr``: 10*log10(MAX^2 / MSE) with MAX fixed at the dynamic range (255)
  so values stay comparable across image pairs; identical images return the
  positive-infinity sentinel.
* ``mutual_information``: joint-histogram MI in nats (256 bins over
  [0,255]); 0*log(0) terms contribute nothing.
* ``ssim``: the single global-statistics form
  (2*mx*my + c1)(2*cov + c2) / ((mx^2 + my^2 + c1)(sx^2 + sy^2 + c2)) with
  c1 = (0.01*L)^2 and c2 = (0.03*L)^2; a windowed mean-SSIM variant is
  available but not the default.
* ``dice``: 2|H n G| / (|H| + |G|) per class; two empty masks count as
  perfect (vacuous) agreement.

Reports collect per-image values plus mean and population std, matching the
"mean(std)" convention used in results tables.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

PSNR_MAX_DEFAULT = 255.0
MI_BINS_DEFAULT = 256
SSIM_L_DEFAULT = 255.0

METRIC_NAMES = ("mae", "psnr", "mi", "ssim")


def _as_pair(y, y_hat):
    a = np.asarray(y, dtype=np.float64)
    b = np.asarray(y_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mae(y, y_hat):
    """Mean absolute pixel difference."""
    a, b = _as_pair(y, y_hat)
    return float(np.mean(np.abs(a - b)))


def psnr(y, y_hat, max_value=PSNR_MAX_DEFAULT):
    """Peak signal-to-noise ratio in dB; +inf when the images are identical."""
    a, b = _as_pair(y, y_hat)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / mse)


def _joint_histogram(a, b, bins):
    hist, _, _ = np.histogram2d(
        a.ravel(), b.ravel(), bins=bins, range=[[0.0, 255.0], [0.0, 255.0]]
    )
    return hist / hist.sum()


def mutual_information(y, y_hat, bins=MI_BINS_DEFAULT):
    """Joint-histogram mutual information in nats."""
    a, b = _as_pair(y, y_hat)
    p = _joint_histogram(a, b, bins)
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    mask = p > 0
    ratio = p[mask] / (px @ py)[mask]
    return float(np.sum(p[mask] * np.log(ratio)))


def histogram_entropy(y, bins=MI_BINS_DEFAULT):
    """Shannon entropy (nats) of the intensity histogram, same binning as MI."""
    a = np.asarray(y, dtype=np.float64)
    hist, _ = np.histogram(a.ravel(), bins=bins, range=(0.0, 255.0))
    p = hist / hist.sum()
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def ssim(y, y_hat, L=SSIM_L_DEFAULT, k1=0.01, k2=0.03):
    """Structural similarity from global image statistics."""
    a, b = _as_pair(y, y_hat)
    c1 = (k1 * L) ** 2
    c2 = (k2 * L) ** 2
    mx, my = a.mean(), b.mean()
    vx, vy = a.var(), b.var()
    cov = ((a - mx) * (b - my)).mean()
    return float(
        ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    )


def ssim_windowed(y, y_hat, window=8, L=SSIM_L_DEFAULT, k1=0.01, k2=0.03):
    """Mean SSIM over non-overlapping windows (optional variant)."""
    a, b = _as_pair(y, y_hat)
    h, w = a.shape[:2]
    values = []
    for r in range(0, h - window + 1, window):
        for c in range(0, w - window + 1, window):
            values.append(ssim(a[r : r + window, c : c + window],
                               b[r : r + window, c : c + window], L=L, k1=k1, k2=k2))
    if not values:
        raise ContractError(f"image {a.shape} smaller than the {window}x{window} window")
    return float(np.mean(values))


def dice(label_g, label_h, class_id):
    """Overlap 2|H n G| / (|H| + |G|) for one class; both empty -> 1.0."""
    g = np.asarray(label_g)
    h = np.asarray(label_h)
    if g.shape != h.shape:
        raise ContractError(f"shape mismatch: {g.shape} vs {h.shape}")
    gm = g == class_id
    hm = h == class_id
    total = int(gm.sum()) + int(hm.sum())
    if total == 0:
        return 1.0
    return float(2.0 * np.sum(gm & hm) / total)


def aggregate(values):
    """Mean and population std of per-image metric values."""
    if len(values) == 0:
        raise ContractError("cannot aggregate an empty value list")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def format_mean_std(mean, std, digits=3):
    """Tables-style "mean(std)" cell."""
    return f"{mean:.{digits}f}({std:.{digits}f})"


@dataclass
class MetricReport:
    """Per-image values and aggregates for a named metric set."""

    entries: dict = field(default_factory=dict)  # name -> list of per-image values

    def add(self, name, value):
        self.entries.setdefault(name, []).append(float(value))

    def summary(self):
        out = {}
        for name, values in sorted(self.entries.items()):
            mean, std = aggregate(values)
            out[name] = {"per_image": values, "mean": mean, "std": std}
        return out

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def save_csv(self, path):
        rows = ["metric,mean,std,mean(std)"]
        for name, entry in self.summary().items():
            rows.append(
                f"{name},{entry['mean']!r},{entry['std']!r},"
                f"{format_mean_std(entry['mean'], entry['std'])}"
            )
        with open(path, "w") as fh:
            fh.write("\n".join(rows) + "\n")

    @classmethod
    def load_json(cls, path):
        with open(path) as fh:
            payload = json.load(fh)
        return cls({name: list(entry["per_image"]) for name, entry in payload.items()})


METRIC_FUNCS = {"mae": mae, "psnr": psnr, "mi": mutual_information, "ssim": ssim}


def evaluate_pairs(real_images, fake_images, names=METRIC_NAMES) -> MetricReport:
    """Evaluate each metric on aligned (real, fake) image lists."""
    if len(real_images) != len(fake_images):
        raise ContractError(
            f"real/fake counts differ: {len(real_images)} vs {len(fake_images)}"
        )
    if not real_images:
        raise ContractError("no image pairs to evaluate")
    unknown = [n for n in names if n not in METRIC_FUNCS]
    if unknown:
        raise ContractError(f"unknown metrics {unknown}; available: {sorted(METRIC_FUNCS)}")
    report = MetricReport()
    for real, fake in zip(real_images, fake_images):
        for name in names:
            report.add(name, METRIC_FUNCS[name](real, fake))
    return report
