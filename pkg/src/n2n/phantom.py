"""Synthetic multi-modality phantom corpus.

Each subject is a pair of spatially aligned volumes (modality A and B) built
from nested ellipsoids: an outer tissue shell (class 1), an interior dark
ventricle-like structure (class 2), and optionally a tumor (class 3) fully
contained in the interior structure. Class intensity profiles differ between
the modalities: the tumor sits within one noise sigma of the image background
in modality A but is high-contrast in modality B, so tumor localization
genuinely requires the B channel.

Seven landmarks are placed at analytically known extrema of the interior
ellipsoid (6 axis endpoints plus the centroid).
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import volio
from .errors import ConfigError, ContractError
from .volio import Volume

MIN_SIZE = (16, 64, 64)
NOISE_SIGMA = 5.0

# class intensity profiles on the 0..255 scale (bg, tissue, interior, tumor)
INTENSITY_A = {0: 10.0, 1: 150.0, 2: 12.0, 3: 14.0}
INTENSITY_B = {0: 10.0, 1: 70.0, 2: 140.0, 3: 235.0}

LANDMARK_NAMES = ("L1", "L2", "L3", "L4", "L5", "L6", "L7")

TRAIN_FRACTION = 0.8


@dataclass
class PhantomSubject:
    subject_id: str
    vol_a: Volume
    vol_b: Volume
    labels: Volume
    landmarks: list  # (name, x, y, z) in voxel coordinates

    def __post_init__(self):
        if not (self.vol_a.shape == self.vol_b.shape == self.labels.shape):
            raise ContractError("modality and label volumes must share one shape")
        d, h, w = self.labels.shape
        for name, x, y, z in self.landmarks:
            if not (0 <= x < w and 0 <= y < h and 0 <= z < d):
                raise ContractError(f"landmark {name} at ({x},{y},{z}) outside volume bounds")
        present = set(np.unique(self.labels.data).tolist())
        if not present <= {0, 1, 2, 3}:
            raise ContractError(f"unexpected label classes {sorted(present)}")


@dataclass
class DatasetManifest:
    """Paths and split assignment for a generated corpus.

    ``modalities`` values are volume paths right after generation and lists
    of slice paths after the slicing step; both forms carry the same keys.
    Splits are disjoint by subject, never by slice.
    """

    root: str
    subjects: list
    splits: dict = field(default_factory=dict)

    def subject(self, subject_id):
        for entry in self.subjects:
            if entry["id"] == subject_id:
                return entry
        raise KeyError(subject_id)

    def split_ids(self, name):
        if name not in self.splits:
            raise ConfigError(f"unknown split {name!r}; have {sorted(self.splits)}")
        return list(self.splits[name])

    def resolve(self, rel):
        return str(Path(self.root) / rel)

    def save(self, path):
        payload = {"subjects": self.subjects, "splits": self.splits}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path) as fh:
            payload = json.load(fh)
        return cls(root=str(path.parent), subjects=payload["subjects"], splits=payload["splits"])


def _ellipsoid_mask(shape, center, semi_axes):
    d, h, w = shape
    zz, yy, xx = np.ogrid[0:d, 0:h, 0:w]
    cz, cy, cx = center
    az, ay, ax = semi_axes
    q = ((zz - cz) / az) ** 2 + ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2
    return q <= 1.0


def generate_phantom_subject(seed, size=(16, 64, 64), tumor_probability=1.0, subject_id=None):
    """Deterministically generate one phantom subject from a seed."""
    d, h, w = size
    if d < MIN_SIZE[0] or h < MIN_SIZE[1] or w < MIN_SIZE[2]:
        raise ContractError(f"size {size} below the minimum {MIN_SIZE}")
    if not 0.0 <= tumor_probability <= 1.0:
        raise ContractError(f"tumor_probability must be in [0,1], got {tumor_probability}")
    rng = np.random.default_rng(seed)

    # outer tissue shell; distinct in-plane axes keep every cross-section
    # visibly elliptic, so slice orientation is identifiable for registration
    c1 = np.array([d / 2, h / 2, w / 2]) + rng.uniform(-0.02, 0.02, 3) * np.array(size)
    a1 = np.array([0.36 * d, 0.42 * h, 0.33 * w]) * rng.uniform(0.94, 1.04, 3)

    # interior ventricle-like structure, kept inside the shell
    c2 = c1 + rng.uniform(-0.05, 0.05, 3) * a1
    a2 = a1 * np.array([0.55, 0.38, 0.30]) * rng.uniform(0.85, 1.1, 3)

    labels = np.zeros(size, dtype=np.uint8)
    labels[_ellipsoid_mask(size, c1, a1)] = 1
    labels[_ellipsoid_mask(size, c2, a2)] = 2

    has_tumor = rng.random() < tumor_probability
    if has_tumor:
        # tumor strictly inside the interior structure with an analytic gap
        # of at least one voxel on every axis (normalized-metric triangle
        # inequality), so no tumor voxel can border the tissue shell
        gap = 1.0 / float(min(a2))
        avail = 1.0 - gap
        ratio = rng.uniform(0.55, 0.75) * avail
        at = a2 * ratio
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        radius = rng.uniform(0.0, 0.9) * (avail - ratio)
        ct = c2 + direction * radius * a2
        labels[_ellipsoid_mask(size, ct, at)] = 3

    def render(profile):
        img = np.empty(size, dtype=np.float64)
        for cls, value in profile.items():
            img[labels == cls] = value
        img += rng.normal(0.0, NOISE_SIGMA, size)
        return Volume(np.clip(np.rint(img), 0, 255).astype(np.uint8))

    vol_a = render(INTENSITY_A)
    vol_b = render(INTENSITY_B)

    cz, cy, cx = c2
    az, ay, ax = a2
    landmarks = [
        ("L1", cx + ax, cy, cz),
        ("L2", cx - ax, cy, cz),
        ("L3", cx, cy + ay, cz),
        ("L4", cx, cy - ay, cz),
        ("L5", cx, cy, cz),
        ("L6", cx, cy, cz + az),
        ("L7", cx, cy, cz - az),
    ]
    landmarks = [(n, float(x), float(y), float(z)) for n, x, y, z in landmarks]

    sid = subject_id if subject_id is not None else f"s{seed:04d}"
    return PhantomSubject(sid, vol_a, vol_b, labels=Volume(labels), landmarks=landmarks)


def write_landmarks(path, landmarks):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "x", "y", "z"])
        for name, x, y, z in landmarks:
            writer.writerow([name, repr(float(x)), repr(float(y)), repr(float(z))])


def read_landmarks(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0] == "name":
                continue
            name, x, y, z = row[:4]
            out.append((name, float(x), float(y), float(z)))
    return out


def split_subjects(ids, rng):
    """80/20 train/test by subject (train count rounded down), then a 1:1
    PartA/PartB split of the training subjects."""
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_train = int(len(ids) * TRAIN_FRACTION)
    train, test = order[:n_train], order[n_train:]
    part_a = train[: len(train) // 2]
    part_b = train[len(train) // 2 :]
    return {"train": train, "test": test, "partA": part_a, "partB": part_b}


def generate_corpus(seed, n_subjects, size, out_dir, tumor_probability=1.0) -> DatasetManifest:
    """Generate n subjects, write volumes + landmarks, and the manifest."""
    if n_subjects < 3:
        raise ContractError(f"need at least 3 subjects, got {n_subjects}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    subjects = []
    ids = []
    for i in range(n_subjects):
        sid = f"s{i:03d}"
        subject = generate_phantom_subject(
            seed=seed * 100003 + i,
            size=size,
            tumor_probability=tumor_probability,
            subject_id=sid,
        )
        volio.write_nifti(subject.vol_a, out_dir / f"{sid}_A.nii")
        volio.write_nifti(subject.vol_b, out_dir / f"{sid}_B.nii")
        volio.write_nifti(subject.labels, out_dir / f"{sid}_labels.nii")
        write_landmarks(out_dir / f"{sid}_landmarks.csv", subject.landmarks)
        subjects.append(
            {
                "id": sid,
                "modalities": {"A": f"{sid}_A.nii", "B": f"{sid}_B.nii"},
                "labels": f"{sid}_labels.nii",
                "landmarks": f"{sid}_landmarks.csv",
            }
        )
        ids.append(sid)

    manifest = DatasetManifest(
        root=str(out_dir), subjects=subjects, splits=split_subjects(ids, rng)
    )
    manifest.save(out_dir / "manifest.json")
    return manifest


def slice_corpus(manifest: DatasetManifest, out_dir, size=256) -> DatasetManifest:
    """Slice every subject along z, resize to size x size, and write PNGs.

    Modality slices use bilinear resampling; label slices use nearest so
    class ids survive. Produces a slice-level manifest with the same splits.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    subjects = []
    for entry in manifest.subjects:
        sid = entry["id"]
        record = {"id": sid, "modalities": {}, "labels": [], "landmarks": entry["landmarks"]}
        for modality, rel in sorted(entry["modalities"].items()):
            vol = volio.read_nifti(manifest.resolve(rel))
            paths = []
            for k, sl in enumerate(volio.slice_volume(vol)):
                resized = volio.resize_bilinear(sl, size, size)
                name = volio.slice_filename(sid, modality, k)
                volio.write_png(out_dir / name, np.clip(np.rint(resized), 0, 255).astype(np.uint8))
                paths.append(name)
            record["modalities"][modality] = paths
        labels = volio.read_nifti(manifest.resolve(entry["labels"]))
        for k, sl in enumerate(volio.slice_volume(labels)):
            resized = volio.resize_nearest(sl, size, size).astype(np.uint8)
            name = volio.slice_filename(sid, "labels", k)
            volio.write_png(out_dir / name, resized)
            record["labels"].append(name)
        # keep landmark files reachable from the sliced manifest too
        src = Path(manifest.resolve(entry["landmarks"]))
        dst = out_dir / src.name
        dst.write_bytes(src.read_bytes())
        record["landmarks"] = src.name
        subjects.append(record)

    sliced = DatasetManifest(root=str(out_dir), subjects=subjects, splits=dict(manifest.splits))
    sliced.save(out_dir / "manifest.json")
    return sliced
