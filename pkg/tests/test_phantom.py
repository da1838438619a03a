import hashlib

import numpy as np
import pytest

from n2n import phantom, volio
from n2n.errors import ContractError
from n2n.phantom import NOISE_SIGMA, DatasetManifest


def test_same_seed_bit_identical():
    a = phantom.generate_phantom_subject(seed=1, size=(16, 64, 64))
    b = phantom.generate_phantom_subject(seed=1, size=(16, 64, 64))
    assert np.array_equal(a.vol_a.data, b.vol_a.data)
    assert np.array_equal(a.vol_b.data, b.vol_b.data)
    assert np.array_equal(a.labels.data, b.labels.data)
    assert a.landmarks == b.landmarks


def test_seed_sensitivity():
    a = phantom.generate_phantom_subject(seed=1, size=(16, 64, 64))
    b = phantom.generate_phantom_subject(seed=2, size=(16, 64, 64))
    assert not np.array_equal(a.vol_a.data, b.vol_a.data)


def test_zero_tumor_probability():
    s = phantom.generate_phantom_subject(seed=3, size=(16, 64, 64), tumor_probability=0.0)
    assert 3 not in np.unique(s.labels.data)


def test_size_too_small_rejected():
    with pytest.raises(ContractError, match="size"):
        phantom.generate_phantom_subject(seed=1, size=(8, 64, 64))


def test_tumor_contrast_invariants():
    # tumor stands out from the background by >3 sigma in B, <1 sigma in A
    for seed in (1, 2, 3):
        s = phantom.generate_phantom_subject(seed=seed, size=(16, 64, 64))
        lab = s.labels.data
        assert (lab == 3).any()
        bg_a = s.vol_a.data[lab == 0].mean()
        tum_a = s.vol_a.data[lab == 3].mean()
        bg_b = s.vol_b.data[lab == 0].mean()
        tum_b = s.vol_b.data[lab == 3].mean()
        assert tum_b - bg_b > 3 * NOISE_SIGMA
        assert abs(tum_a - bg_a) < 1 * NOISE_SIGMA


def test_tumor_inside_interior_structure():
    # tumor voxels must be surrounded by class 2, never touching class 1
    for seed in (4, 5):
        s = phantom.generate_phantom_subject(seed=seed, size=(16, 64, 64))
        lab = s.labels.data
        tz, ty, tx = np.nonzero(lab == 3)
        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            neighbor = lab[tz + dz, ty + dy, tx + dx]
            assert np.all((neighbor == 3) | (neighbor == 2))


def test_landmarks_on_interior_extrema():
    s = phantom.generate_phantom_subject(seed=6, size=(16, 64, 64))
    lab = s.labels.data
    interior = np.argwhere(lab >= 2)  # interior structure incl. tumor
    zmax, ymax, xmax = interior.max(axis=0)
    zmin, ymin, xmin = interior.min(axis=0)
    by_name = {n: (x, y, z) for n, x, y, z in s.landmarks}
    assert set(by_name) == set(phantom.LANDMARK_NAMES)
    assert abs(by_name["L1"][0] - xmax) <= 1.0
    assert abs(by_name["L2"][0] - xmin) <= 1.0
    assert abs(by_name["L3"][1] - ymax) <= 1.0
    assert abs(by_name["L4"][1] - ymin) <= 1.0
    assert abs(by_name["L6"][2] - zmax) <= 1.0
    assert abs(by_name["L7"][2] - zmin) <= 1.0


def _dir_hash(root):
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def test_corpus_regeneration_reproduces_files(tmp_path):
    m1 = phantom.generate_corpus(seed=11, n_subjects=4, size=(16, 64, 64), out_dir=tmp_path / "a")
    phantom.generate_corpus(seed=11, n_subjects=4, size=(16, 64, 64), out_dir=tmp_path / "b")
    assert _dir_hash(tmp_path / "a") == _dir_hash(tmp_path / "b")
    assert len(m1.subjects) == 4


def test_corpus_split_counts(tmp_path):
    manifest = phantom.generate_corpus(seed=1, n_subjects=10, size=(16, 64, 64), out_dir=tmp_path)
    assert len(manifest.split_ids("train")) == 8
    assert len(manifest.split_ids("test")) == 2
    assert len(manifest.split_ids("partA")) == 4
    assert len(manifest.split_ids("partB")) == 4
    train = set(manifest.split_ids("train"))
    test = set(manifest.split_ids("test"))
    assert not train & test
    assert set(manifest.split_ids("partA")) | set(manifest.split_ids("partB")) == train
    assert not set(manifest.split_ids("partA")) & set(manifest.split_ids("partB"))


def test_corpus_split_parity_odd_train(tmp_path):
    manifest = phantom.generate_corpus(seed=2, n_subjects=9, size=(16, 64, 64), out_dir=tmp_path)
    # 9 * 0.8 -> 7 train subjects; PartA and PartB differ by at most one
    a, b = manifest.split_ids("partA"), manifest.split_ids("partB")
    assert len(a) + len(b) == 7
    assert abs(len(a) - len(b)) <= 1


def test_corpus_too_few_subjects(tmp_path):
    with pytest.raises(ContractError):
        phantom.generate_corpus(seed=1, n_subjects=2, size=(16, 64, 64), out_dir=tmp_path)


def test_manifest_roundtrip(tmp_path):
    manifest = phantom.generate_corpus(seed=5, n_subjects=4, size=(16, 64, 64), out_dir=tmp_path)
    loaded = DatasetManifest.load(tmp_path / "manifest.json")
    assert loaded.subjects == manifest.subjects
    assert loaded.splits == manifest.splits
    entry = loaded.subject("s001")
    vol = volio.read_nifti(loaded.resolve(entry["modalities"]["A"]))
    assert vol.shape == (16, 64, 64)


def test_landmark_csv_roundtrip(tmp_path):
    s = phantom.generate_phantom_subject(seed=9, size=(16, 64, 64))
    path = tmp_path / "lms.csv"
    phantom.write_landmarks(path, s.landmarks)
    back = phantom.read_landmarks(path)
    assert back == s.landmarks
    header = path.read_text().splitlines()[0]
    assert header == "name,x,y,z"


def test_slice_corpus_layout(tiny_corpus, tmp_path):
    sliced = phantom.slice_corpus(tiny_corpus, tmp_path / "slices", size=256)
    entry = sliced.subject("s000")
    assert len(entry["modalities"]["A"]) == 16
    assert len(entry["modalities"]["B"]) == 16
    assert len(entry["labels"]) == 16
    img = volio.read_png(sliced.resolve(entry["modalities"]["A"][0]))
    assert img.shape == (256, 256)
    lab = volio.read_png(sliced.resolve(entry["labels"][8]))
    assert set(np.unique(lab)) <= {0, 1, 2, 3}
    assert sliced.splits == tiny_corpus.splits
