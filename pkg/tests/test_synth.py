import numpy as np
import pytest

from lmidiff.image import load_image
from lmidiff.synth import (TABLE_SOURCE, TABLE_TARGET, gen_dataset, gen_phantom, load_dataset,
                           read_manifest)


def test_phantom_shapes_and_range():
    ph = gen_phantom(7)
    assert ph.mask.shape == ph.modality_a.shape == ph.modality_b.shape == (32, 32)
    for img in (ph.modality_a, ph.modality_b):
        assert img.min() >= 0.0 and img.max() <= 1.0
    assert 0 in ph.mask and ph.mask.max() <= 4


def test_phantom_deterministic():
    a, b = gen_phantom(11), gen_phantom(11)
    assert np.array_equal(a.modality_a, b.modality_a) and np.array_equal(a.mask, b.mask)
    assert not np.array_equal(gen_phantom(12).modality_b, a.modality_b)


def test_modalities_follow_tables():
    ph = gen_phantom(3)
    for c in np.unique(ph.mask):
        sel = ph.mask == c
        assert np.median(ph.modality_b[sel]) == pytest.approx(TABLE_TARGET[c], abs=0.2)
        assert np.median(ph.modality_a[sel]) == pytest.approx(TABLE_SOURCE[c], abs=0.2)


def test_intensity_order_is_scrambled():
    assert np.argsort(TABLE_TARGET).tolist() != np.argsort(TABLE_SOURCE).tolist()


def test_phantom_rejects_bad_args():
    with pytest.raises(ValueError):
        gen_phantom(0, size=8)
    with pytest.raises(ValueError):
        gen_phantom(0, k_tissue=9)


def test_dataset_tree_and_reload(tmp_path):
    root = gen_dataset(tmp_path / "ds", seed=4, n_train=3, n_test=2)
    assert sorted(p.name for p in (root / "train").iterdir()) == ["f0000.lmif", "f0001.lmif", "f0002.lmif"]
    assert (root / "test" / "g0001.lmif").exists() and (root / "test" / "mask0001.pgm").exists()
    man = read_manifest(root)
    assert man["seed"] == "4" and man["n_test"] == "2"
    ds = load_dataset(root)
    assert ds.train.shape == (3, 32, 32) and ds.source.shape == (2, 32, 32)
    assert ds.masks.dtype.kind == "i"
    assert np.array_equal(ds.target[1], load_image(root / "test" / "f0001.lmif"))


def test_dataset_bytes_reproducible(tmp_path):
    a = gen_dataset(tmp_path / "a", seed=9, n_train=2, n_test=1)
    b = gen_dataset(tmp_path / "b", seed=9, n_train=2, n_test=1)
    for rel in ("manifest.txt", "train/f0001.lmif", "test/g0000.lmif", "test/mask0000.pgm"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
