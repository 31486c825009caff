import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from lmidiff.errors import FormatError
from lmidiff.image import (dequantize, extract_patch, load_image, load_mask, quantize,
                           save_image, save_mask)


@pytest.mark.parametrize("value,label", [(0.0, 0), (1.0, 7), (0.5, 4)])
def test_quantize_edges(value, label):
    assert quantize(np.array([[value]]), 8)[0, 0] == label


def test_quantize_rejects_too_few_levels():
    with pytest.raises(ValueError):
        quantize(np.zeros((2, 2)), 1)


def test_quantize_clamps_out_of_range():
    q = quantize(np.array([[-0.3, 1.7]]), 16)
    assert q.tolist() == [[0, 15]]


@given(arrays(np.float64, (6, 6), elements=st.floats(0, 1)), st.integers(2, 64))
def test_quantize_monotone_and_idempotent(img, levels):
    q = quantize(img, levels)
    assert q.min() >= 0 and q.max() < levels
    order = np.argsort(img, axis=None, kind="stable")
    assert np.all(np.diff(q.ravel()[order]) >= 0)
    assert np.array_equal(quantize(dequantize(q, levels), levels), q)


def test_patch_interior_scan_order():
    q = np.arange(9).reshape(3, 3)
    assert extract_patch(q, (1, 1), 1).tolist() == list(range(9))


def test_patch_corner_clamps():
    q = np.arange(9).reshape(3, 3)
    p = extract_patch(q, (0, 0), 1)
    assert p.tolist() == [0, 0, 1, 0, 0, 1, 3, 3, 4]
    assert len(p) == 9 and len(p) - len(set(p.tolist())) == 5


def test_patch_constant_image():
    assert set(extract_patch(np.full((5, 5), 3), (2, 4), 1).tolist()) == {3}


def test_patch_errors():
    with pytest.raises(ValueError):
        extract_patch(np.zeros((3, 3), int), (3, 0), 1)
    with pytest.raises(ValueError):
        extract_patch(np.zeros((3, 3), int), (1, 1), 0)


def test_patch_interior_matches_double_loop(rng):
    q = rng.integers(0, 16, (12, 10))
    r = 2
    for i in range(r, 12 - r):
        for j in range(r, 10 - r):
            naive = [q[i + u, j + v] for u in range(-r, r + 1) for v in range(-r, r + 1)]
            assert extract_patch(q, (i, j), r).tolist() == naive


def test_pgm_pixel_value(tmp_path):
    path = tmp_path / "one.pgm"
    path.write_bytes(b"P5\n1 1\n255\n" + bytes([128]))
    assert load_image(path)[0, 0] == 128 / 255


def test_pgm_with_comment(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255]))
    assert load_image(path).tolist() == [[0.0, 1.0]]


def test_pgm_round_trip_8bit(tmp_path, rng):
    raw = rng.integers(0, 256, (7, 5))
    save_image(raw / 255.0, tmp_path / "a.pgm")
    back = load_image(tmp_path / "a.pgm")
    assert np.array_equal(np.rint(back * 255).astype(int), raw)


def test_lmif_round_trip_bit_exact(tmp_path, rng):
    img = rng.random((9, 13)).astype(np.float32)
    save_image(img, tmp_path / "a.lmif")
    back = load_image(tmp_path / "a.lmif")
    assert back.shape == (9, 13)
    assert back.astype(np.float32).tobytes() == img.tobytes()
    save_image(back, tmp_path / "b.lmif")
    assert (tmp_path / "a.lmif").read_bytes() == (tmp_path / "b.lmif").read_bytes()


def test_lmif_layout(tmp_path):
    save_image(np.array([[0.25, 0.5]]), tmp_path / "x.lmif")
    data = (tmp_path / "x.lmif").read_bytes()
    assert data[:4] == b"LMIF"
    assert struct.unpack("<II", data[4:12]) == (2, 1)
    assert struct.unpack("<2f", data[12:]) == (0.25, 0.5)


@pytest.mark.parametrize("suffix", [".lmif", ".pgm"])
def test_truncated_file_is_format_error(tmp_path, suffix):
    path = tmp_path / f"t{suffix}"
    save_image(np.full((4, 4), 0.5), path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError) as err:
        load_image(path)
    assert err.value.offset is not None


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(FormatError) as err:
        load_image(path)
    assert err.value.offset == 0


def test_bad_pgm_dimensions(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P5\nx 1\n255\n0")
    with pytest.raises(FormatError) as err:
        load_image(path)
    assert err.value.offset == 3


def test_mask_round_trip(tmp_path, rng):
    labels = rng.integers(0, 5, (6, 6))
    save_mask(labels, tmp_path / "m.pgm")
    assert np.array_equal(load_mask(tmp_path / "m.pgm"), labels)


def test_normalize_on_load(tmp_path):
    save_image(np.array([[2.0, 4.0], [3.0, 6.0]]), tmp_path / "raw.lmif")
    img = load_image(tmp_path / "raw.lmif", normalize=True)
    assert img.min() == 0.0 and img.max() == 1.0
