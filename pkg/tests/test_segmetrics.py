import itertools
import math

import numpy as np
import pytest
from scipy.signal import fftconvolve

from lmidiff.errors import DegenerateInputError
from lmidiff.segmetrics import (MetricReport, binary_dice, dice, evaluate, kmeans_assign, kmeans_fit, psnr,
                                read_metric_csv, ssim)


def _ssim_oracle(a, b):
    # explicit 11x11 Gaussian window, valid region only, population statistics
    r = np.arange(-5, 6)
    g = np.exp(-r ** 2 / (2 * 1.5 ** 2))
    w = np.outer(g, g)
    w /= w.sum()

    def f(x):
        return fftconvolve(x, w, mode="valid")

    mu_a, mu_b = f(a), f(b)
    va = f(a * a) - mu_a ** 2
    vb = f(b * b) - mu_b ** 2
    cab = f(a * b) - mu_a * mu_b
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2))
    return s.mean()


def test_ssim_identical_is_one(rng):
    a = rng.random((16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_oracle(rng):
    a = rng.random((24, 20))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(_ssim_oracle(a, b), abs=1e-6)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_psnr_known_value():
    a = np.zeros((4, 4))
    b = np.full((4, 4), 0.1)
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a) == math.inf


def test_dice_identical_and_permuted(rng):
    m = rng.integers(0, 4, (10, 10))
    assert dice(m, m)[0] == 1.0
    relabeled = np.array([2, 0, 3, 1])[m]
    assert dice(relabeled, m)[0] == 1.0


def test_dice_disjoint_halves():
    truth = np.zeros((4, 4), int)
    truth[:, 2:] = 1
    pred = np.zeros((4, 4), int)
    pred[:2] = 1
    # under either matching, each class overlaps on half its pixels
    assert dice(pred, truth)[0] == pytest.approx(0.5)


def test_dice_matches_bruteforce(rng):
    pred, truth = rng.integers(0, 3, (8, 8)), rng.integers(0, 3, (8, 8))
    best = 0.0
    for perm in itertools.permutations(range(3)):
        mapped = np.array(perm)[pred]
        scores = [2 * np.sum((mapped == c) & (truth == c)) / (np.sum(mapped == c) + np.sum(truth == c))
                  for c in range(3)]
        best = max(best, np.mean(scores))
    assert dice(pred, truth)[0] == pytest.approx(best, abs=1e-12)


def test_dice_absent_class_counts_as_perfect():
    m = np.zeros((3, 3), int)
    mean, per = dice(m, m, n_classes=3)
    assert mean == 1.0 and per.tolist() == [1.0, 1.0, 1.0]


def test_kmeans_recovers_levels(rng):
    levels = np.array([0.1, 0.5, 0.9])
    imgs = levels[rng.integers(0, 3, (4, 16, 16))] + 0.01 * rng.standard_normal((4, 16, 16))
    model = kmeans_fit(imgs, k=3, seed=0)
    assert np.allclose(model.centroids, levels, atol=0.01)
    labels = kmeans_assign(model, imgs[0])
    assert dice(labels, np.searchsorted(levels, imgs[0] - 0.2))[0] == 1.0


def test_kmeans_deterministic_and_monotone_inertia(rng):
    imgs = rng.random((2, 8, 8))
    a, b = kmeans_fit(imgs, 4, seed=3), kmeans_fit(imgs, 4, seed=3)
    assert np.array_equal(a.centroids, b.centroids)
    assert all(x >= y - 1e-12 for x, y in zip(a.inertia_history, a.inertia_history[1:]))


def test_kmeans_degenerate():
    with pytest.raises(DegenerateInputError):
        kmeans_fit(np.full((1, 4, 4), 0.5), k=3)


def test_report_csv_round_trip(tmp_path):
    rep = MetricReport(["a", "b"], np.array([0.5, 1.0]), np.array([20.0, 30.0]), np.array([0.8, 0.9]))
    rep.write_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "image,dice,psnr,ssim"
    assert lines[-1].startswith("summary,0.75±0.25,25.0±5.0")
    back = read_metric_csv(tmp_path / "m.csv")
    assert back.names == ["a", "b"] and np.array_equal(back.psnr, rep.psnr)


def test_evaluate(rng):
    tgt = rng.random((2, 16, 16))
    masks = rng.integers(0, 2, (2, 16, 16))
    rep = evaluate(tgt, tgt, masks, masks)
    assert rep.dice_mean == 1.0 and rep.psnr_mean == math.inf and rep.ssim_mean == pytest.approx(1.0)


def test_binary_dice_units():
    a = np.zeros((4, 4), bool)
    b = np.zeros((4, 4), bool)
    a[0, :4] = True
    b[0, 2:] = True
    b[1, :2] = True
    assert binary_dice(a, b) == 0.5
    assert binary_dice(a, ~a) == 0.0
    assert binary_dice(a, a) == 1.0


def test_ssim_inverted_checkerboard_negative():
    board = (np.indices((16, 16)).sum(axis=0) % 2).astype(float)
    assert ssim(board, 1 - board) < 0


def test_kmeans_single_cluster_is_mean(rng):
    imgs = rng.random((2, 6, 6))
    assert kmeans_fit(imgs, k=1).centroids[0] == pytest.approx(imgs.mean(), abs=1e-12)


def test_kmeans_assign_matches_loop(rng):
    model = kmeans_fit(rng.random((2, 8, 8)), k=4)
    img = rng.random((5, 5))
    labels = kmeans_assign(model, img)
    for v, lab in zip(img.ravel(), labels.ravel()):
        d = [abs(v - c) for c in model.centroids]
        assert lab == d.index(min(d))
    assert np.all(kmeans_assign(model, np.full((3, 3), model.centroids[2])) == 2)


def test_psnr_decreases_with_noise(rng):
    a = rng.random((16, 16))
    z = rng.standard_normal(a.shape)
    values = [psnr(a, a + s * z) for s in (0.01, 0.05, 0.1, 0.2)]
    assert all(x > y for x, y in zip(values, values[1:]))
