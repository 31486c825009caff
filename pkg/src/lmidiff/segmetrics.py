"""K-Means segmentation fitted on the target modality, and Dice/PSNR/SSIM."""

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from skimage.metrics import structural_similarity

from .errors import DegenerateInputError
from .validation import check_same_shape

SSIM_WINDOW = 11


@dataclass
class KMeansModel:
    centroids: np.ndarray
    seed: int
    n_iter: int = 0
    inertia_history: list = field(default_factory=list)

    @property
    def k(self):
        return len(self.centroids)


def _kmeanspp(x, k, rng):
    centroids = [x[rng.integers(len(x))]]
    d2 = (x - centroids[0]) ** 2
    for _ in range(1, k):
        total = d2.sum()
        if total == 0:
            break
        idx = rng.choice(len(x), p=d2 / total)
        centroids.append(x[idx])
        d2 = np.minimum(d2, (x - x[idx]) ** 2)
    return np.array(centroids)


def _nearest(x, centroids):
    return np.argmin(np.abs(x[:, None] - centroids[None, :]), axis=1)


def kmeans_fit(images, k=5, seed=0, max_iter=300, tol=1e-6):
    """Lloyd's algorithm on pooled pixel intensities with k-means++ seeding.

    Stops when no centroid moves more than ``tol``. Centroids are returned
    sorted ascending so labels are canonical.
    """
    x = np.concatenate([np.asarray(im, dtype=np.float64).ravel() for im in images])
    if x.size == 0:
        raise ValueError("no pixels to cluster")
    if k < 1:
        raise ValueError("k must be >= 1")
    if np.unique(x).size < k:
        raise DegenerateInputError(f"only {np.unique(x).size} distinct values for k={k}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        labels = _nearest(x, centroids)
        history.append(float(np.sum((x - centroids[labels]) ** 2)))
        new = centroids.copy()
        for c in range(k):
            members = x[labels == c]
            if members.size:
                new[c] = members.mean()
        shift = np.max(np.abs(new - centroids))
        centroids = new
        if shift < tol:
            break
    history.append(float(np.sum((x - centroids[_nearest(x, centroids)]) ** 2)))
    return KMeansModel(np.sort(centroids), seed, n_iter, history)


def kmeans_assign(model, img):
    """Label each pixel with its nearest centroid (ties go to the lower index)."""
    img = np.asarray(img, dtype=np.float64)
    return _nearest(img.ravel(), model.centroids).reshape(img.shape)


def dice(pred, truth, n_classes=None):
    """Mean per-class Dice after the best relabeling of ``pred``.

    All label permutations are tried (fine for up to ~8 classes). A class
    absent from both masks scores 1. Returns ``(mean, per_class)``.
    """
    pred = np.asarray(pred).astype(np.int64)
    truth = np.asarray(truth).astype(np.int64)
    check_same_shape(pred, truth, "masks")
    k = n_classes or int(max(pred.max(), truth.max())) + 1
    if k > 8:
        raise ValueError(f"too many classes for exhaustive matching: {k}")
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (pred.ravel(), truth.ravel()), 1)
    size_pred = conf.sum(axis=1)
    size_truth = conf.sum(axis=0)
    perms = np.array(list(itertools.permutations(range(k))))  # perms[p][c] = pred label mapped to class c
    inter = conf[perms, np.arange(k)]
    denom = size_pred[perms] + size_truth[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = np.where(denom == 0, 1.0, 2.0 * inter / np.where(denom == 0, 1, denom))
    best = int(np.argmax(scores.mean(axis=1)))
    per_class = scores[best]
    return float(per_class.mean()), per_class


def binary_dice(a, b):
    """Foreground Dice ``2|A & B| / (|A| + |B|)`` of two boolean masks, no relabeling."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    check_same_shape(a, b, "masks")
    denom = int(a.sum()) + int(b.sum())
    return 1.0 if denom == 0 else 2.0 * int(np.sum(a & b)) / denom


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for data in [0, 1]; ``inf`` when identical."""
    check_same_shape(a, b)
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(a, b):
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) on data range 1."""
    check_same_shape(a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    return float(structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                       use_sample_covariance=False, K1=0.01, K2=0.03))


@dataclass
class MetricReport:
    names: list
    dice: np.ndarray
    psnr: np.ndarray
    ssim: np.ndarray

    def _stat(self, values):
        values = np.asarray(values, dtype=np.float64)
        if np.all(values == values[0]):  # also covers an all-identical (+inf PSNR) set
            return float(values[0]), 0.0
        return float(np.mean(values)), float(np.std(values))

    @property
    def dice_mean(self):
        return self._stat(self.dice)[0]

    @property
    def dice_std(self):
        return self._stat(self.dice)[1]

    @property
    def psnr_mean(self):
        return self._stat(self.psnr)[0]

    @property
    def psnr_std(self):
        return self._stat(self.psnr)[1]

    @property
    def ssim_mean(self):
        return self._stat(self.ssim)[0]

    @property
    def ssim_std(self):
        return self._stat(self.ssim)[1]

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "dice", "psnr", "ssim"])
            for row in zip(self.names, self.dice, self.psnr, self.ssim):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
            w.writerow(["summary"] + [f"{m!r}±{s!r}" for m, s in
                                      (self._stat(self.dice), self._stat(self.psnr), self._stat(self.ssim))])


def read_metric_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.DictReader(fh) if r["image"] != "summary"]
    return MetricReport([r["image"] for r in rows],
                        np.array([float(r["dice"]) for r in rows]),
                        np.array([float(r["psnr"]) for r in rows]),
                        np.array([float(r["ssim"]) for r in rows]))


def evaluate(translations, targets, segmentations, masks, names=None):
    """Per-image Dice (segmentation vs mask), PSNR and SSIM (translation vs target)."""
    names = names or [f"{i:04d}" for i in range(len(translations))]
    d = np.array([dice(s, m)[0] for s, m in zip(segmentations, masks)])
    p = np.array([psnr(x, y) for x, y in zip(translations, targets)])
    q = np.array([ssim(x, y) for x, y in zip(translations, targets)])
    return MetricReport(list(names), d, p, q)
