"""Plug-in neighborhood statistics and the locale-based mutual information map.

For pixel ``i`` the LMI between a reference image and a current image is the
largest plug-in mutual information between the reference neighborhood at
``i`` and a current-image neighborhood centered anywhere within
``search_radius`` of ``i``. The map also records the offset of that best
match. All quantities are in nats.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from .image import LMIF_MAGIC, _read_lmif, extract_patch, quantize, save_image
from .errors import FormatError
from .validation import check_levels, check_same_shape

_threads = 1


def set_threads(n):
    """Cap the worker count used by :func:`lmi_map` when ``threads`` is not given."""
    global _threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = int(n)


def get_threads():
    return _threads


@dataclass(frozen=True)
class LMIConfig:
    levels: int = 16
    radius: int = 3
    search_radius: int = None
    value_only: bool = False

    def __post_init__(self):
        check_levels(self.levels)
        if self.radius < 1:
            raise ValueError("radius must be >= 1")
        if self.search_radius is None:
            object.__setattr__(self, "search_radius", self.radius)
        if self.search_radius < 0:
            raise ValueError("search_radius must be >= 0")

    @property
    def cond_channels(self):
        return 1 if self.value_only else 3


@dataclass(frozen=True)
class JointPDF:
    """Joint histogram of positionally paired labels, kept as integer counts."""

    counts: np.ndarray

    @property
    def n(self):
        return int(self.counts.sum())

    @property
    def mass(self):
        return self.counts / self.n

    def marginals(self):
        m = self.mass
        return m.sum(axis=1), m.sum(axis=0)


@dataclass
class CondMap:
    """Per-pixel best LMI value and the (drow, dcol) offset where it was found."""

    value: np.ndarray
    drow: np.ndarray
    dcol: np.ndarray
    search_radius: int

    @property
    def shape(self):
        return self.value.shape

    def channels(self, value_only=False):
        """Stack as network input: value, then offsets scaled into [-1, 1]."""
        if value_only:
            return self.value[None].astype(np.float32)
        scale = float(max(self.search_radius, 1))
        return np.stack([self.value, self.drow / scale, self.dcol / scale]).astype(np.float32)

    def save(self, path):
        """Write as one LMIF image with the three planes stacked vertically."""
        save_image(np.vstack([self.value, self.drow, self.dcol]), path, fmt="lmif")

    @classmethod
    def load(cls, path, search_radius):
        with open(path, "rb") as fh:
            data = fh.read()
        if not data.startswith(LMIF_MAGIC):
            raise FormatError("bad LMIF magic", 0)
        planes = _read_lmif(data).astype(np.float64)
        if planes.shape[0] % 3:
            raise FormatError("condition map height is not a multiple of 3", 8)
        value, drow, dcol = np.split(planes, 3)
        return cls(value, drow.astype(np.int64), dcol.astype(np.int64), search_radius)


@lru_cache(maxsize=None)
def _clnc_table(n):
    """``c * ln(c)`` for c = 0..n, with 0 ln 0 = 0."""
    c = np.arange(n + 1, dtype=np.float64)
    tab = np.zeros(n + 1)
    tab[1:] = c[1:] * np.log(c[1:])
    return tab


def histogram(patch, levels):
    """Plug-in PDF of a patch: fraction of samples carrying each label."""
    patch = np.asarray(patch).ravel()
    if patch.size == 0:
        raise ValueError("empty patch")
    return np.bincount(patch, minlength=levels)[:levels] / patch.size


def joint_histogram(a, b, levels):
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.size != b.size:
        raise ValueError(f"paired patches differ in size: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("empty patch")
    counts = np.bincount(a * levels + b, minlength=levels * levels).reshape(levels, levels)
    return JointPDF(counts)


def entropy(pdf):
    """Shannon entropy in nats with 0 ln 0 = 0."""
    p = np.asarray(pdf, dtype=np.float64).ravel()
    p = p[p > 0]
    return float(max(-np.sum(p * np.log(p)), 0.0))


def mutual_information(joint):
    """Plug-in mutual information of a joint distribution, in nats.

    A :class:`JointPDF` built by :func:`joint_histogram` is evaluated from its
    integer counts, cell by cell in ascending (row, column) order; this is the
    same arithmetic as :func:`lmi_map`. A bare probability matrix is also
    accepted.
    """
    if isinstance(joint, JointPDF):
        return _mi_from_counts(joint.counts)
    p = np.asarray(joint, dtype=np.float64)
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    nz = p > 0
    mi = np.sum(p[nz] * (np.log(p[nz]) - np.log((px * py)[nz])))
    return float(max(mi, 0.0))


def _mi_from_counts(counts):
    counts = np.asarray(counts, dtype=np.int64)
    n = int(counts.sum())
    clnc = _clnc_table(n)
    s_joint = s_ref = s_cur = 0.0
    for c in counts[counts > 0]:
        s_joint += clnc[c]
    for c in counts.sum(axis=1):
        s_ref += clnc[c]
    for c in counts.sum(axis=0):
        s_cur += clnc[c]
    total = (s_joint - s_cur) + (clnc[n] - s_ref)
    return float(max(total / n, 0.0))


def lmi_point(ref, cur, center, radius, search_radius, levels):
    """Best neighborhood MI around one pixel of two quantized images.

    Returns ``(value, (drow, dcol))``. Candidate centers must lie inside the
    image. Ties go to the smallest L1 offset, then to row-major scan order.
    """
    ref = np.asarray(ref)
    cur = np.asarray(cur)
    check_same_shape(ref, cur)
    h, w = ref.shape
    row, col = center
    a = extract_patch(ref, center, radius)
    best, best_norm, best_off = -1.0, None, (0, 0)
    for dr in range(-search_radius, search_radius + 1):
        for dc in range(-search_radius, search_radius + 1):
            r2, c2 = row + dr, col + dc
            if not (0 <= r2 < h and 0 <= c2 < w):
                continue
            value = mutual_information(joint_histogram(a, extract_patch(cur, (r2, c2), radius), levels))
            norm = abs(dr) + abs(dc)
            if value > best or (value == best and norm < best_norm):
                best, best_norm, best_off = value, norm, (dr, dc)
    return best, best_off


def lmi_map(ref, cur, cfg=None, threads=None):
    """LMI of every pixel of ``cur`` against ``ref`` as a :class:`CondMap`.

    Inputs are intensity images; they are quantized with ``cfg.levels``.
    Rows are split into blocks evaluated on a thread pool; each pixel is
    computed independently, so the result does not depend on ``threads``.
    """
    cfg = cfg or LMIConfig()
    ref = np.asarray(ref)
    cur = np.asarray(cur)
    check_same_shape(ref, cur)
    if ref.ndim != 2:
        raise ValueError(f"expected 2D images, got shape {ref.shape}")
    qref = quantize(ref, cfg.levels)
    qcur = quantize(cur, cfg.levels)
    return lmi_map_quantized(qref, qcur, cfg, threads)


def lmi_map_quantized(qref, qcur, cfg, threads=None):
    check_same_shape(qref, qcur)
    h, w = qref.shape
    r = cfg.radius
    refpad = np.pad(np.asarray(qref, dtype=np.int64), r, mode="edge")
    curpad = np.pad(np.asarray(qcur, dtype=np.int64), r, mode="edge")
    clnc = _clnc_table((2 * r + 1) ** 2)
    value = np.empty((h, w))
    drow = np.empty((h, w), dtype=np.int64)
    dcol = np.empty((h, w), dtype=np.int64)

    def run(rows):
        _kernels.lmi_rows(refpad, curpad, h, w, r, cfg.search_radius, cfg.levels, clnc,
                          rows[0], rows[1], value, drow, dcol)

    threads = min(threads or _threads, h)
    if threads <= 1:
        run((0, h))
    else:
        # a few blocks per worker evens out rows of unequal cost
        bounds = np.linspace(0, h, min(4 * threads, h) + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, zip(bounds[:-1], bounds[1:])))
    return CondMap(value, drow, dcol, cfg.search_radius)


def lmi_map_serial(ref, cur, cfg=None):
    """Reference implementation: :func:`lmi_point` called pixel by pixel."""
    cfg = cfg or LMIConfig()
    qref = quantize(ref, cfg.levels)
    qcur = quantize(cur, cfg.levels)
    h, w = qref.shape
    value = np.empty((h, w))
    drow = np.empty((h, w), dtype=np.int64)
    dcol = np.empty((h, w), dtype=np.int64)
    for i in range(h):
        for j in range(w):
            value[i, j], (drow[i, j], dcol[i, j]) = lmi_point(
                qref, qcur, (i, j), cfg.radius, cfg.search_radius, cfg.levels)
    return CondMap(value, drow, dcol, cfg.search_radius)


def neighborhood_entropy(img, levels, radius):
    """Entropy of every pixel's quantized neighborhood (the per-pixel LMI ceiling)."""
    q = quantize(img, levels)
    h, w = q.shape
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            out[i, j] = entropy(histogram(extract_patch(q, (i, j), radius), levels))
    return out
