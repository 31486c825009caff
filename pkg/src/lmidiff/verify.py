"""Independent oracles and executable checks of the LMI bound and error convergence.

Nothing here reuses the estimators in :mod:`lmidiff.lmi`; the oracles are
written from raw counts so they can police that module.
"""

import copy
import csv
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import integrate

from .lmi import LMIConfig, lmi_map
from .image import extract_patch, quantize
from .sde import NoiseSchedule, perturb
from .score_model import ArchSpec, ScoreModel


def mi_bruteforce(a, b):
    """Mutual information (nats) of two paired label sequences by explicit counting."""
    a = [int(v) for v in np.ravel(a)]
    b = [int(v) for v in np.ravel(b)]
    if len(a) != len(b) or not a:
        raise ValueError("patches must be non-empty and of equal size")
    n = len(a)
    mi = 0.0
    for x in sorted(set(a)):
        cx = sum(1 for k in range(n) if a[k] == x)
        for y in sorted(set(b)):
            cy = sum(1 for k in range(n) if b[k] == y)
            cxy = sum(1 for k in range(n) if a[k] == x and b[k] == y)
            if cxy:
                mi += cxy / n * math.log(cxy * n / (cx * cy))
    return mi


def entropy_bruteforce(labels):
    labels = [int(v) for v in np.ravel(labels)]
    n = len(labels)
    return -sum(c / n * math.log(c / n) for c in Counter(labels).values())


def neighborhood_entropy_bruteforce(img, levels, radius):
    q = quantize(img, levels)
    h, w = q.shape
    return np.array([[entropy_bruteforce(extract_patch(q, (i, j), radius)) for j in range(w)]
                     for i in range(h)])


# -- score oracles ----------------------------------------------------------

def analytic_gaussian_score(x, t, mu, s0, schedule=None):
    """Score of N(mu, s0^2 + sigma(t)^2), the noised law of N(mu, s0^2) data."""
    schedule = schedule or NoiseSchedule()
    var = s0 ** 2 + np.asarray(schedule.sigma(t)) ** 2
    x = np.asarray(x, dtype=np.float64)
    if var.ndim:
        var = var.reshape((-1,) + (1,) * (x.ndim - 1))
    return -(x - mu) / var


class AnalyticGaussianModel:
    """Exact score model for pixelwise N(mu, s0^2) data; ignores conditioning."""

    cond_channels = 0

    def __init__(self, mu, s0, schedule=None):
        self.mu, self.s0 = mu, s0
        self.schedule = schedule or NoiseSchedule()

    def score(self, x, cond, t):
        return analytic_gaussian_score(x, t, self.mu, self.s0, self.schedule)


class LinearScoreModel:
    """``s(x, cond, t) = alpha(t) * cond_value + beta(t)``: exactly linear in the condition."""

    cond_channels = 1

    def __init__(self, alpha_fn, beta_fn=None, schedule=None):
        self.alpha_fn = alpha_fn
        self.beta_fn = beta_fn or (lambda t: 0.0)
        self.schedule = schedule or NoiseSchedule()

    def score(self, x, cond, t):
        t = float(np.asarray(t).ravel()[0])
        return self.alpha_fn(t) * np.asarray(cond, dtype=np.float64)[:, 0] + self.beta_fn(t)


# -- Property 1 -------------------------------------------------------------

@dataclass
class Property1Report:
    pixels_checked: int = 0
    violations: int = 0
    max_excess: float = -math.inf
    locale_rows: list = field(default_factory=list)  # (t, fraction of offset (0,0))

    @property
    def passed(self):
        return self.violations == 0

    def locale_fraction(self, t):
        for tt, frac in self.locale_rows:
            if math.isclose(tt, t):
                return frac
        raise KeyError(t)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["check", "t", "value"])
            w.writerow(["bound_pixels", "", self.pixels_checked])
            w.writerow(["bound_violations", "", self.violations])
            w.writerow(["bound_max_excess", "", repr(self.max_excess)])
            for t, frac in self.locale_rows:
                w.writerow(["locale_zero_offset_fraction", repr(t), repr(frac)])
            w.writerow(["summary", "", "PASS" if self.passed else "FAIL"])


def property1_suite(pairs=(), images=(), cfg=None, t_grid=None, seed=0, tol=1e-12):
    """Check the LMI ceiling on image pairs and measure forward-noise locality.

    For every pixel of every ``(ref, cur)`` pair the LMI must not exceed the
    entropy of the reference neighborhood (plus ``tol``). For every image in
    ``images`` and every ``t`` the fraction of pixels whose best match in
    ``lmi_map(F, perturb(F, t))`` sits at offset (0, 0) is reported.
    """
    cfg = cfg or LMIConfig()
    t_grid = [round(0.1 * i, 10) for i in range(1, 10)] if t_grid is None else t_grid
    report = Property1Report()
    for ref, cur in pairs:
        cm = lmi_map(ref, cur, cfg)
        ceiling = neighborhood_entropy_bruteforce(ref, cfg.levels, cfg.radius)
        excess = cm.value - ceiling
        report.pixels_checked += excess.size
        report.violations += int(np.count_nonzero(excess > tol))
        report.max_excess = max(report.max_excess, float(excess.max()))
    rng = np.random.default_rng(seed)
    for t in t_grid:
        hits = total = 0
        for img in images:
            cm = lmi_map(img, perturb(img, t, rng), cfg)
            hits += int(np.count_nonzero((cm.drow == 0) & (cm.dcol == 0)))
            total += cm.value.size
        if total:
            report.locale_rows.append((t, hits / total))
    return report


# -- Property 2 -------------------------------------------------------------

@dataclass
class Property2Report:
    levels: list
    errors: list
    closed_form: list
    slope: float
    intercept: float
    r_squared: float
    max_rel_closed_form: float
    r2_min: float = 0.999
    intercept_tol: float = 1e-9
    closed_form_tol: float = 1e-3

    @property
    def passed(self):
        return (self.r_squared > self.r2_min and abs(self.intercept) < self.intercept_tol
                and self.max_rel_closed_form < self.closed_form_tol)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["delta_lmi", "error", "closed_form"])
            for row in zip(self.levels, self.errors, self.closed_form):
                w.writerow([repr(float(v)) for v in row])
            w.writerow(["slope", repr(self.slope), ""])
            w.writerow(["intercept", repr(self.intercept), ""])
            w.writerow(["r_squared", repr(self.r_squared), ""])
            w.writerow(["max_rel_closed_form", repr(self.max_rel_closed_form), ""])
            w.writerow(["summary", "PASS" if self.passed else "FAIL", ""])


def drift_only_error(model, cond_train, cond_test, t_end=1.0, steps=10000, shape=(4, 4)):
    """Mean gap between two noise-free Euler-Maruyama chains that differ only in condition.

    Both chains start from the same state at s = 0 and follow
    ``x <- x - dsigma^2/ds * s(x, cond, s) * ds`` up to ``t_end``, the
    expectation of the integral form of the conditioned reverse SDE (the
    Brownian term has zero mean). Returns ``mean(x_test - x_train)``.
    """
    schedule = model.schedule
    ds = t_end / steps
    x_train = np.zeros((1,) + shape)
    x_test = np.zeros((1,) + shape)
    c_train = np.full((1, 1) + shape, cond_train)
    c_test = np.full((1, 1) + shape, cond_test)
    for k in range(steps):
        s = k * ds
        g2 = schedule.dsigma2_dt(s)
        x_train = x_train - g2 * model.score(x_train, c_train, np.array([s])) * ds
        x_test = x_test - g2 * model.score(x_test, c_test, np.array([s])) * ds
    return float(np.mean(x_test - x_train))


def property2_harness(alpha_fn=None, dlmi_levels=(1e-4, 1e-3, 1e-2, 1e-1), steps=10000,
                      schedule=None, t_end=1.0, base_lmi=0.5, beta_fn=None):
    """Error of the expected translation versus the condition gap, for a linear score.

    Fits error = slope * dLMI + intercept over ``dlmi_levels`` and compares
    each error with ``-integral_0^t dsigma^2/ds * alpha(s) ds * dLMI``.
    """
    schedule = schedule or NoiseSchedule()
    alpha_fn = alpha_fn or (lambda t: 1.0)
    beta_fn = beta_fn or (lambda t: 0.3 * math.cos(t))
    levels = [float(v) for v in dlmi_levels]
    if any(v <= 0 for v in levels) or levels != sorted(levels):
        raise ValueError("dlmi_levels must be positive and sorted")
    model = LinearScoreModel(alpha_fn, beta_fn, schedule)
    errors = [drift_only_error(model, base_lmi, base_lmi + d, t_end, steps) for d in levels]
    weight, _ = integrate.quad(lambda s: schedule.dsigma2_dt(s) * alpha_fn(s), 0.0, t_end,
                               epsabs=0.0, epsrel=1e-13, limit=200)
    closed = [-weight * d for d in levels]
    x = np.array(levels)
    y = np.array(errors)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    rel = max(abs(e - c) / abs(c) for e, c in zip(errors, closed))
    return Property2Report(levels, errors, closed, float(slope), float(intercept), float(r2), rel)


def geometric_closed_form(schedule, t_end=1.0):
    """``integral_0^t dsigma^2/ds ds = sigma(t)^2 - sigma(0)^2``."""
    return schedule.sigma(t_end) ** 2 - schedule.sigma(0.0) ** 2


# -- gradient check ---------------------------------------------------------

def gradient_check(model, x, cond, t, upstream, step=1e-3, max_coords=3000, seed=0):
    """Compare ``model.backward`` with central differences on a float64 copy.

    Uses the fourth-order central stencil with base step ``step``; the
    second-order one truncates at ~1e-3 relative on group-normalized nets.
    Coordinates are sampled (all of them when there are at most
    ``max_coords``), always including some of every parameter tensor.
    Returns the maximum relative error.
    """
    rng = np.random.default_rng(seed)
    grad = model.backward(x, cond, t, upstream).astype(np.float64)
    shadow = _float64_copy(model)
    tensors = list(shadow.parameters())
    sizes = [p.numel() for p in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = offsets[-1]
    if total <= max_coords:
        coords = np.arange(total)
    else:
        per = max(1, max_coords // len(tensors))
        coords = np.unique(np.concatenate([
            offsets[i] + rng.choice(n, min(n, per), replace=False) for i, n in enumerate(sizes)]))
    xs, cs, sig = model._tensors(x, cond, t, dtype=torch.float64)
    up = torch.as_tensor(np.asarray(upstream), dtype=torch.float64)

    def objective():
        with torch.no_grad():
            return float(torch.sum(up * shadow(xs, cs, sig)))

    fd = np.empty(len(coords))
    for n, c in enumerate(coords):
        i = int(np.searchsorted(offsets, c, side="right") - 1)
        flat = tensors[i].data.view(-1)
        j = int(c - offsets[i])
        orig = float(flat[j])
        f = {}
        for h in (step, -step, 2 * step, -2 * step):
            flat[j] = orig + h
            f[h] = objective()
        flat[j] = orig
        fd[n] = (8 * (f[step] - f[-step]) - (f[2 * step] - f[-2 * step])) / (12 * step)
    g = grad[coords]
    floor = 1e-3 * max(np.max(np.abs(fd)), 1e-12)
    rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)
    return float(rel.max())


def _float64_copy(model):
    return copy.deepcopy(model.module).double()


def random_small_arch(rng, cond_channels=3):
    return ArchSpec(kind="unet", cond_channels=cond_channels, width=int(rng.integers(2, 9)),
                    depth=int(rng.integers(1, 3)), time_dim=int(rng.choice([4, 8])),
                    zero_final=False)


def gradient_suite(n_archs=5, size=8, seed=0):
    """Max relative gradient error for ``n_archs`` random small networks."""
    rng = np.random.default_rng(seed)
    results = []
    for k in range(n_archs):
        arch = random_small_arch(rng)
        model = ScoreModel(arch, seed=int(rng.integers(1 << 31)))
        x = rng.random((2, size, size))
        cond = rng.random((2, arch.cond_channels, size, size))
        t = rng.uniform(0.05, 1.0, 2)
        upstream = rng.standard_normal((2, size, size))
        results.append((arch, gradient_check(model, x, cond, t, upstream, seed=k)))
    return results
