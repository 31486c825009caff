"""Variance-exploding SDE: schedule, perturbation, score-matching loss and samplers.

Time is normalized to [0, 1] and the noise level grows geometrically,
``sigma(t) = sigma_min * (sigma_max / sigma_min) ** t``.

Score models are duck-typed: anything with ``schedule``, ``cond_channels`` and
``score(x, cond, t) -> array`` works (``x`` is (N, H, W), ``cond`` is
(N, C, H, W) or ``None``, ``t`` is (N,)).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalDivergenceError
from .lmi import LMIConfig, lmi_map
from .validation import check_image_stack, check_same_shape

GUIDANCE_MODES = ("lmi", "perturb", "none")


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.01
    sigma_max: float = 1.0

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError(f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")

    @property
    def log_ratio(self):
        return math.log(self.sigma_max / self.sigma_min)

    def sigma(self, t):
        t = _check_time(t)
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** t

    def dsigma2_dt(self, t):
        return 2.0 * self.sigma(t) ** 2 * self.log_ratio


def _check_time(t):
    arr = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any((arr < 0.0) | (arr > 1.0)):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return arr if arr.ndim else float(arr)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 200
    seed: int = 0
    lmi: LMIConfig = field(default_factory=LMIConfig)
    guidance: str = "lmi"
    t_start: float = 0.5

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.guidance not in GUIDANCE_MODES:
            raise ValueError(f"guidance must be one of {GUIDANCE_MODES}, got {self.guidance!r}")
        if not 0.0 <= self.t_start <= 1.0:
            raise ValueError("t_start must lie in [0, 1]")


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _per_item(t, n):
    t = np.asarray(t, dtype=np.float64)
    return np.broadcast_to(t, (n,)) if t.ndim == 0 else t.reshape(n)


def perturb(x0, t, rng, schedule=None):
    """Draw ``x_t = x0 + sigma(t) z``. ``t`` is a scalar or one value per image."""
    schedule = schedule or NoiseSchedule()
    x0 = np.asarray(x0, dtype=np.float64)
    sigma = schedule.sigma(t)
    z = _rng(rng).standard_normal(x0.shape)
    if np.ndim(sigma):
        sigma = np.reshape(sigma, (-1,) + (1,) * (x0.ndim - 1))
    return x0 + sigma * z


def dsm_target(x0, xt, t, schedule=None):
    """Score of the Gaussian perturbation kernel: ``-(xt - x0) / sigma(t)^2``."""
    schedule = schedule or NoiseSchedule()
    check_same_shape(x0, xt)
    x0 = np.asarray(x0, dtype=np.float64)
    xt = np.asarray(xt, dtype=np.float64)
    var = np.asarray(schedule.sigma(t)) ** 2
    if var.ndim:
        var = var.reshape((-1,) + (1,) * (x0.ndim - 1))
    return -(xt - x0) / var


def check_model_channels(model, lmi_cfg):
    if model.cond_channels not in (0, lmi_cfg.cond_channels):
        raise ConfigurationError(
            f"model expects {model.cond_channels} condition channels but the LMI "
            f"configuration produces {lmi_cfg.cond_channels}")


def conditioning(refs, curs, lmi_cfg, channels):
    """LMI condition channels for a batch, shape (N, channels, H, W)."""
    if channels == 0:
        return None
    maps = [lmi_map(r, c, lmi_cfg).channels(lmi_cfg.value_only) for r, c in zip(refs, curs)]
    return np.stack(maps)


def _zero_conditioning(x, channels):
    if channels == 0:
        return None
    return np.zeros((x.shape[0], channels) + x.shape[1:], dtype=np.float32)


def dsm_loss(model, x0, t, rng, lmi_cfg=None):
    """Monte-Carlo denoising score-matching loss with LMI conditioning.

    Perturbs ``x0`` at noise time ``t``, conditions the model on
    ``lmi_map(x0, x_t)`` and returns ``0.5 * mean((s - target)^2)``.
    """
    lmi_cfg = lmi_cfg or LMIConfig()
    check_model_channels(model, lmi_cfg)
    x0 = check_image_stack(x0, "x0", unit_range=False)
    tt = _per_item(t, x0.shape[0])
    xt = perturb(x0, tt, rng, model.schedule)
    cond = conditioning(x0, xt, lmi_cfg, model.cond_channels)
    target = dsm_target(x0, xt, tt, model.schedule)
    s = np.asarray(model.score(xt, cond, tt), dtype=np.float64)
    return float(0.5 * np.mean((s - target) ** 2))


def reverse_integrate(model, x, ref, t_hi, steps, rng, lmi_cfg, guided, callback=None,
                      noise=True):
    """Euler-Maruyama integration of the reverse SDE from ``t_hi`` down to 0.

    ``x`` is the (N, H, W) state at ``t_hi``. When ``guided`` the condition is
    recomputed at every step as ``lmi_map(ref, x)``; otherwise it is zero.
    ``callback(step, x)`` is invoked after each step.
    """
    schedule = model.schedule
    n = x.shape[0]
    dt = t_hi / steps
    for k in range(steps):
        t = t_hi - k * dt
        g2 = schedule.dsigma2_dt(t)
        if guided:
            cond = conditioning(ref, x, lmi_cfg, model.cond_channels)
        else:
            cond = _zero_conditioning(x, model.cond_channels)
        s = np.asarray(model.score(x, cond, np.full(n, t)), dtype=np.float64)
        x = x + g2 * s * dt
        if noise:
            x = x + math.sqrt(g2 * dt) * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise NumericalDivergenceError("non-finite state in reverse integration", step=k)
        if callback is not None:
            callback(k, x)
    return x


def em_translate(model, source, cfg=None, callback=None):
    """Translate ``source`` by LMI-guided reverse diffusion from t = 1.

    The chain starts at ``source + sigma(1) z`` and is conditioned on
    ``lmi_map(source, x_t)`` at every step (``guidance='none'`` zeroes the
    condition). Accepts one image or a stack; output is clamped to [0, 1].
    """
    cfg = cfg or SamplerConfig()
    if cfg.steps < 1:
        raise ValueError("em_translate needs at least one step")
    if cfg.guidance == "perturb":
        return sdedit_translate(model, source, cfg, callback)
    check_model_channels(model, cfg.lmi)
    src = check_image_stack(source, "source")
    rng = np.random.default_rng(cfg.seed)
    x = src + model.schedule.sigma_max * rng.standard_normal(src.shape)
    x = reverse_integrate(model, x, src, 1.0, cfg.steps, rng, cfg.lmi,
                          guided=cfg.guidance == "lmi", callback=callback)
    out = np.clip(x, 0.0, 1.0)
    return out[0] if np.ndim(source) == 2 else out


def sdedit_translate(model, source, cfg=None, callback=None):
    """Perturbation-guided baseline: noise to ``t_start`` and denoise unconditionally."""
    cfg = cfg or SamplerConfig(guidance="perturb")
    check_model_channels(model, cfg.lmi)
    src = check_image_stack(source, "source")
    if cfg.steps == 0 or cfg.t_start == 0.0:
        out = src.copy()
    else:
        rng = np.random.default_rng(cfg.seed)
        x = src + model.schedule.sigma(cfg.t_start) * rng.standard_normal(src.shape)
        x = reverse_integrate(model, x, src, cfg.t_start, cfg.steps, rng, cfg.lmi,
                              guided=False, callback=callback)
        out = np.clip(x, 0.0, 1.0)
    return out[0] if np.ndim(source) == 2 else out
