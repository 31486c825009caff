"""Trainable score network, Adam optimizer, checkpoints and the training loop.

The network is a small UNet-style encoder/decoder evaluated with PyTorch on
CPU. Outside this module its parameters are a flat float32 vector, which is
what the optimizer updates and what checkpoints store.
"""

import csv
import io
import logging
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from .errors import ConfigurationError, FormatError, NumericalDivergenceError
from .lmi import LMIConfig
from .sde import NoiseSchedule, check_model_channels, conditioning, dsm_target

log = logging.getLogger(__name__)

ARCH_KINDS = ("unet", "pointwise")


@dataclass(frozen=True)
class ArchSpec:
    """Network architecture.

    ``unet``: ``depth`` down/up levels, ``width`` channels at the top level
    doubling per level, residual blocks with group norm and SiLU, a sinusoidal
    embedding of log sigma added in every block. Inputs are scaled by
    ``1/sqrt(sigma^2 + sigma_data^2)`` and outputs divided by sigma.

    ``pointwise``: a single 1x1 convolution over [x, cond], no time input.
    """

    kind: str = "unet"
    cond_channels: int = 3
    width: int = 16
    depth: int = 2
    time_dim: int = 32
    sigma_data: float = 0.25
    bias: bool = True
    zero_final: bool = True

    def __post_init__(self):
        if self.kind not in ARCH_KINDS:
            raise ConfigurationError(f"unknown architecture kind {self.kind!r}")
        if self.cond_channels < 0 or self.width < 1 or self.depth < 0 or self.time_dim < 2:
            raise ConfigurationError(f"invalid architecture {self}")


def _groups(ch):
    return math.gcd(ch, 8)


class _TimeEmbedding(nn.Module):
    def __init__(self, dim):
        super().__init__()
        half = dim // 2
        self.register_buffer("freqs", torch.exp(torch.linspace(0.0, math.log(100.0), half)), persistent=False)
        self.mlp = nn.Sequential(nn.Linear(2 * half, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, sigma):
        arg = torch.log(sigma)[:, None] * self.freqs[None].to(sigma.dtype)
        return self.mlp(torch.cat([torch.sin(arg), torch.cos(arg)], dim=1))


class _ResBlock(nn.Module):
    def __init__(self, cin, cout, tdim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, h, emb):
        out = self.conv1(self.act(self.norm1(h)))
        out = out + self.temb(emb)[:, :, None, None]
        out = self.conv2(self.act(self.norm2(out)))
        return self.skip(h) + out


class _UNet(nn.Module):
    def __init__(self, arch):
        super().__init__()
        self.arch = arch
        w, tdim = arch.width, arch.time_dim
        chans = [w * 2 ** level for level in range(arch.depth + 1)]
        self.embed = _TimeEmbedding(tdim)
        self.conv_in = nn.Conv2d(1 + arch.cond_channels, w, 3, padding=1)
        self.down_blocks = nn.ModuleList(_ResBlock(c, c, tdim) for c in chans[:-1])
        self.downsample = nn.ModuleList(nn.Conv2d(c, c2, 3, stride=2, padding=1)
                                        for c, c2 in zip(chans[:-1], chans[1:]))
        self.mid = _ResBlock(chans[-1], chans[-1], tdim)
        self.upsample = nn.ModuleList(nn.Conv2d(c2, c, 3, padding=1)
                                      for c, c2 in zip(chans[:-1], chans[1:]))
        self.up_blocks = nn.ModuleList(_ResBlock(2 * c, c, tdim) for c in chans[:-1])
        self.norm_out = nn.GroupNorm(_groups(w), w)
        self.conv_out = nn.Conv2d(w, 1, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, x, cond, sigma):
        s = sigma[:, None, None, None]
        h = (x[:, None] - 0.5) / torch.sqrt(s ** 2 + self.arch.sigma_data ** 2)
        if cond is not None:
            h = torch.cat([h, cond], dim=1)
        emb = self.embed(sigma)
        h = self.conv_in(h)
        skips = []
        for block, down in zip(self.down_blocks, self.downsample):
            h = block(h, emb)
            skips.append(h)
            h = down(h)
        h = self.mid(h, emb)
        for level in reversed(range(self.arch.depth)):
            h = nn.functional.interpolate(h, scale_factor=2, mode="nearest")
            h = self.upsample[level](h)
            h = self.up_blocks[level](torch.cat([h, skips[level]], dim=1), emb)
        out = self.conv_out(self.act(self.norm_out(h)))
        return out[:, 0] / s[:, 0]


class _Pointwise(nn.Module):
    def __init__(self, arch):
        super().__init__()
        self.conv = nn.Conv2d(1 + arch.cond_channels, 1, 1, bias=arch.bias)

    def forward(self, x, cond, sigma):
        h = x[:, None]
        if cond is not None:
            h = torch.cat([h, cond], dim=1)
        return self.conv(h)[:, 0]


def _build(arch, seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = _UNet(arch) if arch.kind == "unet" else _Pointwise(arch)
    if arch.zero_final:
        final = module.conv_out if arch.kind == "unet" else module.conv
        nn.init.zeros_(final.weight)
        if final.bias is not None:
            nn.init.zeros_(final.bias)
    return module.float()


class ScoreModel:
    """Score network ``s(x, cond, t)`` with a flat float32 parameter vector."""

    def __init__(self, arch=None, schedule=None, seed=0):
        self.arch = arch or ArchSpec()
        self.schedule = schedule or NoiseSchedule()
        self.module = _build(self.arch, seed)

    @property
    def cond_channels(self):
        return self.arch.cond_channels

    @property
    def n_params(self):
        return sum(p.numel() for p in self.module.parameters())

    @property
    def params(self):
        with torch.no_grad():
            return parameters_to_vector(self.module.parameters()).numpy().astype(np.float32)

    @params.setter
    def params(self, flat):
        flat = np.asarray(flat, dtype=np.float32)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        with torch.no_grad():
            vector_to_parameters(torch.from_numpy(flat.copy()), self.module.parameters())

    def _check_input(self, x, cond):
        x = np.asarray(x)
        if x.ndim != 3:
            raise ValueError(f"expected a batch (N, H, W), got shape {x.shape}")
        if self.arch.kind == "unet":
            m = 2 ** self.arch.depth
            if x.shape[1] % m or x.shape[2] % m:
                raise ConfigurationError(f"image size {x.shape[1:]} not divisible by {m}")
        expected = (x.shape[0], self.cond_channels) + x.shape[1:]
        if self.cond_channels and (cond is None or np.shape(cond) != expected):
            raise ConfigurationError(f"condition shape {np.shape(cond)} does not match {expected}")

    def _tensors(self, x, cond, t, dtype=torch.float32):
        x = torch.as_tensor(np.asarray(x), dtype=dtype)
        c = None if not self.cond_channels else torch.as_tensor(np.asarray(cond), dtype=dtype)
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        sigma = torch.as_tensor(self.schedule.sigma(tt), dtype=dtype)
        return x, c, sigma

    def forward(self, x, cond, t):
        """Network output for a batch ``x`` (N, H, W); returns float32 (N, H, W)."""
        self._check_input(x, cond)
        with torch.no_grad():
            return self.module(*self._tensors(x, cond, t)).numpy()

    def score(self, x, cond, t):
        return self.forward(x, cond, t).astype(np.float64)

    def backward(self, x, cond, t, upstream):
        """Gradient of ``sum(upstream * forward(x, cond, t))`` w.r.t. the flat params."""
        self._check_input(x, cond)
        out = self.module(*self._tensors(x, cond, t))
        up = torch.as_tensor(np.asarray(upstream), dtype=torch.float32)
        if up.shape != out.shape:
            raise ValueError(f"upstream shape {tuple(up.shape)} != output shape {tuple(out.shape)}")
        grads = torch.autograd.grad(out, list(self.module.parameters()), up, allow_unused=True)
        flat = [torch.zeros_like(p).reshape(-1) if g is None else g.reshape(-1)
                for g, p in zip(grads, self.module.parameters())]
        return torch.cat(flat).numpy().astype(np.float32)

    def float64_forward(self, params64):
        """Return ``f(x, cond, t)`` evaluated with a float64 copy at ``params64``."""
        shadow = _build(self.arch, 0).double()
        with torch.no_grad():
            vector_to_parameters(torch.as_tensor(np.asarray(params64, dtype=np.float64)),
                                 shadow.parameters())

        def f(x, cond, t):
            with torch.no_grad():
                return shadow(*self._tensors(x, cond, t, dtype=torch.float64)).numpy()
        return f


# -- optimizer --------------------------------------------------------------

@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, **hyper):
        return cls(np.zeros(n, np.float32), np.zeros(n, np.float32), **hyper)


def adam_step(state, params, grads):
    """Bias-corrected Adam update in float32; mutates ``state`` and returns new params."""
    params = np.asarray(params, dtype=np.float32)
    grads = np.asarray(grads, dtype=np.float32)
    if not (params.shape == grads.shape == state.m.shape):
        raise ValueError(f"length mismatch: params {params.shape}, grads {grads.shape}, "
                         f"state {state.m.shape}")
    state.step += 1
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    state.m = b1 * state.m + (np.float32(1) - b1) * grads
    state.v = b2 * state.v + (np.float32(1) - b2) * grads * grads
    m_hat = state.m / np.float32(1.0 - state.beta1 ** state.step)
    v_hat = state.v / np.float32(1.0 - state.beta2 ** state.step)
    return params - np.float32(state.lr) * m_hat / (np.sqrt(v_hat) + np.float32(state.eps))


# -- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"LMCK"
CKPT_VERSION = 1


def _encode_block(d):
    text = "".join(f"{k}={_fmt(v)}\n" for k, v in d.items()).encode()
    return struct.pack("<I", len(text)) + text


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "none"
    return str(v).lower() if isinstance(v, bool) else str(v)


def _parse_value(s):
    if s == "none":
        return None
    if s in ("true", "false"):
        return s == "true"
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}", len(self.data))
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def block(self, what):
        (n,) = struct.unpack("<I", self.take(4, what))
        start = self.pos
        try:
            lines = self.take(n, what).decode().splitlines()
            return {k: _parse_value(v) for k, v in (line.split("=", 1) for line in lines)}
        except (UnicodeDecodeError, ValueError):
            raise FormatError(f"malformed {what} block", start) from None

    def array(self, what):
        (n,) = struct.unpack("<Q", self.take(8, what))
        return np.frombuffer(self.take(4 * n, what), dtype="<f4").astype(np.float32)


def _build_dataclass(cls, d, offset):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise FormatError(f"unknown {cls.__name__} keys {sorted(unknown)}", offset)
    return cls(**d)


def checkpoint_bytes(model, state, lmi_cfg, train_cfg=None):
    optim = {"step": state.step, "lr": state.lr, "beta1": state.beta1,
             "beta2": state.beta2, "eps": state.eps}
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION),
             _encode_block(asdict(model.arch)), _encode_block(asdict(model.schedule)),
             _encode_block(asdict(lmi_cfg)), _encode_block(optim),
             _encode_block(asdict(train_cfg) if train_cfg is not None else {})]
    for arr in (model.params, state.m, state.v):
        parts.append(struct.pack("<Q", arr.size) + arr.astype("<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model, state, path, lmi_cfg=None, train_cfg=None):
    """Write model, optimizer state and experiment config as an ``LMCK`` file."""
    Path(path).write_bytes(checkpoint_bytes(model, state, lmi_cfg or LMIConfig(), train_cfg))


@dataclass
class Checkpoint:
    model: "ScoreModel"
    state: OptimizerState
    lmi: LMIConfig
    train: "TrainConfig"


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)", 0)
    rd = _Reader(data)
    rd.take(4, "magic")
    (version,) = struct.unpack("<I", rd.take(4, "version"))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    arch = _build_dataclass(ArchSpec, rd.block("architecture"), rd.pos)
    schedule = _build_dataclass(NoiseSchedule, rd.block("schedule"), rd.pos)
    lmi_cfg = _build_dataclass(LMIConfig, rd.block("lmi"), rd.pos)
    optim = rd.block("optimizer")
    train_block = rd.block("train")
    params, m, v = rd.array("params"), rd.array("first moment"), rd.array("second moment")
    if rd.pos != len(data):
        raise FormatError("trailing bytes after checkpoint", rd.pos)
    model = ScoreModel(arch, schedule)
    if not (params.size == m.size == v.size == model.n_params):
        raise FormatError(f"array lengths {params.size}/{m.size}/{v.size} do not match "
                          f"architecture ({model.n_params} parameters)", rd.pos)
    model.params = params
    state = OptimizerState(m=m, v=v, **optim)
    train_cfg = _build_dataclass(TrainConfig, train_block, rd.pos) if train_block else None
    return Checkpoint(model, state, lmi_cfg, train_cfg)


# -- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Training knobs.

    ``weighting='sigma2'`` multiplies each item's squared error by sigma(t)^2;
    ``'none'`` uses the plain mean. ``fixed_t`` pins the noise time (smoke tests).
    """

    iterations: int = 5000
    batch_size: int = 16
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t_eps: float = 1e-3
    weighting: str = "sigma2"
    fixed_t: float = None
    seed: int = 0

    def __post_init__(self):
        if self.weighting not in ("none", "sigma2"):
            raise ConfigurationError(f"unknown loss weighting {self.weighting!r}")
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigurationError("batch_size must be >= 1 and iterations >= 0")

    def optimizer(self, n):
        return OptimizerState.zeros(n, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


def training_batch(dataset, step, cfg, schedule):
    """Images, noise times and perturbed images for one step.

    Randomness is keyed on ``(seed, step)`` so a resumed run draws exactly
    what an uninterrupted one would.
    """
    rng = np.random.default_rng([cfg.seed, step])
    idx = rng.integers(0, len(dataset), cfg.batch_size)
    if cfg.fixed_t is not None:
        t = np.full(cfg.batch_size, float(cfg.fixed_t))
    else:
        t = rng.uniform(cfg.t_eps, 1.0, cfg.batch_size)
    x0 = dataset[idx]
    sigma = schedule.sigma(t)
    xt = x0 + sigma[:, None, None] * rng.standard_normal(x0.shape)
    return x0, t, xt


def train_step(model, state, dataset, cfg, lmi_cfg):
    """One optimizer step; returns the batch loss before the update."""
    x0, t, xt = training_batch(dataset, state.step, cfg, model.schedule)
    cond = conditioning(x0, xt, lmi_cfg, model.cond_channels)
    target = torch.as_tensor(dsm_target(x0, xt, t, model.schedule), dtype=torch.float32)
    model.module.zero_grad(set_to_none=True)
    out = model.module(*model._tensors(xt, cond, t))
    sq = (out - target) ** 2
    if cfg.weighting == "sigma2":
        sq = sq * torch.as_tensor(model.schedule.sigma(t) ** 2, dtype=torch.float32)[:, None, None]
    loss = 0.5 * sq.mean()
    loss.backward()
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NumericalDivergenceError("non-finite training loss", step=state.step)
    grads = torch.cat([p.grad.reshape(-1) for p in model.module.parameters()]).numpy()
    model.params = adam_step(state, model.params, grads)
    return value


def train(model, dataset, cfg=None, lmi_cfg=None, state=None, loss_log=None, iterations=None):
    """Minimize the conditioned score-matching objective by Adam steps.

    ``dataset`` is an (N, H, W) array of target-modality images. Training
    continues from ``state`` when given (its ``step`` counter sets the
    position in the random stream) until ``cfg.iterations`` total steps.
    ``loss_log`` is an optional path or text stream receiving ``step,loss``.
    Returns ``(state, losses)``.
    """
    cfg = cfg or TrainConfig()
    lmi_cfg = lmi_cfg or LMIConfig()
    check_model_channels(model, lmi_cfg)
    dataset = np.asarray(dataset, dtype=np.float64)
    if dataset.ndim != 3 or len(dataset) == 0:
        raise ValueError("dataset must be a non-empty (N, H, W) stack")
    model._check_input(dataset[:1], None if not model.cond_channels else
                       np.zeros((1, model.cond_channels) + dataset.shape[1:]))
    state = state or cfg.optimizer(model.n_params)
    total = cfg.iterations if iterations is None else state.step + iterations
    own = isinstance(loss_log, (str, Path))
    fh = open(loss_log, "a" if state.step else "w", newline="") if own else loss_log
    losses = []
    try:
        writer = csv.writer(fh) if fh is not None else None
        if writer is not None and state.step == 0:
            writer.writerow(["step", "loss"])
        model.module.train()
        while state.step < total:
            step = state.step
            value = train_step(model, state, dataset, cfg, lmi_cfg)
            losses.append(value)
            if writer is not None:
                writer.writerow([step, repr(value)])
            if step % 500 == 0:
                log.info("step %d loss %.5f", step, value)
    finally:
        if own:
            fh.close()
    model.module.eval()
    return state, losses
