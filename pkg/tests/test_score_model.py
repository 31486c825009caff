import io
import struct

import numpy as np
import pytest
import torch

from lmidiff.errors import ConfigurationError, FormatError
from lmidiff.lmi import LMIConfig
from lmidiff.score_model import (ArchSpec, OptimizerState, ScoreModel, TrainConfig, adam_step,
                                 checkpoint_bytes, load_checkpoint, save_checkpoint, train,
                                 training_batch)
from lmidiff.sde import NoiseSchedule
from lmidiff.verify import gradient_check, gradient_suite

SMALL = ArchSpec(width=4, depth=1, time_dim=8)


def test_default_model_output_and_init(rng):
    model = ScoreModel()
    x = rng.random((2, 32, 32))
    cond = rng.random((2, 3, 32, 32))
    out = model.forward(x, cond, np.array([0.2, 0.8]))
    assert out.shape == (2, 32, 32) and out.dtype == np.float32
    assert np.all(out == 0.0)  # zero-initialized output layer


def test_params_round_trip(rng):
    model = ScoreModel(SMALL, seed=1)
    p = rng.standard_normal(model.n_params).astype(np.float32)
    model.params = p
    assert np.array_equal(model.params, p)
    with pytest.raises(ValueError):
        model.params = p[:-1]


def test_seeded_init_is_reproducible():
    arch = ArchSpec(width=4, depth=1, zero_final=False)
    assert np.array_equal(ScoreModel(arch, seed=3).params, ScoreModel(arch, seed=3).params)
    assert not np.array_equal(ScoreModel(arch, seed=3).params, ScoreModel(arch, seed=4).params)


def test_bad_image_size_is_configuration_error(rng):
    model = ScoreModel(ArchSpec(depth=2, width=4))
    with pytest.raises(ConfigurationError):
        model.forward(rng.random((1, 30, 30)), rng.random((1, 3, 30, 30)), 0.5)
    with pytest.raises(ConfigurationError):
        model.forward(rng.random((1, 32, 32)), rng.random((1, 1, 32, 32)), 0.5)


def test_unknown_arch_kind():
    with pytest.raises(ConfigurationError):
        ArchSpec(kind="transformer")


def test_pointwise_receptive_field(rng):
    model = ScoreModel(ArchSpec(kind="pointwise", zero_final=False), seed=2)
    x = rng.random((1, 6, 6))
    cond = rng.random((1, 3, 6, 6))
    base = model.forward(x, cond, 0.5)
    x2 = x.copy()
    x2[0, 2, 3] += 1.0
    diff = model.forward(x2, cond, 0.5) != base
    assert diff.sum() == 1 and diff[0, 2, 3]


def test_backward_matches_linear_pointwise(rng):
    # 1x1 conv: output = w0 x + sum_c wc cond_c + b, so gradients are plain sums
    model = ScoreModel(ArchSpec(kind="pointwise", cond_channels=1, zero_final=False), seed=0)
    x = rng.random((2, 3, 3))
    cond = rng.random((2, 1, 3, 3))
    up = rng.standard_normal((2, 3, 3))
    g = model.backward(x, cond, 0.5, up)
    expected = [np.sum(up * x), np.sum(up * cond[:, 0]), np.sum(up)]
    assert np.allclose(g, expected, rtol=1e-5)


def test_gradient_check_small_unet(rng):
    model = ScoreModel(ArchSpec(width=4, depth=1, time_dim=8, zero_final=False), seed=5)
    x, cond = rng.random((2, 8, 8)), rng.random((2, 3, 8, 8))
    up = rng.standard_normal((2, 8, 8))
    assert gradient_check(model, x, cond, np.array([0.3, 0.9]), up) < 1e-3


def test_gradient_suite_runs():
    results = gradient_suite(n_archs=2, size=4, seed=0)
    assert len(results) == 2 and all(err < 1e-3 for _, err in results)


def test_adam_first_step_magnitude():
    state = OptimizerState.zeros(3, lr=0.1)
    p = adam_step(state, np.zeros(3, np.float32), np.array([1.0, -2.0, 0.5], np.float32))
    # bias-corrected first step moves each coordinate by ~lr against the gradient sign
    assert np.allclose(p, [-0.1, 0.1, -0.1], rtol=1e-5)
    assert state.step == 1


def test_adam_matches_torch():
    rng = np.random.default_rng(0)
    p0 = rng.standard_normal(5).astype(np.float32)
    tp = torch.nn.Parameter(torch.from_numpy(p0.copy()))
    opt = torch.optim.Adam([tp], lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
    state = OptimizerState.zeros(5, lr=1e-2)
    p = p0
    for _ in range(20):
        g = rng.standard_normal(5).astype(np.float32)
        tp.grad = torch.from_numpy(g.copy())
        opt.step()
        p = adam_step(state, p, g)
    assert np.allclose(p, tp.detach().numpy(), atol=1e-6)


def test_adam_length_mismatch():
    with pytest.raises(ValueError):
        adam_step(OptimizerState.zeros(3), np.zeros(4), np.zeros(4))


def test_one_parameter_toy_converges():
    # s(x) = w * x with data x0 ~ N(0, 1) at fixed sigma: optimal w = -1/(1 + sigma^2)
    arch = ArchSpec(kind="pointwise", cond_channels=0, bias=False, zero_final=True)
    model = ScoreModel(arch)
    assert model.n_params == 1
    data = np.random.default_rng(0).standard_normal((256, 4, 4))
    cfg = TrainConfig(iterations=1500, batch_size=32, lr=1e-2, fixed_t=1.0, weighting="none")
    train(model, data, cfg, LMIConfig(value_only=True))
    w = float(model.params[0])
    assert w == pytest.approx(-1.0 / 2.0, abs=0.05)


def _tiny_run(tmp_path, iterations):
    model = ScoreModel(SMALL, seed=0)
    data = np.random.default_rng(1).random((8, 8, 8))
    cfg = TrainConfig(iterations=iterations, batch_size=2, seed=9)
    state, losses = train(model, data, cfg, LMIConfig(levels=8, radius=1))
    return model, state, losses, cfg, data


def test_checkpoint_round_trip(tmp_path):
    model, state, _, cfg, _ = _tiny_run(tmp_path, 3)
    lmi = LMIConfig(levels=8, radius=1)
    save_checkpoint(model, state, tmp_path / "m.lmck", lmi, cfg)
    ck = load_checkpoint(tmp_path / "m.lmck")
    assert np.array_equal(ck.model.params, model.params)
    assert np.array_equal(ck.state.m, state.m) and ck.state.step == 3
    assert ck.lmi == lmi and ck.train == cfg and ck.model.arch == SMALL
    assert checkpoint_bytes(ck.model, ck.state, ck.lmi, ck.train) == (tmp_path / "m.lmck").read_bytes()


def test_resume_reproduces_uninterrupted(tmp_path):
    full, _, full_losses, cfg, data = _tiny_run(tmp_path, 4)
    model = ScoreModel(SMALL, seed=0)
    lmi = LMIConfig(levels=8, radius=1)
    state, first = train(model, data, cfg, lmi, iterations=2)
    save_checkpoint(model, state, tmp_path / "half.lmck", lmi, cfg)
    ck = load_checkpoint(tmp_path / "half.lmck")
    _, second = train(ck.model, data, cfg, lmi, state=ck.state)
    assert first + second == full_losses
    assert np.array_equal(ck.model.params, full.params)


def test_loss_log_csv(tmp_path):
    model = ScoreModel(SMALL)
    data = np.random.default_rng(1).random((4, 8, 8))
    train(model, data, TrainConfig(iterations=2, batch_size=1), LMIConfig(levels=4, radius=1),
          loss_log=tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 3


def test_training_batch_keyed_on_step():
    cfg = TrainConfig(seed=4, batch_size=3)
    data = np.random.default_rng(0).random((10, 4, 4))
    a = training_batch(data, 7, cfg, NoiseSchedule())
    b = training_batch(data, 7, cfg, NoiseSchedule())
    c = training_batch(data, 8, cfg, NoiseSchedule())
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
    assert not np.array_equal(a[2], c[2])


@pytest.mark.parametrize("mutate,offset", [
    (lambda d: b"XXXX" + d[4:], 0),
    (lambda d: d[:4] + struct.pack("<I", 9) + d[8:], 4),
    (lambda d: d[:-2], None),
    (lambda d: d + b"\0", None),
])
def test_corrupt_checkpoints(tmp_path, mutate, offset):
    model = ScoreModel(SMALL)
    good = checkpoint_bytes(model, OptimizerState.zeros(model.n_params), LMIConfig())
    (tmp_path / "bad.lmck").write_bytes(mutate(good))
    with pytest.raises(FormatError) as err:
        load_checkpoint(tmp_path / "bad.lmck")
    if offset is not None:
        assert err.value.offset == offset


def test_checkpoint_length_mismatch(tmp_path):
    model = ScoreModel(SMALL)
    other = ScoreModel(ArchSpec(width=8, depth=1, time_dim=8))
    data = checkpoint_bytes(model, OptimizerState.zeros(model.n_params), LMIConfig())
    swapped = checkpoint_bytes(other, OptimizerState.zeros(other.n_params), LMIConfig())
    # architecture header of one model, arrays of the other
    head = data[:data.index(struct.pack("<Q", model.n_params))]
    tail = swapped[swapped.index(struct.pack("<Q", other.n_params)):]
    (tmp_path / "mix.lmck").write_bytes(head + tail)
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "mix.lmck")


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(weighting="snr")
