import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ldvice.checkpoints import load_checkpoint
from ldvice.diffusion import (ConditionEmbedding, NoiseSchedule, OracleDenoiser, ddim_step, make_schedule,
                              make_timestep_map, predict_noise, q_sample, sample_unguided, save_denoiser,
                              train_denoiser)
from ldvice.errors import ConditionError, ConfigError, OrderingError, ShapeError
from ldvice.training import TrainConfig


def test_single_step_schedule():
    s = make_schedule(1, 0.1, 0.1)
    assert s.alpha_bar(1) == pytest.approx(0.9, abs=1e-15)
    assert s.alpha_bar(0) == 1.0


def test_geometric_schedule():
    s = NoiseSchedule((0.5, 0.5, 0.5))
    assert [s.alpha_bar(t) for t in (1, 2, 3)] == [0.5, 0.25, 0.125]


def test_default_schedule_matches_running_product():
    s = make_schedule()
    prod = 1.0
    for i in range(1000):
        prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / 999)
    assert s.alpha_bar(1000) == pytest.approx(prod, rel=1e-7)
    assert np.all(np.diff(s.alpha_bars) < 0)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_bad_schedules(args):
    with pytest.raises(ConfigError):
        make_schedule(*args)


def test_timestep_map_examples():
    s = make_schedule()
    assert make_timestep_map(s, 5).indices == (200, 400, 600, 800, 1000)
    assert make_timestep_map(make_schedule(20), 20).indices == tuple(range(1, 21))
    assert make_timestep_map(s, 5, depth=300).indices == (60, 120, 180, 240, 300)
    assert make_timestep_map(s, 1).steps() == [(1000, 0)]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 1200), st.data())
def test_timestep_map_strictly_increasing(T_train, data):
    T = data.draw(st.integers(1, T_train))
    idx = make_timestep_map(NoiseSchedule((0.01,) * T_train), T).indices
    assert len(idx) == T and idx[-1] == T_train and idx[0] >= 1
    assert all(a < b for a, b in zip(idx, idx[1:]))


def test_timestep_map_rejects():
    s = make_schedule(10)
    with pytest.raises(ConfigError):
        make_timestep_map(s, 11)
    with pytest.raises(ConfigError):
        make_timestep_map(s, 0)
    with pytest.raises(ConfigError):
        make_timestep_map(s, 2, depth=11)


def test_q_sample_identities():
    z0, eps = torch.randn(2, 3, 3, 2), torch.randn(2, 3, 3, 2)
    assert torch.equal(q_sample(z0, 2, eps, NoiseSchedule((0.0, 0.0))), z0)
    s = make_schedule()
    assert torch.allclose(q_sample(z0, 500, torch.zeros_like(z0), s), math.sqrt(s.alpha_bar(500)) * z0)
    with pytest.raises(ShapeError):
        q_sample(z0, 1, eps[:1], s)


def test_q_sample_unit_variance():
    g = torch.Generator().manual_seed(0)
    z0 = torch.randn(100_000, generator=g, dtype=torch.float64)
    eps = torch.randn(100_000, generator=g, dtype=torch.float64)
    v = float(q_sample(z0, 400, eps, make_schedule()).var())
    assert abs(v - 1.0) <= 0.02


def test_oracle_returns_exact_noise():
    s = make_schedule()
    z0 = torch.randn(2, 2, 2, 3, dtype=torch.float64)
    eps = torch.randn_like(z0)
    oracle = OracleDenoiser(z0, s)
    out = predict_noise(oracle, q_sample(z0, 700, eps, s), 0, 700)
    assert torch.allclose(out, eps, atol=1e-10)


def test_ddim_step_with_oracle_recovers_z0():
    s = make_schedule()
    z0 = torch.randn(2, 2, 2, 3)
    zt = q_sample(z0, 600, torch.randn_like(z0), s)
    eps_hat = OracleDenoiser(z0, s).predict(zt, 0, 600)
    z_prev, v = ddim_step(zt, eps_hat, 600, 400, s)
    assert torch.allclose(v, z0, atol=1e-5)
    z_last, v_last = ddim_step(zt, eps_hat, 600, 0, s)
    assert torch.equal(z_last, v_last)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 1000), st.data(), st.integers(0, 2**31 - 1))
def test_ddim_consistency_and_inversion(t, data, seed):
    t_prev = data.draw(st.integers(1, t - 1))
    s = make_schedule()
    g = torch.Generator().manual_seed(seed)
    zt = torch.randn(2, 2, 2, 2, dtype=torch.float64, generator=g)
    eps_hat = torch.randn(2, 2, 2, 2, dtype=torch.float64, generator=g)
    z_prev, v = ddim_step(zt, eps_hat, t, t_prev, s)
    assert torch.allclose(q_sample(v, t_prev, eps_hat, s), z_prev, atol=1e-6)
    assert torch.allclose(q_sample(v, t, eps_hat, s), zt, atol=1e-6)


def test_ddim_ordering_errors():
    s = make_schedule()
    z = torch.zeros(1, 1, 1, 1)
    for t, tp in ((5, 5), (5, 7), (3, -1)):
        with pytest.raises(OrderingError):
            ddim_step(z, z, t, tp, s)


@pytest.mark.parametrize("T", [1, 5, 15])
def test_oracle_sampling_any_T(T):
    s = make_schedule()
    # float64: at t=1000 the 1/sqrt(abar) factor (~156) amplifies float32 rounding past 1e-5
    z0 = torch.randn(2, 4, 4, 2, dtype=torch.float64)
    tmap = make_timestep_map(s, T)
    z_T = q_sample(z0, tmap.depth, torch.randn_like(z0), s)
    out, trace = sample_unguided(z_T, 0, tmap, s, OracleDenoiser(z0, s))
    assert float((out - z0).abs().max()) <= 1e-5
    assert len(trace) == T and [t for t, _, _ in trace] == sorted(tmap.indices, reverse=True)
    again, _ = sample_unguided(z_T, 0, tmap, s, OracleDenoiser(z0, s))
    assert torch.equal(out, again)


def test_condition_embedding_errors():
    emb = ConditionEmbedding("classification", 8, 3)
    with pytest.raises(ConditionError):
        emb(torch.tensor([3]))
    with pytest.raises(ConditionError):
        ConditionEmbedding("regression", 8)(torch.tensor([float("nan")]))


def _toy_latents(n=2):
    g = torch.Generator().manual_seed(1)
    return torch.randn(n, 2, 2, 2, 2, generator=g) * 0.5


def test_denoiser_zero_lr_and_determinism(tmp_path):
    s = make_schedule(100)
    z = _toy_latents()
    a = train_denoiser(z, [0, 1], s, TrainConfig(steps=2, batch_size=2, lr=0.0, log_every=0), hidden=8, emb_dim=8)
    b = train_denoiser(z, [0, 1], s, TrainConfig(steps=2, batch_size=2, lr=0.0, log_every=0), hidden=8, emb_dim=8)
    c = train_denoiser(z, [0, 1], s, TrainConfig(steps=0, log_every=0), hidden=8, emb_dim=8)
    for k in a.state_dict():
        assert torch.equal(a.state_dict()[k], c.state_dict()[k])
        assert torch.equal(a.state_dict()[k], b.state_dict()[k])
    digest = save_denoiser(a, tmp_path / "d.ldvt")
    loaded = load_checkpoint(tmp_path / "d.ldvt", digest)
    assert loaded.meta["schedule_sha256"] == s.digest()
    zt = z[0]
    assert torch.equal(predict_noise(loaded, zt, 1, 50), predict_noise(a, zt, 1, 50))


def test_denoiser_overfit_fixed_t():
    s = make_schedule()
    z = _toy_latents(1)
    net = train_denoiser(z, [0], s, TrainConfig(steps=400, batch_size=1, lr=3e-3, log_every=0), hidden=32,
                         emb_dim=16, fixed_t=500)
    # fresh noise: a memorised z0 lets the net read eps off z_t
    losses = []
    for i in range(8):
        eps = torch.randn(2, 2, 2, 2, generator=torch.Generator().manual_seed(i))
        zt = q_sample(z[0], 500, eps, s)
        losses.append(float(torch.mean((predict_noise(net, zt, 0, 500) - eps) ** 2)))
    assert np.mean(losses) <= 0.05


def test_predict_noise_pure_and_checks():
    s = make_schedule(100)
    net = train_denoiser(_toy_latents(), [0.0, 40.0], s, TrainConfig(steps=1, log_every=0), task="regression",
                         hidden=8, emb_dim=8)
    zt = _toy_latents()[0]
    assert torch.equal(predict_noise(net, zt, 30.0, 20), predict_noise(net, zt, 30.0, 20))
    with pytest.raises(ConditionError):
        predict_noise(net, zt, float("inf"), 20)
    with pytest.raises(ShapeError):
        predict_noise(net, zt[0], 30.0, 20)


@pytest.mark.slow
def test_trained_denoiser_quality(cls_setup, reg_setup):
    for cfg, (codec, s, den, _), info in (cls_setup, reg_setup):
        d = next(i for i in info if i["component"] == "denoiser")
        assert d["metrics"]["val_noise_mse"] < 1.0
    codec, s, den, _ = cls_setup[1]
    zt = torch.randn(16, 8, 8, 4, generator=torch.Generator().manual_seed(0))
    a, b = predict_noise(den, zt, 0, 300), predict_noise(den, zt, 2, 300)
    assert float(torch.linalg.norm(a - b)) > 0
