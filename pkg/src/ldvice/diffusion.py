"""Noise schedule, forward noising, conditional noise predictor and deterministic DDIM."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .checkpoints import register, save_checkpoint
from .codec import as_tensor, encode
from .errors import CompatibilityError, ConditionError, ConfigError, OrderingError, ShapeError
from .tensors import SeedSpec
from .training import TrainConfig, fit, init_module


@dataclass(frozen=True)
class NoiseSchedule:
    betas: tuple[float, ...]

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) < 1:
            raise ConfigError("schedule needs at least one beta")
        if np.any(b < 0) or np.any(b >= 1):
            raise ConfigError("betas must lie in [0, 1)")
        object.__setattr__(self, "_alpha_bars", np.cumprod(1.0 - b))

    @property
    def T_train(self) -> int:
        return len(self.betas)

    @property
    def alpha_bars(self) -> np.ndarray:
        return self._alpha_bars

    def alpha_bar(self, t: int) -> float:
        """``alpha_bar_t`` for ``t`` in ``1..T_train``; ``alpha_bar_0 = 1``."""
        t = int(t)
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T_train:
            raise ConfigError(f"timestep {t} outside 1..{self.T_train}")
        return float(self._alpha_bars[t - 1])

    def digest(self) -> str:
        return hashlib.sha256(np.asarray(self.betas, dtype="<f8").tobytes()).hexdigest()

    def to_dict(self):
        return {"betas_sha256": self.digest(), "T_train": self.T_train}


def make_schedule(T_train: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T_train < 1:
        raise ConfigError("T_train must be >= 1")
    if not 0 < beta_min <= beta_max < 1:
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    return NoiseSchedule(tuple(np.linspace(beta_min, beta_max, T_train).tolist()))


@dataclass(frozen=True)
class TimestepMap:
    indices: tuple[int, ...]

    @property
    def T(self) -> int:
        return len(self.indices)

    @property
    def depth(self) -> int:
        return self.indices[-1]

    def steps(self):
        """Yield ``(t, t_prev)`` pairs from the noising depth down to ``t_prev = 0``."""
        prev = (0,) + self.indices[:-1]
        return list(zip(self.indices, prev))[::-1]


def make_timestep_map(schedule: NoiseSchedule, T: int, depth: int | None = None) -> TimestepMap:
    """``t_i = round(i * depth / T)`` for ``i = 1..T``; ``depth`` defaults to ``T_train``.

    A smaller ``depth`` noises only part of the way, keeping factual content in z_T.
    """
    depth = schedule.T_train if depth is None else int(depth)
    if not 1 <= depth <= schedule.T_train:
        raise ConfigError(f"noising depth {depth} outside 1..{schedule.T_train}")
    if not 1 <= T <= depth:
        raise ConfigError(f"step count T={T} outside 1..{depth}")
    # round half up, integer arithmetic
    idx = tuple((2 * i * depth + T) // (2 * T) for i in range(1, T + 1))
    return TimestepMap(idx)


def q_sample(z0, t: int, eps, schedule: NoiseSchedule) -> torch.Tensor:
    z0, eps = as_tensor(z0), as_tensor(eps)
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} differ")
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def ddim_step(z_t, eps_hat, t: int, t_prev: int, schedule: NoiseSchedule):
    """Deterministic (eta = 0) DDIM step; returns ``(z_prev, v_t)`` where v_t is the clean estimate."""
    if not t > t_prev >= 0:
        raise OrderingError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    z_t, eps_hat = as_tensor(z_t), as_tensor(eps_hat)
    if z_t.shape != eps_hat.shape:
        raise ShapeError(f"z_t {tuple(z_t.shape)} and eps_hat {tuple(eps_hat.shape)} differ")
    ab, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
    v = (z_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    if t_prev == 0:
        return v, v
    return math.sqrt(ab_prev) * v + math.sqrt(1.0 - ab_prev) * eps_hat, v


# -- noise predictors ----------------------------------------------------------

class ConditionEmbedding(nn.Module):
    """Class id -> learned vector, or scalar target -> learned affine vector."""

    def __init__(self, task: str, dim: int = 32, num_classes: int = 4, center: float = 50.0, scale: float = 25.0):
        super().__init__()
        self.task, self.dim, self.num_classes = task, dim, num_classes
        self.center, self.scale = center, scale
        if task == "classification":
            self.table = nn.Embedding(num_classes, dim)
        elif task == "regression":
            self.affine = nn.Linear(1, dim)
        else:
            raise ConfigError(f"unknown task {task!r}")

    def forward(self, cond) -> torch.Tensor:
        dtype = next(self.parameters()).dtype
        if self.task == "classification":
            ids = torch.as_tensor(cond).reshape(-1)
            if ids.is_floating_point() or ids.numel() == 0 or ids.min() < 0 or ids.max() >= self.num_classes:
                raise ConditionError(f"class ids {ids.tolist()} outside 0..{self.num_classes - 1}")
            return self.table(ids.long())
        y = torch.as_tensor(cond, dtype=dtype).reshape(-1, 1)
        if not torch.all(torch.isfinite(y)):
            raise ConditionError("regression target must be finite")
        return self.affine((y - self.center) / self.scale)


def timestep_features(t: torch.Tensor, dim: int, T_train: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = (t.to(torch.float64)[:, None] / T_train) * 1000.0 * freqs[None]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class Denoiser(nn.Module):
    """Per-frame conv noise predictor; (timestep, condition) enter as a FiLM modulation."""

    def __init__(self, latent_channels=4, hidden=64, emb_dim=32, task="classification", num_classes=4,
                 T_train=1000, cond_center=50.0, cond_scale=25.0):
        super().__init__()
        self.arch = dict(latent_channels=latent_channels, hidden=hidden, emb_dim=emb_dim, task=task,
                         num_classes=num_classes, T_train=T_train, cond_center=cond_center, cond_scale=cond_scale)
        self.T_train, self.emb_dim = T_train, emb_dim
        self.cond = ConditionEmbedding(task, emb_dim, num_classes, cond_center, cond_scale)
        self.t_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.film = nn.Sequential(nn.SiLU(), nn.Linear(emb_dim, 4 * hidden))
        self.inp = nn.Conv2d(latent_channels, hidden, 3, padding=1)
        self.mid1 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.mid2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.out = nn.Conv2d(hidden, latent_channels, 3, padding=1)
        self.act = nn.SiLU()
        self.content_hash = None
        self.codec_hash = None
        self.meta = {}

    def forward(self, z, t, cond):
        """z: (B, F, h, w, c); t: (B,) ints; cond: (B,) ids/targets."""
        B, F = z.shape[:2]
        dtype = z.dtype
        emb = self.t_mlp(timestep_features(torch.as_tensor(t).reshape(-1), self.emb_dim, self.T_train).to(dtype))
        emb = emb + self.cond(cond)
        s1, b1, s2, b2 = self.film(emb).repeat_interleave(F, dim=0)[:, :, None, None].chunk(4, dim=1)
        x = z.reshape(B * F, *z.shape[2:]).permute(0, 3, 1, 2)
        h = self.act(self.inp(x) * (1 + s1) + b1)
        h = h + self.act(self.mid1(h) * (1 + s2) + b2)
        h = h + self.act(self.mid2(h))
        e = self.out(h)
        return e.permute(0, 2, 3, 1).reshape(z.shape)

    def predict(self, z_t, cond, t):
        return self(z_t[None], torch.tensor([int(t)]), _cond_batch(cond))[0]


def _cond_batch(cond):
    if isinstance(cond, torch.Tensor):
        return cond.reshape(1)
    if isinstance(cond, (int, np.integer)):
        return torch.tensor([int(cond)])
    return torch.tensor([float(cond)], dtype=torch.float64)


@register("denoiser")
def _build_denoiser(arch):
    return Denoiser(**arch)


class OracleDenoiser:
    """Exact noise for a single-point dataset with clean latent ``z0_star``."""

    content_hash = None
    codec_hash = None

    def __init__(self, z0_star, schedule: NoiseSchedule):
        self.z0_star = as_tensor(z0_star)
        self.schedule = schedule

    def predict(self, z_t, cond, t):
        ab = self.schedule.alpha_bar(t)
        return (as_tensor(z_t) - math.sqrt(ab) * self.z0_star) / math.sqrt(1.0 - ab)


def predict_noise(denoiser, z_t, cond, t: int) -> torch.Tensor:
    z_t = as_tensor(z_t)
    if z_t.ndim != 4:
        raise ShapeError(f"z_t must be (F, h, w, c), got {tuple(z_t.shape)}")
    if isinstance(cond, (float, np.floating)) and not math.isfinite(float(cond)):
        raise ConditionError("regression target must be finite")
    with torch.no_grad():
        return denoiser.predict(z_t, cond, t)


def check_compatible(codec, denoiser):
    want = getattr(denoiser, "codec_hash", None)
    have = getattr(codec, "content_hash", None)
    if want is not None and have is not None and want != have:
        raise CompatibilityError(f"denoiser was trained on codec {want[:12]}, got codec {have[:12]}")


def sample_unguided(z_T, cond, tmap: TimestepMap, schedule: NoiseSchedule, denoiser):
    """Run DDIM from ``z_T`` to ``z_0`` without guidance; returns ``(z_0, trace)``.

    ``trace`` is a list of ``(t, z_t, v_t)`` tuples, one per step.
    """
    z = as_tensor(z_T)
    trace = []
    for t, t_prev in tmap.steps():
        eps_hat = predict_noise(denoiser, z, cond, t)
        z_next, v = ddim_step(z, eps_hat, t, t_prev, schedule)
        trace.append((t, z, v))
        z = z_next
    return z, trace


DEFAULT_DENOISER_TRAIN = TrainConfig(steps=2000, batch_size=16, lr=2e-3)


def train_denoiser(latents, conditions, schedule: NoiseSchedule, cfg: TrainConfig = DEFAULT_DENOISER_TRAIN,
                   task="classification", num_classes=4, hidden=64, emb_dim=32, fixed_t: int | None = None,
                   max_t: int | None = None, codec_hash: str | None = None):
    """Minimise ``E || eps - eps_theta(q_sample(z0, t, eps), emb(y), t) ||^2``.

    ``latents`` are pre-encoded clean latents ``(n, F, h, w, c)``. Each frame in a batch
    draws its own timestep uniformly from ``1..max_t`` (default ``T_train``) unless
    ``fixed_t`` is given.
    """
    z0 = as_tensor(latents)
    if z0.ndim == 4:
        z0 = z0[None]
    if len(z0) == 0:
        raise ValueError("empty training set")
    conds = torch.as_tensor(np.asarray(conditions))
    if len(conds) != len(z0):
        raise ShapeError("one condition per latent required")
    seed = SeedSpec(cfg.seed, "train/denoiser")
    net = init_module(lambda: Denoiser(z0.shape[-1], hidden, emb_dim, task, num_classes, schedule.T_train), seed.child("init"))
    sqrt_ab = torch.tensor(np.sqrt(schedule.alpha_bars), dtype=torch.float32)
    sqrt_1mab = torch.tensor(np.sqrt(1.0 - schedule.alpha_bars), dtype=torch.float32)
    rng = seed.child("batches").generator()
    top = schedule.T_train if max_t is None else int(max_t)
    B = min(cfg.batch_size, len(z0))

    def batch_loss(step):
        idx = torch.from_numpy(rng.integers(0, len(z0), size=B))
        x0 = z0[idx]
        t = torch.full((B,), fixed_t) if fixed_t else torch.from_numpy(rng.integers(1, top + 1, size=B))
        eps = torch.from_numpy(rng.standard_normal(x0.shape, dtype=np.float32))
        shape = (B,) + (1,) * (x0.ndim - 1)
        zt = sqrt_ab[t - 1].reshape(shape) * x0 + sqrt_1mab[t - 1].reshape(shape) * eps
        return torch.mean((net(zt, t, conds[idx]) - eps) ** 2)

    history = fit(net, batch_loss, cfg, name="denoiser")
    net.codec_hash = codec_hash
    net.meta = {"final_loss": history[-1] if history else None, "train": cfg.to_dict(),
                "schedule_sha256": schedule.digest(), "codec_sha256": codec_hash,
                "condition_vocabulary": list(range(num_classes)) if task == "classification" else "scalar"}
    return net


def noise_mse(denoiser, latents, conditions, schedule, seed: SeedSpec, max_t=None) -> float:
    """Validation noise-prediction MSE at random timesteps."""
    z0 = as_tensor(latents)
    rng = seed.generator()
    top = schedule.T_train if max_t is None else max_t
    errs = []
    with torch.no_grad():
        for i in range(len(z0)):
            t = int(rng.integers(1, top + 1))
            eps = torch.from_numpy(rng.standard_normal(tuple(z0[i].shape), dtype=np.float32))
            zt = q_sample(z0[i], t, eps, schedule)
            errs.append(float(torch.mean((denoiser.predict(zt, _cond_item(conditions[i]), t) - eps) ** 2)))
    return float(np.mean(errs))


def _cond_item(c):
    c = np.asarray(c)
    return int(c) if np.issubdtype(c.dtype, np.integer) else float(c)


def encode_all(codec, videos) -> torch.Tensor:
    with torch.no_grad():
        return torch.stack([encode(codec, v) for v in as_tensor(videos)])


def save_denoiser(net: Denoiser, path) -> str:
    meta = dict(net.meta, codec_sha256=net.codec_hash)
    return save_checkpoint(net, path, "denoiser", net.arch, meta)
