"""Artifact suppression: unguided reference from the same z_T, difference map, threshold mask, blend."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .codec import decode
from .diffusion import NoiseSchedule, check_compatible, make_timestep_map, sample_unguided
from .errors import ConfigError, ShapeError, StateError
from .guidance import CounterfactualResult, _target_output


@dataclass(frozen=True)
class RefineConfig:
    t_sup: float = 0.10
    # channel count the threshold was chosen for (delta is a channel sum)
    channels: int | None = None

    def __post_init__(self):
        if not np.isfinite(self.t_sup) or self.t_sup < 0:
            raise ConfigError(f"t_sup must be finite and >= 0, got {self.t_sup}")


def delta_map(x_cf, x_den) -> np.ndarray:
    """Per-voxel channel-summed absolute difference, shape ``(F, H, W)``."""
    a, b = np.asarray(x_cf, dtype=np.float32), np.asarray(x_den, dtype=np.float32)
    if a.shape != b.shape or a.ndim != 4:
        raise ShapeError(f"videos must share an (F, H, W, C) shape, got {a.shape} and {b.shape}")
    return np.abs(a - b).sum(axis=-1)


def make_mask(delta, t_sup: float) -> np.ndarray:
    if t_sup < 0:
        raise ConfigError(f"t_sup must be >= 0, got {t_sup}")
    return np.asarray(delta) > t_sup


def blend(x_f, x_cf, mask) -> np.ndarray:
    """Masked voxels from ``x_cf``, everything else from ``x_f``; selection, not arithmetic."""
    a, b, m = np.asarray(x_f), np.asarray(x_cf), np.asarray(mask, dtype=bool)
    if a.shape != b.shape or m.shape != a.shape[:-1]:
        raise ShapeError(f"shapes x_f {a.shape}, x_cf {b.shape}, mask {m.shape} are inconsistent")
    return np.where(m[..., None], b, a)


def reference_video(run: CounterfactualResult, codec, schedule: NoiseSchedule, denoiser) -> np.ndarray:
    """Decode the unguided DDIM sample started from the run's own z_T and condition."""
    if run.z_T is None:
        raise StateError("counterfactual run has no stored z_T")
    check_compatible(codec, denoiser)
    cfg = run.config
    tmap = make_timestep_map(schedule, cfg.T, cfg.noise_depth)
    z0, _ = sample_unguided(torch.from_numpy(np.asarray(run.z_T)), run.y_target, tmap, schedule, denoiser)
    with torch.no_grad():
        return decode(codec, z0).to(torch.float32).numpy()


def refine(x_f, run: CounterfactualResult, config: RefineConfig, codec, schedule: NoiseSchedule, denoiser,
           target=None, x_den=None) -> CounterfactualResult:
    """Blend ``run.x_cf`` into ``x_f`` where it departs from the unguided reference.

    Pass ``x_den`` to reuse a reference already computed for the same run.
    """
    if config.channels is not None and config.channels != np.shape(x_f)[-1]:
        raise ConfigError(f"t_sup was set for {config.channels}-channel videos, got {np.shape(x_f)[-1]} channels")
    if x_den is None:
        x_den = reference_video(run, codec, schedule, denoiser)
    delta = delta_map(run.x_cf, x_den)
    mask = make_mask(delta, config.t_sup)
    x_mask_cf = blend(x_f, run.x_cf, mask)
    return replace(
        run, x_den=x_den, delta=delta, mask=mask, x_mask_cf=x_mask_cf, t_sup=config.t_sup,
        mask_density=float(mask.mean()),
        pred_mask_cf=None if target is None else _target_output(target, x_mask_cf),
    )
