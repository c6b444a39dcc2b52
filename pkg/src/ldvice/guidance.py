"""Target-model guided DDIM: task losses, RG / SmoothGrad gradients and the generation loop."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as Fn

from .codec import as_tensor, decode, encode
from .diffusion import (NoiseSchedule, check_compatible, ddim_step, make_timestep_map, predict_noise,
                        q_sample)
from .errors import ConditionError, ConfigError, NoAlternativeError, NumericError, ShapeError, StateError
from .tensors import SeedSpec, archive_load, archive_save, gaussian_sample, validate_video

VARIANTS = ("RG", "SG", "SGA")
TASKS = ("classification", "regression")


@dataclass(frozen=True)
class GuidanceConfig:
    lambda_c: float = 55.0
    T: int = 5
    N: int = 10
    sigma: float = 0.1
    variant: str = "SG"
    task: str = "classification"
    seed: SeedSpec = SeedSpec(0)
    # training timestep z_T is noised to; None means the schedule's last step
    noise_depth: int | None = None

    def __post_init__(self):
        if self.lambda_c < 0 or not math.isfinite(self.lambda_c):
            raise ConfigError(f"lambda_c must be finite and >= 0, got {self.lambda_c}")
        if self.N < 1:
            raise ConfigError(f"N must be >= 1, got {self.N}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seed"] = {"master_seed": self.seed.master_seed, "stream_label": self.seed.stream_label}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceConfig":
        d = dict(d)
        seed = d.get("seed", 0)
        d["seed"] = SeedSpec(**seed) if isinstance(seed, dict) else SeedSpec(int(seed))
        return cls(**d)


# Values selected in the original full-scale study; desk-scale runs re-tune lambda_c.
PRESETS = {
    "regression": GuidanceConfig(lambda_c=0.15, T=15, N=10, sigma=0.1, variant="SG", task="regression"),
    "classification": GuidanceConfig(lambda_c=55.0, T=5, N=10, sigma=0.1, variant="SG", task="classification"),
}
T_SUP_PRESETS = {"regression": 0.03, "classification": 0.10}

# Toy-scale settings: partial noising to t=300, and a lower lambda_c for classification
# so the preset t_sup keeps mask density under one half.
DESK_PRESETS = {
    "regression": replace(PRESETS["regression"], noise_depth=300),
    "classification": replace(PRESETS["classification"], lambda_c=40.0, noise_depth=300),
}


def task_loss(prediction, target, task: str) -> torch.Tensor:
    """Per-sample loss: cross-entropy on logits, or squared error.

    ``prediction`` is ``(K,)`` / ``(B, K)`` logits or a scalar / ``(B,)`` values.
    Returns a 0-d tensor for unbatched input, else ``(B,)``.
    """
    pred = as_tensor(prediction)
    if task == "classification":
        single = pred.ndim == 1
        logits = pred[None] if single else pred
        k = logits.shape[-1]
        if isinstance(target, float) or not 0 <= int(target) < k:
            raise ConditionError(f"target class {target} outside 0..{k - 1}")
        y = torch.full((logits.shape[0],), int(target), dtype=torch.long)
        loss = Fn.cross_entropy(logits, y, reduction="none")
        return loss[0] if single else loss
    if task == "regression":
        if not math.isfinite(float(target)):
            raise ConditionError("regression target must be finite")
        return (pred - float(target)) ** 2
    raise ConfigError(f"unknown task {task!r}")


def _guidance(v_t, codec, target, y_target, lambda_c, noise=None):
    """Gradient of ``mean_i lambda_c * L(f(D(v_t) + noise_i), y')`` w.r.t. ``v_t``.

    ``noise=None`` is the raw-gradient case (a single unperturbed copy).
    Returns ``(grad, mean unscaled loss)``.
    """
    dtype = next(target.parameters()).dtype
    v = as_tensor(v_t).detach().requires_grad_(True)
    with torch.enable_grad():
        x = decode(codec, v).to(dtype)
        batch = x[None] if noise is None else x[None] + as_tensor(noise, dtype)
        losses = task_loss(target(batch), y_target, target.task)
        total = (lambda_c * losses).mean()
        (g,) = torch.autograd.grad(total, v)
    return g, float(losses.detach().mean())


def raw_guidance_grad(v_t, codec, target, y_target, lambda_c: float) -> torch.Tensor:
    return _guidance(v_t, codec, target, y_target, lambda_c)[0]


def _perturbations(seed: SeedSpec, N: int, shape, sigma: float) -> torch.Tensor:
    return sigma * torch.from_numpy(gaussian_sample(seed, (N, *shape)))


def smoothgrad_guidance(v_t, codec, target, y_target, lambda_c: float, N: int, sigma: float,
                        seed: SeedSpec) -> torch.Tensor:
    """Mean of N raw gradients with pixel-space noise ``N(0, sigma^2)`` added to ``D(v_t)``."""
    return _smoothgrad(v_t, codec, target, y_target, lambda_c, N, sigma, seed)[0]


def _smoothgrad(v_t, codec, target, y_target, lambda_c, N, sigma, seed):
    if N < 1 or sigma < 0:
        raise ConfigError(f"need N >= 1 and sigma >= 0, got N={N}, sigma={sigma}")
    shape = tuple(codec.video_shape(tuple(as_tensor(v_t).shape)))
    return _guidance(v_t, codec, target, y_target, lambda_c, _perturbations(seed, N, shape, sigma))


def update_coefficient(t: int, schedule: NoiseSchedule) -> float:
    ab = schedule.alpha_bar(t)
    return math.sqrt((1.0 - ab) / ab)


def apply_guidance(z_tilde_prev, grad, t: int, schedule: NoiseSchedule) -> torch.Tensor:
    """``z_{t-1} = z~_{t-1} - sqrt((1 - abar_t) / abar_t) * grad`` with abar at the current step t."""
    z, g = as_tensor(z_tilde_prev), as_tensor(grad)
    if z.shape != g.shape:
        raise ShapeError(f"latent {tuple(z.shape)} and gradient {tuple(g.shape)} differ")
    return z - update_coefficient(t, schedule) * g


@dataclass(frozen=True)
class TargetSelectConfig:
    offset: float = 20.0
    # "up", "down", or "auto" (towards the middle of the label range)
    direction: str = "auto"
    label_range: tuple[float, float] = (10.0, 90.0)


def select_target(prediction, task: str, config: TargetSelectConfig = TargetSelectConfig(), seed: SeedSpec | None = None):
    pred = np.asarray(as_tensor(prediction).detach().to(torch.float64))
    if task == "classification":
        k = pred.shape[-1]
        if k < 2:
            raise NoAlternativeError("a single-class model has no counterfactual target")
        predicted = int(np.argmax(pred))
        choices = [c for c in range(k) if c != predicted]
        if seed is None:
            raise ConfigError("classification target selection needs a seed")
        return int(choices[int(seed.generator().integers(len(choices)))])
    if task == "regression":
        value = float(pred)
        lo, hi = config.label_range
        if config.direction == "up":
            sign = 1.0
        elif config.direction == "down":
            sign = -1.0
        elif config.direction == "auto":
            sign = 1.0 if value < (lo + hi) / 2 else -1.0
        else:
            raise ConfigError(f"unknown offset direction {config.direction!r}")
        return float(min(max(value + sign * config.offset, lo), hi))
    raise ConfigError(f"unknown task {task!r}")


def predicted_label(prediction, task: str):
    p = np.asarray(prediction, dtype=np.float64)
    return int(np.argmax(p)) if task == "classification" else float(p)


@dataclass
class CounterfactualResult:
    x_f: np.ndarray
    x_cf: np.ndarray
    y_pred: np.ndarray  # target output on x_f (logits or 0-d value)
    y_target: int | float
    pred_cf: np.ndarray
    z_T: np.ndarray
    config: GuidanceConfig
    trace: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    x_mask_cf: np.ndarray | None = None
    pred_mask_cf: np.ndarray | None = None
    x_den: np.ndarray | None = None
    delta: np.ndarray | None = None
    mask: np.ndarray | None = None
    t_sup: float | None = None
    mask_density: float | None = None
    seconds: float | None = None

    @property
    def task(self):
        return self.config.task


def _target_output(target, video) -> np.ndarray:
    with torch.no_grad():
        return target.predict(video).detach().to(torch.float64).numpy()


def generate_counterfactual(x_f, y_target, config: GuidanceConfig, codec, schedule: NoiseSchedule, denoiser,
                            target) -> CounterfactualResult:
    """Guided DDIM from a partially noised encoding of ``x_f`` towards ``y_target``."""
    check_compatible(codec, denoiser)
    if getattr(target, "task", config.task) != config.task:
        raise ConfigError(f"target model task {target.task!r} != config task {config.task!r}")
    x_f = validate_video(x_f, "x_f")
    y_pred = _target_output(target, x_f)
    if config.task == "classification" and int(y_target) == predicted_label(y_pred, "classification"):
        raise ConditionError("target class equals the factual prediction")

    tmap = make_timestep_map(schedule, config.T, config.noise_depth)
    with torch.no_grad():
        z0 = encode(codec, x_f)
    eps = torch.from_numpy(gaussian_sample(config.seed.child("noise-init"), tuple(z0.shape))).to(z0.dtype)
    z = q_sample(z0, tmap.depth, eps, schedule)
    z_T = z.detach().clone()

    trace, target_evals = [], 0
    for t, t_prev in tmap.steps():
        eps_hat = predict_noise(denoiser, z, y_target, t)
        z_tilde, v = ddim_step(z, eps_hat, t, t_prev, schedule)
        if config.variant == "RG":
            grad, loss = _guidance(v, codec, target, y_target, config.lambda_c)
            target_evals += 1
        else:
            grad, loss = _smoothgrad(v, codec, target, y_target, config.lambda_c, config.N, config.sigma,
                                     config.seed.child(f"smoothgrad/{t}"))
            target_evals += config.N
        z = apply_guidance(z_tilde, grad, t, schedule).detach()
        if not torch.all(torch.isfinite(z)):
            raise NumericError("non-finite latent during guided sampling", step=t)
        trace.append({"t": t, "loss": loss, "grad_norm": float(torch.linalg.vector_norm(grad))})

    with torch.no_grad():
        x_cf = decode(codec, z).to(torch.float32).numpy()
    return CounterfactualResult(
        x_f=np.asarray(x_f, dtype=np.float32), x_cf=x_cf, y_pred=y_pred, y_target=y_target,
        pred_cf=_target_output(target, x_cf), z_T=z_T.to(torch.float32).numpy(), config=config, trace=trace,
        counters={"denoiser_calls": tmap.T, "target_grad_evals": target_evals},
    )


# -- persistence -----------------------------------------------------------------

_TENSOR_FIELDS = ("x_f", "x_cf", "z_T", "x_mask_cf", "x_den", "delta")

RESULT_SCHEMA = {
    "type": "object",
    "required": ["config", "y_pred", "y_target", "pred_cf", "trace", "counters"],
    "properties": {
        "config": {"type": "object", "required": ["lambda_c", "T", "N", "sigma", "variant", "task", "seed"]},
        "trace": {"type": "array", "items": {"type": "object", "required": ["t", "loss", "grad_norm"]}},
        "y_target": {"type": "number"},
        "mask_density": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "t_sup": {"type": ["number", "null"], "minimum": 0},
        "counters": {"type": "object"},
    },
}


def _jsonable(p):
    return None if p is None else np.asarray(p, dtype=np.float64).tolist()


def result_metadata(result: CounterfactualResult, include_timing: bool = True) -> dict:
    meta = {
        "config": result.config.to_dict(),
        "y_pred": _jsonable(result.y_pred),
        "y_target": result.y_target,
        "pred_cf": _jsonable(result.pred_cf),
        "pred_mask_cf": _jsonable(result.pred_mask_cf),
        "trace": result.trace,
        "counters": result.counters,
        "t_sup": result.t_sup,
        "mask_density": result.mask_density,
    }
    if include_timing:
        meta["seconds"] = result.seconds
    return meta


def save_result(result: CounterfactualResult, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors = {k: np.asarray(getattr(result, k), dtype=np.float32) for k in _TENSOR_FIELDS if getattr(result, k) is not None}
    if result.mask is not None:
        tensors["mask"] = np.asarray(result.mask, dtype=np.uint8)
    archive_save(tensors, d / "tensors.ldvt")
    (d / "result.json").write_text(json.dumps(result_metadata(result), indent=1, sort_keys=True))
    return d


def load_result(directory) -> CounterfactualResult:
    d = Path(directory)
    if not (d / "tensors.ldvt").exists():
        raise StateError(f"{d}: missing tensors.ldvt (z_T archive)")
    tensors = archive_load(d / "tensors.ldvt")
    meta = json.loads((d / "result.json").read_text())
    arr = lambda v: None if v is None else np.asarray(v, dtype=np.float64)
    config = GuidanceConfig.from_dict(meta["config"])
    y_target = int(meta["y_target"]) if config.task == "classification" else float(meta["y_target"])
    return CounterfactualResult(
        x_f=tensors["x_f"], x_cf=tensors["x_cf"], y_pred=arr(meta["y_pred"]), y_target=y_target,
        pred_cf=arr(meta["pred_cf"]), z_T=tensors["z_T"], config=config, trace=meta["trace"],
        counters=meta["counters"], x_mask_cf=tensors.get("x_mask_cf"), pred_mask_cf=arr(meta.get("pred_mask_cf")),
        x_den=tensors.get("x_den"), delta=tensors.get("delta"),
        mask=None if "mask" not in tensors else tensors["mask"].astype(bool),
        t_sup=meta.get("t_sup"), mask_density=meta.get("mask_density"), seconds=meta.get("seconds"),
    )


def validate_result_dir(directory) -> None:
    """Raise if a persisted result is malformed."""
    import jsonschema

    d = Path(directory)
    meta = json.loads((d / "result.json").read_text())
    jsonschema.validate(meta, RESULT_SCHEMA)
    tensors = archive_load(d / "tensors.ldvt")
    for key in ("x_f", "x_cf", "z_T"):
        if key not in tensors:
            raise StateError(f"{d}: missing tensor {key!r}")
    shapes = {k: tensors[k].shape for k in ("x_f", "x_cf", "x_mask_cf", "x_den") if k in tensors}
    if len(set(shapes.values())) != 1:
        raise ShapeError(f"{d}: video shapes differ {shapes}")
    if len(meta["trace"]) != meta["config"]["T"]:
        raise StateError(f"{d}: trace length {len(meta['trace'])} != T={meta['config']['T']}")
