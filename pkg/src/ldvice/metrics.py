"""Evaluation metrics: regression accuracy, flip ratio, SSIM, feature-space perceptual and Frechet distances."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import (ConfigError, EmptyInputError, InsufficientDataError, NumericError, ShapeError,
                     UndefinedMetricError)

DEFAULT_LAYERS = ("conv1", "conv2")
C1 = (0.01 * 1.0) ** 2
C2 = (0.03 * 1.0) ** 2
EIG_TOL = 1e-6


def _pairs(targets, predictions):
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    if y.shape != p.shape:
        raise ShapeError(f"{len(y)} targets vs {len(p)} predictions")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(p))):
        raise ValueError("targets and predictions must be finite")
    return y, p


def r_squared(targets, predictions) -> float:
    y, p = _pairs(targets, predictions)
    if len(y) < 2:
        raise UndefinedMetricError("R^2 needs at least two pairs")
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise UndefinedMetricError("R^2 undefined: targets have zero variance")
    return float(1.0 - np.sum((y - p) ** 2) / ss_tot)


def mae(targets, predictions) -> float:
    y, p = _pairs(targets, predictions)
    if len(y) == 0:
        raise EmptyInputError("MAE of an empty set")
    return float(np.mean(np.abs(y - p)))


def rmse(targets, predictions) -> float:
    y, p = _pairs(targets, predictions)
    if len(y) == 0:
        raise EmptyInputError("RMSE of an empty set")
    return float(np.sqrt(np.mean((y - p) ** 2)))


def flip_ratio(predictions, targets) -> float:
    """Fraction of predicted classes equal to the requested targets."""
    p, y = np.asarray(predictions).reshape(-1), np.asarray(targets).reshape(-1)
    if p.shape != y.shape:
        raise ShapeError(f"{len(p)} predictions vs {len(y)} targets")
    if len(p) == 0:
        raise EmptyInputError("flip ratio of an empty set")
    return float(np.mean(p == y))


def _check_same(x, y):
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 4:
        raise ShapeError(f"videos must share an (F, H, W, C) shape, got {x.shape} and {y.shape}")
    return x, y


def ssim_global(x, y) -> float:
    """Whole-frame SSIM (statistics pooled over pixels and channels), averaged over frames."""
    x, y = _check_same(x, y)
    a = x.reshape(x.shape[0], -1)
    b = y.reshape(y.shape[0], -1)
    mu_a, mu_b = a.mean(1), b.mean(1)
    da, db = a - mu_a[:, None], b - mu_b[:, None]
    var_a, var_b = (da**2).mean(1), (db**2).mean(1)
    cov = (da * db).mean(1)
    s = ((2 * mu_a * mu_b + C1) * (2 * cov + C2)) / ((mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2))
    return float(s.mean())


def ssim_windowed(x, y) -> float:
    """Conventional 7x7 sliding-window SSIM per frame, averaged (not used for acceptance)."""
    from skimage.metrics import structural_similarity

    x, y = _check_same(x, y)
    return float(np.mean([structural_similarity(a, b, data_range=1.0, channel_axis=-1) for a, b in zip(x, y)]))


def ssim(x, y, windowed: bool = False) -> float:
    return ssim_windowed(x, y) if windowed else ssim_global(x, y)


def _features(target, video, layer) -> np.ndarray:
    with torch.no_grad():
        return target.features(video, layer).detach().to(torch.float64).numpy()


def perceptual_distance(x, y, target, layers=DEFAULT_LAYERS) -> float:
    """LPIPS-style distance on the target model's per-frame feature maps.

    Per layer: unit-normalise along channels, squared L2 over channels, mean over
    spatial positions; summed over layers, averaged over frames.
    """
    _check_same(x, y)
    total = 0.0
    for layer in layers:
        if layer not in ("conv1", "conv2"):
            raise ConfigError(f"perceptual distance needs a spatial layer, got {layer!r}")
        fa, fb = _features(target, x, layer), _features(target, y, layer)  # (F, ch, h, w)
        na = fa / (np.sqrt((fa**2).sum(1, keepdims=True)) + 1e-10)
        nb = fb / (np.sqrt((fb**2).sum(1, keepdims=True)) + 1e-10)
        per_frame = ((na - nb) ** 2).sum(1).mean(axis=(1, 2))
        total = total + per_frame
    return float(np.mean(total))


@dataclass(frozen=True)
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int = 0


def stats_from_vectors(vectors) -> FeatureStats:
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2 or len(v) < 2:
        raise InsufficientDataError(f"need at least 2 feature vectors, got {v.shape}")
    return FeatureStats(v.mean(0), np.atleast_2d(np.cov(v, rowvar=False, ddof=1)), len(v))


def feature_vectors(videos, target, mode: str = "per-frame") -> np.ndarray:
    if mode == "per-frame":
        return np.concatenate([_features(target, v, "frame") for v in videos])
    if mode == "temporal-pooled":
        return np.stack([_features(target, v, "pooled") for v in videos])
    raise ConfigError(f"unknown feature mode {mode!r}")


def feature_stats(videos, target, mode: str = "per-frame") -> FeatureStats:
    """Mean and unbiased covariance of per-frame (FID-like) or clip-pooled (FVD-like) features."""
    return stats_from_vectors(feature_vectors(videos, target, mode))


def _psd_eigs(m, name):
    w = np.linalg.eigvalsh(m)
    tol = EIG_TOL * max(1.0, float(np.max(np.abs(w))))
    if w.min() < -tol:
        raise NumericError(f"{name} is indefinite (min eigenvalue {w.min():.3e})")
    return np.clip(w, 0.0, None)


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the square root uses the eigenvalues of the symmetric matrix
    ``S_a^(1/2) S_b S_a^(1/2)``, which equal those of ``S_a S_b``.
    """
    mu_a, mu_b = np.atleast_1d(a.mu).astype(np.float64), np.atleast_1d(b.mu).astype(np.float64)
    sa, sb = np.atleast_2d(a.sigma).astype(np.float64), np.atleast_2d(b.sigma).astype(np.float64)
    if mu_a.shape != mu_b.shape or sa.shape != sb.shape or sa.shape != (len(mu_a), len(mu_a)):
        raise ShapeError(f"mismatched feature stats: {mu_a.shape}/{sa.shape} vs {mu_b.shape}/{sb.shape}")
    sa, sb = (sa + sa.T) / 2, (sb + sb.T) / 2
    w, V = np.linalg.eigh(sa)
    _psd_eigs(sa, "sigma_a")
    _psd_eigs(sb, "sigma_b")
    root_a = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
    m = root_a @ sb @ root_a
    tr_sqrt = np.sum(np.sqrt(_psd_eigs((m + m.T) / 2, "sigma_a sigma_b")))
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * tr_sqrt)
    return max(value, 0.0)


# -- run-set evaluation ---------------------------------------------------------------

@dataclass
class MetricsReport:
    task: str
    n: int
    per_run: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {"task": self.task, "n": self.n, "per_run": self.per_run, "aggregate": self.aggregate,
                "config": self.config}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def per_run_csv(self) -> str:
        if not self.per_run:
            return ""
        keys = sorted({k for row in self.per_run for k in row})
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(self.per_run)
        return buf.getvalue()


def _predict(target, video):
    with torch.no_grad():
        return target.predict(video).detach().to(torch.float64).numpy()


def _score_prefix(prefix, video, x_f, target, task, row):
    out = _predict(target, video)
    row[f"{prefix}prediction"] = int(np.argmax(out)) if task == "classification" else float(out)
    row[f"{prefix}ssim"] = ssim_global(x_f, video)
    row[f"{prefix}lpips"] = perceptual_distance(x_f, video, target)
    row[f"{prefix}l1"] = float(np.mean(np.abs(np.asarray(video, np.float64) - np.asarray(x_f, np.float64))))


def _aggregate(rows, prefix, task, videos, factuals, target, agg):
    targets = [r["target"] for r in rows]
    preds = [r[f"{prefix}prediction"] for r in rows]
    if task == "regression":
        agg[f"{prefix}mae"] = mae(targets, preds)
        agg[f"{prefix}rmse"] = rmse(targets, preds)
        try:
            agg[f"{prefix}r2"] = r_squared(targets, preds)
        except Exception:
            agg[f"{prefix}r2"] = None
    else:
        agg[f"{prefix}fr"] = flip_ratio(preds, targets)
        for name, mode in (("fid", "per-frame"), ("fvd", "temporal-pooled")):
            try:
                agg[f"{prefix}{name}"] = frechet_distance(feature_stats(factuals, target, mode),
                                                          feature_stats(videos, target, mode))
            except InsufficientDataError:
                agg[f"{prefix}{name}"] = None
    for key in ("ssim", "lpips", "l1"):
        agg[f"{prefix}{key}"] = float(np.mean([r[f"{prefix}{key}"] for r in rows]))


def evaluate_run_set(results, target, task: str | None = None) -> MetricsReport:
    results = list(results)
    if not results:
        raise EmptyInputError("no results to evaluate")
    tasks = {r.config.task for r in results}
    if len(tasks) != 1 or (task is not None and tasks != {task}):
        raise ConfigError(f"mixed or mismatched tasks {tasks} (expected {task})")
    task = tasks.pop()
    shapes = {np.asarray(r.x_f).shape for r in results}
    if len(shapes) != 1:
        raise ShapeError(f"results have different video shapes {shapes}")

    rows = []
    has_mask = all(r.x_mask_cf is not None for r in results)
    for i, r in enumerate(results):
        row = {"index": i, "target": r.y_target,
               "factual_prediction": int(np.argmax(r.y_pred)) if task == "classification" else float(r.y_pred)}
        _score_prefix("", r.x_cf, r.x_f, target, task, row)
        if has_mask:
            _score_prefix("mask_", r.x_mask_cf, r.x_f, target, task, row)
            row["mask_density"] = r.mask_density
        rows.append(row)

    factuals = [r.x_f for r in results]
    agg: dict = {}
    _aggregate(rows, "", task, [r.x_cf for r in results], factuals, target, agg)
    if has_mask:
        _aggregate(rows, "mask_", task, [r.x_mask_cf for r in results], factuals, target, agg)
        agg["mask_density"] = float(np.mean([r["mask_density"] for r in rows]))
    return MetricsReport(task=task, n=len(rows), per_run=rows, aggregate=agg,
                         config=results[0].config.to_dict())
