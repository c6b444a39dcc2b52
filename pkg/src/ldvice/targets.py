"""Toy target models: small 3D-conv video classifier / regressor."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as Fn
from torch import nn

from .checkpoints import register, save_checkpoint
from .codec import as_tensor
from .errors import ConfigError, ShapeError
from .tensors import SeedSpec
from .training import TrainConfig, fit, init_module

FEATURE_LAYERS = ("conv1", "conv2", "frame", "pooled", "hidden")


class ToyVideoNet(nn.Module):
    """Temporal centring, two strided 3D convs, spatial then temporal mean pooling, one hidden dense layer.

    ``task='classification'`` -> K logits; ``task='regression'`` -> scalar
    ``center + scale * head``.
    """

    def __init__(self, task="classification", channels=3, num_classes=4, width=16, hidden=32,
                 out_center=50.0, out_scale=25.0):
        super().__init__()
        if task not in ("classification", "regression"):
            raise ConfigError(f"unknown task {task!r}")
        self.arch = dict(task=task, channels=channels, num_classes=num_classes, width=width, hidden=hidden,
                         out_center=out_center, out_scale=out_scale)
        self.task, self.channels, self.num_classes = task, channels, num_classes
        self.out_center, self.out_scale = out_center, out_scale
        self.conv1 = nn.Conv3d(channels, width, 3, stride=(1, 2, 2), padding=1)
        self.conv2 = nn.Conv3d(width, 2 * width, 3, stride=(1, 2, 2), padding=1)
        self.fc = nn.Linear(2 * width, hidden)
        self.head = nn.Linear(hidden, num_classes if task == "classification" else 1)
        self.act = nn.SiLU()
        self.content_hash = None
        self.meta = {}

    def _features(self, x):
        if x.ndim == 4:
            x = x[None]
        if x.ndim != 5 or x.shape[-1] != self.channels:
            raise ShapeError(f"expected (B, F, H, W, {self.channels}) video batch, got {tuple(x.shape)}")
        # static content (background, colour) carries no label information
        x = x - x.mean(dim=1, keepdim=True)
        h = x.permute(0, 4, 1, 2, 3)  # (B, C, F, H, W)
        c1 = self.act(self.conv1(h))
        c2 = self.act(self.conv2(c1))
        frame = c2.mean(dim=(3, 4)).transpose(1, 2)  # (B, F, ch)
        pooled = frame.mean(dim=1)
        hidden = self.act(self.fc(pooled))
        return {"conv1": c1.transpose(1, 2), "conv2": c2.transpose(1, 2), "frame": frame,
                "pooled": pooled, "hidden": hidden}

    def forward(self, x):
        out = self.head(self._features(x)["hidden"])
        if self.task == "regression":
            return self.out_center + self.out_scale * out[:, 0]
        return out

    def predict(self, video) -> torch.Tensor:
        """Logits ``(K,)`` or a 0-d regression value for a single ``(F, H, W, C)`` video."""
        x = as_tensor(video, next(self.parameters()).dtype)
        return self(x[None])[0]

    def features(self, video, layer: str) -> torch.Tensor:
        """Feature tensor for one video or a batch.

        ``conv1``/``conv2`` are per-frame maps ``(F, ch, h, w)``; ``frame`` is
        ``(F, ch)``; ``pooled`` and ``hidden`` are vectors.
        """
        if layer not in FEATURE_LAYERS:
            raise ConfigError(f"unknown feature layer {layer!r}; choose from {FEATURE_LAYERS}")
        x = as_tensor(video, next(self.parameters()).dtype)
        single = x.ndim == 4
        out = self._features(x)[layer]
        return out[0] if single else out

    def input_pullback(self, video, cotangent) -> torch.Tensor:
        x = as_tensor(video, next(self.parameters()).dtype).detach().requires_grad_(True)
        with torch.enable_grad():
            y = self(x[None])[0]
            (g,) = torch.autograd.grad(y, x, as_tensor(cotangent, y.dtype))
        return g


@register("target")
def _build_target(arch):
    return ToyVideoNet(**arch)


DEFAULT_TARGET_TRAIN = TrainConfig(steps=600, batch_size=16, lr=3e-3, weight_decay=1e-4)


def train_target(videos, labels, task: str, cfg: TrainConfig = DEFAULT_TARGET_TRAIN, num_classes=4,
                 val=None, width=16, hidden=32):
    """Cross-entropy (classification) or MSE on scaled targets (regression).

    ``val`` is an optional ``(videos, labels)`` pair; accuracy or R^2 on it goes
    to ``model.meta``.
    """
    x = as_tensor(videos)
    y = torch.as_tensor(np.asarray(labels))
    if len(x) == 0:
        raise ValueError("empty training split")
    seed = SeedSpec(cfg.seed, f"train/target/{task}")
    model = init_module(lambda: ToyVideoNet(task, x.shape[-1], num_classes, width, hidden), seed.child("init"))
    rng = seed.child("batches").generator()
    B = min(cfg.batch_size, len(x))

    def batch_loss(step):
        idx = torch.from_numpy(rng.integers(0, len(x), size=B))
        out = model(x[idx])
        if task == "classification":
            return Fn.cross_entropy(out, y[idx].long())
        return torch.mean(((out - y[idx].float()) / model.out_scale) ** 2)

    history = fit(model, batch_loss, cfg, name=f"target-{task}")
    model.meta = {"final_loss": history[-1] if history else None, "train": cfg.to_dict()}
    if val is not None:
        model.meta.update(evaluate_target(model, *val))
    return model


def predict_batch(model, videos, batch_size=32) -> torch.Tensor:
    x = as_tensor(videos, next(model.parameters()).dtype)
    with torch.no_grad():
        return torch.cat([model(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def evaluate_target(model, videos, labels) -> dict:
    out = predict_batch(model, videos)
    y = np.asarray(labels)
    if model.task == "classification":
        return {"val_accuracy": float(np.mean(out.argmax(1).numpy() == y))}
    pred = out.numpy().astype(np.float64)
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return {"val_r2": 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan"),
            "val_mae": float(np.mean(np.abs(y - pred)))}


def save_target(model: ToyVideoNet, path) -> str:
    return save_checkpoint(model, path, "target", model.arch, model.meta)
