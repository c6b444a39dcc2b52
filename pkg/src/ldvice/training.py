"""Small shared optimisation loop used by every trainable component."""

from __future__ import annotations

import copy
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import torch

from .errors import TrainingError
from .tensors import SeedSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 200
    # cosine decay to lr * final_lr_frac over the run
    final_lr_frac: float = 0.05

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def init_module(builder, seed: SeedSpec):
    """Build a module with parameters drawn from ``seed`` without touching global RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed.torch_seed())
        return builder()


def _flushing() -> bool:
    return bool(torch.tensor(1e-40, dtype=torch.float32).mul(1.0) == 0)


@contextmanager
def flush_denormal():
    """Flush subnormals to zero inside the block, then restore the process-wide setting."""
    before = _flushing()
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(before)


def fit(module: torch.nn.Module, batch_loss, cfg: TrainConfig, name: str = "model") -> list[float]:
    """Minimise ``batch_loss(step)`` with Adam; returns the loss history.

    Raises TrainingError carrying the last finite state dict if the loss
    becomes NaN/Inf.
    """
    # subnormal floats make CPU convs orders of magnitude slower once activations shrink
    with flush_denormal():
        return _fit(module, batch_loss, cfg, name)


def _fit(module, batch_loss, cfg, name):
    opt = torch.optim.Adam(module.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    last_good = copy.deepcopy(module.state_dict())
    module.train()
    for step in range(cfg.steps):
        frac = step / max(1, cfg.steps - 1)
        scale = cfg.final_lr_frac + (1 - cfg.final_lr_frac) * 0.5 * (1 + math.cos(math.pi * frac))
        for group in opt.param_groups:
            group["lr"] = cfg.lr * scale
        loss = batch_loss(step)
        value = float(loss.detach())
        if not math.isfinite(value):
            module.load_state_dict(last_good)
            raise TrainingError(f"{name}: loss became {value} at step {step}", last_state=last_good, step=step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(value)
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log.info("%s step %d loss %.5f", name, step, value)
        if cfg.log_every and step % cfg.log_every == 0:
            last_good = copy.deepcopy(module.state_dict())
    module.eval()
    return history
