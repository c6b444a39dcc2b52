"""Latent codec: per-frame convolutional autoencoder and an identity stand-in."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .checkpoints import register, save_checkpoint
from .errors import ShapeError
from .tensors import SeedSpec
from .training import TrainConfig, fit, init_module


def as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float32)


class IdentityCodec:
    """Latent == video. Useful to test samplers and guidance independently of a codec."""

    content_hash = "identity"
    downsample = 1

    def __init__(self, channels: int | None = None):
        self.channels = channels

    def latent_shape(self, video_shape):
        return tuple(video_shape)

    def video_shape(self, latent_shape):
        return tuple(latent_shape)

    def encode(self, x):
        return x

    def decode(self, z):
        return z

    def double(self):
        return self


class ConvCodec(nn.Module):
    """Per-frame autoencoder: two stride-2 convs down to ``(H/4, W/4, 4)``, mirrored decoder."""

    def __init__(self, channels=3, hidden=32, latent_channels=4, height=32, width=32):
        super().__init__()
        if height % 4 or width % 4:
            raise ShapeError("height and width must be multiples of 4")
        self.arch = dict(channels=channels, hidden=hidden, latent_channels=latent_channels, height=height, width=width)
        self.channels, self.latent_channels = channels, latent_channels
        self.height, self.width = height, width
        h = hidden
        norm = lambda n: nn.GroupNorm(8, n)
        self.enc = nn.Sequential(
            nn.Conv2d(channels, h, 3, padding=1), norm(h), nn.SiLU(),
            nn.Conv2d(h, h, 4, stride=2, padding=1), norm(h), nn.SiLU(),
            nn.Conv2d(h, 2 * h, 4, stride=2, padding=1), norm(2 * h), nn.SiLU(),
            nn.Conv2d(2 * h, latent_channels, 3, padding=1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(latent_channels, 2 * h, 3, padding=1), norm(2 * h), nn.SiLU(),
            nn.ConvTranspose2d(2 * h, h, 4, stride=2, padding=1), norm(h), nn.SiLU(),
            nn.ConvTranspose2d(h, h, 4, stride=2, padding=1), norm(h), nn.SiLU(),
            nn.Conv2d(h, channels, 3, padding=1),
        )
        # maps raw encoder output to roughly unit-variance latents
        self.register_buffer("latent_scale", torch.ones(()))
        self.content_hash = None
        self.meta = {}

    downsample = 4

    def latent_shape(self, video_shape):
        F, H, W, C = video_shape
        return (F, H // 4, W // 4, self.latent_channels)

    def video_shape(self, latent_shape):
        F, h, w, c = latent_shape
        return (F, h * 4, w * 4, self.channels)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        # (..., F, H, W, C) -> (..., F, h, w, c)
        lead = x.shape[:-3]
        frames = x.reshape(-1, *x.shape[-3:]).permute(0, 3, 1, 2)
        z = self.enc(frames) * self.latent_scale
        return z.permute(0, 2, 3, 1).reshape(*lead, *z.shape[2:], z.shape[1])

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        lead = z.shape[:-3]
        frames = z.reshape(-1, *z.shape[-3:]).permute(0, 3, 1, 2) / self.latent_scale
        x = torch.sigmoid(self.dec(frames))
        return x.permute(0, 2, 3, 1).reshape(*lead, *x.shape[2:], x.shape[1])


@register("codec")
def _build_codec(arch):
    return ConvCodec(**arch)


def _param_dtype(codec):
    if isinstance(codec, nn.Module):
        return next(codec.parameters()).dtype
    return None


def encode(codec, video) -> torch.Tensor:
    x = as_tensor(video, _param_dtype(codec))
    if x.ndim != 4:
        raise ShapeError(f"video must be (F, H, W, C), got {tuple(x.shape)}")
    if isinstance(codec, ConvCodec) and tuple(x.shape[1:]) != (codec.height, codec.width, codec.channels):
        raise ShapeError(
            f"video dims {tuple(x.shape[1:])} do not match codec ({codec.height}, {codec.width}, {codec.channels})"
        )
    if isinstance(codec, IdentityCodec) and codec.channels not in (None, x.shape[-1]):
        raise ShapeError(f"identity codec expects {codec.channels} channels, got {x.shape[-1]}")
    return codec.encode(x)


def _check_latent(codec, z):
    if z.ndim != 4:
        raise ShapeError(f"latent must be (F, h, w, c), got {tuple(z.shape)}")
    if isinstance(codec, ConvCodec):
        expect = (codec.height // 4, codec.width // 4, codec.latent_channels)
        if tuple(z.shape[1:]) != expect:
            raise ShapeError(f"latent dims {tuple(z.shape[1:])} do not match codec {expect}")


def decode(codec, latent) -> torch.Tensor:
    z = as_tensor(latent, _param_dtype(codec))
    _check_latent(codec, z)
    return codec.decode(z)


def decode_pullback(codec, latent, cotangent) -> torch.Tensor:
    """Exact vector-Jacobian product ``J_decode(latent)^T @ cotangent``."""
    z = as_tensor(latent, _param_dtype(codec)).detach().requires_grad_(True)
    _check_latent(codec, z)
    with torch.enable_grad():
        x = codec.decode(z)
        ct = as_tensor(cotangent, x.dtype)
        if ct.shape != x.shape:
            raise ShapeError(f"cotangent shape {tuple(ct.shape)} != decoded shape {tuple(x.shape)}")
        (g,) = torch.autograd.grad(x, z, ct, allow_unused=True)
    return torch.zeros_like(z) if g is None else g


def psnr(x, y) -> float:
    mse = float(torch.mean((as_tensor(x, torch.float64) - as_tensor(y, torch.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)


DEFAULT_CODEC_TRAIN = TrainConfig(steps=1500, batch_size=48, lr=3e-3)


def train_codec(train_videos, val_videos=None, cfg: TrainConfig = DEFAULT_CODEC_TRAIN, hidden=32, latent_channels=4):
    """Fit a ConvCodec by mini-batch MSE reconstruction; ``codec.meta['val_psnr']`` is set."""
    videos = as_tensor(train_videos)
    if videos.ndim == 4:
        videos = videos[None]
    if len(videos) == 0:
        raise ValueError("empty training split")
    _, F, H, W, C = videos.shape
    seed = SeedSpec(cfg.seed, "train/codec")
    codec = init_module(lambda: ConvCodec(C, hidden, latent_channels, H, W), seed.child("init"))
    frames = videos.reshape(-1, 1, H, W, C)
    rng = seed.child("batches").generator()

    def batch_loss(step):
        idx = torch.from_numpy(rng.integers(0, len(frames), size=min(cfg.batch_size, len(frames))))
        x = frames[idx]
        return torch.mean((codec.decode(codec.encode(x)) - x) ** 2)

    history = fit(codec, batch_loss, cfg, name="codec")
    with torch.no_grad():
        codec.latent_scale.fill_(1.0)
        sample = frames[torch.from_numpy(rng.integers(0, len(frames), size=min(512, len(frames))))]
        std = float(codec.encode(sample).std())
        if math.isfinite(std) and std > 0:
            codec.latent_scale.fill_(1.0 / std)
        check = as_tensor(val_videos) if val_videos is not None else videos[: min(16, len(videos))]
        if check.ndim == 4:
            check = check[None]
        recon = codec.decode(codec.encode(check))
    codec.meta = {"val_psnr": psnr(recon, check), "final_loss": history[-1] if history else None, "train": cfg.to_dict()}
    return codec


def save_codec(codec: ConvCodec, path) -> str:
    return save_checkpoint(codec, path, "codec", codec.arch, codec.meta)
