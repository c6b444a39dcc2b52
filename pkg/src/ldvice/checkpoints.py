"""Model checkpoints: a ``.ldvt`` tensor archive plus a JSON metadata sidecar."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import CompatibilityError
from .tensors import archive_load, archive_save, file_sha256

_BUILDERS = {}


def register(kind):
    def deco(fn):
        _BUILDERS[kind] = fn
        return fn
    return deco


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".json")


def state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().to(torch.float32).numpy().copy() for k, v in module.state_dict().items()}


def save_checkpoint(module, path, kind: str, arch: dict, meta: dict | None = None) -> str:
    """Write ``path`` (.ldvt) and its sidecar; return the archive's sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    archive_save(state_arrays(module), path)
    digest = file_sha256(path)
    sidecar = {"kind": kind, "arch": arch, "meta": meta or {}, "sha256": digest}
    sidecar_path(path).write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    module.content_hash = digest
    return digest


def load_checkpoint(path, expected_hash: str | None = None):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    digest = file_sha256(path)
    if expected_hash is not None and digest != expected_hash:
        raise CompatibilityError(f"{path}: content hash {digest[:12]} != expected {expected_hash[:12]}")
    sidecar = json.loads(sidecar_path(path).read_text())
    if sidecar.get("sha256") not in (None, digest):
        raise CompatibilityError(f"{path}: archive does not match its sidecar hash")
    module = _BUILDERS[sidecar["kind"]](sidecar["arch"])
    state = {k: torch.from_numpy(v.copy()) for k, v in archive_load(path).items()}
    module.load_state_dict(state)
    module.eval()
    module.content_hash = digest
    module.meta = sidecar.get("meta", {})
    if hasattr(module, "codec_hash"):
        module.codec_hash = module.meta.get("codec_sha256")
    return module
