"""Tensor conventions, seeded random streams and the ``.ldvt`` archive format.

Videos are ``(F, H, W, C)`` float32 arrays in ``[0, 1]``; latents are
``(F, h, w, c_lat)`` float32 arrays. Both are plain numpy arrays at rest and
torch tensors inside the models.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArchiveVersionError, CorruptArchiveError, RangeError, ShapeError

MAGIC = b"LDVT"
FORMAT_VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODE_OF = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


@dataclass(frozen=True)
class SeedSpec:
    """Names an independent random stream: ``(master_seed, stream_label)``."""

    master_seed: int
    stream_label: str = ""

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError(f"master_seed must be a 64-bit unsigned int, got {self.master_seed}")

    def child(self, label: str) -> "SeedSpec":
        base = self.stream_label
        return SeedSpec(self.master_seed, f"{base}/{label}" if base else label)

    def key(self) -> int:
        digest = hashlib.sha256(f"{int(self.master_seed)}\x00{self.stream_label}".encode()).digest()
        return int.from_bytes(digest[:16], "little")

    def generator(self) -> np.random.Generator:
        # Philox is counter based; the hashed key selects the stream.
        return np.random.Generator(np.random.Philox(key=self.key()))

    def torch_seed(self) -> int:
        return self.key() & (2**63 - 1)


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise ShapeError(f"invalid shape {shape}: need at least one dim, all >= 1")
    return shape


def gaussian_sample(seed: SeedSpec, shape) -> np.ndarray:
    """i.i.d. standard normal float32 values, a pure function of ``(seed, shape)``."""
    shape = _check_shape(shape)
    return seed.generator().standard_normal(shape, dtype=np.float32)


def validate_video(x, name: str = "video") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4 or min(x.shape) < 1:
        raise ShapeError(f"{name} must have shape (F, H, W, C), got {x.shape}")
    if x.shape[-1] not in (1, 3):
        raise ShapeError(f"{name} must have 1 or 3 channels, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise RangeError(f"{name} contains NaN or Inf")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise RangeError(f"{name} values must lie in [0, 1], got [{x.min()}, {x.max()}]")
    return x


def validate_latent(z, name: str = "latent") -> np.ndarray:
    z = np.asarray(z)
    if z.ndim != 4:
        raise ShapeError(f"{name} must have shape (F, h, w, c), got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise RangeError(f"{name} contains NaN or Inf")
    return z


# -- archive -----------------------------------------------------------------

def encode_archive(entries: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        code = _CODE_OF.get(arr.dtype)
        if code is None:
            raise ArchiveVersionError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"entry name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
    return b"".join(parts)


def decode_archive(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CorruptArchiveError(f"truncated archive: need {n} bytes at offset {pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CorruptArchiveError("bad magic bytes")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise ArchiveVersionError(f"unsupported archive version {version}")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptArchiveError("entry name is not valid UTF-8") from exc
        code, ndim = struct.unpack("<BB", take(2))
        if code not in DTYPE_CODES:
            raise ArchiveVersionError(f"entry {name!r}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dtype = DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = take(nbytes)
        if name in entries:
            raise CorruptArchiveError(f"duplicate entry name {name!r}")
        entries[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if pos != len(view):
        raise CorruptArchiveError(f"{len(view) - pos} trailing bytes after last entry")
    return entries


def archive_save(archive: dict[str, np.ndarray], path) -> None:
    Path(path).write_bytes(encode_archive(archive))


def archive_load(path) -> dict[str, np.ndarray]:
    return decode_archive(Path(path).read_bytes())


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- frame export ------------------------------------------------------------

def quantize(x: np.ndarray) -> np.ndarray:
    """8-bit quantization with round-half-up."""
    return np.floor(np.asarray(x, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def export_frames(video, directory) -> list[Path]:
    from PIL import Image

    video = validate_video(video)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(video.shape[0] - 1)))
    paths = []
    for i, frame in enumerate(quantize(video)):
        img = Image.fromarray(frame[..., 0], mode="L") if frame.shape[-1] == 1 else Image.fromarray(frame, mode="RGB")
        path = directory / f"frame_{i:0{width}d}.png"
        img.save(path)
        paths.append(path)
    return paths
