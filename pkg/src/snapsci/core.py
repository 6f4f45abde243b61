"""Core domain types, deterministic random streams, and the CDT1 tensor container.

Everything the toolkit stores on disk goes through the ``CDT1`` binary tensor
format defined here, and every random draw anywhere in the pipeline flows
through :class:`RandomStream`, so equal seeds reproduce equal bytes.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

TENSOR_MAGIC = b"CDT1"
MAX_NDIM = 4

_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<u1")}


class ToolkitError(Exception):
    """Base class for all toolkit errors; exit_code drives the CLI."""

    exit_code = 1


class ConfigError(ToolkitError):
    """Invalid configuration or usage."""

    exit_code = 1


class DataError(ToolkitError):
    """Invalid or inconsistent data."""

    exit_code = 2


class FormatError(DataError):
    """Malformed on-disk artifact."""


class CalibrationError(DataError):
    """Photon calibration cannot be performed on this input."""


class NumericError(ToolkitError):
    """Non-finite or otherwise unusable numeric state."""

    exit_code = 3


def digest64(data: bytes) -> str:
    """First 64 bits of SHA-256 as 16 hex characters."""
    return hashlib.sha256(data).hexdigest()[:16]


def digest_file(path) -> str:
    return digest64(Path(path).read_bytes())


def digest_path(path) -> str:
    """Digest a file, or a directory via its sorted (relpath, file digest) pairs."""
    p = Path(path)
    if p.is_dir():
        entries = sorted(
            f"{f.relative_to(p)}:{digest_file(f)}" for f in p.rglob("*") if f.is_file()
        )
        return digest64("\n".join(entries).encode())
    return digest_file(p)


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class RandomStream:
    """Deterministic random stream keyed by (seed, label).

    The generator is Philox (counter based), keyed by a SHA-256 hash of the
    seed and label, so identical (seed, label) pairs reproduce an identical
    byte stream on every platform.  A stream is single-consumer: never share
    one instance mutably across threads; derive children instead.
    """

    seed: int
    label: str
    generator: np.random.Generator

    def child(self, sublabel: str) -> "RandomStream":
        return derive_stream(self.seed, f"{self.label}/{sublabel}")


def derive_stream(seed: int, label: str) -> RandomStream:
    """Derive an independent stream from a 64-bit seed and a nonempty label."""
    if not label:
        raise ConfigError("stream label must be nonempty")
    digest = hashlib.sha256(
        struct.pack("<q", int(seed)) + label.encode("utf-8")
    ).digest()
    key = int.from_bytes(digest[:16], "little")
    gen = np.random.Generator(np.random.Philox(key=key))
    return RandomStream(seed=int(seed), label=label, generator=gen)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VideoCube:
    """(T, H, W) float32 video with every sample in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data), dtype=np.float32)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise DataError(
                f"video cube must be (T, H, W) with positive dims, got shape {arr.shape}"
            )
        if float(arr.min()) < 0.0 or float(arr.max()) > 1.0:
            raise DataError("video cube values must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self):
        return self.data.shape


def _as_binary_u8(data, what: str) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(data))
    if arr.dtype != np.uint8:
        if not np.isin(arr, (0, 1)).all():
            raise DataError(f"{what} entries must be 0 or 1")
        arr = arr.astype(np.uint8)
    elif arr.max(initial=0) > 1:
        raise DataError(f"{what} entries must be 0 or 1")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SubMaskStack:
    """(T, m_x, m_y) binary sub-mask pattern, replicated spatially to full frames."""

    data: np.ndarray
    rho_nominal: float

    def __post_init__(self):
        arr = _as_binary_u8(self.data, "sub-mask")
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise DataError(f"sub-mask must be (T, m_x, m_y), got shape {arr.shape}")
        if not (0.0 < self.rho_nominal <= 1.0):
            raise ConfigError(f"rho_nominal must be in (0, 1], got {self.rho_nominal}")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class MaskStack:
    """(T, H, W) binary modulation masks, tiled from a sub-mask when known.

    ``source`` is None for masks loaded from disk, where the generating
    sub-mask identity is no longer available.
    """

    data: np.ndarray
    source: Optional[SubMaskStack] = None

    def __post_init__(self):
        arr = _as_binary_u8(self.data, "mask")
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise DataError(f"mask must be (T, H, W), got shape {arr.shape}")
        if self.source is not None:
            t, mx, my = self.source.shape
            _, h, w = arr.shape
            if arr.shape[0] != t:
                raise DataError(f"mask has {arr.shape[0]} frames, sub-mask has {t}")
            if h % mx or w % my:
                raise ConfigError(
                    f"frame dims ({h}, {w}) not divisible by sub-mask dims ({mx}, {my})"
                )
            if not np.array_equal(arr, np.tile(self.source.data, (1, h // mx, w // my))):
                raise DataError("mask data is not a tiling of its sub-mask")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self):
        return self.data.shape

    @property
    def mask_id(self) -> str:
        return digest64(tensor_to_bytes(self.data))


@dataclass(frozen=True)
class PhotonModel:
    """Poisson-Gaussian noise parameters for one measurement.

    ``apc`` is the target mean photon count per measurement pixel, ``alpha``
    the photon scale mapping normalized intensity to expected counts, and
    ``sigma`` the Gaussian read-noise standard deviation in normalized
    intensity units.
    """

    apc: float
    alpha: float
    sigma: float

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ConfigError(f"alpha must be finite and > 0, got {self.alpha}")
        if not (np.isfinite(self.apc) and self.apc > 0):
            raise ConfigError(f"apc must be finite and > 0, got {self.apc}")
        if not (np.isfinite(self.sigma) and self.sigma >= 0):
            raise ConfigError(f"sigma must be finite and >= 0, got {self.sigma}")


@dataclass(frozen=True)
class Measurement:
    """A single (H, W) compressive frame plus its acquisition metadata.

    ``photon`` is None for noiseless measurements.  Gaussian read noise may
    push raw values negative; the noise path clamps them to 0, so ``y`` is
    always nonnegative.
    """

    y: np.ndarray
    cr: int
    photon: Optional[PhotonModel]
    seed: int
    mask_id: str

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.y), dtype=np.float32)
        if arr.ndim != 2:
            raise DataError(f"measurement must be (H, W), got shape {arr.shape}")
        if self.cr < 1:
            raise DataError(f"cr must be >= 1, got {self.cr}")
        arr.setflags(write=False)
        object.__setattr__(self, "y", arr)

    @property
    def shape(self):
        return self.y.shape


# ---------------------------------------------------------------------------
# CDT1 tensor container
# ---------------------------------------------------------------------------


def tensor_to_bytes(tensor: np.ndarray) -> bytes:
    """Serialize a float32 or uint8 tensor (ndim 1..4) to CDT1 bytes.

    Layout: magic "CDT1", one dtype code byte (1 = real32, 2 = uint8), one
    ndim byte, ndim little-endian uint32 dims, then the row-major
    little-endian payload.
    """
    arr = np.asarray(tensor)
    if arr.dtype == np.float32:
        code, arr = 1, arr.astype("<f4", copy=False)
    elif arr.dtype == np.uint8:
        code, arr = 2, arr.astype("<u1", copy=False)
    else:
        raise ConfigError(f"unsupported tensor dtype {arr.dtype}; use float32 or uint8")
    if not 1 <= arr.ndim <= MAX_NDIM:
        raise ConfigError(f"tensor ndim must be 1..{MAX_NDIM}, got {arr.ndim}")
    header = TENSOR_MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != TENSOR_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r} at byte 0")
    if len(buf) < 6:
        raise FormatError(f"truncated header at byte {len(buf)}")
    code, ndim = buf[4], buf[5]
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"unknown dtype code {code} at byte 4")
    if not 1 <= ndim <= MAX_NDIM:
        raise FormatError(f"unsupported ndim {ndim} at byte 5")
    offset = 6
    if len(buf) < offset + 4 * ndim:
        raise FormatError(f"truncated dims at byte {len(buf)}")
    dims = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    dtype = _CODE_TO_DTYPE[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    actual = len(buf) - offset
    if actual != expected:
        raise FormatError(
            f"payload of {actual} bytes at byte {offset}, expected {expected} for dims {dims}"
        )
    return np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims, dtype=np.int64)), offset=offset).reshape(dims).copy()


def tensor_write(path, tensor: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(tensor))


def tensor_read(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
