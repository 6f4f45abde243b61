"""Order-k exponential-Golomb coding, parameter quantization, and the
compactness metric used to compare training strategies.

The compactness metric (EGCR) is the percent reduction of the summed EG code
length of zigzagged, uniformly quantized parameters against a fixed-width
baseline.  It is a metric, not a storage format.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Tuple

import numpy as np

from .core import ConfigError, DataError, FormatError, NumericError


@dataclass(frozen=True)
class EgConfig:
    order: int = 0
    baseline_bits: int = 16

    def __post_init__(self):
        if not 0 <= self.order <= 15:
            raise ConfigError(f"EG order must be in [0, 15], got {self.order}")
        if not 2 <= self.baseline_bits <= 32:
            raise ConfigError(
                f"baseline bits must be in [2, 32], got {self.baseline_bits}"
            )


def zigzag(v: int) -> int:
    """Map a signed integer to an unsigned one: 0,-1,1,-2,2 -> 0,1,2,3,4."""
    v = int(v)
    return 2 * v if v >= 0 else -2 * v - 1


def unzigzag(u: int) -> int:
    u = int(u)
    return u // 2 if u % 2 == 0 else -(u + 1) // 2


def _zigzag_array(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.int64)
    return np.where(v >= 0, 2 * v, -2 * v - 1)


def eg_encode(n: int, k: int = 0) -> str:
    """Encode n >= 0 as an order-k exp-Golomb bitstring."""
    if n < 0:
        raise ConfigError(f"exp-Golomb input must be >= 0, got {n}")
    u, r = n >> k, n & ((1 << k) - 1)
    prefix_len = (u + 1).bit_length() - 1
    bits = "0" * prefix_len + format(u + 1, "b")
    if k:
        bits += format(r, f"0{k}b")
    return bits


def eg_decode(bits: str, k: int = 0, start: int = 0) -> Tuple[int, int]:
    """Decode one order-k code from ``bits`` at ``start``; returns (n, consumed)."""
    i = start
    while i < len(bits) and bits[i] == "0":
        i += 1
    if i >= len(bits):
        raise FormatError(f"truncated exp-Golomb prefix at bit {i}")
    zeros = i - start
    end = i + zeros + 1
    if end + k > len(bits):
        raise FormatError(f"truncated exp-Golomb payload at bit {len(bits)}")
    u = int(bits[i:end], 2) - 1
    r = int(bits[end : end + k], 2) if k else 0
    return (u << k) | r, end + k - start


def decode_stream(bits: str, k: int = 0) -> list:
    """Decode a concatenated stream of order-k codes, consuming every bit."""
    out, pos = [], 0
    while pos < len(bits):
        n, used = eg_decode(bits, k, pos)
        out.append(n)
        pos += used
    return out


def code_length(n: int, k: int = 0) -> int:
    """Bit length of eg_encode(n, k) without materializing the bits."""
    if n < 0:
        raise ConfigError(f"exp-Golomb input must be >= 0, got {n}")
    u = n >> k
    return 2 * ((u + 1).bit_length() - 1) + 1 + k


_POW2 = (2 ** np.arange(64, dtype=np.uint64)).astype(np.uint64)


def _code_length_array(n: np.ndarray, k: int) -> np.ndarray:
    """Vectorized code_length via an exact power-of-two table."""
    u = (n.astype(np.uint64) >> np.uint64(k)) + np.uint64(1)
    bitlen = np.searchsorted(_POW2, u, side="right")
    return 2 * (bitlen - 1) + 1 + k


def pack_bits(bits: str) -> bytes:
    """Pack a bitstring into bytes, most significant bit first, zero padded."""
    padded = bits + "0" * (-len(bits) % 8)
    return bytes(int(padded[i : i + 8], 2) for i in range(0, len(padded), 8))


def unpack_bits(data: bytes, nbits: int) -> str:
    bits = "".join(format(b, "08b") for b in data)
    if nbits > len(bits):
        raise FormatError(f"requested {nbits} bits from {len(bits)} available")
    return bits[:nbits]


def quantize_params(
    params: Mapping[str, np.ndarray], b: int = 16
) -> Tuple[Dict[str, np.ndarray], Dict[str, float]]:
    """Symmetric uniform quantization per tensor to b-bit signed integers.

    Delta = max|theta| / (2^(b-1) - 1), with Delta = 1 for all-zero tensors;
    q = round(theta / Delta), so |q| <= 2^(b-1) - 1.
    """
    if b < 2:
        raise ConfigError(f"quantizer bits must be >= 2, got {b}")
    qmax = 2 ** (b - 1) - 1
    q, scales = {}, {}
    for name, theta in params.items():
        theta = np.asarray(theta)
        if not np.isfinite(theta).all():
            raise NumericError(f"non-finite parameter in tensor {name!r}")
        peak = float(np.abs(theta).max()) if theta.size else 0.0
        delta = peak / qmax if peak > 0 else 1.0
        qt = np.clip(np.round(theta / delta), -qmax, qmax).astype(np.int64)
        q[name] = qt
        scales[name] = delta
    return q, scales


def egcr(params: Mapping[str, np.ndarray], cfg: EgConfig = EgConfig()) -> float:
    """Effective Golomb compression rate in percent (higher = more compact).

    (1 - sum_i code_length(zigzag(q_i), k) / (N * baseline_bits)) * 100 over
    all quantized parameters.  Can be negative for incompressible parameters.
    """
    return egcr_detail(params, cfg)["egcr_percent"]


def egcr_detail(params: Mapping[str, np.ndarray], cfg: EgConfig = EgConfig()) -> dict:
    total = sum(int(np.asarray(t).size) for t in params.values())
    if total == 0:
        raise DataError("cannot compute EGCR of an empty parameter set")
    q, _ = quantize_params(params, cfg.baseline_bits)
    bits = 0
    for qt in q.values():
        zz = _zigzag_array(qt.ravel())
        bits += int(_code_length_array(zz, cfg.order).sum())
    return {
        "egcr_percent": float((1.0 - bits / (total * cfg.baseline_bits)) * 100.0),
        "avg_bits": bits / total,
        "total_params": total,
        "order": cfg.order,
        "baseline_bits": cfg.baseline_bits,
    }
