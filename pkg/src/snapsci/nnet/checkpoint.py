"""CDP1 checkpoint files: model config echo, named parameter tensors in CDT1
encoding, and optional optimizer moments for exact training resumption."""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from ..core import ConfigError, FormatError, tensor_from_bytes, tensor_to_bytes
from .model import Model, ModelConfig, ParamSet

CHECKPOINT_MAGIC = b"CDP1"

_KIND_PARAM = 0
_KIND_ADAM_M = 1
_KIND_ADAM_V = 2


def save_checkpoint(path, model: Model, extra: Optional[dict] = None,
                    opt_state: Optional[dict] = None) -> None:
    """Write a model (and optionally its Adam moments) to a CDP1 file."""
    if model.dtype != np.float32:
        raise ConfigError(f"only float32 models are checkpointed, got {model.dtype}")
    header = {
        "model": model.config.to_dict(),
        "partition": dict(model.params.partition),
        "shapes": {n: list(t.shape) for n, t in model.params.tensors.items()},
        "extra": extra or {},
    }
    records = [
        (name, _KIND_PARAM, tensor) for name, tensor in model.params.tensors.items()
    ]
    if opt_state is not None:
        header["opt_step"] = int(opt_state["t"])
        for name, tensor in opt_state["m"].items():
            records.append((name, _KIND_ADAM_M, tensor))
        for name, tensor in opt_state["v"].items():
            records.append((name, _KIND_ADAM_V, tensor))
    blob = json.dumps(header, sort_keys=True).encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<I", len(blob)), blob,
           struct.pack("<I", len(records))]
    for name, kind, tensor in records:
        nb = name.encode()
        out.append(struct.pack("<HB", len(nb), kind))
        out.append(nb)
        out.append(tensor_to_bytes(np.asarray(tensor, dtype=np.float32)))
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> Tuple[Model, dict, Optional[dict]]:
    """Read a CDP1 file; returns (model, extra, opt_state or None)."""
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {bytes(buf[:4])!r} at byte 0")
    offset = 4
    (hlen,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    header = json.loads(buf[offset : offset + hlen])
    offset += hlen
    (nrec,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    cfg = ModelConfig(**header["model"])
    partition = header["partition"]
    params = ParamSet()
    moments_m: Dict[str, np.ndarray] = {}
    moments_v: Dict[str, np.ndarray] = {}
    for _ in range(nrec):
        nlen, kind = struct.unpack_from("<HB", buf, offset)
        offset += 3
        name = buf[offset : offset + nlen].decode()
        offset += nlen
        # CDT1 blobs are self-delimiting: header gives dims, dims give length
        dcode, ndim = buf[offset + 4], buf[offset + 5]
        dims = struct.unpack_from(f"<{ndim}I", buf, offset + 6)
        size = int(np.prod(dims, dtype=np.int64)) * (4 if dcode == 1 else 1)
        blob_len = 6 + 4 * ndim + size
        tensor = tensor_from_bytes(buf[offset : offset + blob_len])
        offset += blob_len
        if kind == _KIND_PARAM:
            params.add(name, tensor, partition[name])
        elif kind == _KIND_ADAM_M:
            moments_m[name] = tensor
        elif kind == _KIND_ADAM_V:
            moments_v[name] = tensor
        else:
            raise FormatError(f"unknown record kind {kind} for tensor {name!r}")
    if offset != len(buf):
        raise FormatError(f"trailing bytes at byte {offset} in checkpoint")
    opt_state = None
    if "opt_step" in header:
        opt_state = {"t": header["opt_step"], "m": moments_m, "v": moments_v}
    return Model(cfg, params), header.get("extra", {}), opt_state
