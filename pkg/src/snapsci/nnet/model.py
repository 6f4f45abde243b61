"""The measurement-domain autoencoder: a 3D-CNN token generator, a stack of
factorized space-time encoder blocks, an interchangeable lightweight decoder,
and per-task output heads.

Each block factorizes space and time: a per-frame 3x3 spatial convolution,
then multi-head self-attention across the T temporal positions independently
at each spatial location, then a channel MLP, all prenormed residual
branches.  The final projection of every branch starts at zero, so a fresh
block is exactly the identity; this is asserted at build time.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Optional, Set

import numpy as np

from ..core import ConfigError, DataError, NumericError, RandomStream, digest64
from ..sensor import NetInput
from . import autodiff as ad

HEAD_KINDS = ("reconstruction", "edge", "depth")
PARTITIONS = ("encoder", "decoder", "head")

DEPTH_MIN = 1.0
DEPTH_MAX = 80.0


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 16
    encoder_depth: int = 4
    decoder_depth: int = 1
    heads: int = 2
    mlp_ratio: int = 2
    cr: int = 8
    height: int = 32
    width: int = 32
    head_kind: str = "reconstruction"

    def __post_init__(self):
        for name in ("channels", "encoder_depth", "heads", "mlp_ratio", "cr",
                     "height", "width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model config {name} must be >= 1")
        if self.decoder_depth < 0:
            raise ConfigError("decoder_depth must be >= 0")
        if self.channels % self.heads:
            raise ConfigError(
                f"channels ({self.channels}) must divide by heads ({self.heads})"
            )
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {HEAD_KINDS}")
        if self.decoder_depth * 2 >= self.encoder_depth:
            warnings.warn(
                f"decoder depth {self.decoder_depth} is not below half the encoder "
                f"depth {self.encoder_depth}; the design intends an asymmetric pair",
                stacklevel=2,
            )

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "encoder_depth": self.encoder_depth,
            "decoder_depth": self.decoder_depth,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
            "cr": self.cr,
            "height": self.height,
            "width": self.width,
            "head_kind": self.head_kind,
        }


@dataclass
class ParamSet:
    """Ordered named tensors partitioned into encoder / decoder / head groups."""

    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    partition: Dict[str, str] = field(default_factory=dict)

    def add(self, name: str, tensor: np.ndarray, group: str) -> None:
        if name in self.tensors:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if group not in PARTITIONS:
            raise ConfigError(f"unknown partition group {group!r}")
        self.tensors[name] = tensor
        self.partition[name] = group

    def names(self):
        return list(self.tensors)

    def group(self, tag: str):
        return [n for n, g in self.partition.items() if g == tag]

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def digest(self, names: Optional[Iterable[str]] = None) -> str:
        names = list(names) if names is not None else self.names()
        blob = b"".join(
            n.encode() + np.ascontiguousarray(self.tensors[n]).tobytes() for n in names
        )
        return digest64(blob)


def _block_names(prefix: str):
    return [
        f"{prefix}.norm1.gamma", f"{prefix}.norm1.beta",
        f"{prefix}.conv.weight", f"{prefix}.conv.bias",
        f"{prefix}.norm2.gamma", f"{prefix}.norm2.beta",
        f"{prefix}.attn.wq", f"{prefix}.attn.bq",
        f"{prefix}.attn.wk", f"{prefix}.attn.bk",
        f"{prefix}.attn.wv", f"{prefix}.attn.bv",
        f"{prefix}.attn.wo", f"{prefix}.attn.bo",
        f"{prefix}.norm3.gamma", f"{prefix}.norm3.beta",
        f"{prefix}.mlp.w1", f"{prefix}.mlp.b1",
        f"{prefix}.mlp.w2", f"{prefix}.mlp.b2",
    ]


def _xavier(shape, fan_in: int, fan_out: int, stream: RandomStream, dtype):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return stream.generator.uniform(-bound, bound, size=shape).astype(dtype)


class Model:
    """Parameter container plus forward/backward over the autodiff tape."""

    def __init__(self, config: ModelConfig, params: ParamSet, dtype=np.float32):
        self.config = config
        self.params = params
        self.dtype = np.dtype(dtype)
        self.frozen: Set[str] = set()
        self._param_nodes: Optional[Dict[str, ad.Tensor]] = None

    # -- structure ---------------------------------------------------------

    def block_prefixes(self):
        cfg = self.config
        return [f"enc{i}" for i in range(cfg.encoder_depth)] + [
            f"dec{i}" for i in range(cfg.decoder_depth)
        ]

    def trainable_names(self):
        return [
            n for n, g in self.params.partition.items() if g not in self.frozen
        ]

    def freeze(self, tags) -> None:
        """Exclude whole partition groups from optimizer updates."""
        tags = set(tags)
        unknown = tags - set(PARTITIONS)
        if unknown:
            raise ConfigError(f"unknown freeze tags {sorted(unknown)}")
        self.frozen = tags

    # -- forward / backward -------------------------------------------------

    def forward(self, inp, trace: Optional[dict] = None) -> ad.Tensor:
        """Run one (3, T, H, W) input through the network; returns (T, H, W).

        The spatial dims must match the configured size; T may differ (the
        architecture is size-agnostic along time).
        """
        if isinstance(inp, NetInput):
            data = inp.channels
        else:
            data = np.asarray(inp)
        if data.ndim != 4 or data.shape[0] != 3:
            raise DataError(f"expected (3, T, H, W) input, got shape {data.shape}")
        cfg = self.config
        if data.shape[2] != cfg.height or data.shape[3] != cfg.width:
            raise DataError(
                f"input spatial dims {data.shape[2:]} do not match configured "
                f"({cfg.height}, {cfg.width})"
            )
        # frozen groups need no gradients, so their subgraphs skip backward
        nodes = {
            n: ad.Tensor(t, requires=self.params.partition[n] not in self.frozen)
            for n, t in self.params.tensors.items()
        }
        self._param_nodes = nodes
        x = ad.constant(data, dtype=self.dtype)
        x = ad.conv3d(x, nodes["tokengen.weight"], nodes["tokengen.bias"])
        self._check_finite(x, "tokengen")
        for prefix in self.block_prefixes():
            x = self._apply_block(x, prefix, nodes, trace)
            self._check_finite(x, prefix)
        z = ad.conv3d(x, nodes["head.weight"], nodes["head.bias"])
        z = ad.reshape(z, z.shape[1:])
        self._check_finite(z, "head")
        if cfg.head_kind == "reconstruction":
            return ad.sigmoid(z)
        if cfg.head_kind == "depth":
            return ad.add_scalar(
                ad.scale(ad.sigmoid(z), DEPTH_MAX - DEPTH_MIN), DEPTH_MIN
            )
        return z

    def backward(self, loss: ad.Tensor) -> Dict[str, np.ndarray]:
        """Gradients of a scalar loss for every parameter of the last forward."""
        if self._param_nodes is None:
            raise ConfigError("backward called without a recorded forward pass")
        nodes, self._param_nodes = self._param_nodes, None
        ad.backward(loss)
        return {
            name: (node.grad if node.grad is not None
                   else np.zeros_like(node.data))
            for name, node in nodes.items()
        }

    # -- internals -----------------------------------------------------------

    @staticmethod
    def _check_finite(x: ad.Tensor, layer: str) -> None:
        if not np.isfinite(x.data).all():
            raise NumericError(f"non-finite activation after layer {layer!r}")

    def _apply_block(self, x, prefix, nodes, trace=None):
        p = lambda s: nodes[f"{prefix}.{s}"]
        h = ad.layernorm(x, p("norm1.gamma"), p("norm1.beta"), axis=0)
        h = ad.conv3d(h, p("conv.weight"), p("conv.bias"))
        x = ad.add(x, h)
        h = ad.layernorm(x, p("norm2.gamma"), p("norm2.beta"), axis=0)
        h = self._attention(h, prefix, nodes, trace)
        x = ad.add(x, h)
        h = ad.layernorm(x, p("norm3.gamma"), p("norm3.beta"), axis=0)
        h = self._mlp(h, prefix, nodes)
        return ad.add(x, h)

    def _attention(self, h, prefix, nodes, trace=None):
        """Self-attention across the T frames, independent per spatial site."""
        p = lambda s: nodes[f"{prefix}.attn.{s}"]
        c, t, hh, ww = h.shape
        nh = self.config.heads
        d = c // nh
        hs = ad.transpose(ad.reshape(h, (c, t, hh * ww)), (2, 1, 0))  # (S, T, C)
        def heads_of(w, b):
            y = ad.add(ad.matmul(hs, p(w)), p(b))
            return ad.transpose(ad.reshape(y, (hh * ww, t, nh, d)), (0, 2, 1, 3))
        q = heads_of("wq", "bq")
        k = heads_of("wk", "bk")
        v = heads_of("wv", "bv")
        att = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
        att = ad.softmax(att)
        if trace is not None:
            trace.setdefault("attention", []).append(att.data)
        o = ad.matmul(att, v)  # (S, heads, T, d)
        o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (hh * ww, t, c))
        o = ad.add(ad.matmul(o, p("wo")), p("bo"))
        return ad.reshape(ad.transpose(o, (2, 1, 0)), (c, t, hh, ww))

    def _mlp(self, h, prefix, nodes):
        p = lambda s: nodes[f"{prefix}.mlp.{s}"]
        c, t, hh, ww = h.shape
        hs = ad.transpose(ad.reshape(h, (c, t * hh * ww)), (1, 0))
        hs = ad.gelu(ad.add(ad.matmul(hs, p("w1")), p("b1")))
        hs = ad.add(ad.matmul(hs, p("w2")), p("b2"))
        return ad.reshape(ad.transpose(hs, (1, 0)), (c, t, hh, ww))


def init_params(cfg: ModelConfig, stream: RandomStream, dtype=np.float32) -> ParamSet:
    """Deterministic parameter init: Xavier-uniform weights drawn in a fixed
    order from the stream, zero biases, and zeroed branch-final projections."""
    dtype = np.dtype(dtype)
    c, r = cfg.channels, cfg.mlp_ratio
    ps = ParamSet()

    def zeros(shape):
        return np.zeros(shape, dtype=dtype)

    ps.add("tokengen.weight",
           _xavier((c, 3, 3, 3, 3), 3 * 27, c * 27, stream, dtype), "encoder")
    ps.add("tokengen.bias", zeros(c), "encoder")

    def add_block(prefix, group):
        ps.add(f"{prefix}.norm1.gamma", np.ones(c, dtype=dtype), group)
        ps.add(f"{prefix}.norm1.beta", zeros(c), group)
        # branch-final projection: zero so the fresh block is the identity
        ps.add(f"{prefix}.conv.weight", zeros((c, c, 1, 3, 3)), group)
        ps.add(f"{prefix}.conv.bias", zeros(c), group)
        ps.add(f"{prefix}.norm2.gamma", np.ones(c, dtype=dtype), group)
        ps.add(f"{prefix}.norm2.beta", zeros(c), group)
        for wn in ("wq", "wk", "wv"):
            ps.add(f"{prefix}.attn.{wn}", _xavier((c, c), c, c, stream, dtype), group)
            ps.add(f"{prefix}.attn.b{wn[1]}", zeros(c), group)
        ps.add(f"{prefix}.attn.wo", zeros((c, c)), group)
        ps.add(f"{prefix}.attn.bo", zeros(c), group)
        ps.add(f"{prefix}.norm3.gamma", np.ones(c, dtype=dtype), group)
        ps.add(f"{prefix}.norm3.beta", zeros(c), group)
        ps.add(f"{prefix}.mlp.w1", _xavier((c, r * c), c, r * c, stream, dtype), group)
        ps.add(f"{prefix}.mlp.b1", zeros(r * c), group)
        ps.add(f"{prefix}.mlp.w2", zeros((r * c, c)), group)
        ps.add(f"{prefix}.mlp.b2", zeros(c), group)

    for i in range(cfg.encoder_depth):
        add_block(f"enc{i}", "encoder")
    for i in range(cfg.decoder_depth):
        add_block(f"dec{i}", "decoder")
    ps.add("head.weight", _xavier((1, c, 1, 1, 1), c, 1, stream, dtype), "head")
    ps.add("head.bias", zeros(1), "head")
    return ps


def build_model(cfg: ModelConfig, stream: RandomStream, dtype=np.float32) -> Model:
    """Build and initialize a model, asserting the fresh-block identity."""
    model = Model(cfg, init_params(cfg, stream, dtype), dtype=dtype)
    probe_stream = stream.child("probe")
    probe = probe_stream.generator.standard_normal(
        size=(cfg.channels, 2, 8, 8)
    ).astype(dtype)
    nodes = {n: ad.parameter(t) for n, t in model.params.tensors.items()}
    x = ad.constant(probe, dtype=dtype)
    for prefix in model.block_prefixes():
        y = model._apply_block(x, prefix, nodes)
        rel = float(np.linalg.norm(y.data - x.data) / max(np.linalg.norm(x.data), 1e-12))
        assert rel < 1e-5, f"fresh block {prefix} is not near-identity (rel {rel})"
    return model


def reinit_head(model: Model, head_kind: str, stream: RandomStream) -> Model:
    """Return a model with the head swapped for ``head_kind`` and re-initialized."""
    cfg = replace(model.config, head_kind=head_kind)
    c = cfg.channels
    ps = ParamSet()
    for name, tensor in model.params.tensors.items():
        group = model.params.partition[name]
        if group == "head":
            continue
        ps.add(name, tensor.copy(), group)
    ps.add("head.weight", _xavier((1, c, 1, 1, 1), c, 1, stream, model.dtype), "head")
    ps.add("head.bias", np.zeros(1, dtype=model.dtype), "head")
    out = Model(cfg, ps, dtype=model.dtype)
    out.frozen = set(model.frozen)
    return out
