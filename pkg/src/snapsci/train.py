"""Rate-constrained training: task loss plus an analytic parameter-rate
penalty, Adam updates, early-phase/full/off rate schedules, and unified
noise-adaptive photon-count sampling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .core import (
    ConfigError,
    NumericError,
    PhotonModel,
    RandomStream,
    VideoCube,
    derive_stream,
)
from .masks import gen_submask, tile_mask
from .nnet import Model, save_checkpoint
from .nnet import autodiff as ad
from .sensor import apply_noise, calibrate_alpha, estimate_input

BACKSLASH_MODES = ("none", "full", "half")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    seed: int
    batch_size: int = 1
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lam: float = 1e-3
    nu: float = 0.5
    eps_rate: float = 1e-8
    backslash_mode: str = "none"
    apc_mode: Tuple = ("uniform", 1.0, 60.0)
    sigma: float = 0.01
    cr: int = 8
    rho: float = 0.5
    mask_m: int = 8
    augment: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not 0.0 < self.nu <= 2.0:
            raise ConfigError(f"nu must be in (0, 2], got {self.nu}")
        if self.eps_rate <= 0:
            raise ConfigError("eps_rate must be > 0")
        if self.backslash_mode not in BACKSLASH_MODES:
            raise ConfigError(f"backslash_mode must be one of {BACKSLASH_MODES}")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.cr < 1:
            raise ConfigError("cr must be >= 1")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"rho must be in (0, 1], got {self.rho}")
        mode = self.apc_mode
        if mode[0] == "fixed":
            if len(mode) != 2 or mode[1] <= 0:
                raise ConfigError(f"bad fixed apc_mode {mode}")
        elif mode[0] == "uniform":
            if len(mode) != 3 or not 0 < mode[1] <= mode[2]:
                raise ConfigError(f"bad uniform apc_mode {mode}")
        else:
            raise ConfigError(f"apc_mode must be fixed(v) or uniform(lo,hi), got {mode}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        mode = d.pop("apc_mode")
        d["apc_mode"] = (
            f"fixed({mode[1]})" if mode[0] == "fixed" else f"uniform({mode[1]},{mode[2]})"
        )
        d["lambda"] = d.pop("lam")
        return d


def parse_apc_mode(text: str) -> Tuple:
    text = text.strip()
    if text.startswith("fixed(") and text.endswith(")"):
        return ("fixed", float(text[6:-1]))
    if text.startswith("uniform(") and text.endswith(")"):
        lo, _, hi = text[8:-1].partition(",")
        return ("uniform", float(lo), float(hi))
    raise ConfigError(f"apc_mode must be fixed(v) or uniform(lo,hi), got {text!r}")


_TRAIN_KEYS = {
    "epochs": int, "seed": int, "batch_size": int, "lr": float,
    "adam_beta1": float, "adam_beta2": float, "adam_eps": float,
    "lambda": float, "lam": float, "nu": float, "eps_rate": float,
    "backslash_mode": str, "apc_mode": parse_apc_mode, "sigma": float,
    "cr": int, "rho": float, "mask_m": int,
    "augment": lambda s: s.strip().lower() in ("1", "true", "yes"),
}

_MODEL_KEYS = {
    "channels": int, "encoder_depth": int, "decoder_depth": int,
    "heads": int, "mlp_ratio": int,
}


def read_kv_file(path) -> Dict[str, str]:
    """Parse a flat ``key = value`` text file; '#' starts a comment line."""
    out: Dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        out[key.strip()] = value.strip()
    return out


def parse_run_config(path) -> Tuple[TrainConfig, Dict[str, int]]:
    """Parse a training config file into (TrainConfig, model-architecture keys).

    Unknown keys are errors.
    """
    raw = read_kv_file(path)
    train_kv, model_kv = {}, {}
    for key, value in raw.items():
        if key in _TRAIN_KEYS:
            name = "lam" if key == "lambda" else key
            train_kv[name] = _TRAIN_KEYS[key](value)
        elif key in _MODEL_KEYS:
            model_kv[key] = _MODEL_KEYS[key](value)
        else:
            raise ConfigError(f"unknown config key {key!r} in {path}")
    missing = {"epochs", "seed"} - set(train_kv)
    if missing:
        raise ConfigError(f"config {path} missing required keys {sorted(missing)}")
    return TrainConfig(**train_kv), model_kv


# ---------------------------------------------------------------------------
# Parameter-rate term and its analytic gradient
# ---------------------------------------------------------------------------


def rate_term(params: Mapping[str, np.ndarray], eps: float, nu: float) -> float:
    """R = (1/N) sum_i (|theta_i| + eps)^nu over every parameter."""
    total, acc = 0, 0.0
    for name, theta in params.items():
        theta = np.asarray(theta)
        if not np.isfinite(theta).all():
            raise NumericError(f"non-finite parameter in tensor {name!r}")
        acc += float(((np.abs(theta, dtype=np.float64) + eps) ** nu).sum())
        total += theta.size
    return acc / total


def rate_grad(
    params: Mapping[str, np.ndarray], eps: float, nu: float
) -> Dict[str, np.ndarray]:
    """dR/dtheta_i = (nu/N) sign(theta_i) (|theta_i| + eps)^(nu-1); sign(0) = 0."""
    total = sum(np.asarray(t).size for t in params.values())
    out = {}
    for name, theta in params.items():
        theta = np.asarray(theta)
        if not np.isfinite(theta).all():
            raise NumericError(f"non-finite parameter in tensor {name!r}")
        mag = (np.abs(theta, dtype=np.float64) + eps) ** (nu - 1.0)
        out[name] = ((nu / total) * np.sign(theta) * mag).astype(theta.dtype)
    return out


def schedule_lambda(cfg: TrainConfig, epoch: int) -> float:
    """Effective rate weight for a 1-based epoch under the configured schedule.

    'half' keeps the rate term active only for epochs 1..ceil(E/2).
    """
    if cfg.backslash_mode == "none":
        return 0.0
    if cfg.backslash_mode == "half" and epoch > math.ceil(cfg.epochs / 2):
        return 0.0
    return cfg.lam


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction; state maps parameter names to moments."""

    def __init__(self, params: Mapping[str, np.ndarray], cfg: TrainConfig,
                 state: Optional[dict] = None):
        self.cfg = cfg
        if state is not None:
            self.t = int(state["t"])
            self.m = {k: v.copy() for k, v in state["m"].items()}
            self.v = {k: v.copy() for k, v in state["v"].items()}
        else:
            self.t = 0
            self.m = {n: np.zeros_like(p) for n, p in params.items()}
            self.v = {n: np.zeros_like(p) for n, p in params.items()}

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def step(self, params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
             names: Sequence[str]) -> None:
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.adam_beta1**self.t
        c2 = 1.0 - cfg.adam_beta2**self.t
        for name in names:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= cfg.adam_beta1
            m += (1.0 - cfg.adam_beta1) * g
            v *= cfg.adam_beta2
            v += (1.0 - cfg.adam_beta2) * g * g
            params[name] -= (cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(
                params[name].dtype
            )


# ---------------------------------------------------------------------------
# One optimization step
# ---------------------------------------------------------------------------


def _task_loss(model: Model, sample, beta: Optional[float] = None) -> ad.Tensor:
    from . import tasks  # local import: tasks builds on this module's config

    inp, target = sample[0], sample[1]
    out = model.forward(inp)
    kind = model.config.head_kind
    if kind == "reconstruction":
        return tasks.recon_loss(out, target)
    if kind == "edge":
        return tasks.edge_loss(out, target, beta=beta)
    return tasks.depth_loss(out, target[0], target[1])


def train_step(model: Model, batch: Sequence, cfg: TrainConfig, opt: Adam,
               lambda_eff: float) -> Dict[str, float]:
    """One Adam update on a batch; returns the logged scalars.

    The rate gradient is added analytically to the task gradients (the rate
    term depends on the parameters only).
    """
    if not batch:
        raise ConfigError("empty batch")
    beta = None
    if model.config.head_kind == "edge":
        from . import tasks

        beta = tasks.edge_beta(np.concatenate([np.ravel(s[1]) for s in batch]))
    inv_b = 1.0 / len(batch)
    grads: Dict[str, np.ndarray] = {}
    task_loss = 0.0
    for sample in batch:
        loss = _task_loss(model, sample, beta=beta)
        if not np.isfinite(loss.data):
            raise NumericError(
                f"non-finite task loss on batch (train seed {cfg.seed})"
            )
        task_loss += loss.item() * inv_b
        sample_grads = model.backward(loss)
        for name, g in sample_grads.items():
            if name in grads:
                grads[name] += g * inv_b
            else:
                grads[name] = g * inv_b
    rate = rate_term(model.params.tensors, cfg.eps_rate, cfg.nu)
    if lambda_eff != 0.0:
        rg = rate_grad(model.params.tensors, cfg.eps_rate, cfg.nu)
        for name in grads:
            grads[name] = grads[name] + lambda_eff * rg[name]
    objective = task_loss + lambda_eff * rate
    opt.step(model.params.tensors, grads, model.trainable_names())
    return {"task_loss": task_loss, "rate": rate, "J": objective}


# ---------------------------------------------------------------------------
# Full training loop
# ---------------------------------------------------------------------------


def _augmented(arrays: List[np.ndarray], stream: RandomStream) -> List[np.ndarray]:
    """Shared random 90-degree rotation (square frames only) and flips."""
    k = int(stream.generator.integers(0, 4))
    flip_h = bool(stream.generator.integers(0, 2))
    flip_w = bool(stream.generator.integers(0, 2))
    out = []
    for arr in arrays:
        if k and arr.shape[1] == arr.shape[2]:
            arr = np.rot90(arr, k, axes=(1, 2))
        if flip_h:
            arr = arr[:, ::-1, :]
        if flip_w:
            arr = arr[:, :, ::-1]
        out.append(np.ascontiguousarray(arr))
    return out


def _draw_apc(cfg: TrainConfig, stream: RandomStream) -> float:
    mode = cfg.apc_mode
    if mode[0] == "fixed":
        return float(mode[1])
    return float(stream.generator.uniform(mode[1], mode[2]))


def _sample_for(model: Model, video: np.ndarray, gt, mask, cfg: TrainConfig,
                apc: float, noise_stream: RandomStream):
    cube = VideoCube(data=video)
    alpha = calibrate_alpha(cube, mask, apc)
    photon = PhotonModel(apc=apc, alpha=alpha, sigma=cfg.sigma)
    meas = apply_noise(cube, mask, photon, noise_stream)
    inp = estimate_input(meas, mask)
    kind = model.config.head_kind
    if kind == "reconstruction":
        return (inp, cube.data)
    if kind == "edge":
        return (inp, gt[0])
    return (inp, (gt[1], gt[2]))


def run_training(data_source: Sequence, model: Model, cfg: TrainConfig,
                 out_dir=None, extra: Optional[dict] = None) -> Dict:
    """Train a model over epochs of simulated photon-limited measurements.

    ``data_source`` is a sequence of scenes (anything with ``video`` as a
    VideoCube plus ``edges``/``depth``/``valid`` arrays for the task heads).
    Per sample an APC is drawn, a measurement simulated, and the network
    stepped.  Writes one checkpoint per epoch and a JSONL log line per step
    when ``out_dir`` is given; all log entries are also returned.
    """
    data = list(data_source)
    if not data:
        raise ConfigError("training data source is empty")
    t0, h0, w0 = data[0].video.shape
    if t0 != cfg.cr:
        raise ConfigError(f"scene frame count {t0} does not match configured cr {cfg.cr}")
    submask = gen_submask(cfg.cr, cfg.mask_m, cfg.rho,
                          derive_stream(cfg.seed, "mask"))
    mask = tile_mask(submask, h0, w0)
    order_stream = derive_stream(cfg.seed, "order")
    apc_stream = derive_stream(cfg.seed, "apc")
    noise_stream = derive_stream(cfg.seed, "noise")
    aug_stream = derive_stream(cfg.seed, "augment")
    opt = Adam(model.params.tensors, cfg)
    out_path = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_file = (out_path / "train_log.jsonl").open("w")
    log: List[dict] = []
    checkpoints: List[str] = []
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            lambda_eff = schedule_lambda(cfg, epoch)
            order = order_stream.generator.permutation(len(data))
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo : lo + cfg.batch_size]
                batch, apcs = [], []
                for i in idx:
                    scene = data[i]
                    video = scene.video.data
                    edges = getattr(scene, "edges", None)
                    depth = getattr(scene, "depth", None)
                    valid = getattr(scene, "valid", None)
                    if cfg.augment:
                        arrays = [video] + [
                            a for a in (edges, depth, valid) if a is not None
                        ]
                        arrays = _augmented(arrays, aug_stream)
                        video = arrays[0]
                        rest = arrays[1:]
                        if edges is not None:
                            edges, rest = rest[0], rest[1:]
                        if depth is not None:
                            depth, valid = rest[0], rest[1]
                    apc = _draw_apc(cfg, apc_stream)
                    apcs.append(apc)
                    batch.append(
                        _sample_for(model, video, (edges, depth, valid), mask, cfg,
                                    apc, noise_stream)
                    )
                step += 1
                scalars = train_step(model, batch, cfg, opt, lambda_eff)
                entry = {
                    "epoch": epoch,
                    "step": step,
                    "task_loss": scalars["task_loss"],
                    "rate": scalars["rate"],
                    "J": scalars["J"],
                    "lambda_effective": lambda_eff,
                    "apc": apcs,
                }
                log.append(entry)
                if log_file is not None:
                    log_file.write(json.dumps(entry) + "\n")
            if out_path is not None:
                ckpt = out_path / f"epoch_{epoch:03d}.cdp"
                save_checkpoint(ckpt, model, extra=_ckpt_extra(cfg, extra),
                                opt_state=opt.state())
                checkpoints.append(str(ckpt))
    finally:
        if log_file is not None:
            log_file.close()
    if out_path is not None:
        final = out_path / "final.cdp"
        save_checkpoint(final, model, extra=_ckpt_extra(cfg, extra),
                        opt_state=opt.state())
        checkpoints.append(str(final))
    return {"checkpoints": checkpoints, "log": log, "optimizer": opt}


def _ckpt_extra(cfg: TrainConfig, extra: Optional[dict]) -> dict:
    merged = {"train_config": cfg.to_dict()}
    if extra:
        merged.update(extra)
    return merged
