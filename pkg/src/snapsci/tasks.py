"""Task losses (reconstruction, edge, depth), evaluation metrics, and the
partial fine-tuning driver that trains only the decoder and head on top of a
frozen pre-trained encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    ConfigError,
    DataError,
    MaskStack,
    PhotonModel,
    VideoCube,
    derive_stream,
    digest_file,
)
from .nnet import Model, load_checkpoint, reinit_head, save_checkpoint
from .nnet import autodiff as ad
from .sensor import apply_noise, calibrate_alpha, estimate_input, estimation_baseline
from .train import TrainConfig, run_training

DEFAULT_THRESHOLDS = np.arange(1, 100) / 100.0
PSNR_CAP_DB = 99.0


def _tensor(x, like: Optional[ad.Tensor] = None) -> ad.Tensor:
    if isinstance(x, ad.Tensor):
        return x
    dtype = like.dtype if like is not None else np.asarray(x).dtype
    return ad.constant(np.asarray(x), dtype=dtype)


def _data(x) -> np.ndarray:
    if isinstance(x, ad.Tensor):
        return x.data
    if isinstance(x, VideoCube):
        return x.data
    return np.asarray(x)


# ---------------------------------------------------------------------------
# Losses (differentiable through the autodiff tape)
# ---------------------------------------------------------------------------


def recon_loss(pred, target) -> ad.Tensor:
    """Mean squared error over all elements."""
    pred = pred if isinstance(pred, ad.Tensor) else _tensor(_data(pred))
    tgt = _data(target)
    if pred.shape != tgt.shape:
        raise DataError(f"prediction shape {pred.shape} != target shape {tgt.shape}")
    diff = ad.sub(pred, _tensor(tgt, like=pred))
    return ad.mean_all(ad.mul(diff, diff))


def edge_beta(gt: np.ndarray) -> float:
    """Positive-class weight: clamp(#neg / #pos, 1, 50); 1 when no positives."""
    gt = np.asarray(gt)
    pos = int((gt > 0).sum())
    if pos == 0:
        return 1.0
    neg = gt.size - pos
    return float(min(max(neg / pos, 1.0), 50.0))


def edge_loss(logits, gt, beta: Optional[float] = None) -> ad.Tensor:
    """Class-balanced binary cross-entropy on logits."""
    logits = logits if isinstance(logits, ad.Tensor) else _tensor(_data(logits))
    gt = _data(gt).astype(logits.dtype)
    if logits.shape != gt.shape:
        raise DataError(f"logit shape {logits.shape} != gt shape {gt.shape}")
    if beta is None:
        beta = edge_beta(gt)
    pos_term = ad.mul(_tensor(beta * gt, like=logits), ad.softplus(ad.scale(logits, -1.0)))
    neg_term = ad.mul(_tensor(1.0 - gt, like=logits), ad.softplus(logits))
    return ad.mean_all(ad.add(pos_term, neg_term))


def depth_loss(pred, gt, valid) -> ad.Tensor:
    """Mean absolute error over valid pixels."""
    pred = pred if isinstance(pred, ad.Tensor) else _tensor(_data(pred))
    gt = _data(gt).astype(pred.dtype)
    mask = _data(valid).astype(pred.dtype)
    n = float(mask.sum())
    if n == 0:
        raise DataError("depth loss needs at least one valid pixel")
    err = ad.absolute(ad.sub(pred, _tensor(gt, like=pred)))
    return ad.scale(ad.sum_all(ad.mul(err, _tensor(mask, like=pred))), 1.0 / n)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def psnr(pred, target) -> float:
    """10 log10(1 / MSE) for signals in [0, 1]; capped at 99 dB."""
    p, t = _data(pred), _data(target)
    mse = float(np.mean((p.astype(np.float64) - t.astype(np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def dilate(binary: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a Chebyshev ball (square) of the given radius."""
    out = binary.astype(bool).copy()
    h, w = binary.shape
    for di in range(-radius, radius + 1):
        for dj in range(-radius, radius + 1):
            if di == 0 and dj == 0:
                continue
            src = binary[
                max(-di, 0) : h - max(di, 0), max(-dj, 0) : w - max(dj, 0)
            ].astype(bool)
            out[max(di, 0) : h + min(di, 0), max(dj, 0) : w + min(dj, 0)] |= src
    return out


def _f_score(match_pred, total_pred, match_gt, total_gt) -> float:
    precision = match_pred / total_pred if total_pred else 0.0
    recall = match_gt / total_gt if total_gt else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def ods_ois(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    thresholds: Optional[np.ndarray] = None,
    tol_radius: int = 1,
) -> Tuple[float, float]:
    """Best dataset-scale and mean best image-scale F measures.

    At each threshold a predicted positive matches if any ground-truth
    positive lies within Chebyshev radius ``tol_radius`` (via dilation), and
    a ground-truth positive is recalled if the dilated prediction covers it.
    ODS maximizes F over thresholds on dataset-aggregated counts; OIS
    averages the per-image maxima.
    """
    if len(preds) != len(gts):
        raise DataError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if thresholds is None:
        thresholds = DEFAULT_THRESHOLDS
    nt = len(thresholds)
    agg = np.zeros((nt, 4))
    per_image_best: List[float] = []
    for pred, gt in zip(preds, gts):
        pred, gt = np.asarray(pred), np.asarray(gt).astype(bool)
        if pred.shape != gt.shape:
            raise DataError(f"map shapes differ: {pred.shape} vs {gt.shape}")
        gt_dil = dilate(gt, tol_radius) if tol_radius else gt
        total_gt = int(gt.sum())
        best = 0.0
        for ti, t in enumerate(thresholds):
            pb = pred >= t
            pb_dil = dilate(pb, tol_radius) if tol_radius else pb
            counts = (
                int((pb & gt_dil).sum()),
                int(pb.sum()),
                int((gt & pb_dil).sum()),
                total_gt,
            )
            agg[ti] += counts
            best = max(best, _f_score(*counts))
        per_image_best.append(best)
    ods = max(_f_score(*row) for row in agg)
    ois = float(np.mean(per_image_best))
    return ods, ois


def depth_metrics(pred, gt, valid) -> Dict[str, float]:
    """AbsRel, RMSE, mean |log10| error, and threshold accuracies over valid pixels."""
    p = _data(pred).astype(np.float64)
    g = _data(gt).astype(np.float64)
    v = _data(valid).astype(bool)
    if not v.any():
        raise DataError("depth metrics need at least one valid pixel")
    p, g = p[v], g[v]
    if (g <= 0).any() or (p <= 0).any():
        raise DataError("depth metrics need positive depths on valid pixels")
    ratio = np.maximum(p / g, g / p)
    return {
        "abs_rel": float(np.mean(np.abs(p - g) / g)),
        "rmse": float(np.sqrt(np.mean((p - g) ** 2))),
        "log10": float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        "delta1": float(np.mean(ratio < 1.25)),
        "delta2": float(np.mean(ratio < 1.25**2)),
        "delta3": float(np.mean(ratio < 1.25**3)),
    }


# ---------------------------------------------------------------------------
# Metrics report
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    task: str
    metrics: Dict[str, float]
    provenance: Dict[str, object] = field(default_factory=dict)

    def validate(self) -> "MetricsReport":
        m = self.metrics
        if self.task == "edge":
            if m["ois"] < m["ods"] - 1e-9:
                raise DataError(f"OIS {m['ois']} below ODS {m['ods']}")
        if self.task == "depth":
            if not m["delta1"] <= m["delta2"] + 1e-12 or not m["delta2"] <= m["delta3"] + 1e-12:
                raise DataError("depth threshold accuracies must be nondecreasing")
            for k in ("delta1", "delta2", "delta3"):
                if not 0.0 <= m[k] <= 1.0:
                    raise DataError(f"{k} outside [0, 1]")
        return self

    def to_dict(self) -> dict:
        return {"task": self.task, **self.metrics, "provenance": self.provenance}


# ---------------------------------------------------------------------------
# Partial fine-tuning: frozen encoder, trained decoder + fresh task head
# ---------------------------------------------------------------------------


def evaluate_model(
    model: Model,
    scenes: Sequence,
    mask: MaskStack,
    apc: float,
    sigma: float,
    seed: int,
    tol_radius: int = 1,
    provenance: Optional[Dict] = None,
) -> MetricsReport:
    """Simulate measurements for held-out scenes and score the model's head.

    Reconstruction additionally reports the PSNR of the raw channel-0
    estimate against the clean cubes (the floor a learned model must beat).
    """
    noise_stream = derive_stream(seed, "eval-noise")
    kind = model.config.head_kind
    psnrs, base_psnrs = [], []
    edge_preds, edge_gts = [], []
    depth_pred, depth_gt, depth_valid = [], [], []
    for scene in scenes:
        cube = scene.video
        alpha = calibrate_alpha(cube, mask, apc)
        photon = PhotonModel(apc=apc, alpha=alpha, sigma=sigma)
        meas = apply_noise(cube, mask, photon, noise_stream)
        inp = estimate_input(meas, mask)
        out = model.forward(inp).data
        model._param_nodes = None
        if kind == "reconstruction":
            psnrs.append(psnr(out, cube.data))
            estimate = np.clip(inp.channels[0], 0.0, 1.0)
            base_psnrs.append(psnr(estimate, cube.data))
        elif kind == "edge":
            prob = 1.0 / (1.0 + np.exp(-out.astype(np.float64)))
            for t in range(out.shape[0]):
                edge_preds.append(prob[t])
                edge_gts.append(scene.edges[t])
        else:
            depth_pred.append(out.ravel())
            depth_gt.append(scene.depth.ravel())
            depth_valid.append(scene.valid.ravel())
    prov = dict(provenance or {})
    prov.update({"apc": apc, "seed": seed})
    if kind == "reconstruction":
        metrics = {
            "psnr_db": float(np.mean(psnrs)),
            "baseline_psnr_db": float(np.mean(base_psnrs)),
        }
        report = MetricsReport(task="recon", metrics=metrics, provenance=prov)
    elif kind == "edge":
        ods, ois = ods_ois(edge_preds, edge_gts, tol_radius=tol_radius)
        metrics = {
            "ods": ods,
            "ois": ois,
            "thresholds": [float(t) for t in DEFAULT_THRESHOLDS],
            "tolerance_radius": tol_radius,
        }
        report = MetricsReport(task="edge", metrics=metrics, provenance=prov)
    else:
        metrics = depth_metrics(
            np.concatenate(depth_pred), np.concatenate(depth_gt),
            np.concatenate(depth_valid),
        )
        metrics["d_min"], metrics["d_max"] = 1.0, 80.0
        report = MetricsReport(task="depth", metrics=metrics, provenance=prov)
    return report.validate()


def finetune(pretrained_ckpt, task: str, data: Sequence, cfg: TrainConfig,
             out_dir=None) -> Tuple[Model, Dict]:
    """Fine-tune a pre-trained checkpoint for 'edge' or 'depth' (or re-train
    'reconstruction'): the head is re-initialized for the task, the encoder
    is frozen bit-exactly, and only decoder + head receive updates."""
    if task not in ("edge", "depth", "reconstruction"):
        raise ConfigError(f"unknown fine-tune task {task!r}")
    ckpt_path = Path(pretrained_ckpt)
    base, _, _ = load_checkpoint(ckpt_path)
    model = reinit_head(base, task, derive_stream(cfg.seed, "head-init"))
    model.freeze({"encoder"})
    extra = {"pretrain_digest": digest_file(ckpt_path), "task": task}
    results = run_training(data, model, cfg, out_dir=out_dir, extra=extra)
    return model, results
