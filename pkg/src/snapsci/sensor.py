"""The compressive forward model: modulation, temporal integration, and
Poisson-Gaussian photon-limited noise, plus the measurement pre-processing
that turns a raw frame into network input channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (
    CalibrationError,
    DataError,
    Measurement,
    MaskStack,
    NumericError,
    PhotonModel,
    RandomStream,
    VideoCube,
    tensor_read,
    tensor_write,
)

APC_MAX = 60.0


@dataclass(frozen=True)
class NetInput:
    """(3, T, H, W) network input: signal estimate, noise map, photon proxy.

    Channel 0 carries the mask-normalized measurement estimate broadcast over
    T; channel 1 is spatially constant at sigma; channel 2 is spatially
    constant at apc / APC_MAX.
    """

    channels: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.channels), dtype=np.float32)
        if arr.ndim != 4 or arr.shape[0] != 3:
            raise DataError(f"net input must be (3, T, H, W), got shape {arr.shape}")
        for c in (1, 2):
            if arr[c].size and float(np.ptp(arr[c])) != 0.0:
                raise DataError(f"net input channel {c} must be spatially constant")
        arr.setflags(write=False)
        object.__setattr__(self, "channels", arr)

    @property
    def sigma(self) -> float:
        return float(self.channels[1].flat[0])

    @property
    def apc_norm(self) -> float:
        return float(self.channels[2].flat[0])

    @property
    def shape(self):
        return self.channels.shape


def modulate(x: VideoCube, m: MaskStack) -> VideoCube:
    """Per-frame Hadamard product of the video with the binary masks."""
    if x.shape != m.shape:
        raise DataError(f"video shape {x.shape} does not match mask shape {m.shape}")
    return VideoCube(data=x.data * m.data)


def integrate(modulated: VideoCube) -> np.ndarray:
    """Sum the modulated frames into one (H, W) measurement; no noise added.

    Accumulation is sequential over t in float32, so the result is bit-equal
    to a scalar triple loop.
    """
    t, h, w = modulated.shape
    acc = np.zeros((h, w), dtype=np.float32)
    for i in range(t):
        acc += modulated.data[i]
    return acc


def calibrate_alpha(x: VideoCube, m: MaskStack, apc: float) -> float:
    """Photon scale making the measurement-mean photon count equal apc.

    Normalizing against the clean measurement mean makes an APC target
    scene-independent.
    """
    mean = float(integrate(modulate(x, m)).mean())
    if mean <= 0.0:
        raise CalibrationError(
            f"clean measurement mean is {mean}; cannot calibrate photon scale"
        )
    return float(apc) / mean


def apply_noise(
    x: VideoCube, m: MaskStack, photon: PhotonModel, stream: RandomStream
) -> Measurement:
    """Sample a photon-limited measurement.

    y = clamp_0( Poisson(alpha * sum_t(x_t . m_t)) / alpha + Normal(0, sigma^2) ),
    drawn per pixel from the stream.  A sum of independent per-frame Poisson
    draws is Poisson with the summed rate, so one draw on the integrated
    signal is distributionally exact.
    """
    s = integrate(modulate(x, m))
    rate = photon.alpha * s.astype(np.float64)
    if not np.isfinite(rate).all():
        raise NumericError("non-finite Poisson rate in noise model")
    counts = stream.generator.poisson(rate)
    y = counts / photon.alpha
    if photon.sigma > 0:
        y = y + stream.generator.normal(0.0, photon.sigma, size=y.shape)
    y = np.maximum(y, 0.0).astype(np.float32)
    return Measurement(
        y=y, cr=x.shape[0], photon=photon, seed=stream.seed, mask_id=m.mask_id
    )


def measure_clean(x: VideoCube, m: MaskStack, seed: int = 0) -> Measurement:
    """Noiseless measurement (photon model None)."""
    return Measurement(
        y=integrate(modulate(x, m)), cr=x.shape[0], photon=None, seed=seed,
        mask_id=m.mask_id,
    )


def estimation_baseline(meas: Measurement, m: MaskStack) -> np.ndarray:
    """Mask-normalized estimate E = y / max(sum_t m_t, 1), dead pixels zeroed."""
    on = m.data.sum(axis=0, dtype=np.int32)
    e = meas.y / np.maximum(on, 1).astype(np.float32)
    e[on == 0] = 0.0
    return e.astype(np.float32)


def estimate_input(meas: Measurement, m: MaskStack) -> NetInput:
    """Build the (3, T, H, W) network input for one measurement.

    For noiseless measurements the noise map is 0 and the photon proxy is 1
    (treated as saturated light).
    """
    if meas.mask_id != m.mask_id:
        raise DataError(
            f"measurement mask digest {meas.mask_id} does not match mask {m.mask_id}"
        )
    t = m.shape[0]
    if meas.cr != t:
        raise DataError(f"measurement cr {meas.cr} does not match mask frames {t}")
    e = estimation_baseline(meas, m)
    if meas.photon is not None:
        sigma, apc_norm = meas.photon.sigma, meas.photon.apc / APC_MAX
    else:
        sigma, apc_norm = 0.0, 1.0
    channels = np.empty((3,) + (t,) + meas.shape, dtype=np.float32)
    channels[0] = e[None, :, :]
    channels[1] = sigma
    channels[2] = apc_norm
    return NetInput(channels=channels)


# ---------------------------------------------------------------------------
# Measurement persistence: CDT1 tensor plus a flat key = value sidecar
# ---------------------------------------------------------------------------


def save_measurement(path, meas: Measurement) -> None:
    path = Path(path)
    tensor_write(path, meas.y)
    lines = [f"cr = {meas.cr}", f"seed = {meas.seed}", f"mask_id = {meas.mask_id}"]
    if meas.photon is not None:
        lines += [
            f"apc = {meas.photon.apc!r}",
            f"alpha = {meas.photon.alpha!r}",
            f"sigma = {meas.photon.sigma!r}",
        ]
    else:
        lines += ["apc = none", "alpha = none", "sigma = none"]
    path.with_suffix(path.suffix + ".meta").write_text("\n".join(lines) + "\n")


def load_measurement(path) -> Measurement:
    path = Path(path)
    y = tensor_read(path)
    meta_path = path.with_suffix(path.suffix + ".meta")
    if not meta_path.exists():
        raise DataError(f"missing measurement sidecar {meta_path}")
    meta = {}
    for line in meta_path.read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    photon = None
    if meta.get("apc", "none") != "none":
        photon = PhotonModel(
            apc=float(meta["apc"]), alpha=float(meta["alpha"]), sigma=float(meta["sigma"])
        )
    return Measurement(
        y=y,
        cr=int(meta["cr"]),
        photon=photon,
        seed=int(meta["seed"]),
        mask_id=meta["mask_id"],
    )
