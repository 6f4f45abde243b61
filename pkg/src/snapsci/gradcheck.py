"""Finite-difference verification of the differentiable core.

Builds a tiny float64 model, perturbs every parameter off its init point,
and compares analytic gradients of the reconstruction loss against central
differences.
"""

from __future__ import annotations

import numpy as np

from .core import derive_stream
from .nnet import ModelConfig, build_model
from .tasks import recon_loss

TINY_CONFIG = ModelConfig(
    channels=4, encoder_depth=1, decoder_depth=0, heads=2, mlp_ratio=2,
    cr=2, height=4, width=4,
)


def max_grad_error(model, inp, target, step: float = 1e-5) -> float:
    """Max elementwise relative error between backward and central differences."""
    out = model.forward(inp)
    grads = model.backward(recon_loss(out, target))

    def loss_at() -> float:
        value = float(recon_loss(model.forward(inp), target).data)
        model._param_nodes = None
        return value

    worst = 0.0
    for name, tensor in model.params.tensors.items():
        flat = tensor.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_at()
            flat[i] = orig - step
            down = loss_at()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            analytic = gflat[i]
            denom = max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst


def run_gradcheck(seed: int = 0, tolerance: float = 1e-4) -> dict:
    """The full-model check at the tiny config, in 64-bit mode."""
    model = build_model(TINY_CONFIG, derive_stream(seed, "gradcheck-init"),
                        dtype=np.float64)
    noise = derive_stream(seed, "gradcheck-perturb").generator
    for tensor in model.params.tensors.values():
        tensor += noise.normal(0.0, 0.05, size=tensor.shape)
    data = derive_stream(seed, "gradcheck-data").generator
    inp = data.random((3, TINY_CONFIG.cr, TINY_CONFIG.height, TINY_CONFIG.width))
    target = data.random((TINY_CONFIG.cr, TINY_CONFIG.height, TINY_CONFIG.width))
    error = max_grad_error(model, inp, target)
    return {
        "max_rel_error": error,
        "tolerance": tolerance,
        "passed": bool(error < tolerance),
        "parameters": model.params.count(),
        "seed": seed,
    }
