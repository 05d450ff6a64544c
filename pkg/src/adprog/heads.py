"""Output heads: next-visit MRI and cognitive forecasts, current-visit status."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import affine_map, softmax, uniform_init

N_CLASSES = 3
PARAM_NAMES = ("W_mri", "b_mri", "W_cog", "b_cog", "W_y", "b_y")


@dataclass
class PredictionBundle:
    mri: np.ndarray      # forecast for the next visit
    cog: np.ndarray      # forecast for the next visit
    probs: np.ndarray    # status probabilities at the current visit
    logits: np.ndarray


def init_params(bundle, H, D_mri, D_cog, rng, K=N_CLASSES):
    bundle.add("W_mri", uniform_init(rng, (D_mri, H), H))
    bundle.add("b_mri", np.zeros(D_mri))
    bundle.add("W_cog", uniform_init(rng, (D_cog, H), H))
    bundle.add("b_cog", np.zeros(D_cog))
    bundle.add("W_y", uniform_init(rng, (K, H), H))
    bundle.add("b_y", np.zeros(K))


def predict_outputs(params, h):
    logits = affine_map(params["W_y"], h, params["b_y"])
    return PredictionBundle(
        mri=affine_map(params["W_mri"], h, params["b_mri"]),
        cog=affine_map(params["W_cog"], h, params["b_cog"]),
        probs=softmax(logits),
        logits=logits,
    )


def backward(params, grads, h, d_mri, d_cog, d_logits):
    """Accumulate head gradients; returns the gradient w.r.t. ``h``."""
    d_h = np.zeros_like(h)
    for name, d_out in (("mri", d_mri), ("cog", d_cog), ("y", d_logits)):
        if d_out is None:
            continue
        grads.accumulate(f"W_{name}", d_out.T @ h)
        grads.accumulate(f"b_{name}", d_out.sum(axis=0))
        d_h += d_out @ params[f"W_{name}"]
    return d_h
