"""Missing-value imputation from temporal context and cross-feature relations.

Every function works on a batch of row vectors, shape ``(B, D)``; a single
vector of shape ``(D,)`` works too.
"""

from __future__ import annotations

import numpy as np

from .numerics import ConstraintError, ShapeError, affine_map, neg_relu_exp, sigmoid, uniform_init

PARAM_NAMES = ("W_x", "b_x", "W_z", "b_z", "W_gamma", "b_gamma", "W_beta", "b_beta")


def init_params(bundle, D, H, rng):
    bundle.add("W_x", uniform_init(rng, (D, H), H))
    bundle.add("b_x", np.zeros(D))
    bundle.add("W_z", uniform_init(rng, (D, D), D), constraint="zero_diagonal")
    bundle.add("b_z", np.zeros(D))
    bundle.add("W_gamma", uniform_init(rng, (D, D), D))
    bundle.add("b_gamma", np.zeros(D))
    bundle.add("W_beta", uniform_init(rng, (D, 2 * D), 2 * D))
    bundle.add("b_beta", np.zeros(D))


def temporal_estimate(params, h_prev, x, m):
    """Regress the current values from the previous hidden state and fill the gaps."""
    x_hat = affine_map(params["W_x"], h_prev, params["b_x"])
    if np.shape(x) != x_hat.shape or np.shape(m) != x_hat.shape:
        raise ShapeError(f"x {np.shape(x)} and mask {np.shape(m)} must match estimate {x_hat.shape}")
    x_c = m * x + (1.0 - m) * x_hat
    return x_hat, x_c


def multivariate_estimate(params, x_c):
    W_z = params["W_z"]
    if np.any(np.diag(W_z) != 0.0):
        raise ConstraintError("W_z must have a zero diagonal")
    return affine_map(W_z, x_c, params["b_z"])


def fusion_weights(params, delta, m):
    """Decay factors ``gamma`` in (0, 1] and mixing weights ``beta`` in (0, 1)."""
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta < 0):
        raise ValueError("time delays must be non-negative")
    gamma = neg_relu_exp(affine_map(params["W_gamma"], delta, params["b_gamma"]))
    beta = sigmoid(affine_map(params["W_beta"], np.concatenate([gamma, m], axis=-1), params["b_beta"]))
    return gamma, beta


def impute_step(x, m, x_hat, z_hat, beta):
    u_hat = beta * z_hat + (1.0 - beta) * x_hat
    u_c = m * x + (1.0 - m) * u_hat
    return u_hat, u_c


def forward(params, h_prev, x, m, delta):
    """Full imputation pass for one time step; returns a dict of intermediates."""
    x_hat, x_c = temporal_estimate(params, h_prev, x, m)
    z_hat = multivariate_estimate(params, x_c)
    a_gamma = affine_map(params["W_gamma"], delta, params["b_gamma"])
    gamma = neg_relu_exp(a_gamma)
    gm = np.concatenate([gamma, m], axis=-1)
    beta = sigmoid(affine_map(params["W_beta"], gm, params["b_beta"]))
    u_hat, u_c = impute_step(x, m, x_hat, z_hat, beta)
    return {"x_hat": x_hat, "x_c": x_c, "z_hat": z_hat, "a_gamma": a_gamma, "gamma": gamma,
            "gm": gm, "beta": beta, "u_hat": u_hat, "u_c": u_c}


def backward(params, grads, st, h_prev, m, delta, d_u_c, d_x_hat, d_z_hat, d_u_hat):
    """Backpropagate through one imputation step.

    ``st`` is the dict returned by :func:`forward`.  The four incoming
    gradients are accumulated with each other; parameter gradients are added
    into ``grads`` (a ParamBundle).  Returns the gradient w.r.t. ``h_prev``.
    """
    D = m.shape[-1]
    beta, gamma = st["beta"], st["gamma"]

    d_u_hat = d_u_hat + d_u_c * (1.0 - m)
    d_beta = d_u_hat * (st["z_hat"] - st["x_hat"])
    d_z_hat = d_z_hat + d_u_hat * beta
    d_x_hat = d_x_hat + d_u_hat * (1.0 - beta)

    d_a_beta = d_beta * beta * (1.0 - beta)
    grads.accumulate("W_beta", d_a_beta.T @ st["gm"])
    grads.accumulate("b_beta", d_a_beta.sum(axis=0))
    d_gamma = (d_a_beta @ params["W_beta"])[:, :D]

    d_a_gamma = np.where(st["a_gamma"] > 0.0, -d_gamma * gamma, 0.0)
    grads.accumulate("W_gamma", d_a_gamma.T @ delta)
    grads.accumulate("b_gamma", d_a_gamma.sum(axis=0))

    grads.accumulate("W_z", d_z_hat.T @ st["x_c"])
    grads.accumulate("b_z", d_z_hat.sum(axis=0))
    d_x_c = d_z_hat @ params["W_z"]
    d_x_hat = d_x_hat + d_x_c * (1.0 - m)

    grads.accumulate("W_x", d_x_hat.T @ h_prev)
    grads.accumulate("b_x", d_x_hat.sum(axis=0))
    return d_x_hat @ params["W_x"]
