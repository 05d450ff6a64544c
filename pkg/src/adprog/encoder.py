"""LSTM cell that sees the completed observation, its mask, and a decayed hidden state."""

from __future__ import annotations

import numpy as np

from .numerics import ShapeError, affine_map, neg_relu_exp, sigmoid, uniform_init

GATES = ("f", "i", "c", "o")
PARAM_NAMES = ("W_gamma_h", "b_gamma_h") + tuple(f"W_{g}" for g in GATES) + tuple(f"b_{g}" for g in GATES)


def init_params(bundle, D, H, rng, forget_bias=1.0):
    # hidden-sized decay head, built like the feature decay
    bundle.add("W_gamma_h", uniform_init(rng, (H, D), D))
    bundle.add("b_gamma_h", np.zeros(H))
    n_in = H + 2 * D
    for g in GATES:
        bundle.add(f"W_{g}", uniform_init(rng, (H, n_in), n_in))
    for g in GATES:
        bundle.add(f"b_{g}", np.full(H, forget_bias if g == "f" else 0.0))


def hidden_decay(params, delta):
    """Per-unit decay of the previous hidden state, shape ``(..., H)``."""
    return neg_relu_exp(affine_map(params["W_gamma_h"], delta, params["b_gamma_h"]))


def decay_hidden(h_prev, gamma_h):
    if np.shape(h_prev) != np.shape(gamma_h):
        raise ShapeError(f"hidden state {np.shape(h_prev)} and decay {np.shape(gamma_h)} differ")
    return h_prev * gamma_h


def cell_step(params, h_hat, c_prev, u_c, m):
    """One LSTM step on ``v = [h_hat, u_c, m]``.  Returns ``(h, c, cache)``."""
    H = params["W_f"].shape[0]
    if np.shape(h_hat)[-1] != H or np.shape(c_prev)[-1] != H:
        raise ShapeError(f"state width must be {H}")
    v = np.concatenate([h_hat, u_c, m], axis=-1)
    f = sigmoid(affine_map(params["W_f"], v, params["b_f"]))
    i = sigmoid(affine_map(params["W_i"], v, params["b_i"]))
    g = np.tanh(affine_map(params["W_c"], v, params["b_c"]))
    o = sigmoid(affine_map(params["W_o"], v, params["b_o"]))
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return h, c, {"v": v, "f": f, "i": i, "g": g, "o": o, "tanh_c": tanh_c}


def forward(params, h_prev, c_prev, u_c, m, delta):
    a_gamma_h = affine_map(params["W_gamma_h"], delta, params["b_gamma_h"])
    gamma_h = neg_relu_exp(a_gamma_h)
    h_hat = decay_hidden(h_prev, gamma_h)
    h, c, cache = cell_step(params, h_hat, c_prev, u_c, m)
    cache.update(a_gamma_h=a_gamma_h, gamma_h=gamma_h, h_hat=h_hat, h=h, c=c)
    return cache


def backward(params, grads, st, h_prev, c_prev, delta, d_h, d_c):
    """Backpropagate one cell step.

    Returns ``(d_h_prev, d_c_prev, d_u_c)``.
    """
    H = h_prev.shape[-1]
    f, i, g, o, tanh_c = st["f"], st["i"], st["g"], st["o"], st["tanh_c"]
    d_o = d_h * tanh_c
    d_c = d_c + d_h * o * (1.0 - tanh_c ** 2)
    d_pre = {
        "f": d_c * c_prev * f * (1.0 - f),
        "i": d_c * g * i * (1.0 - i),
        "c": d_c * i * (1.0 - g ** 2),
        "o": d_o * o * (1.0 - o),
    }
    v = st["v"]
    d_v = np.zeros_like(v)
    for gate, d_a in d_pre.items():
        grads.accumulate(f"W_{gate}", d_a.T @ v)
        grads.accumulate(f"b_{gate}", d_a.sum(axis=0))
        d_v += d_a @ params[f"W_{gate}"]
    d_c_prev = d_c * f

    d_h_hat = d_v[:, :H]
    D = (v.shape[-1] - H) // 2
    d_u_c = d_v[:, H:H + D]

    gamma_h = st["gamma_h"]
    d_h_prev = d_h_hat * gamma_h
    d_a = np.where(st["a_gamma_h"] > 0.0, -d_h_hat * h_prev * gamma_h, 0.0)
    grads.accumulate("W_gamma_h", d_a.T @ delta)
    grads.accumulate("b_gamma_h", d_a.sum(axis=0))
    return d_h_prev, d_c_prev, d_u_c
