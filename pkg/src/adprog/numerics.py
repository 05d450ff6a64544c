"""Dense primitives, the parameter container, and gradient checking.

All arrays are float64.  Batched vectors are stored as rows, so an affine
map ``W x + b`` over a batch ``X`` of shape ``(B, n_in)`` is ``X @ W.T + b``.
"""

from __future__ import annotations

import numpy as np

ACTIVATIONS = ("sigmoid", "tanh", "neg_relu_exp")


class ShapeError(ValueError):
    pass


class NumericDomainError(ValueError):
    pass


class DeterminismError(RuntimeError):
    pass


class ConstraintError(RuntimeError):
    pass


def affine_map(W, x, b):
    """Return ``W x + b``; ``x`` may be a vector or a batch of row vectors."""
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2:
        raise ShapeError(f"W must be 2-D, got shape {W.shape}")
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"W has {W.shape[1]} columns but x has length {x.shape[-1]}")
    if b.shape != (W.shape[0],):
        raise ShapeError(f"W has {W.shape[0]} rows but b has shape {b.shape}")
    return x @ W.T + b


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def neg_relu_exp(x):
    return np.exp(-np.maximum(0.0, x))


def elementwise_activation(x, kind):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericDomainError(f"non-finite input to {kind}")
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "neg_relu_exp":
        return neg_relu_exp(x)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def softmax(x):
    """Numerically stable softmax over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("softmax needs at least one logit")
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParamBundle:
    """Named parameter arrays, each paired with a same-shaped gradient buffer.

    Entries registered with ``constraint="zero_diagonal"`` keep an exactly
    zero diagonal in both the value and the gradient.
    """

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.constraints: dict[str, str] = {}

    def add(self, name, value, constraint=None):
        value = np.array(value, dtype=np.float64)
        if constraint not in (None, "zero_diagonal"):
            raise ValueError(f"unknown constraint {constraint!r}")
        if constraint == "zero_diagonal" and (value.ndim != 2 or value.shape[0] != value.shape[1]):
            raise ShapeError(f"{name}: zero_diagonal needs a square matrix, got {value.shape}")
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        if constraint:
            self.constraints[name] = constraint
        self.project()

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def names(self):
        return list(self.values)

    def weight_names(self):
        """Matrix parameters (everything but biases)."""
        return [n for n in self.values if n.startswith("W_")]

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, name, grad):
        if grad.shape != self.grads[name].shape:
            raise ShapeError(f"gradient for {name} has shape {grad.shape}, expected {self.grads[name].shape}")
        self.grads[name] += grad
        if self.constraints.get(name) == "zero_diagonal":
            np.fill_diagonal(self.grads[name], 0.0)

    def project(self):
        for name, kind in self.constraints.items():
            if kind == "zero_diagonal":
                np.fill_diagonal(self.values[name], 0.0)
                np.fill_diagonal(self.grads[name], 0.0)

    def check_constraints(self):
        for name, kind in self.constraints.items():
            if kind == "zero_diagonal" and np.any(np.diag(self.values[name]) != 0.0):
                raise ConstraintError(f"{name} has a non-zero diagonal")

    def copy(self):
        other = ParamBundle()
        for name, value in self.values.items():
            other.values[name] = value.copy()
            other.grads[name] = self.grads[name].copy()
        other.constraints = dict(self.constraints)
        return other

    def load_values(self, values):
        for name, value in values.items():
            if name not in self.values:
                raise KeyError(f"unknown parameter {name!r}")
            if np.shape(value) != self.values[name].shape:
                raise ShapeError(f"{name}: expected shape {self.values[name].shape}, got {np.shape(value)}")
            self.values[name][...] = value
        self.project()

    def n_scalars(self):
        return sum(v.size for v in self.values.values())


def finite_diff_check(params, loss_fn, rel_tol=1e-4, h=1e-5, analytic=None,
                      full_limit=200, n_sample=50, seed=0):
    """Compare analytic gradients with central differences.

    Parameters
    ----------
    params : ParamBundle
        Parameters to perturb in place (restored afterwards).
    loss_fn : callable
        ``loss_fn(params) -> float``; must be deterministic.
    rel_tol : float
        Pass threshold on ``|a - n| / max(|a|, |n|, 1e-8)``.
    analytic : dict, optional
        Name -> analytic gradient.  Defaults to a snapshot of ``params.grads``.
    full_limit, n_sample : int
        Matrices with more than ``full_limit`` scalars are checked on a seeded
        random subset of ``n_sample`` entries.

    Returns
    -------
    dict with ``per_param`` (name -> max relative error), ``max_rel_error``
    and ``passed``.
    """
    if analytic is None:
        analytic = {k: g.copy() for k, g in params.grads.items()}
    base = loss_fn(params)
    if loss_fn(params) != base:
        raise DeterminismError("loss_fn returned different values for identical parameters")

    rng = np.random.default_rng(seed)
    per_param = {}
    for name in params.names():
        value = params.values[name]
        flat = value.reshape(-1)
        free = np.arange(flat.size)
        if params.constraints.get(name) == "zero_diagonal":
            n = value.shape[0]
            free = free[free % (n + 1) != 0]
        if free.size > full_limit:
            idx = rng.choice(free, size=n_sample, replace=False)
        else:
            idx = free
        a_flat = np.asarray(analytic[name]).reshape(-1)
        worst = 0.0
        for k in idx:
            old = flat[k]
            flat[k] = old + h
            lp = loss_fn(params)
            flat[k] = old - h
            lm = loss_fn(params)
            flat[k] = old
            num = (lp - lm) / (2.0 * h)
            a = a_flat[k]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
        per_param[name] = worst
    max_err = max(per_param.values()) if per_param else 0.0
    return {"per_param": per_param, "max_rel_error": max_err, "passed": max_err < rel_tol}
