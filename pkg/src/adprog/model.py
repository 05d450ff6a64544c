"""The full recurrent model: per-step imputation, encoding and prediction.

Sequences are processed in batches of equal length.  Each batch carries the
model's *effective* input mask (observed and not artificially removed) next
to the original mask, so losses can score removed entries against their
true values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import encoder, heads, imputation
from .cohort import compute_delay_tensor
from .numerics import ParamBundle


@dataclass
class Batch:
    ids: list[str]
    times: np.ndarray      # (B, T)
    x: np.ndarray          # (B, T, D) model input, zero where not effectively observed
    m: np.ndarray          # (B, T, D) effective mask, float 0/1
    delta: np.ndarray      # (B, T, D) delays computed from the effective mask
    x_true: np.ndarray     # (B, T, D) values at originally observed entries
    m_true: np.ndarray     # (B, T, D) original mask, float 0/1
    removed: np.ndarray    # (B, T, D) 1 where observed but hidden from the model
    y: np.ndarray          # (B, T) int labels
    my: np.ndarray         # (B, T) label mask, float 0/1

    @property
    def size(self):
        return self.x.shape[0]

    @property
    def T(self):
        return self.x.shape[1]


def make_batch(subjects, keep=None, time_scale=1.0):
    """Stack equal-length subjects.  ``keep`` maps subject id -> (T, D) bool removal mask."""
    subjects = list(subjects)
    if not subjects:
        raise ValueError("empty batch")
    T = subjects[0].n_visits
    if any(s.n_visits != T for s in subjects):
        raise ValueError("all subjects in a batch must have the same number of visits")
    m_true = np.stack([s.mask for s in subjects])
    if keep is None:
        kp = np.ones_like(m_true)
    else:
        kp = np.stack([keep.get(s.subject_id, np.ones_like(s.mask)) for s in subjects])
    m_eff = m_true & kp
    values = np.stack([s.values for s in subjects])
    times = np.stack([s.times for s in subjects])
    delta = np.stack([compute_delay_tensor(s.times, me, time_scale) for s, me in zip(subjects, m_eff)])
    return Batch(
        ids=[s.subject_id for s in subjects],
        times=times,
        x=np.where(m_eff, values, 0.0),
        m=m_eff.astype(np.float64),
        delta=delta,
        x_true=np.where(m_true, values, 0.0),
        m_true=m_true.astype(np.float64),
        removed=(m_true & ~kp).astype(np.float64),
        y=np.stack([s.labels for s in subjects]),
        my=np.stack([s.label_mask for s in subjects]).astype(np.float64),
    )


@dataclass
class StepTrace:
    """Everything one time step computed, kept for backpropagation and analysis."""
    x: np.ndarray
    m: np.ndarray
    delta: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    imp: dict = field(repr=False)
    enc: dict = field(repr=False)
    out: heads.PredictionBundle = field(repr=False)

    @property
    def x_hat(self):
        return self.imp["x_hat"]

    @property
    def z_hat(self):
        return self.imp["z_hat"]

    @property
    def u_hat(self):
        return self.imp["u_hat"]

    @property
    def u_c(self):
        return self.imp["u_c"]

    @property
    def gamma(self):
        return self.imp["gamma"]

    @property
    def beta(self):
        return self.imp["beta"]

    @property
    def h(self):
        return self.enc["h"]

    @property
    def c(self):
        return self.enc["c"]


def stack(traces, attr):
    """Stack a per-step quantity into shape ``(B, T, ...)``."""
    return np.stack([getattr(tr, attr) for tr in traces], axis=1)


class ProgressionModel:
    """Imputation gates, decay-augmented LSTM cell and three prediction heads."""

    def __init__(self, feature_kinds, hidden=64, seed=0, time_scale=1.0, forget_bias=1.0):
        self.feature_kinds = list(feature_kinds)
        self.mri_index = np.array([d for d, k in enumerate(self.feature_kinds) if k == "MRI"], dtype=np.int64)
        self.cog_index = np.array([d for d, k in enumerate(self.feature_kinds) if k == "Cog"], dtype=np.int64)
        self.D = len(self.feature_kinds)
        self.H = int(hidden)
        self.time_scale = float(time_scale)
        rng = np.random.default_rng(seed)
        self.params = ParamBundle()
        imputation.init_params(self.params, self.D, self.H, rng)
        encoder.init_params(self.params, self.D, self.H, rng, forget_bias=forget_bias)
        heads.init_params(self.params, self.H, len(self.mri_index), len(self.cog_index), rng)

    def initial_state(self, B):
        return np.zeros((B, self.H)), np.zeros((B, self.H))

    def step(self, h_prev, c_prev, x, m, delta):
        p = self.params
        imp = imputation.forward(p, h_prev, x, m, delta)
        enc = encoder.forward(p, h_prev, c_prev, imp["u_c"], m, delta)
        out = heads.predict_outputs(p, enc["h"])
        return StepTrace(x, m, delta, h_prev, c_prev, imp, enc, out)

    def unroll(self, batch):
        """Run all time steps of ``batch``; returns one StepTrace per step."""
        h, c = self.initial_state(batch.size)
        traces = []
        for t in range(batch.T):
            tr = self.step(h, c, batch.x[:, t], batch.m[:, t], batch.delta[:, t])
            traces.append(tr)
            h, c = tr.h, tr.c
        return traces

    def backward(self, traces, d_x_hat=None, d_z_hat=None, d_u_hat=None,
                 d_mri=None, d_cog=None, d_logits=None):
        """Accumulate parameter gradients given loss gradients on traced outputs.

        Each seed has shape ``(B, T, ...)`` and may be None.  Gradients are
        added to ``self.params.grads``; call ``zero_grad`` first for a fresh
        gradient.
        """
        p = self.params
        B = traces[0].x.shape[0]
        T = len(traces)
        zeros_d = np.zeros((B, self.D))

        def seed(arr, t):
            return None if arr is None else arr[:, t]

        d_h_next = np.zeros((B, self.H))
        d_c_next = np.zeros((B, self.H))
        for t in reversed(range(T)):
            tr = traces[t]
            d_h = d_h_next + heads.backward(p, p, tr.h, seed(d_mri, t), seed(d_cog, t), seed(d_logits, t))
            d_h_prev, d_c_prev, d_u_c = encoder.backward(p, p, tr.enc, tr.h_prev, tr.c_prev, tr.delta,
                                                         d_h, d_c_next)
            d_h_prev = d_h_prev + imputation.backward(
                p, p, tr.imp, tr.h_prev, tr.m, tr.delta, d_u_c,
                zeros_d if d_x_hat is None else d_x_hat[:, t],
                zeros_d if d_z_hat is None else d_z_hat[:, t],
                zeros_d if d_u_hat is None else d_u_hat[:, t])
            d_h_next, d_c_next = d_h_prev, d_c_prev

    def assemble(self, mri, cog):
        """Place MRI and cognitive vectors back into feature order."""
        shape = mri.shape[:-1] + (self.D,)
        out = np.zeros(shape)
        out[..., self.mri_index] = mri
        out[..., self.cog_index] = cog
        return out


@dataclass
class Rollout:
    prefix: list[heads.PredictionBundle]
    future: list[heads.PredictionBundle]
    future_times: np.ndarray
    future_values: np.ndarray   # (horizon, D) forecasts for each future visit
    imputed: np.ndarray         # (P + horizon, D) completed observations
    cell_states: np.ndarray     # (P + horizon, H)

    @property
    def future_probs(self):
        return np.array([b.probs for b in self.future])


def rollout_forecast(model, seq, horizon, prefix_len=None, keep=None, visit_interval=1.0):
    """Encode the first ``prefix_len`` visits, then advance ``horizon`` visits on the model's own output.

    Future visits are presented with an all-zero mask, so the imputation
    gates substitute the model's estimates; the previous step's forecasts
    fill the value slots.  Status at future visit ``j`` comes from the hidden
    state after that visit has been consumed; feature values at future visit
    ``j`` are the forecasts made at the visit before it.
    """
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    P = seq.n_visits if prefix_len is None else int(prefix_len)
    if not 1 <= P <= seq.n_visits:
        raise ValueError(f"prefix_len must be in [1, {seq.n_visits}]")
    mask = seq.mask[:P]
    if keep is not None:
        mask = mask & keep[:P]
    times = seq.times[:P]
    x = np.where(mask, seq.values[:P], 0.0)
    delta = compute_delay_tensor(times, mask, model.time_scale)

    h, c = model.initial_state(1)
    prefix, imputed, cells = [], [], []
    m_prev = None
    for t in range(P):
        m_t = mask[t].astype(np.float64)[None]
        tr = model.step(h, c, x[t][None], m_t, delta[t][None])
        prefix.append(_squeeze(tr.out))
        imputed.append(tr.u_c[0])
        cells.append(tr.c[0])
        h, c = tr.h, tr.c
        m_prev = m_t
    if not prefix:
        raise RuntimeError("no model state to roll forward from")

    future, values, ftimes = [], [], []
    d_prev = delta[P - 1][None]
    t_prev = times[P - 1]
    last = prefix[-1]
    for _ in range(horizon):
        step_gap = visit_interval * model.time_scale
        d_t = np.where(m_prev > 0, step_gap, step_gap + d_prev)
        fed = model.assemble(last.mri, last.cog)[None]
        m_t = np.zeros_like(fed)
        tr = model.step(h, c, fed, m_t, d_t)
        t_prev = t_prev + visit_interval
        ftimes.append(t_prev)
        values.append(fed[0])
        last = _squeeze(tr.out)
        future.append(last)
        imputed.append(tr.u_c[0])
        cells.append(tr.c[0])
        h, c, m_prev, d_prev = tr.h, tr.c, m_t, d_t
    D = model.D
    return Rollout(prefix, future, np.array(ftimes),
                   np.array(values).reshape(horizon, D), np.array(imputed), np.array(cells))


def _squeeze(bundle):
    return heads.PredictionBundle(bundle.mri[0], bundle.cog[0], bundle.probs[0], bundle.logits[0])
