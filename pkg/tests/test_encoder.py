import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adprog import encoder, heads, imputation
from adprog.model import ProgressionModel, make_batch
from adprog.numerics import ParamBundle, ShapeError, finite_diff_check, sigmoid

from conftest import micro_setup


def make_params(D=3, H=4, seed=0, zero=False):
    p = ParamBundle()
    encoder.init_params(p, D, H, np.random.default_rng(seed))
    if zero:
        for n in p:
            p.values[n][...] = 0.0
    return p


def test_init_shapes_and_forget_bias():
    p = make_params(D=3, H=4)
    for g in encoder.GATES:
        assert p[f"W_{g}"].shape == (4, 4 + 6)
        assert p[f"b_{g}"].shape == (4,)
    assert np.all(p["b_f"] == 1.0) and np.all(p["b_i"] == 0.0)
    assert p["W_gamma_h"].shape == (4, 3)


def test_decay_hidden_examples():
    h = np.array([0.3, -0.2, 0.9])
    assert np.array_equal(encoder.decay_hidden(h, np.ones(3)), h)
    assert np.all(encoder.decay_hidden(np.zeros(3), np.array([0.1, 0.5, 1.0])) == 0)
    g = np.array([0.5, 0.25, 1.0])
    np.testing.assert_array_equal(encoder.decay_hidden(h, g), [h[k] * g[k] for k in range(3)])
    with pytest.raises(ShapeError):
        encoder.decay_hidden(h, np.ones(2))


def test_hidden_decay_range_and_zero_params():
    p = make_params(zero=True)
    assert np.all(encoder.hidden_decay(p, np.array([1.0, 4.0, 9.0])) == 1.0)
    p = make_params(seed=2)
    g = encoder.hidden_decay(p, np.random.default_rng(0).uniform(0, 10, size=(20, 3)))
    assert np.all((g > 0) & (g <= 1))


def test_cell_zero_params():
    p = make_params(zero=True)
    h, c, _ = encoder.cell_step(p, np.zeros(4), np.zeros(4), np.ones(3), np.ones(3))
    assert np.all(h == 0) and np.all(c == 0)
    c_prev = np.array([0.4, -1.0, 2.0, 0.0])
    h, c, _ = encoder.cell_step(p, np.zeros(4), c_prev, np.ones(3), np.ones(3))
    np.testing.assert_allclose(c, 0.5 * c_prev, atol=1e-15)
    np.testing.assert_allclose(h, 0.5 * np.tanh(0.5 * c_prev), atol=1e-15)


def test_cell_matches_gate_equations():
    r = np.random.default_rng(4)
    p = make_params(seed=4)
    h_hat, c_prev, u, m = r.normal(size=4), r.normal(size=4), r.normal(size=3), np.array([1.0, 0, 1])
    h, c, _ = encoder.cell_step(p, h_hat, c_prev, u, m)
    v = np.concatenate([h_hat, u, m])
    gate = {g: p[f"W_{g}"] @ v + p[f"b_{g}"] for g in encoder.GATES}
    c_ref = sigmoid(gate["f"]) * c_prev + sigmoid(gate["i"]) * np.tanh(gate["c"])
    np.testing.assert_allclose(c, c_ref, atol=1e-14)
    np.testing.assert_allclose(h, sigmoid(gate["o"]) * np.tanh(c_ref), atol=1e-14)


def test_cell_shape_error():
    with pytest.raises(ShapeError):
        encoder.cell_step(make_params(), np.zeros(5), np.zeros(4), np.zeros(3), np.zeros(3))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 20.0))
def test_gates_and_state_bounded(seed, scale):
    r = np.random.default_rng(seed)
    p = make_params(D=3, H=6, seed=seed % 89)
    for n in p:
        p.values[n] *= scale
    st_ = encoder.forward(p, r.uniform(-1, 1, size=(4, 6)), r.normal(size=(4, 6)) * 3,
                          r.normal(size=(4, 3)) * 3, (r.random((4, 3)) < 0.5) * 1.0,
                          r.uniform(0, 5, size=(4, 3)))
    for g in ("f", "i", "o"):
        assert np.all((st_[g] >= 0) & (st_[g] <= 1))
    assert np.all(np.abs(st_["g"]) <= 1)
    assert np.all(np.abs(st_["h"]) <= 1)
    assert np.all(np.isfinite(st_["c"]))


def test_backward_through_three_steps():
    r = np.random.default_rng(7)
    D, H, B, T = 3, 4, 2, 3
    p = make_params(D, H, seed=7)
    p.values["b_gamma_h"][...] = r.normal(size=H)
    p.add("u", r.normal(size=(T, B, D)))
    m = (r.random((T, B, D)) < 0.5) * 1.0
    delta = r.uniform(0.5, 3.0, size=(T, B, D))
    w_h, w_c = r.normal(size=(T, B, H)), r.normal(size=(T, B, H))

    def run(q):
        h, c = np.zeros((B, H)), np.zeros((B, H))
        states = []
        for t in range(T):
            st_ = encoder.forward(q, h, c, q["u"][t], m[t], delta[t])
            states.append((h, c, st_))
            h, c = st_["h"], st_["c"]
        return states

    def loss(q):
        return float(sum((w_h[t] * s["h"]).sum() + (w_c[t] * s["c"]).sum() for t, (_, _, s) in enumerate(run(q))))

    states = run(p)
    p.zero_grad()
    d_h, d_c = np.zeros((B, H)), np.zeros((B, H))
    for t in reversed(range(T)):
        h_prev, c_prev, st_ = states[t]
        d_h, d_c, d_u = encoder.backward(p, p, st_, h_prev, c_prev, delta[t], d_h + w_h[t], d_c + w_c[t])
        p.grads["u"][t] = d_u
    rep = finite_diff_check(p, loss, rel_tol=1e-4)
    assert rep["passed"], rep["per_param"]


# --- unroll -------------------------------------------------------------------

def test_unroll_length_and_single_step():
    cohort, model, _ = micro_setup(T=1, n_subjects=12, missing=0.0)
    traces = model.unroll(make_batch(cohort.subjects))
    assert len(traces) == 1
    np.testing.assert_array_equal(traces[0].h_prev, 0)
    np.testing.assert_array_equal(traces[0].x_hat, np.broadcast_to(model.params["b_x"], traces[0].x_hat.shape))
    cohort, model, batch = micro_setup(T=6)
    assert len(model.unroll(batch)) == 6


def test_unroll_two_steps_equals_manual_composition():
    cohort, model, batch = micro_setup(T=2, n_subjects=3)
    p = model.params
    traces = model.unroll(batch)
    h, c = np.zeros((3, model.H)), np.zeros((3, model.H))
    for t in range(2):
        x, m, d = batch.x[:, t], batch.m[:, t], batch.delta[:, t]
        x_hat, x_c = imputation.temporal_estimate(p, h, x, m)
        z_hat = imputation.multivariate_estimate(p, x_c)
        _, beta = imputation.fusion_weights(p, d, m)
        _, u_c = imputation.impute_step(x, m, x_hat, z_hat, beta)
        h_hat = encoder.decay_hidden(h, encoder.hidden_decay(p, d))
        h, c, _ = encoder.cell_step(p, h_hat, c, u_c, m)
        out = heads.predict_outputs(p, h)
        np.testing.assert_array_equal(u_c, traces[t].u_c)
        np.testing.assert_array_equal(h, traces[t].h)
        np.testing.assert_array_equal(c, traces[t].c)
        np.testing.assert_array_equal(out.probs, traces[t].out.probs)


def test_unroll_deterministic():
    _, model, batch = micro_setup()
    a, b = model.unroll(batch), model.unroll(batch)
    assert all(np.array_equal(x.h, y.h) for x, y in zip(a, b))
    assert np.array_equal(ProgressionModel(["MRI", "Cog"], 4, seed=3).params["W_f"],
                          ProgressionModel(["MRI", "Cog"], 4, seed=3).params["W_f"])
