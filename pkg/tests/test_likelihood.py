import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metacausal import autodiff as ad
from metacausal import likelihood as lik
from metacausal.nn import apply_mlp
from oracles import ridge_by_gradient_descent


def _setup(d=4, seed=0, hidden=16, feature_dim=8):
    rng = np.random.default_rng(seed)
    spec = lik.MechanismSpec(d, hidden=hidden, feature_dim=feature_dim)
    values = lik.init_mechanisms(rng, spec)
    for k in values:
        if ".b" in k:
            values[k] = rng.normal(0, 0.3, values[k].shape)
    return rng, spec, values


def _leaves(tape, values):
    return {k: tape.param(v, name=k) for k, v in values.items()}


def test_rejects_nonpositive_lambda():
    with pytest.raises(ValueError):
        lik.MechanismSpec(3, ridge_lambda=0.0)
    rng, spec, values = _setup()
    tape = ad.Tape()
    with pytest.raises(ad.SolverError):
        lik.ridge_adapt(rng.normal(size=(5, 4)), tape.const(np.zeros((4, 4))), _leaves(tape, values), 0.0)


def test_switch_selects_mechanism():
    rng, spec, values = _setup()
    tape = ad.Tape()
    P = _leaves(tape, values)
    x = rng.normal(size=4)
    col = np.array([1.0, 1.0, 0.0, 0.0])
    head = tape.const(rng.normal(size=spec.feature_dim))
    obs = lik.predict(x, col, 0.0, P, 2, head).data
    intv = lik.predict(x, col, 1.0, P, 2, head).data
    masked = tape.const((x * col)[None])
    np.testing.assert_allclose(obs, apply_mlp(P, "obs.2", masked).data[0, 0])
    expected = (apply_mlp(P, "int", masked, final_activation=True) @ head).data[0]
    np.testing.assert_allclose(intv, expected)
    half = lik.predict(x, col, 0.25, P, 2, head).data
    np.testing.assert_allclose(half, 0.75 * obs + 0.25 * intv)


def test_no_parents_means_constant_output():
    rng, spec, values = _setup()
    tape = ad.Tape()
    P = _leaves(tape, values)
    head = tape.const(rng.normal(size=spec.feature_dim))
    outs = [lik.predict(rng.normal(size=4), np.zeros(4), 0.3, P, 1, head).data for _ in range(3)]
    assert outs[0] == outs[1] == outs[2]


def test_non_parent_perturbation_is_bitwise_invisible():
    rng, spec, values = _setup()
    tape = ad.Tape()
    P = _leaves(tape, values)
    head = tape.const(rng.normal(size=spec.feature_dim))
    col = np.array([1.0, 0.0, 1.0, 0.0])
    x = rng.normal(size=4)
    y = x.copy()
    y[1] += 123.0
    y[3] -= 7.0
    a = lik.predict(x, col, 0.6, P, 0, head).data
    b = lik.predict(y, col, 0.6, P, 0, head).data
    assert a.tobytes() == b.tobytes()


def test_predict_rejects_non_finite_input():
    rng, spec, values = _setup()
    tape = ad.Tape()
    P = _leaves(tape, values)
    with pytest.raises(ad.NonFiniteError):
        lik.predict(np.array([np.nan, 0, 0, 0]), np.ones(4), 0.0, P, 0, tape.const(np.zeros(8)))
    with pytest.raises(ad.NonFiniteError):
        lik.batch_predict(np.full((2, 4), np.inf), tape.const(np.eye(4)), tape.const(np.zeros(4)), P, np.zeros((4, 8)))


def test_huge_lambda_shrinks_heads_to_zero():
    rng, spec, values = _setup()
    tape = ad.Tape()
    fit = lik.ridge_adapt(rng.normal(size=(10, 4)), tape.const(np.triu(np.ones((4, 4)), 1)), _leaves(tape, values), 1e8)
    assert max(np.linalg.norm(w.data) for w in fit.weights) < 1e-4


def test_one_dimensional_hand_value():
    tape = ad.Tape()
    x = np.array([1.0, 2.0, 3.0])
    w = lik.ridge_solve(tape.const(x[:, None]), 2 * x, 0.01)
    np.testing.assert_allclose(w.data, [28.0 / 14.01], rtol=1e-14)


def test_closed_form_matches_gradient_descent():
    rng, spec, values = _setup(feature_dim=8)
    tape = ad.Tape()
    support = rng.normal(size=(10, 4))
    adj = np.triu(np.ones((4, 4)), 1)
    fit = lik.ridge_adapt(support, tape.const(adj), _leaves(tape, values), 0.1)
    for i in range(4):
        h = fit.design_matrices[i].data
        ref = ridge_by_gradient_descent(h, support[:, i], 0.1)
        np.testing.assert_allclose(fit.weights[i].data, ref, rtol=1e-4, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12))
def test_normal_equation_residual(seed, n):
    rng, spec, values = _setup(seed=seed % 1000)
    tape = ad.Tape()
    support = rng.normal(size=(n, 4))
    adj = (rng.random((4, 4)) < 0.5) * np.triu(np.ones((4, 4)), 1)
    fit = lik.ridge_adapt(support, tape.const(adj), _leaves(tape, values), 0.1)
    assert fit.normal_equation_residual(0.1) < 1e-8
    assert len(fit.weights) == 4 and all(w.shape == (spec.feature_dim,) for w in fit.weights)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 10.0), st.floats(1.01, 100.0))
def test_monotone_shrinkage(seed, lam1, factor):
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(8, 5))
    y = rng.normal(size=8)
    tape = ad.Tape()
    w1 = lik.ridge_solve(tape.const(h), y, lam1).data
    w2 = lik.ridge_solve(tape.const(h), y, lam1 * factor).data
    assert np.linalg.norm(w2) <= np.linalg.norm(w1) + 1e-12


def test_zero_weight_nets_predict_biases():
    rng, spec, values = _setup()
    for k in values:
        if ".W" in k:
            values[k] = np.zeros_like(values[k])
    tape = ad.Tape()
    P = _leaves(tape, values)
    heads = rng.normal(size=(4, spec.feature_dim))
    m = np.array([0.0, 1.0, 0.0, 1.0])
    pred, resid = lik.batch_predict(rng.normal(size=(6, 4)), tape.const(np.ones((4, 4))), tape.const(m), P, heads)
    feature = np.tanh(values["int.b2"])
    for i in range(4):
        expected = heads[i] @ feature if m[i] else values[f"obs.{i}.b2"][0]
        np.testing.assert_allclose(pred.data[:, i], expected)


def test_interpolation_on_support():
    # d_h = 32 >= N = 10; intervened variables have 3 and 4 parents so H_i has full row rank
    rng, _, _ = _setup()
    spec = lik.MechanismSpec(5, hidden=64, feature_dim=32)
    values = lik.init_mechanisms(rng, spec)
    tape = ad.Tape()
    P = _leaves(tape, values)
    support = rng.normal(size=(10, 5))
    adj = np.triu(np.ones((5, 5)), 1)
    fit = lik.ridge_adapt(support, tape.const(adj), P, 1e-10)
    m = np.array([0.0, 0.0, 0.0, 1.0, 1.0])
    _, resid = lik.batch_predict(support, tape.const(adj), tape.const(m), P, fit.weights)
    assert np.max(np.abs(resid.data[:, 3:])) < 1e-3


def test_batch_equals_row_by_row():
    rng, spec, values = _setup(d=5)
    tape = ad.Tape()
    P = _leaves(tape, values)
    data = rng.normal(size=(7, 5))
    adj = (rng.random((5, 5)) < 0.5) * np.triu(np.ones((5, 5)), 1)
    m = rng.random(5)
    heads = rng.normal(size=(5, spec.feature_dim))
    pred, resid = lik.batch_predict(data, tape.const(adj), tape.const(m), P, heads)
    for n in range(7):
        for i in range(5):
            single = lik.predict(data[n], adj[:, i], m[i], P, i, tape.const(heads[i])).data
            assert abs(pred.data[n, i] - single) < 1e-12
    np.testing.assert_allclose(resid.data, data - pred.data, rtol=0, atol=0)


def test_gradient_reaches_trunk_through_the_solve():
    # all variables switched to the interventional head, so the observational
    # nets play no part; the trunk only enters via the ridge weights and H_i
    rng, spec, values = _setup()
    support, query = rng.normal(size=(6, 4)), rng.normal(size=(9, 4))
    adj = np.triu(np.ones((4, 4)), 1)

    def loss(tape, P):
        fit = lik.ridge_adapt(support, tape.const(adj), P, 0.1)
        pred, _ = lik.batch_predict(query, tape.const(adj), tape.const(np.ones(4)), P, fit.weights)
        return ad.mean(ad.square(query - pred))

    tape = ad.Tape()
    P = _leaves(tape, values)
    grads = tape.backward(loss(tape, P))
    assert all(np.all(grads.get(k, 0) == 0) for k in values if k.startswith("obs."))
    assert np.linalg.norm(grads["int.W0"]) > 0
    trunk = {k: v for k, v in values.items() if k.startswith("int.")}
    rest = {k: v for k, v in values.items() if not k.startswith("int.")}

    def trunk_only(tape, T):
        return loss(tape, {**T, **{k: tape.const(v) for k, v in rest.items()}})

    coords = {k: list(range(min(5, v.size))) for k, v in trunk.items()}
    assert ad.finite_diff_check(trunk_only, trunk, coords=coords) < 1e-4


def test_adjacency_gradient_through_masks():
    rng, spec, values = _setup()
    support, query = rng.normal(size=(6, 4)), rng.normal(size=(5, 4))
    m = np.array([0.3, 0.6, 0.2, 0.9])
    const_vals = values

    def loss(tape, adj):
        P = {k: tape.const(v) for k, v in const_vals.items()}
        fit = lik.ridge_adapt(support, adj, P, 0.1)
        pred, _ = lik.batch_predict(query, adj, tape.const(m), P, fit.weights)
        return ad.mean(ad.square(query - pred))

    assert ad.finite_diff_check(loss, rng.uniform(0.2, 0.8, (4, 4))) < 1e-4
