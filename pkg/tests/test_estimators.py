import io

import numpy as np
import pytest
from sklearn.base import clone

from _helpers import within_3se
from conftest import simulate
from dualmhe.estimators import (DualMHE, KalmanFilterEstimator, Mode, fie_fast_path,
                                initial_state, propagate_prior, records_to_csv, run, step)
from dualmhe.exceptions import DimensionMismatch, SolverInfeasible
from dualmhe.kalman import GaussianBelief, kf_predict, kf_run
from dualmhe.model import PolyhedralSet, SystemModel, polyhedron_contains, validate_model


def test_mhe_n0_is_kalman(reactor, reactor_data):
    model, _ = reactor
    _, ys = reactor_data
    recs = run(model, ys, "MHE", 0)
    kf = kf_run(model, ys)
    np.testing.assert_allclose([r.x_hat for r in recs], [b.mean for b in kf], atol=1e-8)
    np.testing.assert_allclose([r.cost_trace for r in recs], [np.trace(b.cov) for b in kf],
                               atol=1e-8)


def test_fie_equals_mhe(reactor, reactor_data):
    model, _ = reactor
    ys = reactor_data[1][:11]
    fie = run(model, ys, "FIE")
    mhe = run(model, ys, "MHE", 3)
    np.testing.assert_allclose([r.x_hat for r in fie], [r.x_hat for r in mhe], atol=1e-6)


def test_cmhe_equals_mhe_when_constraints_inactive(reactor, reactor_data):
    model, X = reactor
    ys = reactor_data[1][:20]
    mhe = run(model, ys, "MHE", 4)
    assert all(polyhedron_contains(X, r.x_hat) for r in mhe)
    cmhe = run(model, ys, "CMHE", 4, X)
    np.testing.assert_allclose([r.x_hat for r in cmhe], [r.x_hat for r in mhe], atol=1e-8)


def test_propagate_prior_examples():
    m = validate_model(SystemModel([[2.0]], [[1.0]], [[1.0]], [[1.0]], [0.0], [[1.0]]))
    S, x = propagate_prior(np.array([[1.0]]), [1.0], m)
    assert S[0, 0] == 5.0 and x[0] == 2.0
    ident = validate_model(SystemModel(np.eye(2), np.eye(2), np.zeros((2, 2)), np.eye(2),
                                       [0, 0], np.eye(2)))
    S0 = np.array([[2.0, 0.5], [0.5, 1.0]])
    S, x = propagate_prior(S0, [3.0, 4.0], ident)
    np.testing.assert_array_equal(S, S0)
    np.testing.assert_array_equal(x, [3, 4])


def test_propagate_prior_matches_kf_predict(reactor):
    model, _ = reactor
    S0 = np.diag([0.3, 0.2, 0.1])
    S, x = propagate_prior(S0, [1.0, 2.0, 3.0], model)
    b = kf_predict(GaussianBelief([1.0, 2.0, 3.0], S0), model)
    np.testing.assert_allclose(S, b.cov, rtol=1e-14)
    np.testing.assert_allclose(x, b.mean, rtol=1e-14)


def test_fast_path(reactor, reactor_data):
    model, _ = reactor
    ys = reactor_data[1][:7]
    fast = fie_fast_path(model, ys)
    np.testing.assert_allclose(fast[0].x_hat, kf_run(model, ys[:1])[0].mean)
    qp = run(model, ys, "FIE")
    np.testing.assert_allclose(fast[6].x_hat, qp[6].x_hat, atol=1e-8)
    assert fast[6].cost_trace == pytest.approx(qp[6].cost_trace, rel=1e-8)


def test_unconstrained_dominance(reactor, reactor_data):
    model, X = reactor
    ys = reactor_data[1][:12]
    for a, b in zip(run(model, ys, "CFIE", constraint=X), run(model, ys, "FIE")):
        assert a.cost_trace >= b.cost_trace - 1e-8


def test_window_bookkeeping(reactor, reactor_data):
    model, _ = reactor
    ys = reactor_data[1]
    state = initial_state(model, "MHE", 4)
    for t in range(9):
        _, state = step(state, ys[t], model)
        held = np.vstack(state.window)
        np.testing.assert_array_equal(held, ys[max(0, t - 4):t + 1])


def tight_problem():
    """Reactor-like plant started near the boundary so constraints activate."""
    rng = np.random.default_rng(3)
    A = np.array([[0.95, 0.0, 0.0], [0.05, 0.9, 0.0], [0.0, 0.1, 0.9]])
    m = validate_model(SystemModel(A, [[1.0, 0.5, 0.2]], 0.01 * np.eye(3), [[0.5]],
                                   [1.0, 0.0, 0.0], np.eye(3)))
    X = PolyhedralSet.nonnegative_orthant(3)
    _, ys = simulate(m, 15, rng, x0=[0.2, 0.0, 0.0])
    return m, X, ys


def test_constraints_active_and_satisfied():
    m, X, ys = tight_problem()
    for mode, N in (("CFIE", None), ("CMHE", 3)):
        recs = run(m, ys, mode, N, X)
        assert any(r.active_rows for r in recs)
        for r in recs:
            assert r.solver_status == "Optimal"
            assert np.all(X.H @ r.x_hat <= X.h + 1e-8)


def test_cfie_lag_one_handoff():
    # the time-t optimal controls, re-read at lag 1, give a feasible estimate
    m, X, ys = tight_problem()
    n = 3
    for r in run(m, ys, "CFIE", constraint=X):
        t = r.t
        if t < n + 1:
            continue
        a = r.alphas
        z = np.eye(3) + m.C.T @ a[0]
        for i in range(1, t):
            z = m.A.T @ z + m.C.T @ a[i]
        # estimate at t-1 from alpha_0..alpha_{t-1} and y_{t-1}..y_0
        x = z.T @ m.prior_mean - sum(a[i].T @ ys[t - 1 - i] for i in range(t))
        assert np.all(X.H @ x <= X.h + 1e-8)


def infeasible_setup():
    m = validate_model(SystemModel(np.diag([0.9, 0.5]), [[1.0, 1.0]], 0.01 * np.eye(2), [[1.0]],
                                   [0.0, 0.0], np.eye(2)))
    X = PolyhedralSet(-np.eye(2), -np.ones(2))  # x >= 1
    return m, X, np.zeros((3, 1))


def test_infeasible_step_falls_back():
    m, X, ys = infeasible_setup()
    recs = run(m, ys, "CMHE", 1, X)
    # startup (CFIE, prior mean 0) is infeasible; once the projected estimate
    # becomes the moving prior the QP is feasible again
    assert [(r.solver_status, r.fallback) for r in recs] == [
        ("Infeasible", True), ("Infeasible", True), ("Optimal", False)]
    for r in recs:
        np.testing.assert_allclose(r.x_hat, [1.0, 1.0], atol=1e-9)


def test_infeasible_step_can_raise():
    m, X, ys = infeasible_setup()
    with pytest.raises(SolverInfeasible):
        step(initial_state(m, "CFIE", constraint=X), ys[0], m, on_infeasible="raise")


def test_mode_constraint_mismatch(reactor):
    model, X = reactor
    with pytest.raises(ValueError):
        initial_state(model, "CMHE", 4)
    with pytest.raises(ValueError):
        initial_state(model, "MHE", 4, X)


def test_bad_measurement_length(reactor):
    model, _ = reactor
    with pytest.raises(DimensionMismatch):
        step(initial_state(model, "FIE"), [1.0, 2.0], model)


def test_records_to_csv(reactor, reactor_data):
    model, _ = reactor
    recs = run(model, reactor_data[1][:3], "MHE", 1)
    buf = io.StringIO()
    records_to_csv(recs, buf)
    lines = buf.getvalue().split("\r\n")
    assert lines[0].startswith("t,x_hat_0,x_hat_1,x_hat_2,cost_trace")
    assert len([ln for ln in lines if ln]) == 4


def test_mhe_monte_carlo_matches_cost(reactor):
    # Gaussian paths, unconstrained MHE: sample MSE at t=6 against the cost trace
    model, _ = reactor
    rng = np.random.default_rng(5)
    t, N = 6, 2
    data = [simulate(model, t, rng, x0=rng.multivariate_normal(model.prior_mean, model.prior_cov))
            for _ in range(400)]
    # the gains do not depend on the data, so one run gives the controls
    rec = run(model, data[0][1], "MHE", N)[t]
    errs = []
    for xs, ys in data:
        errs.append(np.sum((xs[t] - run(model, ys, "MHE", N)[t].x_hat) ** 2))
    ok, mean, se = within_3se(np.array(errs), rec.cost_trace)
    assert ok, (mean, se, rec.cost_trace)


def test_sklearn_interface(reactor, reactor_data):
    model, X = reactor
    ys = reactor_data[1][:10]
    est = DualMHE(model, mode="CMHE", horizon=4, constraint=X)
    assert est.get_params()["horizon"] == 4
    out = est.fit_transform(ys)
    assert out.shape == (10, 3)
    np.testing.assert_allclose(out, [r.x_hat for r in run(model, ys, "CMHE", 4, X)])
    assert est.cost_traces_.shape == (10,)
    c = clone(est).set_params(horizon=2)
    assert c.horizon == 2 and not hasattr(c, "records_")


def test_partial_fit_continues(reactor, reactor_data):
    model, _ = reactor
    ys = reactor_data[1][:8]
    a = DualMHE(model, mode="MHE", horizon=2).fit(ys)
    b = DualMHE(model, mode="MHE", horizon=2).partial_fit(ys[:3]).partial_fit(ys[3:])
    np.testing.assert_array_equal(a.estimates_, b.estimates_)


def test_kalman_estimator_transform(reactor, reactor_data):
    model, _ = reactor
    ys = reactor_data[1][:5]
    out = KalmanFilterEstimator(model).fit(ys).transform(ys)
    np.testing.assert_allclose(out, [b.mean for b in kf_run(model, ys)])


def test_mode_flags():
    assert Mode.CMHE.constrained and Mode.CMHE.moving
    assert not Mode.FIE.constrained and not Mode.CFIE.moving
