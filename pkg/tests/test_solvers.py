import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viscos import (FixedPointConfig, Flow, NewtonKrylovConfig, NoConvergence, PartitionedJacobian,
                    SingularMatrix, estimate_lipschitz_constants,
                    estimate_lipschitz_product, fixed_point_solve, make_partition, mixing_schedule,
                    newton_krylov_solve, solve_constraint, solve_constraint_batch, theorem1_contraction_matrix)

TIGHT_FP = FixedPointConfig(alpha0=1.0, beta0=1.0, decay=1.0, tol=1e-11, max_iter=2000)


def _problem(flow, observed, rng):
    part = make_partition(observed, flow.dim)
    x = rng.standard_normal(flow.dim)
    return part, x, part.gather_observed(flow.forward(x)), part.gather_hidden(x)


def test_identity_flow_fixed_point_one_iteration(rng):
    flow = Flow.identity(4)
    part, _, y_O, x_H = _problem(flow, [0, 2], rng)
    res = fixed_point_solve(flow, y_O, x_H, part, part, FixedPointConfig(tol=1e-12))
    np.testing.assert_array_equal(res.x_O, y_O)
    assert res.iterations == 1 and res.method == "fixed_point"


def test_identity_flow_newton_one_step(rng):
    flow = Flow.identity(4)
    part, _, y_O, x_H = _problem(flow, [1, 3], rng)
    res = newton_krylov_solve(flow, y_O, x_H, part, part, NewtonKrylovConfig(tol=1e-12))
    np.testing.assert_allclose(res.x_O, y_O, atol=1e-15)
    assert res.iterations == 1


def test_fixed_point_matches_newton_on_trained_flow(flow8, rng):
    part, x, y_O, x_H = _problem(flow8, [0, 1, 2, 3, 4], rng)
    assert estimate_lipschitz_product(flow8, part, part) < 1
    fp = fixed_point_solve(flow8, y_O, x_H, part, part, TIGHT_FP)
    nk = newton_krylov_solve(flow8, y_O, x_H, part, part, NewtonKrylovConfig(tol=1e-11))
    np.testing.assert_allclose(fp.x_O, nk.x_O, atol=1e-5)
    np.testing.assert_allclose(nk.x_O, part.gather_observed(x), atol=1e-9)


def test_paper_default_schedule_reaches_threshold(flow8, rng):
    part, _, y_O, x_H = _problem(flow8, [0, 1, 2, 3, 4], rng)
    res = fixed_point_solve(flow8, y_O, x_H, part, part, FixedPointConfig())
    assert res.residual <= 1e-3


def test_newton_strategies_agree(flow8, rng):
    part, _, y_O, x_H = _problem(flow8, [0, 2, 4, 6, 7], rng)
    sols = [newton_krylov_solve(flow8, y_O, x_H, part, part,
                                NewtonKrylovConfig(tol=1e-11, inverse_strategy=s)).x_O
            for s in ("direct", "preconditioned", "schur")]
    np.testing.assert_allclose(sols[0], sols[1], atol=1e-6)
    np.testing.assert_allclose(sols[1], sols[2], atol=1e-6)


def test_newton_matches_dense_newton(flow8, rng):
    part, _, y_O, x_H = _problem(flow8, [1, 3, 5], rng)
    x_O = np.zeros(3)
    for _ in range(50):
        x = part.scatter(x_O, x_H)
        r = part.gather_observed(flow8.forward(x)) - y_O
        if np.abs(r).max() < 1e-13:
            break
        A = flow8.jacobian(x)[np.ix_(part.observed, part.observed)]
        x_O = x_O - np.linalg.solve(A, r)
    res = newton_krylov_solve(flow8, y_O, x_H, part, part, NewtonKrylovConfig(tol=1e-12))
    np.testing.assert_allclose(res.x_O, x_O, atol=1e-7)


@pytest.mark.parametrize("error", [NoConvergence("stalled", 1e-7, 500), SingularMatrix("G^OO singular")])
def test_newton_falls_back_to_direct_when_preconditioner_fails(flow8, rng, monkeypatch, error):
    part, x, y_O, x_H = _problem(flow8, [0, 2, 5], rng)
    original = PartitionedJacobian.solve_J_OO

    def failing(self, rhs, strategy="preconditioned", gmres_cfg=None):
        if strategy != "direct":
            raise error
        return original(self, rhs, strategy, gmres_cfg)

    monkeypatch.setattr(PartitionedJacobian, "solve_J_OO", failing)
    cfg = NewtonKrylovConfig(tol=1e-11, inverse_strategy="preconditioned")
    res = newton_krylov_solve(flow8, y_O, x_H, part, part, cfg)
    np.testing.assert_allclose(res.x_O, part.gather_observed(x), atol=1e-9)


def test_hybrid_contractive_regime_uses_fixed_point(rng):
    flow = Flow.random(6, n_layers=4, width=16, lipschitz=0.5, seed=4)
    part, _, y_O, x_H = _problem(flow, [0, 1, 2], rng)
    res = solve_constraint(flow, y_O, x_H, part, part, FixedPointConfig())
    assert res.method == "fixed_point"


def test_hybrid_adversarial_regime_falls_back(rng):
    flow = Flow.random(2, n_layers=16, width=16, lipschitz=0.95, seed=7, weight_scale=1.0)
    part, _, y_O, x_H = _problem(flow, [0], rng)
    fp = FixedPointConfig(tol=1e-9, max_iter=5)
    res = solve_constraint(flow, y_O, x_H, part, part, fp, NewtonKrylovConfig(tol=1e-9))
    assert res.method == "hybrid"
    assert res.residual < 1e-9


def test_hybrid_identity_flow(rng):
    flow = Flow.identity(3)
    part, _, y_O, x_H = _problem(flow, [1], rng)
    res = solve_constraint(flow, y_O, x_H, part, part)
    assert res.method == "fixed_point" and res.iterations == 1


def test_batch_solver_matches_single(flow8, rng):
    masks, ys, xs = [], [], []
    for k in range(5):
        part, x, y_O, x_H = _problem(flow8, sorted(rng.choice(8, 1 + k, replace=False)), rng)
        masks.append(part.observed_mask)
        ys.append(flow8.forward(x))
        xs.append(x)
    masks = np.array(masks)
    out = solve_constraint_batch(flow8, np.array(ys), np.array(xs), masks, masks, TIGHT_FP)
    assert not out.failed.any()
    np.testing.assert_allclose(out.x, np.array(xs), atol=1e-8)


def test_newton_budget_exhausted(flow8, rng):
    part, _, y_O, x_H = _problem(flow8, [0, 1], rng)
    with pytest.raises(NoConvergence):
        newton_krylov_solve(flow8, y_O + 5, x_H, part, part, NewtonKrylovConfig(tol=1e-14, max_iter=1))


def test_contraction_matrix_examples():
    C, rho = theorem1_contraction_matrix(0.5, 1.0, 1.0, 1.0)
    np.testing.assert_allclose(C, [[0.0, 0.5], [0.0, 0.5]])
    assert abs(rho - 0.5) < 1e-15
    C, rho = theorem1_contraction_matrix(0.0, 0.0, 0.3, 0.6)
    np.testing.assert_allclose(C, np.diag([0.7, 0.4]))
    assert abs(rho - 0.7) < 1e-15
    _, rho = theorem1_contraction_matrix(0.9, 0.9, 0.5, 0.5)
    assert rho < 1


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 3), st.floats(0, 3), st.floats(0.01, 1), st.floats(0.01, 1))
def test_contraction_radius_below_one_iff_product_below_one(La, Lb, a, b):
    _, rho = theorem1_contraction_matrix(La, Lb, a, b)
    if La * Lb < 0.999:
        assert rho < 1
    elif La * Lb > 1.001:
        assert rho > 1


def test_mixing_schedule_decays():
    cfg = FixedPointConfig()
    assert mixing_schedule(cfg, 0) == (0.5, 0.5)
    a, b = mixing_schedule(cfg, 10)
    assert abs(a - 0.5 * 0.95**10) < 1e-15 and a == b


def test_lipschitz_estimate_identity_is_zero():
    flow = Flow.identity(4)
    part = make_partition([0, 1], 4)
    assert estimate_lipschitz_product(flow, part, part) == 0.0


def test_lipschitz_estimate_linear_below_operator_norms():
    flow = Flow.random_linear(4, n_layers=2, lipschitz=0.7, seed=1)
    part = make_partition([0, 1], 4)
    A = flow.jacobian(np.zeros(4))
    G = np.linalg.inv(A)
    bound_a = np.linalg.norm(A[np.ix_(part.hidden, part.observed)], 2)
    # f^H(., x^H) has derivative A^HO and g^O(y^O, .) has derivative G^OH
    La, Lb = estimate_lipschitz_constants(flow, part, part, n_probes=256)
    assert La <= bound_a + 1e-9
    assert La >= 0.5 * bound_a
    assert Lb <= np.linalg.norm(G[np.ix_(part.observed, part.hidden)], 2) + 1e-6


def test_lipschitz_estimate_reported_with_fixed_point_outcome(rng):
    flow = Flow.random(4, n_layers=8, width=16, lipschitz=0.5, seed=3)
    part, _, y_O, x_H = _problem(flow, [0, 1], rng)
    product = estimate_lipschitz_product(flow, part, part)
    assert np.isfinite(product) and product >= 0
    res = fixed_point_solve(flow, y_O, x_H, part, part, TIGHT_FP)
    assert res.residual < 1e-10
