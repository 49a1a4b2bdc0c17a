import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from viscos import (DimensionMismatch, GmresConfig, LinearOperator, NoConvergence, PartitionedJacobian,
                    SingularMatrix, ZeroReflector, dense_logabsdet, finite_diff_jacobian, gmres,
                    householder_apply, householder_matrix, hutchinson_trace, hutchinson_trace_grad_weight,
                    make_partition)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_gmres_identity_returns_rhs_exactly():
    r = np.arange(1.0, 9.0)
    res = gmres(LinearOperator.identity(8), r)
    np.testing.assert_array_equal(res.x, r)


def test_gmres_matches_dense_solve(rng):
    A = rng.standard_normal((6, 6)) + 6 * np.eye(6)
    b = rng.standard_normal(6)
    res = gmres(LinearOperator.from_dense(A), b, GmresConfig(tol=1e-13))
    np.testing.assert_allclose(res.x, np.linalg.solve(A, b), atol=1e-9)


def test_gmres_preconditioner_reduces_iterations(flow8, rng):
    part = make_partition([0, 1, 2, 3, 4, 5], 8)
    pj = PartitionedJacobian(flow8, rng.standard_normal(8), part, part)
    b = rng.standard_normal(6)
    plain = gmres(pj.J_OO, b, GmresConfig(tol=1e-10))
    pre = gmres(pj.J_OO, b, GmresConfig(tol=1e-10, preconditioner=pj.G_OO))
    np.testing.assert_allclose(plain.x, pre.x, atol=1e-8)
    assert pre.iterations < plain.iterations


def test_gmres_restart_still_converges(rng):
    A = rng.standard_normal((20, 20)) + 8 * np.eye(20)
    b = rng.standard_normal(20)
    res = gmres(LinearOperator.from_dense(A), b, GmresConfig(tol=1e-11, max_iter=400, restart=5))
    np.testing.assert_allclose(A @ res.x, b, atol=1e-8)


def test_gmres_budget_exhausted_raises():
    A = np.diag(np.arange(1.0, 31.0))
    with pytest.raises(NoConvergence):
        gmres(LinearOperator.from_dense(A), np.ones(30), GmresConfig(tol=1e-12, max_iter=3))


def test_gmres_stops_early_on_noise_floor():
    rng = np.random.default_rng(0)
    noisy = LinearOperator(3, 3, lambda v: 2.0 * v + 1e-6 * rng.standard_normal(3), lambda u: 2.0 * u)
    with pytest.raises(NoConvergence) as exc:
        gmres(noisy, np.ones(3), GmresConfig(tol=1e-12, max_iter=500))
    assert exc.value.iterations < 100


def test_gmres_singular_operator_raises():
    with pytest.raises(SingularMatrix):
        gmres(LinearOperator.from_dense(np.zeros((3, 3))), np.ones(3))


def test_gmres_zero_rhs_returns_zero():
    res = gmres(LinearOperator.identity(4), np.zeros(4))
    np.testing.assert_array_equal(res.x, np.zeros(4))


def test_operator_shape_checks():
    op = LinearOperator.from_dense(np.ones((2, 3)))
    with pytest.raises(DimensionMismatch):
        op.matvec(np.ones(2))
    with pytest.raises(DimensionMismatch):
        op.rmatvec(np.ones(3))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 3), elements=finite), arrays(np.float64, (3,), elements=finite),
       arrays(np.float64, (4,), elements=finite))
def test_operator_adjoint_identity(M, v, u):
    op = LinearOperator.from_dense(M)
    assert abs(op.matvec(v) @ u - v @ op.rmatvec(u)) <= 1e-9 * (1 + np.abs(M).sum() * 100)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 9), st.integers(0, 2**31 - 1))
def test_gmres_residual_property(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n)) + 2 * n * np.eye(n)
    b = rng.standard_normal(n)
    res = gmres(LinearOperator.from_dense(A), b, GmresConfig(tol=1e-12))
    assert np.linalg.norm(A @ res.x - b) <= 1e-9 * np.linalg.norm(b)
    assert res.iterations <= n


def test_hutchinson_identity_probe_norm():
    z, w = hutchinson_trace_grad_weight(LinearOperator.identity(10), rng_seed=3, n_probes=1)
    assert float(z[0] @ w[0]) == 10.0


def test_hutchinson_diagonal_within_three_se():
    est, se = hutchinson_trace(LinearOperator.from_dense(np.diag(np.arange(1.0, 7.0))), 0, 10_000)
    # Rademacher probes see a diagonal exactly
    assert abs(est - 21.0) <= max(3 * se, 1e-12)


def test_hutchinson_symmetric_within_one_percent(rng):
    B = rng.standard_normal((8, 8))
    S = B + B.T + 8 * np.eye(8)
    est, _ = hutchinson_trace(LinearOperator.from_dense(S), 1, 100_000)
    assert abs(est - np.trace(S)) <= 0.01 * abs(np.trace(S))


def test_hutchinson_rejects_rectangular():
    with pytest.raises(DimensionMismatch):
        hutchinson_trace_grad_weight(LinearOperator.from_dense(np.ones((2, 3))), 0)


def test_householder_empty_is_identity():
    x = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(householder_apply([], x), x)


def test_householder_single_reflector():
    out = householder_apply([np.array([1.0, 0.0, 0.0])], np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(out, [-1.0, 2.0, 3.0], atol=1e-15)


def test_householder_many_reflectors_orthogonal(rng):
    V = rng.standard_normal((50, 16))
    x = rng.standard_normal(16)
    assert abs(np.linalg.norm(householder_apply(V, x)) - np.linalg.norm(x)) < 1e-10
    Q = householder_matrix(V, 16)
    np.testing.assert_allclose(Q.T @ Q, np.eye(16), atol=1e-9)
    np.testing.assert_allclose(Q @ x, householder_apply(V, x), atol=1e-12)


def test_householder_transpose_inverts(rng):
    V = rng.standard_normal((7, 5))
    x = rng.standard_normal((3, 5))
    np.testing.assert_allclose(householder_apply(V, householder_apply(V, x), transpose=True), x, atol=1e-12)


def test_householder_zero_reflector_rejected():
    with pytest.raises(ZeroReflector):
        householder_apply([np.zeros(3)], np.ones(3))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(0.1, 3)), arrays(np.float64, (6,), elements=finite))
def test_householder_preserves_norm_property(V, x):
    assert abs(np.linalg.norm(householder_apply(V, x)) - np.linalg.norm(x)) <= 1e-9 * (1 + np.linalg.norm(x))


def test_finite_diff_identity_and_affine(rng):
    x = rng.standard_normal(5)
    eps = 1e-5
    np.testing.assert_allclose(finite_diff_jacobian(lambda v: v, x, eps), np.eye(5), atol=eps**2)
    A = rng.standard_normal((3, 5))
    b = rng.standard_normal(3)
    np.testing.assert_allclose(finite_diff_jacobian(lambda v: A @ v + b, x, eps), A, atol=eps**2)


def test_finite_diff_matches_jvp_columns(flow8, rng):
    x = rng.standard_normal(8)
    fd = finite_diff_jacobian(flow8.forward, x, 1e-5)
    cols = np.stack([flow8.jvp(x, e) for e in np.eye(8)], axis=1)
    np.testing.assert_allclose(fd, cols, atol=1e-6)


def test_dense_logabsdet_examples(rng):
    assert dense_logabsdet(np.eye(12)) == 0.0
    assert abs(dense_logabsdet(np.diag([2.0, 0.5]))) < 1e-15
    M = rng.standard_normal((10, 10))
    assert abs(dense_logabsdet(M) - np.log(np.linalg.svd(M, compute_uv=False)).sum()) < 1e-9


def test_dense_logabsdet_singular():
    with pytest.raises(SingularMatrix):
        dense_logabsdet(np.ones((3, 3)))
