import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viscos import (Flow, clade_grad, clade_samples, dense_logabsdet, finite_diff_jacobian, lad_value,
                    make_partition, nlade_grad, nlade_samples)


def _fd_grad(flow, x, part):
    return finite_diff_jacobian(lambda z: np.array([lad_value(flow, z, part, part)]), x)[0]


@pytest.mark.parametrize("estimator", [nlade_grad, clade_grad])
def test_identity_flow_zero_gradient(estimator, rng):
    part = make_partition([0, 2], 4)
    g = estimator(Flow.identity(4), rng.standard_normal(4), part, part, n_probes=5)
    np.testing.assert_array_equal(g.grad, np.zeros(4))


@pytest.mark.parametrize("estimator", [nlade_grad, clade_grad])
@pytest.mark.parametrize("n_probes", [1, 7])
def test_linear_flow_exact_zero(estimator, n_probes, rng):
    flow = Flow.random_linear(5, n_layers=2, seed=3)
    part = make_partition([0, 1, 3], 5)
    g = estimator(flow, rng.standard_normal(5), part, part, n_probes=n_probes, rng_seed=2)
    np.testing.assert_array_equal(g.grad, np.zeros(5))


def test_lad_value_matches_dense(flow6, rng):
    x = rng.standard_normal(6)
    part = make_partition([1, 2, 5], 6)
    J = flow6.jacobian(x)
    assert lad_value(flow6, x, part, part) == pytest.approx(dense_logabsdet(J[np.ix_([1, 2, 5], [1, 2, 5])]))


@pytest.mark.parametrize("strategy", ["schur", "direct", "preconditioned"])
def test_nlade_basis_probes_exact(flow6, rng, strategy):
    x = rng.standard_normal(6)
    part = make_partition([0, 3, 4], 6)
    g = nlade_grad(flow6, x, part, part, probes="basis", strategy=strategy)
    np.testing.assert_allclose(g.grad, _fd_grad(flow6, x, part), atol=1e-7)


def test_clade_basis_probes_exact(flow6, rng):
    x = rng.standard_normal(6)
    part = make_partition([0, 3, 4], 6)
    g = clade_grad(flow6, x, part, part, probes="basis", trunc_tol=1e-14)
    np.testing.assert_allclose(g.grad, _fd_grad(flow6, x, part), atol=1e-7)


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_exact_estimators_agree_property(d, seed):
    rng = np.random.default_rng(seed)
    flow = Flow.random(d, n_layers=2, width=8, seed=seed)
    part = make_partition(rng.choice(d, int(rng.integers(1, d)), replace=False), d)
    x = rng.standard_normal(d)
    a = nlade_grad(flow, x, part, part, probes="basis").grad
    b = clade_grad(flow, x, part, part, probes="basis", trunc_tol=1e-14).grad
    np.testing.assert_allclose(a, b, atol=1e-8)


def test_stochastic_estimates_unbiased(flow6, rng):
    x = rng.standard_normal(6)
    part = make_partition([1, 2, 4], 6)
    exact = nlade_grad(flow6, x, part, part, probes="basis").grad
    for est in (nlade_grad, clade_grad):
        g = est(flow6, x, part, part, n_probes=4000, rng_seed=5)
        assert np.all(np.abs(g.grad - exact) <= 4.5 * g.se + 1e-12)


def test_samples_are_per_probe(flow6, rng):
    x = rng.standard_normal(6)
    part = make_partition([0, 5], 6)
    s1 = nlade_samples(flow6, x, part, part, n_probes=9, rng_seed=1)
    s2 = clade_samples(flow6, x, part, part, n_probes=9, rng_seed=1)
    assert s1.shape == s2.shape == (9, 6)
    np.testing.assert_array_equal(s1, nlade_samples(flow6, x, part, part, n_probes=9, rng_seed=1))


def test_clade_inner_solve_touches_only_hidden_block(flow6, rng):
    x = rng.standard_normal(6)
    part = make_partition([0, 1, 2, 3, 4], 6)
    c = clade_grad(flow6, x, part, part, n_probes=4, rng_seed=0)
    n = nlade_grad(flow6, x, part, part, n_probes=4, rng_seed=0, strategy="direct")
    assert c.stats["inner_solve_dims"] == [1]
    assert n.stats["inner_solve_dims"] == [5]
    assert c.stats["gmres_iterations"] < n.stats["gmres_iterations"]
