"""Diagnostic suites run against a flow checkpoint.

Each check yields a row ``(name, value, threshold, passed)``. Numerical
failures inside a check (divergent series, failed inversions) count as a
failed row rather than an error.
"""
from dataclasses import dataclass

import numpy as np

from .conditioning import partitioned_joint_logpdf
from .errors import ViscosError
from .lad import clade_grad, lad_value, nlade_grad
from .linalg import dense_logabsdet, finite_diff_jacobian
from .oracles import build_grid_oracle
from .partition import PartitionedJacobian, make_partition
from .solvers import FixedPointConfig, NewtonKrylovConfig, newton_krylov_solve, solve_constraint

__all__ = ["CheckRow", "SUITES", "run_suite", "random_partition"]

SUITES = ("identities", "gradients", "solvers", "oracles")


@dataclass
class CheckRow:
    name: str
    value: float
    threshold: float
    passed: bool

    def as_dict(self):
        return {"name": self.name, "value": repr(float(self.value)), "threshold": repr(float(self.threshold)),
                "pass": int(self.passed)}


def _row(name, value, threshold):
    value = float(value)
    return CheckRow(name, value, threshold, bool(np.isfinite(value) and value <= threshold))


def _guard(name, threshold, fn):
    try:
        return _row(name, fn(), threshold)
    except (ViscosError, ArithmeticError, np.linalg.LinAlgError, FloatingPointError):
        return CheckRow(name, float("inf"), threshold, False)


def random_partition(rng, d, d_observed=None):
    k = int(rng.integers(1, d)) if d_observed is None else d_observed
    return make_partition(rng.choice(d, size=k, replace=False), d)


def _identities(flow, rng, n_points):
    rows = []
    d = flow.dim
    for i in range(n_points):
        x = rng.standard_normal(d)
        part = random_partition(rng, d)

        def roundtrip():
            return np.max(np.abs(flow.inverse(flow.forward(x), 1e-12) - x))

        def eq3():
            pj = PartitionedJacobian(flow, x, part, part)
            J = pj.lin.jacobian()
            G = pj.lin.inverse_jacobian()
            lhs = dense_logabsdet(J)
            rhs = dense_logabsdet(pj.dense_block(J, "O", "O")) - dense_logabsdet(pj.dense_block(G, "H", "H", inverse=True))
            return abs(lhs - rhs)

        def schur_product():
            pj = PartitionedJacobian(flow, x, part, part)
            J = pj.lin.jacobian()
            G = pj.lin.inverse_jacobian()
            b = lambda r, c: pj.dense_block(J, r, c)  # noqa: E731
            schur = b("H", "H") - b("H", "O") @ np.linalg.solve(b("O", "O"), b("O", "H"))
            g_hh = pj.dense_block(G, "H", "H", inverse=True)
            return np.max(np.abs(schur @ g_hh - np.eye(part.d_hidden)))

        def reciprocal():
            pj = PartitionedJacobian(flow, x, part, part)
            v = rng.standard_normal(part.d_observed)
            w = pj.solve_J_OO(v, "schur")
            return np.max(np.abs(pj.J_OO.matvec(w) - v)) / max(1.0, np.max(np.abs(v)))

        def joint():
            lp = partitioned_joint_logpdf(flow, part.gather_observed(x), part.gather_hidden(x), part, part)
            return abs(lp.value - flow.log_density_latent(x))

        rows += [
            _guard(f"roundtrip[{i}]", 1e-8, roundtrip),
            _guard(f"logdet_schur_identity[{i}]", 1e-6, eq3),
            _guard(f"schur_complement_product[{i}]", 1e-6, schur_product),
            _guard(f"reciprocal_inverse[{i}]", 1e-6, reciprocal),
            _guard(f"joint_logpdf[{i}]", 1e-6, joint),
        ]
    bound = max((layer.lipschitz_estimate() - layer.lipschitz_bound for layer in flow.layers), default=0.0)
    rows.append(_row("spectral_bound_excess", max(bound, 0.0), 1e-6))
    return rows


def _gradients(flow, rng, n_points):
    rows = []
    d = flow.dim
    for i in range(n_points):
        x = rng.standard_normal(d)
        part = random_partition(rng, d)

        def fd():
            return finite_diff_jacobian(lambda z: np.array([lad_value(flow, z, part, part)]), x)[0]

        def err(estimator):
            ref = fd()
            est = estimator(flow, x, part, part, probes="basis").grad
            return np.max(np.abs(est - ref)) / max(np.max(np.abs(ref)), 1e-3)

        rows.append(_guard(f"nlade_exact_vs_fd[{i}]", 1e-4, lambda: err(nlade_grad)))
        rows.append(_guard(f"clade_exact_vs_fd[{i}]", 1e-4, lambda: err(clade_grad)))
    return rows


def _solvers(flow, rng, n_problems):
    rows = []
    d = flow.dim
    fp = FixedPointConfig(alpha0=1.0, beta0=1.0, tol=1e-10, max_iter=500)
    for i in range(n_problems):
        part = random_partition(rng, d)
        x_true = rng.standard_normal(d)
        y_O = part.gather_observed(flow.forward(x_true))
        x_H = part.gather_hidden(x_true)
        out = {}

        def solve(strategy):
            if strategy not in out:
                cfg = NewtonKrylovConfig(tol=1e-10, inverse_strategy=strategy)
                out[strategy] = newton_krylov_solve(flow, y_O, x_H, part, part, cfg).x_O
            return out[strategy]

        def hybrid():
            res = solve_constraint(flow, y_O, x_H, part, part, fp, NewtonKrylovConfig(tol=1e-10))
            return np.max(np.abs(res.x_O - solve("preconditioned")))

        rows += [
            _guard(f"fixed_point_vs_newton[{i}]", 1e-6, hybrid),
            _guard(f"direct_vs_schur[{i}]", 1e-6, lambda: np.max(np.abs(solve("direct") - solve("schur")))),
            _guard(f"preconditioned_vs_schur[{i}]", 1e-6,
                   lambda: np.max(np.abs(solve("preconditioned") - solve("schur")))),
            _guard(f"recovers_truth[{i}]", 1e-6, lambda: np.max(np.abs(solve("schur") - part.gather_observed(x_true)))),
        ]
    return rows


def _oracles(flow, rng, n_points, observation=None):
    rows = []
    d = flow.dim
    problems = []
    if observation is not None:
        problems.append(observation)
    for _ in range(n_points if observation is None else 0):
        data = make_partition(np.arange(d - 1), d)
        y = flow.sample(1, seed=int(rng.integers(2**31)))[0]
        problems.append((data.gather_observed(y), data))
    for i, (y_O, data) in enumerate(problems):
        try:
            oracle = build_grid_oracle(flow, y_O, data)
        except (ViscosError, ArithmeticError, ValueError):
            rows.append(CheckRow(f"grid_oracle_build[{i}]", float("inf"), 0.0, False))
            continue
        rows.append(_row(f"grid_normalisation[{i}]", abs(oracle.weights.sum() - 1.0), 1e-6))
        rows.append(CheckRow(f"quadrature_log_marginal[{i}]", oracle.log_marginal, float("nan"), True))
    return rows


def run_suite(flow, suite="all", seed=0, n_points=5, n_problems=10, observation=None):
    """Run one suite (or ``'all'``) and return the list of :class:`CheckRow`.

    ``observation`` is an optional ``(y_O, data_partition)`` pair for the
    oracle suite; otherwise observations are drawn from the flow.
    """
    if suite != "all" and suite not in SUITES:
        raise ValueError(f"suite must be one of {SUITES + ('all',)}, got {suite!r}")
    rng = np.random.default_rng(seed)
    chosen = SUITES if suite == "all" else (suite,)
    rows = []
    for name in chosen:
        if name == "identities":
            rows += _identities(flow, rng, n_points)
        elif name == "gradients":
            rows += _gradients(flow, rng, n_points)
        elif name == "solvers":
            rows += _solvers(flow, rng, n_problems)
        else:
            rows += _oracles(flow, rng, n_points, observation)
    return rows
