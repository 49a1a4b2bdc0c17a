"""Variational conditioning of a pre-trained flow on observed coordinates.

The posterior lives on the hidden latent slots ``x^H``. For each draw the
observed latent slots ``x^O`` are recovered from the constraint
``f^O(x^O, x^H) = y^O`` and the ELBO integrand is

    log p0(x^H) - log q(x^H) + log p0(x^O) - log|det J^OO(x)|,

the ``G^HH`` terms of the joint density and of the change of variables to
``y^H`` having cancelled. Prior and entropy parts are integrated in closed
form; the rest is Monte Carlo.
"""
import csv
import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, SingularMatrix, SingularSubJacobian, SolverFailureRate
from .flows import StandardNormal
from .lad import clade_samples, nlade_samples
from .linalg import GmresConfig, LinearOperator, dense_logabsdet
from .partition import Partition, PartitionedJacobian, select_latent_partition
from .posterior import Adam, VariationalPosterior
from .solvers import FixedPointConfig, NewtonKrylovConfig, solve_constraint_batch

log = logging.getLogger(__name__)

__all__ = [
    "JointLogpdf",
    "ElboEstimate",
    "ConditionConfig",
    "ConditioningReport",
    "ConditionalSamples",
    "partitioned_joint_logpdf",
    "elbo_estimate",
    "elbo_sample_terms",
    "elbo_gradient",
    "sample_integrand_grad",
    "implicit_grad_xO",
    "fit_conditional",
    "conditional_sample",
    "choose_latent_partition",
]

REPORT_COLUMNS = [
    "step", "elbo", "prior_term", "entropy_term", "observed_term", "lad_term",
    "solver_iters", "solver_method", "residual", "n_failed",
]


# ---------------------------------------------------------------------------
# Joint density
# ---------------------------------------------------------------------------

@dataclass
class JointLogpdf:
    value: float
    log_prior_hidden: float
    logdet_G_HH: float
    log_prior_observed: float
    logdet_J_OO: float


def partitioned_joint_logpdf(flow, x_O, x_H, latent, data):
    """``log p(y)`` at ``y = f(x)`` assembled from the partitioned blocks.

    ``log p0(x^H) + log|det G^HH| + log p0(x^O) - log|det J^OO|`` with dense
    sub-determinants; ``G`` comes from the flow's inverse map.

    Raises
    ------
    SingularSubJacobian
    """
    x = latent.scatter(x_O, x_H)
    lin = flow.linearize(x)
    J = lin.jacobian()
    G = lin.inverse_jacobian()
    try:
        lad_oo = dense_logabsdet(J[np.ix_(list(data.observed), list(latent.observed))])
        lad_hh = dense_logabsdet(G[np.ix_(list(latent.hidden), list(data.hidden))])
    except SingularMatrix as exc:
        raise SingularSubJacobian(str(exc)) from exc
    lp_h = float(StandardNormal.logpdf(np.asarray(x_H, dtype=np.float64)))
    lp_o = float(StandardNormal.logpdf(np.asarray(x_O, dtype=np.float64)))
    return JointLogpdf(lp_h + lad_hh + lp_o - lad_oo, lp_h, lad_hh, lp_o, lad_oo)


# ---------------------------------------------------------------------------
# ELBO
# ---------------------------------------------------------------------------

@dataclass
class ElboEstimate:
    value: float
    n_samples: int
    prior_term: float
    entropy_term: float
    observed_term: float
    lad_term: float
    standard_error: float
    n_failed: int = 0
    log_weights: Optional[np.ndarray] = None  # log p(y^O, y^H) - log q(y^H), per draw

    @property
    def breakdown(self):
        return {
            "prior_term": self.prior_term,
            "entropy_term": self.entropy_term,
            "observed_term": self.observed_term,
            "lad_term": self.lad_term,
        }


def _logdet_blocks(flow, x, latent, data):
    """Dense ``log|det J^OO|`` for a batch of latent points."""
    J = flow.jacobian(x).reshape(-1, flow.dim, flow.dim)
    block = J[:, list(data.observed)][:, :, list(latent.observed)]
    sign, logdet = np.linalg.slogdet(block)
    if np.any(sign == 0):
        raise SingularSubJacobian("J^OO is singular at a sample")
    return logdet


def elbo_sample_terms(flow, x_full, latent, data):
    """Per-draw ``log p0(x^O)`` and ``log|det J^OO|`` at solved latent points."""
    x_full = np.atleast_2d(x_full)
    observed = StandardNormal.logpdf(latent.gather_observed(x_full))
    return observed, _logdet_blocks(flow, x_full, latent, data)


def _solve_draws(flow, x_hidden, y_O, latent, data, fp_cfg, nk_cfg):
    n = x_hidden.shape[0]
    y_obs = np.broadcast_to(data.embed(y_O, "observed"), (n, flow.dim))
    x_hid = latent.embed(x_hidden, "hidden")
    lat = np.broadcast_to(latent.observed_mask, (n, flow.dim))
    dat = np.broadcast_to(data.observed_mask, (n, flow.dim))
    return solve_constraint_batch(flow, y_obs, x_hid, lat, dat, fp_cfg, nk_cfg)


def _failure_rate_check(n_failed, n, limit):
    if n and n_failed / n > limit:
        raise SolverFailureRate(f"{n_failed} of {n} constraint solves failed (limit {limit:.0%})")


def elbo_estimate(flow, posterior, y_O, latent, data, n_samples=1000, rng_seed=0,
                  fp_cfg=None, nk_cfg=None, max_failure_rate=0.2):
    """Monte Carlo ELBO with closed-form prior and entropy terms.

    Draws whose constraint solve fails are skipped and counted.

    Raises
    ------
    DimensionMismatch
        Posterior dimension differs from ``d^H``.
    SolverFailureRate
        More than ``max_failure_rate`` of the draws failed.
    """
    if posterior.dim != latent.d_hidden:
        raise DimensionMismatch(f"posterior has dimension {posterior.dim}, expected {latent.d_hidden}")
    draws = posterior.sample(n_samples, rng_seed)
    solved = _solve_draws(flow, draws.x, y_O, latent, data, fp_cfg, nk_cfg)
    ok = ~solved.failed
    _failure_rate_check(int((~ok).sum()), n_samples, max_failure_rate)
    observed, logdet = elbo_sample_terms(flow, solved.x[ok], latent, data)
    prior = float(posterior.expected_log_prior())
    entropy = float(posterior.entropy())
    integrand = observed - logdet
    m = integrand.size
    se = float(integrand.std(ddof=1) / np.sqrt(m)) if m > 1 else float("inf")
    log_w = StandardNormal.logpdf(draws.x[ok]) - draws.log_q[ok] + integrand
    obs_term = float(observed.mean())
    lad_term = float(-logdet.mean())
    value = prior + entropy + obs_term + lad_term
    return ElboEstimate(value, m, prior, entropy, obs_term, lad_term, se, int((~ok).sum()), log_w)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def implicit_grad_xO(flow, x_O, x_H, latent, data, strategy="preconditioned", gmres_cfg=None,
                     trunc_tol=None):
    """Sensitivity ``d x^O / d x^H = -(J^OO)^{-1} J^OH`` as a matrix-free operator.

    Raises
    ------
    SingularSubJacobian
        On application, when GMRES breaks down on a singular block.
    """
    pj = PartitionedJacobian(flow, latent.scatter(x_O, x_H), latent, data, trunc_tol)
    J_OH = pj.J_OH

    def apply(v):
        return -pj.solve_J_OO(J_OH.matvec(v), strategy, gmres_cfg)

    def adjoint(w):
        return -J_OH.rmatvec(pj.solve_J_OO_T(w, strategy, gmres_cfg))

    return LinearOperator(latent.d_observed, latent.d_hidden, apply, adjoint, batched=True)


def _lad_grad(pj, cfg, rng):
    """Mean LAD gradient over ``cfg.n_probes`` probes (or exact with basis probes)."""
    flow, x = pj.flow, pj.x
    if cfg.estimator == "nlade":
        s = nlade_samples(flow, x, pj.latent, pj.data, cfg.n_probes, rng, cfg.inverse_strategy,
                          cfg.gmres, cfg.trunc_tol, cfg.lad_probes, pj=pj)
    elif cfg.estimator == "clade":
        s = clade_samples(flow, x, pj.latent, pj.data, cfg.n_probes, rng, cfg.gmres, cfg.trunc_tol,
                          cfg.lad_probes, pj=pj)
    else:
        raise ValueError(f"unknown estimator {cfg.estimator!r}")
    return s.sum(axis=0) if cfg.lad_probes == "basis" else s.mean(axis=0)


def sample_integrand_grad(flow, x_full, latent, data, cfg, rng):
    """Gradient of ``log p0(x^O) - log|det J^OO|`` w.r.t. ``x^H`` along the constraint."""
    pj = PartitionedJacobian(flow, x_full, latent, data, cfg.trunc_tol)
    lad = _lad_grad(pj, cfg, rng)
    g_o = -latent.gather_observed(x_full) - latent.gather_observed(lad)
    g_h = -latent.gather_hidden(lad)
    adj = pj.solve_J_OO_T(g_o, cfg.inverse_strategy, cfg.gmres)
    return g_h - pj.J_OH.rmatvec(adj)


def elbo_gradient(flow, posterior, eps, x_full, latent, data, cfg, rng):
    """Stochastic ELBO gradient, packed like ``posterior.to_vector()``.

    ``eps`` and ``x_full`` are the noise and the solved latent points of the
    successful draws.
    """
    grads = np.stack([sample_integrand_grad(flow, x, latent, data, cfg, rng) for x in x_full])
    return posterior.analytic_grad() + posterior.pathwise_grad(eps, grads) / len(x_full)


# ---------------------------------------------------------------------------
# Optimisation loop
# ---------------------------------------------------------------------------

@dataclass
class ConditionConfig:
    n_steps: int = 500
    batch_size: int = 8
    learning_rate: float = 1e-2
    estimator: str = "nlade"
    n_probes: int = 1
    lad_probes: str = "rademacher"
    inverse_strategy: str = "direct"
    n_reflectors: int = 50
    partition_policy: str = "aligned"
    partition_budget: int = 10
    init: str = "pullback"
    fill_value: float = 0.0
    seed: int = 0
    max_failure_rate: float = 0.2
    min_steps_for_abort: int = 10
    final_samples: int = 1000
    report_samples: int = 0
    trunc_tol: Optional[float] = None
    fixed_point: FixedPointConfig = field(default_factory=FixedPointConfig)
    newton_krylov: NewtonKrylovConfig = field(default_factory=NewtonKrylovConfig)
    gmres: GmresConfig = field(default_factory=lambda: GmresConfig(tol=1e-10, max_iter=200))

    def __post_init__(self):
        if self.estimator not in ("nlade", "clade"):
            raise ValueError(f"estimator must be 'nlade' or 'clade', got {self.estimator!r}")
        if self.partition_policy not in ("aligned", "greedy"):
            raise ValueError(f"partition_policy must be 'aligned' or 'greedy', got {self.partition_policy!r}")
        if self.init not in ("pullback", "prior"):
            raise ValueError(f"init must be 'pullback' or 'prior', got {self.init!r}")
        if self.n_steps < 0 or self.batch_size < 1:
            raise ValueError("n_steps must be >= 0 and batch_size >= 1")


@dataclass
class ConditioningReport:
    trace: list
    posterior: VariationalPosterior
    latent: Partition
    data: Partition
    y_observed: np.ndarray
    final: Optional[ElboEstimate]
    samples: Optional[np.ndarray]
    timings: dict

    @property
    def final_elbo(self):
        return None if self.final is None else self.final.value

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in self.trace:
                writer.writerow({k: _fmt(row[k]) for k in REPORT_COLUMNS})

    def save_posterior(self, path):
        self.posterior.save(
            path,
            latent_partition=self.latent.to_dict(),
            data_partition=self.data.to_dict(),
            y_observed=np.asarray(self.y_observed).tolist(),
        )


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def choose_latent_partition(flow, y_O, data, cfg):
    """Latent partition and the pull-back point used to pick it and to initialise ``mu``."""
    y_fill = data.scatter(y_O, np.full(data.d_hidden, cfg.fill_value))
    x_pull = flow.inverse(y_fill, 1e-10)
    if cfg.partition_policy == "greedy":
        latent = select_latent_partition(flow, x_pull, data, cfg.partition_budget)
    else:
        latent = data
    return latent, x_pull


def fit_conditional(flow, y_O, data, cfg=None, posterior=None):
    """Fit a Householder-Gaussian posterior over ``x^H`` given ``y^O``.

    Each step draws ``cfg.batch_size`` samples, solves the constraint for
    ``x^O``, forms the pathwise ELBO gradient through the implicit
    sensitivity of ``x^O`` and the chosen log-determinant estimator, and
    takes an Adam ascent step.

    Parameters
    ----------
    flow : Flow
    y_O : ndarray (d^O,)
        Observed values, ordered as ``data.observed``.
    data : Partition
        Observed/hidden split in data space.
    cfg : ConditionConfig
    posterior : VariationalPosterior, optional
        Starting point; overrides ``cfg.init``.

    Returns
    -------
    ConditioningReport

    Raises
    ------
    SolverFailureRate
        More than ``cfg.max_failure_rate`` of the steps hit a failed solve.
    """
    cfg = cfg or ConditionConfig()
    y_O = np.asarray(y_O, dtype=np.float64)
    if y_O.shape != (data.d_observed,):
        raise DimensionMismatch(f"y_O must have length {data.d_observed}")
    timings = {}
    t0 = time.perf_counter()
    latent, x_pull = choose_latent_partition(flow, y_O, data, cfg)
    if posterior is None:
        mu = latent.gather_hidden(x_pull) if cfg.init == "pullback" else None
        posterior = VariationalPosterior.standard(latent.d_hidden, cfg.n_reflectors, cfg.seed, mu)
    timings["setup"] = time.perf_counter() - t0

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.learning_rate)
    theta = posterior.to_vector()
    trace = []
    failed_steps = 0
    t0 = time.perf_counter()
    for step in range(cfg.n_steps):
        eps = rng.standard_normal((cfg.batch_size, latent.d_hidden))
        solved = _solve_draws(flow, posterior.transform(eps), y_O, latent, data,
                              cfg.fixed_point, cfg.newton_krylov)
        ok = ~solved.failed
        n_failed = int((~ok).sum())
        failed_steps += n_failed > 0
        if step + 1 >= cfg.min_steps_for_abort and failed_steps / (step + 1) > cfg.max_failure_rate:
            raise SolverFailureRate(
                f"{failed_steps} of {step + 1} steps had failed constraint solves "
                f"(limit {cfg.max_failure_rate:.0%})"
            )
        prior = float(posterior.expected_log_prior())
        entropy = float(posterior.entropy())
        methods = Counter(m for m, good in zip(solved.method, ok) if good)
        row = {
            "step": step,
            "prior_term": prior,
            "entropy_term": entropy,
            "solver_iters": float(solved.iterations[ok].mean()) if ok.any() else float("nan"),
            "solver_method": "hybrid" if methods.get("hybrid") else ("fixed_point" if ok.any() else "failed"),
            "residual": float(solved.residual[ok].max()) if ok.any() else float("nan"),
            "n_failed": n_failed,
        }
        if not ok.any():
            row.update(elbo=float("nan"), observed_term=float("nan"), lad_term=float("nan"))
            trace.append(row)
            continue
        observed, logdet = elbo_sample_terms(flow, solved.x[ok], latent, data)
        row["observed_term"] = float(observed.mean())
        row["lad_term"] = float(-logdet.mean())
        row["elbo"] = prior + entropy + row["observed_term"] + row["lad_term"]
        trace.append(row)
        grad = elbo_gradient(flow, posterior, eps[ok], solved.x[ok], latent, data, cfg, rng)
        theta = opt.step(theta, grad, maximize=True)
        posterior = posterior.with_vector(theta)
    timings["optimise"] = time.perf_counter() - t0

    final = None
    if cfg.final_samples > 0:
        t0 = time.perf_counter()
        final = elbo_estimate(flow, posterior, y_O, latent, data, cfg.final_samples, cfg.seed + 1,
                              cfg.fixed_point, cfg.newton_krylov, cfg.max_failure_rate)
        timings["final_elbo"] = time.perf_counter() - t0
    samples = None
    if cfg.report_samples > 0:
        t0 = time.perf_counter()
        samples = conditional_sample(flow, posterior, y_O, latent, data, cfg.report_samples,
                                     cfg.seed + 2, cfg.fixed_point, cfg.newton_krylov).y
        timings["sampling"] = time.perf_counter() - t0
    return ConditioningReport(trace, posterior, latent, data, y_O, final, samples, timings)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

@dataclass
class ConditionalSamples:
    y: np.ndarray  # (n_ok, d) completed data vectors
    x: np.ndarray  # (n_ok, d) latent points
    residual: np.ndarray
    n_failed: int


def conditional_sample(flow, posterior, y_O, latent, data, n, rng_seed=0, fp_cfg=None, nk_cfg=None,
                       max_failure_rate=1.0):
    """Draw ``n`` completions of ``y^O``; observed slots are copied from ``y_O``.

    Failed solves are dropped and counted.

    Raises
    ------
    SolverFailureRate
        More than ``max_failure_rate`` of the draws failed.
    """
    y_O = np.asarray(y_O, dtype=np.float64)
    if n == 0:
        empty = np.zeros((0, flow.dim))
        return ConditionalSamples(empty, empty.copy(), np.zeros(0), 0)
    draws = posterior.sample(n, rng_seed)
    solved = _solve_draws(flow, draws.x, y_O, latent, data, fp_cfg, nk_cfg)
    ok = ~solved.failed
    _failure_rate_check(int((~ok).sum()), n, max_failure_rate)
    y = solved.y[ok].copy()
    y[:, list(data.observed)] = y_O
    return ConditionalSamples(y, solved.x[ok], solved.residual[ok], int((~ok).sum()))

