"""Brute-force references: grid quadrature, rejection sampling, importance sampling, metrics.

Densities are evaluated directly by change of variables on the full
Jacobian, never through the partitioned identities they are meant to check.
"""
import csv
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .conditioning import _solve_draws
from .errors import AcceptanceTooLow, DegenerateWeights, GridTooCoarse, InvalidIndices

__all__ = [
    "ConditionalOracle",
    "build_grid_oracle",
    "rejection_conditional_sample",
    "RejectionResult",
    "importance_log_marginal",
    "ImportanceEstimate",
    "metrics",
    "ks_to_oracle",
    "gaussian_conditional",
]


@dataclass
class ConditionalOracle:
    """Normalised conditional density of ``y^H`` on a tensor grid (``d^H <= 2``)."""

    y_observed: np.ndarray
    hidden: tuple
    grids: list
    log_table: np.ndarray  # normalised log p(y^H | y^O) on the grid
    log_marginal: float  # log p(y^O)

    @property
    def weights(self):
        """Trapezoid weights times density; sums to 1."""
        w = np.exp(self.log_table)
        for axis, g in enumerate(self.grids):
            w = w * _expand(_trapezoid_weights(g), axis, len(self.grids))
        return w

    def mean(self):
        w = self.weights
        mesh = np.meshgrid(*self.grids, indexing="ij")
        return np.array([np.sum(w * m) for m in mesh])

    def var(self):
        w = self.weights
        mesh = np.meshgrid(*self.grids, indexing="ij")
        mu = self.mean()
        return np.array([np.sum(w * (m - c) ** 2) for m, c in zip(mesh, mu)])

    def marginal_cdf(self, axis=0):
        """Cumulative distribution of one hidden coordinate as ``(grid, cdf)``."""
        p = np.exp(self.log_table)
        if p.ndim == 2:
            p = np.trapezoid(p, self.grids[1 - axis], axis=1 - axis)
        g = self.grids[axis]
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (p[1:] + p[:-1]) * np.diff(g))])
        return g, cdf / cdf[-1]

    def cdf(self, t, axis=0):
        g, c = self.marginal_cdf(axis)
        return np.interp(t, g, c, left=0.0, right=1.0)

    def to_csv(self, path):
        mesh = np.meshgrid(*self.grids, indexing="ij")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([f"y{h}" for h in self.hidden] + ["log_density"])
            for idx in np.ndindex(self.log_table.shape):
                writer.writerow([repr(float(m[idx])) for m in mesh] + [repr(float(self.log_table[idx]))])


def _trapezoid_weights(g):
    w = np.zeros_like(g)
    dx = np.diff(g)
    w[:-1] += dx / 2
    w[1:] += dx / 2
    return w


def _expand(v, axis, ndim):
    shape = [1] * ndim
    shape[axis] = v.size
    return v.reshape(shape)


def _grid_logpdf(flow, y_O, data, grids, tol):
    mesh = np.meshgrid(*grids, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    y = data.scatter(np.broadcast_to(y_O, (pts.shape[0], data.d_observed)), pts)
    return flow.log_density(y, tol).reshape(mesh[0].shape)


def _log_integral(log_table, grids):
    w = np.zeros_like(log_table)
    for axis, g in enumerate(grids):
        w = w + np.log(_expand(_trapezoid_weights(g), axis, len(grids)))
    return float(logsumexp(log_table + w))


def build_grid_oracle(flow, y_O, data, grid=None, n_points=512, scale_units=6.0, tol=1e-12,
                      drift_tol=1e-4):
    """Trapezoidal quadrature of ``p(y^H | y^O)`` on a tensor grid.

    Parameters
    ----------
    grid : list of (lo, hi), optional
        Range per hidden coordinate. By default a pilot pass over a wide
        range locates the conditional and the grid spans ``scale_units``
        standard deviations either side of its mean.
    n_points : int
        Points per hidden coordinate.

    Raises
    ------
    InvalidIndices
        More than two hidden coordinates.
    GridTooCoarse
        The normaliser moves by more than ``drift_tol`` (relative) when the
        resolution is doubled, or the edges carry non-negligible mass.
    """
    y_O = np.asarray(y_O, dtype=np.float64)
    if data.d_hidden > 2:
        raise InvalidIndices("grid quadrature supports at most two hidden coordinates")
    if grid is None:
        pilot = [np.linspace(-20.0, 20.0, 801 if data.d_hidden == 1 else 201)] * data.d_hidden
        lt = _grid_logpdf(flow, y_O, data, pilot, 1e-8)
        logz = _log_integral(lt, pilot)
        probe = ConditionalOracle(y_O, data.hidden, pilot, lt - logz, logz)
        mu, sd = probe.mean(), np.sqrt(probe.var())
        grid = [(m - scale_units * s, m + scale_units * s) for m, s in zip(mu, sd)]
    grids = [np.linspace(lo, hi, n_points) for lo, hi in grid]
    log_table = _grid_logpdf(flow, y_O, data, grids, tol)
    logz = _log_integral(log_table, grids)

    fine = [np.linspace(lo, hi, 2 * n_points - 1) for lo, hi in grid]
    logz_fine = _log_integral(_grid_logpdf(flow, y_O, data, fine, tol), fine)
    if abs(np.expm1(logz_fine - logz)) > drift_tol:
        raise GridTooCoarse(f"normaliser drift {abs(np.expm1(logz_fine - logz)):.2e} between n and 2n points")
    oracle = ConditionalOracle(y_O, data.hidden, grids, log_table - logz, logz)
    edge = _edge_mass(oracle)
    if edge > drift_tol:
        raise GridTooCoarse(f"grid edges carry estimated mass {edge:.2e}")
    return oracle


def _edge_mass(oracle):
    """Mass bound outside the grid from the edge density times the grid span."""
    p = np.exp(oracle.log_table)
    total = 0.0
    for axis, g in enumerate(oracle.grids):
        span = g[-1] - g[0]
        edges = np.take(p, [0, -1], axis=axis)
        total += float(edges.max()) * span
    return total


# ---------------------------------------------------------------------------
# Rejection sampling
# ---------------------------------------------------------------------------

@dataclass
class RejectionResult:
    samples: np.ndarray  # (n_accepted, d) joint draws within the band
    acceptance_rate: float
    n_proposed: int


def rejection_conditional_sample(flow, y_O, data, tol_band, n, seed=0, batch=50_000,
                                 max_proposals=20_000_000, min_rate=1e-6):
    """Approximate conditional draws: keep joint samples with ``|y^O_s - y^O|_inf < tol_band``.

    The result is biased by ``O(tol_band)``.

    Raises
    ------
    AcceptanceTooLow
        Acceptance rate below ``min_rate`` once ``max_proposals`` are used, or
        projected to stay below it.
    """
    if tol_band <= 0:
        raise ValueError("tol_band must be positive")
    y_O = np.asarray(y_O, dtype=np.float64)
    if n == 0:
        return RejectionResult(np.zeros((0, flow.dim)), float("nan"), 0)
    rng = np.random.default_rng(seed)
    kept = []
    n_acc = 0
    proposed = 0
    obs = list(data.observed)
    while n_acc < n and proposed < max_proposals:
        x = rng.standard_normal((batch, flow.dim))
        y = flow.forward(x)
        hit = np.max(np.abs(y[:, obs] - y_O), axis=1) < tol_band
        kept.append(y[hit])
        n_acc += int(hit.sum())
        proposed += batch
    rate = n_acc / proposed
    if rate < min_rate:
        raise AcceptanceTooLow(f"acceptance rate {rate:.2e} below {min_rate:.0e}")
    samples = np.concatenate(kept)[:n]
    return RejectionResult(samples, rate, proposed)


# ---------------------------------------------------------------------------
# Importance sampling
# ---------------------------------------------------------------------------

@dataclass
class ImportanceEstimate:
    value: float
    standard_error: float
    ess: float
    n: int


def importance_log_marginal(flow, posterior, y_O, latent, data, n=1000, seed=0, fp_cfg=None, nk_cfg=None,
                            min_ess=10.0):
    """``log p(y^O)`` by importance sampling with the posterior as proposal.

    Weights are ``p(y) / q_Y(y^H)`` where ``p`` is the full change-of-variables
    density and ``q_Y`` the posterior pushed to data space through the dense
    Jacobian of ``y^H -> x^H`` (``G^HH``). The standard error is the jackknife
    over draws. Failed constraint solves are dropped.

    Raises
    ------
    DegenerateWeights
        Effective sample size below ``min_ess``.
    """
    draws = posterior.sample(n, seed)
    solved = _solve_draws(flow, draws.x, y_O, latent, data, fp_cfg, nk_cfg)
    ok = ~solved.failed
    x = solved.x[ok]
    J = flow.jacobian(x).reshape(-1, flow.dim, flow.dim)
    G = np.linalg.inv(J)
    _, logdet_g_hh = np.linalg.slogdet(G[:, list(latent.hidden)][:, :, list(data.hidden)])
    log_p = flow.log_density_latent(x)
    log_w = log_p - draws.log_q[ok] - logdet_g_hh
    m = log_w.size
    lse = logsumexp(log_w)
    value = lse - np.log(m)
    w = np.exp(log_w - lse)
    ess = 1.0 / np.sum(w**2)
    if ess < min_ess:
        raise DegenerateWeights(f"effective sample size {ess:.1f} below {min_ess}")
    if m < 2:
        return ImportanceEstimate(float(value), float("inf"), float(ess), m)
    # leave-one-out log-mean-exp
    rest = np.log1p(-np.minimum(w, 1.0 - 1e-16)) + lse
    loo = rest - np.log(m - 1)
    se = np.sqrt((m - 1) / m * np.sum((loo - loo.mean()) ** 2))
    return ImportanceEstimate(float(value), float(se), float(ess), m)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def ks_to_oracle(samples_h, oracle, axis=0):
    """One-sample Kolmogorov-Smirnov distance of a hidden coordinate to the oracle CDF."""
    return float(stats.kstest(np.asarray(samples_h, dtype=np.float64), lambda t: oracle.cdf(t, axis)).statistic)


def metrics(samples, reference, columns=None, oracle=None, bins=64):
    """Compare samples against reference values or samples.

    Parameters
    ----------
    samples : ndarray (n, k)
    reference : ndarray (m, k) or (k,)
        Ground-truth values (broadcast) for RMSE; as samples for KS.
    columns : sequence of int, optional
        Columns to use (e.g. the hidden coordinates); default all.
    oracle : ConditionalOracle, optional
        When given with one column, adds the total-variation distance of a
        histogram of the samples to the oracle density.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    reference = np.asarray(reference, dtype=np.float64)
    if reference.ndim == 1:
        reference = reference[None, :]
    if samples.shape[1] != reference.shape[1]:
        raise ValueError("samples and reference must have matching dimensions")
    cols = list(range(samples.shape[1])) if columns is None else list(columns)
    s, r = samples[:, cols], reference[:, cols]
    if r.shape[0] in (1, s.shape[0]):
        rmse = float(np.sqrt(np.mean((s - r) ** 2)))
    else:
        rmse = float(np.sqrt(np.mean((s - r.mean(axis=0)) ** 2)))
    ks = [float(stats.ks_2samp(s[:, j], r[:, j]).statistic) if r.shape[0] > 1 else float("nan")
          for j in range(len(cols))]
    out = {"rmse": rmse, "ks_per_coordinate": ks, "tv_on_grid": float("nan")}
    if oracle is not None and len(cols) == 1 and len(oracle.grids) == 1:
        g = oracle.grids[0]
        edges = np.linspace(g[0], g[-1], bins + 1)
        hist, _ = np.histogram(s[:, 0], bins=edges)
        p_emp = hist / max(len(s), 1)
        cdf = oracle.cdf(edges)
        out["tv_on_grid"] = float(0.5 * np.sum(np.abs(p_emp - np.diff(cdf))))
    return out


def gaussian_conditional(mean, cov, observed, y_O):
    """Closed-form Gaussian conditional ``(mean_H, cov_H)`` by Schur complement."""
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    o = list(observed)
    h = [i for i in range(mean.size) if i not in o]
    s_oo = cov[np.ix_(o, o)]
    s_ho = cov[np.ix_(h, o)]
    gain = np.linalg.solve(s_oo, s_ho.T).T
    mu = mean[h] + gain @ (np.asarray(y_O) - mean[o])
    sigma = cov[np.ix_(h, h)] - gain @ s_ho.T
    return mu, sigma

