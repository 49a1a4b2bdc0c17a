"""Solvers for the equality constraint ``f^O(x^O; x^H) = y^O``.

Two methods are provided: the damped alternating fixed-point iteration
between ``f^H`` and ``g^O`` (no Jacobian solves), and Newton-Krylov with
GMRES on matrix-free sub-Jacobian views. ``solve_constraint`` runs the first
and falls back to the second, warm-started, when it fails.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NoConvergence, SingularMatrix
from .linalg import GmresConfig
from .partition import PartitionedJacobian

log = logging.getLogger(__name__)

__all__ = [
    "FixedPointConfig",
    "NewtonKrylovConfig",
    "SolveResult",
    "BatchSolveResult",
    "mixing_schedule",
    "fixed_point_solve",
    "fixed_point_batch",
    "newton_krylov_solve",
    "solve_constraint",
    "solve_constraint_batch",
    "theorem1_contraction_matrix",
    "estimate_lipschitz_constants",
    "estimate_lipschitz_product",
]

STRATEGIES = ("direct", "preconditioned", "schur")


@dataclass
class FixedPointConfig:
    alpha0: float = 0.5
    beta0: float = 0.5
    decay: float = 0.95
    tol: float = 1e-3
    max_iter: int = 100
    inverse_tol: Optional[float] = None
    stall_window: int = 10  # give up when the residual falls < 10% over this many iterations; 0 disables

    def __post_init__(self):
        if self.stall_window < 0:
            raise ValueError("stall_window must be non-negative")
        for name in ("alpha0", "beta0", "decay"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")

    @property
    def flow_tol(self):
        """Tolerance for the inner flow inversions."""
        return self.inverse_tol if self.inverse_tol is not None else max(self.tol * 1e-3, 1e-13)


@dataclass
class NewtonKrylovConfig:
    step_size: float = 1.0
    tol: float = 1e-3
    max_iter: int = 50
    gmres: GmresConfig = field(default_factory=lambda: GmresConfig(tol=1e-12, max_iter=500))
    inverse_strategy: str = "direct"
    trunc_tol: Optional[float] = None
    max_backtrack: int = 30

    def __post_init__(self):
        if not 0.0 < self.step_size <= 1.0:
            raise ValueError(f"step_size must lie in (0, 1], got {self.step_size}")
        if self.inverse_strategy not in STRATEGIES:
            raise ValueError(f"inverse_strategy must be one of {STRATEGIES}")


@dataclass
class SolveResult:
    x_O: np.ndarray
    y_H: np.ndarray
    residual: float
    iterations: int
    method: str
    trace: list = field(default_factory=list)
    gmres_iterations: int = 0


@dataclass
class BatchSolveResult:
    x: np.ndarray  # (n, d) full latent points
    y: np.ndarray  # (n, d) full data points f(x)
    residual: np.ndarray
    iterations: np.ndarray
    method: list
    failed: np.ndarray


def mixing_schedule(cfg, k):
    """Mixing coefficients after ``k`` completed iterations."""
    return cfg.alpha0 * cfg.decay**k, cfg.beta0 * cfg.decay**k


# ---------------------------------------------------------------------------
# Fixed point
# ---------------------------------------------------------------------------

def fixed_point_batch(flow, y_obs, x_hid, latent_mask, data_mask, cfg, record=False):
    """Run the alternating fixed-point iteration on a batch of problems.

    Parameters
    ----------
    y_obs : ndarray (n, d)
        Observed data values on the ``data_mask`` slots (others ignored).
    x_hid : ndarray (n, d)
        Hidden latent values on the ``~latent_mask`` slots (others ignored).
    latent_mask, data_mask : bool ndarray (n, d)
        True on observed slots; each row has the same count in both.

    Returns
    -------
    x : (n, d) latent iterate, residual, iterations, converged flags and,
    with ``record=True``, per-iteration history dicts.
    """
    y_obs = np.atleast_2d(np.asarray(y_obs, dtype=np.float64))
    x_hid = np.atleast_2d(np.asarray(x_hid, dtype=np.float64))
    lat = np.atleast_2d(latent_mask)
    dat = np.atleast_2d(data_mask)
    n = y_obs.shape[0]
    tol_inv = cfg.flow_tol

    def latent(xo, rows):
        return np.where(lat[rows], xo, x_hid[rows])

    def data(yh, rows):
        return np.where(dat[rows], y_obs[rows], yh)

    cache = [None] * len(flow.layers)  # per-layer warm starts, full batch

    def invert(yv, rows):
        warm = [None if c is None else c[rows] for c in cache]
        out = flow.inverse(yv, tol_inv, warm=warm)
        for k, w in enumerate(warm):
            if cache[k] is None:
                cache[k] = np.zeros((n, w.shape[1]), dtype=w.dtype)
            cache[k][rows] = w
        return out

    everyone = np.arange(n)
    y = flow.forward(latent(np.zeros_like(x_hid), everyone))
    x_tilde = invert(data(y, everyone), everyone)
    y_tilde = y.copy()

    residual = np.full(n, np.inf)
    iterations = np.zeros(n, dtype=int)
    converged = np.zeros(n, dtype=bool)
    prev_step = np.full(n, np.nan)
    past = np.full((n, cfg.stall_window + 1), np.inf)  # ring buffer of recent residuals
    history = []
    active = everyone
    for k in range(cfg.max_iter + 1):
        alpha, beta = mixing_schedule(cfg, k)
        xa = latent(x_tilde[active], active)
        y = flow.forward(xa)
        r = np.max(np.where(dat[active], np.abs(y - y_obs[active]), 0.0), axis=1)
        residual[active] = r
        iterations[active] = k + 1  # inverse evaluations so far
        done = r < cfg.tol
        if np.any(done):
            rows = active[done]
            gx = invert(data(y[done], rows), rows)
            err = np.max(np.where(lat[rows], np.abs(gx - x_tilde[rows]), 0.0), axis=1)
            ok = err < cfg.tol
            converged[rows[ok]] = True
            done[np.flatnonzero(done)[~ok]] = False
        if record:
            history.append({"iteration": k, "residual": r.copy(), "alpha": alpha, "beta": beta,
                            "step": prev_step[active].copy(), "rows": active.copy()})
        keep = ~done
        if cfg.stall_window:
            past[active, k % past.shape[1]] = r
            old = past[active, (k + 1) % past.shape[1]]
            keep &= ~(r > 0.9 * old)
        active, y = active[keep], y[keep]
        if active.size == 0 or k == cfg.max_iter:
            break
        y_tilde[active] = alpha * y + (1.0 - alpha) * y_tilde[active]
        x_new = invert(data(y_tilde[active], active), active)
        x_next = beta * x_new + (1.0 - beta) * x_tilde[active]
        prev_step[active] = np.linalg.norm(np.where(lat[active], x_next - x_tilde[active], 0.0), axis=1)
        x_tilde[active] = x_next
    x_full = np.where(lat, x_tilde, x_hid)
    return x_full, residual, iterations, converged, history


def fixed_point_solve(flow, y_O, x_H, latent, data, cfg=None):
    """Alternating fixed-point solve of a single constraint problem.

    Starts from ``x^O = 0`` and alternates ``y^H = f^H(x^O, x^H)`` and
    ``x^O = g^O(y^O, y^H)`` with mixing coefficients decayed every iteration.

    Raises
    ------
    NoConvergence
        Residual not below ``cfg.tol`` after ``cfg.max_iter`` iterations.
    """
    cfg = cfg or FixedPointConfig()
    y_obs = data.embed(y_O, "observed")
    x_hid = latent.embed(x_H, "hidden")
    x, residual, iterations, converged, history = fixed_point_batch(
        flow, y_obs[None], x_hid[None], latent.observed_mask[None], data.observed_mask[None], cfg, record=True
    )
    trace = [
        {"iteration": h["iteration"], "residual": float(h["residual"][0]), "alpha": h["alpha"],
         "beta": h["beta"], "step": float(h["step"][0]), "method": "fixed_point"}
        for h in history
    ]
    x_O = latent.gather_observed(x[0])
    if not converged[0]:
        err = NoConvergence("fixed-point iteration did not converge", float(residual[0]), int(iterations[0]))
        err.x_O = x_O
        err.trace = trace
        raise err
    y_H = data.gather_hidden(flow.forward(x[0]))
    return SolveResult(x_O, y_H, float(residual[0]), int(iterations[0]), "fixed_point", trace)


# ---------------------------------------------------------------------------
# Newton-Krylov
# ---------------------------------------------------------------------------

def _newton_direction(pj, rhs, cfg):
    """Solve ``J^OO delta = rhs`` with the configured strategy; return (delta, gmres steps)."""
    before = pj.gmres_iterations
    try:
        delta = pj.solve_J_OO(rhs, cfg.inverse_strategy, cfg.gmres)
    except (NoConvergence, SingularMatrix) as exc:
        if cfg.inverse_strategy == "direct":
            raise
        # G^OO can be singular where J^OO is not, which stalls the preconditioned solve
        log.debug("%s solve failed (%s); retrying with direct GMRES", cfg.inverse_strategy, exc)
        delta = pj.solve_J_OO(rhs, "direct", cfg.gmres)
    return delta, pj.gmres_iterations - before


def newton_krylov_solve(flow, y_O, x_H, latent, data, cfg=None, x0=None):
    """Newton iteration ``x^O <- x^O - s (J^OO)^{-1} (f^O(x^O; x^H) - y^O)``.

    The step is halved until the residual decreases. ``cfg.inverse_strategy``
    picks how ``(J^OO)^{-1}`` is applied: ``direct`` GMRES on ``J^OO``,
    ``preconditioned`` GMRES with ``G^OO`` as left preconditioner, or
    ``schur``: ``G^OO - G^OH (G^HH)^{-1} G^HO`` with GMRES on ``G^HH``.
    """
    cfg = cfg or NewtonKrylovConfig()
    y_O = np.asarray(y_O, dtype=np.float64)
    x_H = np.asarray(x_H, dtype=np.float64)
    x = np.zeros(latent.d_observed) if x0 is None else np.array(x0, dtype=np.float64)

    def residual_vec(xo):
        return data.gather_observed(flow.forward(latent.scatter(xo, x_H))) - y_O

    r = residual_vec(x)
    res = float(np.max(np.abs(r)))
    trace = []
    gmres_total = 0
    for it in range(cfg.max_iter + 1):
        trace.append({"iteration": it, "residual": res, "alpha": float("nan"), "beta": float("nan"),
                      "step": float("nan"), "method": "newton_krylov"})
        if res < cfg.tol:
            y_H = data.gather_hidden(flow.forward(latent.scatter(x, x_H)))
            return SolveResult(x, y_H, res, it, "newton_krylov", trace, gmres_total)
        if it == cfg.max_iter:
            break
        pj = PartitionedJacobian(flow, latent.scatter(x, x_H), latent, data, cfg.trunc_tol)
        delta, steps = _newton_direction(pj, r, cfg)
        gmres_total += steps
        s = cfg.step_size
        for _ in range(cfg.max_backtrack):
            x_new = x - s * delta
            r_new = residual_vec(x_new)
            res_new = float(np.max(np.abs(r_new)))
            if res_new < res:
                break
            s *= 0.5
        else:
            raise NoConvergence("Newton-Krylov backtracking failed", res, it)
        trace[-1]["step"] = float(np.linalg.norm(x_new - x))
        x, r, res = x_new, r_new, res_new
    raise NoConvergence("Newton-Krylov did not converge", res, cfg.max_iter)


# ---------------------------------------------------------------------------
# Hybrid
# ---------------------------------------------------------------------------

def solve_constraint(flow, y_O, x_H, latent, data, fp_cfg=None, nk_cfg=None):
    """Fixed point first; on failure Newton-Krylov warm-started from its iterate."""
    fp_cfg = fp_cfg or FixedPointConfig()
    nk_cfg = nk_cfg or NewtonKrylovConfig(tol=fp_cfg.tol)
    try:
        return fixed_point_solve(flow, y_O, x_H, latent, data, fp_cfg)
    except NoConvergence as exc:
        log.debug("fixed point failed (%s); falling back to Newton-Krylov", exc)
        start = getattr(exc, "x_O", None)
        fp_trace = getattr(exc, "trace", [])
    try:
        result = newton_krylov_solve(flow, y_O, x_H, latent, data, nk_cfg, x0=start)
    except (NoConvergence, SingularMatrix) as exc:
        raise NoConvergence("fixed point and Newton-Krylov both failed",
                            getattr(exc, "final_residual", float("nan")),
                            getattr(exc, "iterations", 0)) from exc
    result.method = "hybrid"
    result.iterations += len(fp_trace)
    result.trace = fp_trace + result.trace
    return result


def solve_constraint_batch(flow, y_obs, x_hid, latent_mask, data_mask, fp_cfg=None, nk_cfg=None):
    """Vectorised fixed point over a batch, Newton-Krylov fallback per failed row.

    Rows that fail both stages are flagged in ``failed``; no exception is raised.
    """
    from .partition import Partition  # local: avoid exporting a cycle

    fp_cfg = fp_cfg or FixedPointConfig()
    nk_cfg = nk_cfg or NewtonKrylovConfig(tol=fp_cfg.tol)
    lat = np.atleast_2d(np.asarray(latent_mask, dtype=bool))
    dat = np.atleast_2d(np.asarray(data_mask, dtype=bool))
    x_hid = np.atleast_2d(np.asarray(x_hid, dtype=np.float64))
    y_obs = np.atleast_2d(np.asarray(y_obs, dtype=np.float64))
    x, residual, iterations, converged, _ = fixed_point_batch(flow, y_obs, x_hid, lat, dat, fp_cfg)
    method = ["fixed_point"] * len(x)
    failed = np.zeros(len(x), dtype=bool)
    for i in np.flatnonzero(~converged):
        latent = Partition.from_mask(lat[i])
        data = Partition.from_mask(dat[i])
        try:
            res = newton_krylov_solve(
                flow, data.gather_observed(y_obs[i]), latent.gather_hidden(x_hid[i]), latent, data,
                nk_cfg, x0=latent.gather_observed(x[i]),
            )
        except (NoConvergence, SingularMatrix):
            failed[i] = True
            method[i] = "failed"
            continue
        x[i] = latent.scatter(res.x_O, latent.gather_hidden(x_hid[i]))
        residual[i] = res.residual
        iterations[i] += res.iterations
        method[i] = "hybrid"
    y = flow.forward(x)
    return BatchSolveResult(x, y, residual, iterations, method, failed)


# ---------------------------------------------------------------------------
# Convergence diagnostics
# ---------------------------------------------------------------------------

def theorem1_contraction_matrix(L_a, L_b, alpha, beta):
    """Comparison matrix bounding one damped fixed-point sweep, and its spectral radius.

    ``C = [[1 - a, a L_a], [(1 - a) b L_b, 1 - b + a b L_a L_b]]``; the
    iteration is guaranteed to converge when ``rho(C) < 1``.
    """
    if L_a < 0 or L_b < 0:
        raise ValueError("Lipschitz constants must be non-negative")
    if not (0 < alpha <= 1 and 0 < beta <= 1):
        raise ValueError("mixing coefficients must lie in (0, 1]")
    C = np.array([
        [1.0 - alpha, alpha * L_a],
        [(1.0 - alpha) * beta * L_b, 1.0 - beta + alpha * beta * L_a * L_b],
    ])
    rho = float(np.max(np.abs(np.linalg.eigvals(C))))
    return C, rho


def estimate_lipschitz_constants(flow, latent, data, n_probes=64, rng_seed=0, near=1e-4):
    """Empirical lower bounds on the Lipschitz constants of ``f^H(., x^H)`` and ``g^O(y^O, .)``.

    Half of the probe pairs are far apart (independent standard-normal
    draws), half are infinitesimally close so the ratios approach local
    Jacobian norms.
    """
    rng = np.random.default_rng(rng_seed)
    L_a = 0.0
    L_b = 0.0
    for i in range(n_probes):
        x_H = rng.standard_normal(latent.d_hidden)
        o1 = rng.standard_normal(latent.d_observed)
        if i % 2:
            o2 = o1 + near * rng.standard_normal(latent.d_observed)
        else:
            o2 = rng.standard_normal(latent.d_observed)
        f1 = data.gather_hidden(flow.forward(latent.scatter(o1, x_H)))
        f2 = data.gather_hidden(flow.forward(latent.scatter(o2, x_H)))
        L_a = max(L_a, np.linalg.norm(f1 - f2) / np.linalg.norm(o1 - o2))

        y = flow.forward(rng.standard_normal(flow.dim))
        y_O = data.gather_observed(y)
        h1 = data.gather_hidden(y)
        if i % 2:
            h2 = h1 + near * rng.standard_normal(data.d_hidden)
        else:
            h2 = data.gather_hidden(flow.forward(rng.standard_normal(flow.dim)))
        g1 = latent.gather_observed(flow.inverse(data.scatter(y_O, h1), 1e-13))
        g2 = latent.gather_observed(flow.inverse(data.scatter(y_O, h2), 1e-13))
        L_b = max(L_b, np.linalg.norm(g1 - g2) / np.linalg.norm(h1 - h2))
    return float(L_a), float(L_b)


def estimate_lipschitz_product(flow, latent, data, n_probes=64, rng_seed=0):
    """Empirical lower bound on ``L_a * L_b``."""
    L_a, L_b = estimate_lipschitz_constants(flow, latent, data, n_probes, rng_seed)
    return L_a * L_b
