"""Matrix-free and dense linear algebra.

Vectors follow numpy's row convention: a single vector has shape ``(n,)`` and
a batch of vectors has shape ``(k, n)``. Operators flagged ``batched`` accept
both forms.
"""
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, NoConvergence, SingularMatrix, ZeroReflector

__all__ = [
    "LinearOperator",
    "GmresConfig",
    "GmresResult",
    "gmres",
    "rademacher",
    "hutchinson_trace_grad_weight",
    "hutchinson_trace",
    "householder_apply",
    "householder_matrix",
    "finite_diff_jacobian",
    "dense_logabsdet",
]


@dataclass(frozen=True)
class LinearOperator:
    """A matrix-free linear map ``R^cols -> R^rows`` with its adjoint."""

    rows: int
    cols: int
    apply: Callable[[np.ndarray], np.ndarray]
    adjoint_apply: Callable[[np.ndarray], np.ndarray]
    batched: bool = False

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise DimensionMismatch(f"operator shape must be positive, got {self.shape}")

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def T(self):
        return LinearOperator(self.cols, self.rows, self.adjoint_apply, self.apply, self.batched)

    def matvec(self, v):
        v = np.asarray(v)
        if v.shape[-1] != self.cols:
            raise DimensionMismatch(f"expected vector of length {self.cols}, got {v.shape}")
        if v.ndim == 2 and not self.batched:
            return np.stack([self.apply(row) for row in v])
        return self.apply(v)

    def rmatvec(self, w):
        w = np.asarray(w)
        if w.shape[-1] != self.rows:
            raise DimensionMismatch(f"expected vector of length {self.rows}, got {w.shape}")
        if w.ndim == 2 and not self.batched:
            return np.stack([self.adjoint_apply(row) for row in w])
        return self.adjoint_apply(w)

    def dense(self):
        """Assemble the operator column by column (oracle use only)."""
        eye = np.eye(self.cols)
        return np.asarray(self.matvec(eye), dtype=np.float64).T

    def __matmul__(self, other):
        if isinstance(other, LinearOperator):
            if self.cols != other.rows:
                raise DimensionMismatch(f"cannot compose {self.shape} with {other.shape}")
            return LinearOperator(
                self.rows,
                other.cols,
                lambda v: self.matvec(other.matvec(v)),
                lambda w: other.rmatvec(self.rmatvec(w)),
                self.batched and other.batched,
            )
        return self.matvec(other)

    @classmethod
    def from_dense(cls, matrix):
        matrix = np.asarray(matrix)
        return cls(matrix.shape[0], matrix.shape[1], lambda v: v @ matrix.T, lambda w: w @ matrix, True)

    @classmethod
    def identity(cls, n):
        return cls(n, n, lambda v: np.array(v, copy=True), lambda w: np.array(w, copy=True), True)


# ---------------------------------------------------------------------------
# GMRES
# ---------------------------------------------------------------------------

STALL_CYCLES = 5  # restart cycles without a lower true residual


@dataclass
class GmresConfig:
    tol: float = 1e-10
    max_iter: int = 200
    restart: Optional[int] = None
    preconditioner: Optional[LinearOperator] = None

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("GMRES tol must be positive")
        if self.max_iter < 1:
            raise ValueError("GMRES max_iter must be >= 1")
        if self.restart is not None and self.restart < 1:
            raise ValueError("GMRES restart must be positive or None")


@dataclass
class GmresResult:
    x: np.ndarray
    iterations: int
    residual: float


def _givens(a, b):
    if b == 0.0:
        return 1.0, 0.0
    r = np.hypot(a, b)
    return a / r, b / r


def gmres(op, rhs, cfg=None, x0=None):
    """Solve ``op x = rhs`` with restarted GMRES (modified Gram-Schmidt Arnoldi).

    Parameters
    ----------
    op : LinearOperator
        Square, nonsingular operator.
    rhs : ndarray, shape (n,)
    cfg : GmresConfig, optional
        ``cfg.tol`` bounds the *true* residual ``||op x - rhs||_2``. A
        preconditioner ``M`` is applied on the left, i.e. GMRES runs on
        ``M op x = M rhs`` and the true residual is re-checked at the end of
        every cycle.
    x0 : ndarray, optional
        Initial guess.

    Returns
    -------
    GmresResult
        Solution, number of Arnoldi steps (operator applications) and the
        final true residual.

    Raises
    ------
    NoConvergence
        Residual still above ``cfg.tol`` after ``cfg.max_iter`` steps, or no lower
        true residual for several restart cycles in a row.
    SingularMatrix
        The Krylov space became invariant while the residual was non-zero.
    """
    cfg = cfg or GmresConfig()
    rhs = np.asarray(rhs, dtype=np.float64)
    if op.rows != op.cols:
        raise DimensionMismatch(f"GMRES needs a square operator, got {op.shape}")
    if rhs.ndim != 1 or rhs.shape[0] != op.rows:
        raise DimensionMismatch(f"rhs of shape {rhs.shape} does not match operator {op.shape}")
    n = op.rows
    pre = cfg.preconditioner
    if pre is not None and pre.shape != (n, n):
        raise DimensionMismatch(f"preconditioner shape {pre.shape} does not match operator {op.shape}")

    def A(v):
        return np.asarray(op.matvec(v), dtype=np.float64)

    def M(v):
        return v if pre is None else np.asarray(pre.matvec(v), dtype=np.float64)

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    r = rhs - A(x)
    true_res = np.linalg.norm(r)
    if true_res <= cfg.tol:
        return GmresResult(x, 0, true_res)

    z = M(r)
    inner_tol = cfg.tol * np.linalg.norm(z) / true_res
    iterations = 0
    best, stalled = true_res, 0
    while iterations < cfg.max_iter:
        beta = np.linalg.norm(z)
        m = min(cfg.restart or n, n, cfg.max_iter - iterations)
        V = np.zeros((m + 1, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = z / beta
        k = 0
        breakdown = False
        for j in range(m):
            w = M(A(V[j]))
            for i in range(j + 1):
                H[i, j] = w @ V[i]
                w = w - H[i, j] * V[i]
            H[j + 1, j] = np.linalg.norm(w)
            for i in range(j):
                hi, hi1 = H[i, j], H[i + 1, j]
                H[i, j] = cs[i] * hi + sn[i] * hi1
                H[i + 1, j] = -sn[i] * hi + cs[i] * hi1
            h_next = H[j + 1, j]
            cs[j], sn[j] = _givens(H[j, j], h_next)
            H[j, j] = cs[j] * H[j, j] + sn[j] * h_next
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            iterations += 1
            k = j + 1
            if h_next <= 1e-14 * beta:
                breakdown = True
                break
            V[j + 1] = w / h_next
            if abs(g[j + 1]) <= inner_tol:
                break
        R = H[:k, :k]
        if np.any(np.abs(np.diag(R)) <= 1e-300):
            raise SingularMatrix("GMRES Hessenberg factor is singular")
        if breakdown and k == 1:
            # z is an eigenvector: step by z / lambda without the normalise/rescale rounding
            Az = M(A(z))
            x = x + z / ((z @ Az) / (z @ z))
        else:
            y = scipy.linalg.solve_triangular(R, g[:k])
            x = x + V[:k].T @ y
        r = rhs - A(x)
        true_res = np.linalg.norm(r)
        if true_res <= cfg.tol:
            return GmresResult(x, iterations, true_res)
        stalled = stalled + 1 if true_res >= best else 0
        best = min(best, true_res)
        if stalled >= STALL_CYCLES:
            raise NoConvergence("GMRES stagnated", true_res, iterations)
        if breakdown and abs(g[k]) > inner_tol:
            raise SingularMatrix(
                f"GMRES breakdown with residual {abs(g[k]):.3e}; operator is singular on the Krylov space"
            )
        z = M(r)
        inner_tol = min(inner_tol, cfg.tol * np.linalg.norm(z) / true_res) * 0.5
    raise NoConvergence("GMRES did not converge", true_res, iterations)


# ---------------------------------------------------------------------------
# Stochastic trace estimation
# ---------------------------------------------------------------------------

def rademacher(rng, shape):
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


def hutchinson_trace_grad_weight(op_value, rng_seed, n_probes=1):
    """Draw Rademacher probes ``z`` and the adjoint products ``op^T z``.

    ``z @ op z == (op^T z) @ z`` is an unbiased sample of ``Tr(op)``. The
    pair is what the log-determinant gradient estimators need: the adjoint
    product is the detached weight, ``z`` the direction that gets
    differentiated.

    Returns
    -------
    probes, weights : ndarray, shape (n_probes, n)
    """
    if op_value.rows != op_value.cols:
        raise DimensionMismatch(f"trace needs a square operator, got {op_value.shape}")
    rng = np.random.default_rng(rng_seed)
    probes = rademacher(rng, (n_probes, op_value.cols))
    weights = np.asarray(op_value.rmatvec(probes), dtype=np.float64)
    return probes, weights


def hutchinson_trace(op_value, rng_seed, n_probes=1):
    """Return ``(estimate, standard_error)`` of ``Tr(op)``."""
    probes, weights = hutchinson_trace_grad_weight(op_value, rng_seed, n_probes)
    samples = np.einsum("ij,ij->i", probes, weights)
    se = samples.std(ddof=1) / np.sqrt(n_probes) if n_probes > 1 else float("inf")
    return samples.mean(), se


# ---------------------------------------------------------------------------
# Householder reflections
# ---------------------------------------------------------------------------

def _check_reflectors(reflectors, d):
    reflectors = np.asarray(reflectors, dtype=np.float64).reshape(-1, d)
    norms = np.linalg.norm(reflectors, axis=1)
    if np.any(norms < 1e-12):
        raise ZeroReflector(f"reflector {int(np.argmin(norms))} has norm {norms.min():.2e}")
    return reflectors, norms**2


def householder_apply(reflectors, x, transpose=False):
    """Return ``H_1 H_2 ... H_n x`` with ``H_i = I - 2 v_i v_i^T / ||v_i||^2``.

    ``x`` may be a batch of row vectors. With ``transpose=True`` the
    product ``H_n ... H_1 x`` (the inverse) is applied instead.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    if len(reflectors) == 0:
        return x.copy()
    V, sq = _check_reflectors(reflectors, d)
    order = range(len(V)) if transpose else reversed(range(len(V)))
    out = x.copy()
    for i in order:
        coef = 2.0 * (out @ V[i]) / sq[i]
        out = out - np.multiply.outer(coef, V[i])
    return out


def householder_matrix(reflectors, d):
    """Dense product of the reflectors (oracle use)."""
    return householder_apply(reflectors, np.eye(d)).T


# ---------------------------------------------------------------------------
# Dense oracles
# ---------------------------------------------------------------------------

def finite_diff_jacobian(fn, x, eps=1e-5):
    """Central-difference Jacobian of ``fn`` at ``x`` in double precision."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for j in range(x.size):
        step = np.zeros_like(x)
        step[j] = eps
        hi = np.asarray(fn(x + step), dtype=np.float64)
        lo = np.asarray(fn(x - step), dtype=np.float64)
        cols.append((hi - lo) / (2.0 * eps))
    return np.stack(cols, axis=-1)


def dense_logabsdet(matrix):
    """``log|det M|`` via pivoted LU.

    Raises
    ------
    SingularMatrix
        If a pivot has magnitude below 1e-14.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got {matrix.shape}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, _ = scipy.linalg.lu_factor(matrix, check_finite=True)
    pivots = np.abs(np.diag(lu))
    if np.any(pivots < 1e-14):
        raise SingularMatrix(f"matrix is singular (smallest pivot {pivots.min():.2e})")
    return float(np.sum(np.log(pivots)))
