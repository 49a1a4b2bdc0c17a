"""Observed/hidden index partitions and masked sub-Jacobian views."""
from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import DimensionMismatch, InvalidIndices, SingularMatrix, SingularSubJacobian
from .linalg import GmresConfig, LinearOperator, dense_logabsdet, gmres

__all__ = [
    "Partition",
    "make_partition",
    "PartitionedJacobian",
    "sub_jacobian",
    "partition_score",
    "select_latent_partition",
]


@dataclass(frozen=True)
class Partition:
    """Complementary sorted index sets ``observed`` (O) and ``hidden`` (H) over ``range(dim)``."""

    observed: tuple
    hidden: tuple
    dim: int

    @property
    def d_observed(self):
        return len(self.observed)

    @property
    def d_hidden(self):
        return len(self.hidden)

    @property
    def observed_mask(self):
        mask = np.zeros(self.dim, dtype=bool)
        mask[list(self.observed)] = True
        return mask

    def gather_observed(self, x):
        return np.asarray(x)[..., list(self.observed)]

    def gather_hidden(self, x):
        return np.asarray(x)[..., list(self.hidden)]

    def scatter(self, x_observed, x_hidden):
        x_observed = np.asarray(x_observed, dtype=np.float64)
        x_hidden = np.asarray(x_hidden, dtype=np.float64)
        batch = np.broadcast_shapes(x_observed.shape[:-1], x_hidden.shape[:-1])
        out = np.zeros(batch + (self.dim,))
        out[..., list(self.observed)] = x_observed
        out[..., list(self.hidden)] = x_hidden
        return out

    def embed(self, values, which):
        """Place ``values`` on the ``which`` ('observed' | 'hidden') slots, zeros elsewhere."""
        idx = list(self.observed if which == "observed" else self.hidden)
        values = np.asarray(values, dtype=np.float64)
        out = np.zeros(values.shape[:-1] + (self.dim,))
        out[..., idx] = values
        return out

    def to_dict(self):
        return {"observed": list(self.observed), "hidden": list(self.hidden), "dim": self.dim}

    @classmethod
    def from_dict(cls, doc):
        return make_partition(doc["observed"], doc["dim"])

    @classmethod
    def from_mask(cls, observed_mask):
        observed_mask = np.asarray(observed_mask, dtype=bool)
        return make_partition(np.flatnonzero(observed_mask), observed_mask.size)


def make_partition(observed_indices, d):
    """Build a canonical partition from the observed indices.

    Raises
    ------
    InvalidIndices
        Duplicates, out-of-range indices, or an empty observed or hidden set.
    """
    idx = [int(i) for i in np.asarray(observed_indices, dtype=np.int64).ravel()]
    if len(set(idx)) != len(idx):
        raise InvalidIndices(f"duplicate observed indices: {sorted(idx)}")
    if any(i < 0 or i >= d for i in idx):
        raise InvalidIndices(f"observed indices out of range [0, {d}): {sorted(idx)}")
    if not idx:
        raise InvalidIndices("observed set is empty")
    if len(idx) == d:
        raise InvalidIndices("hidden set is empty")
    observed = tuple(sorted(idx))
    hidden = tuple(i for i in range(d) if i not in set(observed))
    return Partition(observed, hidden, d)


class PartitionedJacobian:
    """Matrix-free block views of ``J(x)`` and ``G(f(x))``.

    ``J`` blocks map latent slots to data slots (``J_OH`` = data rows O,
    latent columns H); ``G`` blocks map data slots to latent slots.
    """

    def __init__(self, flow, x, latent, data, trunc_tol=None):
        if latent.dim != flow.dim or data.dim != flow.dim:
            raise DimensionMismatch("partition dimension does not match flow")
        if latent.d_observed != data.d_observed:
            raise DimensionMismatch("latent and data partitions must have equal observed sizes")
        self.flow = flow
        self.latent = latent
        self.data = data
        self.trunc_tol = trunc_tol
        self.lin = flow.linearize(x)
        self.solve_dims = []
        self.gmres_iterations = 0

    @property
    def x(self):
        return self.lin.x

    @property
    def y(self):
        return self.lin.y

    def _slots(self, partition, block):
        return list(partition.observed if block == "O" else partition.hidden)

    def _view(self, rows, cols, apply_full, adjoint_full, row_part, col_part):
        r_idx = self._slots(row_part, rows)
        c_idx = self._slots(col_part, cols)
        d = self.flow.dim

        def apply(v):
            v = np.asarray(v, dtype=np.float64)
            full = np.zeros(v.shape[:-1] + (d,))
            full[..., c_idx] = v
            return apply_full(full)[..., r_idx]

        def adjoint(w):
            w = np.asarray(w, dtype=np.float64)
            full = np.zeros(w.shape[:-1] + (d,))
            full[..., r_idx] = w
            return adjoint_full(full)[..., c_idx]

        return LinearOperator(len(r_idx), len(c_idx), apply, adjoint, batched=True)

    def J(self, rows, cols):
        return self._view(rows, cols, self.lin.jvp, self.lin.vjp, self.data, self.latent)

    def G(self, rows, cols):
        tol = self.trunc_tol
        return self._view(
            rows,
            cols,
            lambda v: self.lin.inv_jvp(v, tol),
            lambda w: self.lin.inv_vjp(w, tol),
            self.latent,
            self.data,
        )

    @property
    def J_OO(self):
        return self.J("O", "O")

    @property
    def J_OH(self):
        return self.J("O", "H")

    @property
    def J_HO(self):
        return self.J("H", "O")

    @property
    def J_HH(self):
        return self.J("H", "H")

    @property
    def G_OO(self):
        return self.G("O", "O")

    @property
    def G_OH(self):
        return self.G("O", "H")

    @property
    def G_HO(self):
        return self.G("H", "O")

    @property
    def G_HH(self):
        return self.G("H", "H")

    # -- inverse sub-Jacobian products -------------------------------------
    def _gmres(self, op, rhs, cfg, preconditioner=None):
        cfg = cfg or GmresConfig()
        if preconditioner is not None:
            cfg = GmresConfig(cfg.tol, cfg.max_iter, cfg.restart, preconditioner)
        rhs = np.asarray(rhs, dtype=np.float64)
        if rhs.ndim == 1:
            return self._gmres_one(op, rhs, cfg)
        if rhs.shape[0] <= op.rows:
            return np.stack([self._gmres_one(op, r, cfg) for r in rhs])
        # more right-hand sides than unknowns: solve on the basis once
        inv = np.stack([self._gmres_one(op, e, cfg) for e in np.eye(op.rows)], axis=1)
        return rhs @ inv.T

    def _gmres_one(self, op, rhs, cfg):
        self.solve_dims.append(op.rows)
        try:
            sol = gmres(op, rhs, cfg)
        except SingularMatrix as exc:
            raise SingularSubJacobian(str(exc)) from exc
        self.gmres_iterations += sol.iterations
        return sol.x

    def solve_J_OO(self, rhs, strategy="preconditioned", gmres_cfg=None):
        """``(J^OO)^{-1} rhs``; ``strategy`` is 'direct', 'preconditioned' or 'schur'."""
        if strategy == "schur":
            inner = self._gmres(self.G_HH, self.G_HO.matvec(rhs), gmres_cfg)
            return self.G_OO.matvec(rhs) - self.G_OH.matvec(inner)
        pre = self.G_OO if strategy == "preconditioned" else None
        if strategy not in ("direct", "preconditioned"):
            raise ValueError(f"unknown inverse strategy {strategy!r}")
        return self._gmres(self.J_OO, rhs, gmres_cfg, pre)

    def solve_J_OO_T(self, rhs, strategy="preconditioned", gmres_cfg=None):
        """``(J^OO)^{-T} rhs``, the adjoint of :meth:`solve_J_OO`."""
        if strategy == "schur":
            inner = self._gmres(self.G_HH.T, self.G_OH.rmatvec(rhs), gmres_cfg)
            return self.G_OO.rmatvec(rhs) - self.G_HO.rmatvec(inner)
        pre = self.G_OO.T if strategy == "preconditioned" else None
        if strategy not in ("direct", "preconditioned"):
            raise ValueError(f"unknown inverse strategy {strategy!r}")
        return self._gmres(self.J_OO.T, rhs, gmres_cfg, pre)

    def solve_G_HH_T(self, rhs, gmres_cfg=None):
        """``(G^HH)^{-T} rhs``."""
        return self._gmres(self.G_HH.T, rhs, gmres_cfg)

    def dense_J(self):
        return self.lin.jacobian()

    def dense_block(self, matrix, rows, cols, inverse=False):
        """Slice a dense full Jacobian with this object's index conventions."""
        row_part, col_part = (self.latent, self.data) if inverse else (self.data, self.latent)
        return matrix[np.ix_(self._slots(row_part, rows), self._slots(col_part, cols))]


def sub_jacobian(flow, x, rows, cols, direction="forward", trunc_tol=None):
    """Matrix-free view ``gather_rows o (J or G) o scatter_cols`` at ``x``.

    ``rows`` and ``cols`` are index sequences; ``direction='inverse'`` uses
    ``G(f(x))`` through Neumann series.
    """
    lin = flow.linearize(x)
    r_idx = [int(i) for i in rows]
    c_idx = [int(i) for i in cols]
    if direction == "forward":
        fwd, adj = lin.jvp, lin.vjp
    elif direction == "inverse":
        fwd = lambda v: lin.inv_jvp(v, trunc_tol)  # noqa: E731
        adj = lambda w: lin.inv_vjp(w, trunc_tol)  # noqa: E731
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    d = flow.dim

    def apply(v):
        v = np.asarray(v, dtype=np.float64)
        full = np.zeros(v.shape[:-1] + (d,))
        full[..., c_idx] = v
        return fwd(full)[..., r_idx]

    def adjoint(w):
        w = np.asarray(w, dtype=np.float64)
        full = np.zeros(w.shape[:-1] + (d,))
        full[..., r_idx] = w
        return adj(full)[..., c_idx]

    return LinearOperator(len(r_idx), len(c_idx), apply, adjoint, batched=True)


def partition_score(J, data, latent_observed):
    """``log|det J^OO|`` for data rows ``data.observed`` and the given latent columns."""
    block = J[np.ix_(list(data.observed), list(latent_observed))]
    try:
        return dense_logabsdet(block)
    except SingularMatrix:
        return -np.inf


def select_latent_partition(flow, x, data, budget=100):
    """Greedy single-swap ascent on ``log|det J^OO(x)|``.

    Starts from the aligned partition (latent O equal to data O) and in each
    round applies the best improving swap of one latent observed index with
    one hidden index, for at most ``budget`` rounds.
    """
    J = flow.jacobian(x)
    current = list(data.observed)
    score = partition_score(J, data, current)
    for _ in range(budget):
        hidden = [i for i in range(flow.dim) if i not in current]
        best, best_set = score, None
        for pos, j in product(range(len(current)), hidden):
            trial = sorted(current[:pos] + [j] + current[pos + 1:])
            s = partition_score(J, data, trial)
            if s > best + 1e-12:
                best, best_set = s, trial
        if best_set is None:
            break
        current, score = best_set, best
    return make_partition(current, flow.dim)
