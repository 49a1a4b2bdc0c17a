"""Stochastic gradients of ``log|det J^OO(x)|`` with respect to the latent point.

Both estimators write the gradient as the derivative of a trace in which
every matrix but one is frozen at the current point, then estimate the
trace with Rademacher probes:

* NLADE differentiates ``z^T (J^OO)^{-1} [J G(y) J]^{OO} z`` where only
  ``G(y)`` moves. ``J G J = J`` numerically, and since ``dJ = -J dG J`` the
  result enters with a minus sign.
* CLADE uses ``log|det J^OO| = log|det G^HH| - log|det G|`` and estimates
  the two traces ``Tr((G^HH)^{-1} dG^HH)`` and ``Tr(G^{-1} dG)``; its inner
  solve only involves the ``d^H x d^H`` block.

In both cases the derivative with respect to ``y`` is pulled back to ``x``
with ``u^T J``.
"""
from dataclasses import dataclass, field

import numpy as np

from .linalg import rademacher
from .partition import PartitionedJacobian

__all__ = ["LadGradient", "nlade_samples", "clade_samples", "nlade_grad", "clade_grad", "lad_value"]


@dataclass
class LadGradient:
    """Averaged gradient estimate with per-coordinate standard error."""

    grad: np.ndarray
    se: np.ndarray
    n_probes: int
    stats: dict = field(default_factory=dict)


def _probes(rng_seed, n_probes, dim, probes):
    if probes == "basis":
        return np.eye(dim)
    if probes != "rademacher":
        raise ValueError(f"probes must be 'rademacher' or 'basis', got {probes!r}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return rademacher(rng, (n_probes, dim))


def _as_pj(flow, x, latent, data, trunc_tol, pj):
    if pj is not None:
        return pj
    return PartitionedJacobian(flow, x, latent, data, trunc_tol)


def nlade_samples(flow, x, latent, data, n_probes=1, rng_seed=0, strategy="schur",
                  gmres_cfg=None, trunc_tol=None, probes="rademacher", pj=None):
    """Per-probe NLADE samples, shape (n_probes, d).

    With ``probes='basis'`` the rows are the exact trace terms; their sum
    (not mean) is the gradient.
    """
    pj = _as_pj(flow, x, latent, data, trunc_tol, pj)
    lin = pj.lin
    z = _probes(rng_seed, n_probes, latent.d_observed, probes)
    w = pj.solve_J_OO_T(z, strategy, gmres_cfg)
    a = lin.vjp(data.embed(w, "observed"))
    b = lin.jvp(latent.embed(z, "observed"))
    grad_y = lin.inv_jac_bilinear_grad(a, b, pj.trunc_tol)
    return -lin.vjp(grad_y)


def clade_samples(flow, x, latent, data, n_probes=1, rng_seed=0, gmres_cfg=None,
                  trunc_tol=None, probes="rademacher", pj=None):
    """Per-probe CLADE samples, shape (n_probes, d).

    The two traces use independent probes (``d^H`` and ``d`` dimensional).
    With ``probes='basis'`` each trace is taken exactly, the rows are
    padded to ``max(d^H, d)`` and their sum is the gradient.
    """
    pj = _as_pj(flow, x, latent, data, trunc_tol, pj)
    lin = pj.lin
    d = flow.dim
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    z_h = _probes(rng, n_probes, latent.d_hidden, probes)
    z = _probes(rng, n_probes, d, probes)
    u = pj.solve_G_HH_T(z_h, gmres_cfg)
    g1 = lin.inv_jac_bilinear_grad(latent.embed(u, "hidden"), data.embed(z_h, "hidden"), pj.trunc_tol)
    g2 = lin.inv_jac_bilinear_grad(lin.vjp(z), z, pj.trunc_tol)
    if probes == "basis":
        rows = max(g1.shape[0], g2.shape[0])
        g1 = np.vstack([g1, np.zeros((rows - g1.shape[0], d))])
        g2 = np.vstack([g2, np.zeros((rows - g2.shape[0], d))])
    return lin.vjp(g1 - g2)


def _summarize(samples, probes, stats):
    n = samples.shape[0]
    if probes == "basis":
        return LadGradient(samples.sum(axis=0), np.zeros(samples.shape[1]), n, stats)
    se = samples.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full(samples.shape[1], np.inf)
    return LadGradient(samples.mean(axis=0), se, n, stats)


def _stats(pj):
    return {
        "inner_solve_dims": sorted(set(pj.solve_dims)),
        "inner_solves": len(pj.solve_dims),
        "gmres_iterations": pj.gmres_iterations,
        "layer_products": pj.lin.stats["layer_products"],
    }


def nlade_grad(flow, x, latent, data, n_probes=1, rng_seed=0, strategy="schur",
               gmres_cfg=None, trunc_tol=None, probes="rademacher"):
    """NLADE estimate of ``grad_x log|det J^OO(x)|``.

    Parameters
    ----------
    flow : Flow
    x : ndarray (d,)
        Latent point.
    latent, data : Partition
        Observed/hidden split in latent and data space.
    n_probes : int
        Rademacher probes averaged.
    strategy : {'schur', 'direct', 'preconditioned'}
        How ``(J^OO)^{-T}`` is applied to the probes.
    probes : {'rademacher', 'basis'}
        'basis' evaluates the trace exactly.

    Returns
    -------
    LadGradient
    """
    pj = PartitionedJacobian(flow, x, latent, data, trunc_tol)
    samples = nlade_samples(flow, x, latent, data, n_probes, rng_seed, strategy, gmres_cfg,
                            trunc_tol, probes, pj=pj)
    return _summarize(samples, probes, _stats(pj))


def clade_grad(flow, x, latent, data, n_probes=1, rng_seed=0, gmres_cfg=None,
               trunc_tol=None, probes="rademacher"):
    """CLADE estimate of ``grad_x log|det J^OO(x)|``; see :func:`nlade_grad`."""
    pj = PartitionedJacobian(flow, x, latent, data, trunc_tol)
    samples = clade_samples(flow, x, latent, data, n_probes, rng_seed, gmres_cfg, trunc_tol,
                            probes, pj=pj)
    return _summarize(samples, probes, _stats(pj))


def lad_value(flow, x, latent, data):
    """Dense ``log|det J^OO(x)|``."""
    from .linalg import dense_logabsdet

    J = flow.jacobian(x)
    return dense_logabsdet(J[np.ix_(list(data.observed), list(latent.observed))])
