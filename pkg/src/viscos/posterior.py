"""Gaussian variational posterior with a Householder rotation stack.

Samples are ``x = mu + H_1 ... H_n (sigma * eps)`` with ``eps`` standard
normal. Each reflector is orthogonal, so the density stays Gaussian with
covariance ``Q diag(sigma^2) Q^T`` and log-determinant ``2 sum log sigma``.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, ZeroReflector
from .linalg import householder_apply, householder_matrix

__all__ = ["VariationalPosterior", "PosteriorSample", "posterior_sample", "Adam"]

_LOG2PI = np.log(2.0 * np.pi)
_MIN_REFLECTOR_NORM = 1e-12


@dataclass
class PosteriorSample:
    """Draws together with the noise that produced them."""

    x: np.ndarray  # (n, d_h)
    eps: np.ndarray  # (n, d_h)
    log_q: np.ndarray  # (n,)


@dataclass
class VariationalPosterior:
    mu: np.ndarray
    log_sigma: np.ndarray
    reflectors: np.ndarray = field(default=None)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).ravel()
        self.log_sigma = np.asarray(self.log_sigma, dtype=np.float64).ravel()
        if self.log_sigma.shape != self.mu.shape:
            raise DimensionMismatch("mu and log_sigma must have the same length")
        d = self.mu.size
        if self.reflectors is None:
            self.reflectors = np.zeros((0, d))
        self.reflectors = np.asarray(self.reflectors, dtype=np.float64).reshape(-1, d)
        norms = np.linalg.norm(self.reflectors, axis=1)
        if np.any(norms < _MIN_REFLECTOR_NORM):
            raise ZeroReflector("Householder vector with (near) zero norm")

    @classmethod
    def standard(cls, dim, n_reflectors=0, seed=0, mu=None):
        """Unit-scale posterior centred at ``mu`` (default 0) with random reflectors."""
        rng = np.random.default_rng(seed)
        mu = np.zeros(dim) if mu is None else np.asarray(mu, dtype=np.float64)
        return cls(mu, np.zeros(dim), rng.standard_normal((n_reflectors, dim)))

    @property
    def dim(self):
        return self.mu.size

    @property
    def n_reflectors(self):
        return self.reflectors.shape[0]

    @property
    def sigma(self):
        return np.exp(self.log_sigma)

    def rotation(self):
        """Dense ``Q = H_1 ... H_n``."""
        return householder_matrix(self.reflectors, self.dim)

    def covariance(self):
        q = self.rotation()
        return (q * self.sigma**2) @ q.T

    # sampling ---------------------------------------------------------------
    def transform(self, eps):
        eps = np.asarray(eps, dtype=np.float64)
        return self.mu + householder_apply(self.reflectors, self.sigma * eps)

    def sample(self, n, rng_seed=0):
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        eps = rng.standard_normal((n, self.dim))
        return PosteriorSample(self.transform(eps), eps, self.log_prob_eps(eps))

    def log_prob_eps(self, eps):
        eps = np.asarray(eps, dtype=np.float64)
        return -0.5 * np.sum(eps**2, axis=-1) - 0.5 * self.dim * _LOG2PI - np.sum(self.log_sigma)

    def log_prob(self, x):
        """Closed-form log-density of points ``x``."""
        x = np.asarray(x, dtype=np.float64)
        s = householder_apply(self.reflectors, x - self.mu, transpose=True)
        return self.log_prob_eps(s / self.sigma)

    # analytic terms -----------------------------------------------------------
    def entropy(self):
        return 0.5 * self.dim * (1.0 + _LOG2PI) + np.sum(self.log_sigma)

    def expected_log_prior(self):
        """``E_q[log N(x; 0, I)]``; rotations leave the trace of the covariance unchanged."""
        return -0.5 * (self.dim * _LOG2PI + np.sum(self.sigma**2) + self.mu @ self.mu)

    def kl_to_standard_normal(self):
        return float(0.5 * np.sum(self.sigma**2 + self.mu**2 - 1.0 - 2.0 * self.log_sigma))

    def analytic_grad(self):
        """Gradient of ``expected_log_prior + entropy`` (= -KL) as a parameter vector."""
        return self.pack(-self.mu, 1.0 - self.sigma**2, np.zeros_like(self.reflectors))

    # pathwise gradient ------------------------------------------------------
    def pathwise_grad(self, eps, grad_x):
        """Back-propagate ``grad_x`` (rows, d/dx of some objective) to the parameters.

        Returns the gradient summed over rows, packed like :meth:`to_vector`.
        """
        eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
        g = np.atleast_2d(np.asarray(grad_x, dtype=np.float64))
        s = self.sigma * eps
        n = self.n_reflectors
        # inputs[i] enters H_i; the last reflector acts first
        inputs = [None] * n
        p = s
        for i in reversed(range(n)):
            inputs[i] = p
            v = self.reflectors[i]
            p = p - 2.0 * np.outer(p @ v, v) / (v @ v)
        grad_v = np.zeros_like(self.reflectors)
        q = g
        for i in range(n):
            v = self.reflectors[i]
            p = inputs[i]
            vv = v @ v
            qv = q @ v
            vp = p @ v
            grad_v[i] = (
                -2.0 * (vp @ q + qv @ p) / vv + 4.0 * np.sum(qv * vp) * v / vv**2
            )
            q = q - 2.0 * np.outer(qv, v) / vv
        return self.pack(g.sum(axis=0), np.sum(q * s, axis=0), grad_v)

    # parameter vector ---------------------------------------------------------
    def pack(self, mu, log_sigma, reflectors):
        return np.concatenate([np.ravel(mu), np.ravel(log_sigma), np.ravel(reflectors)])

    def to_vector(self):
        return self.pack(self.mu, self.log_sigma, self.reflectors)

    def with_vector(self, theta):
        d, n = self.dim, self.n_reflectors
        theta = np.asarray(theta, dtype=np.float64)
        return VariationalPosterior(theta[:d], theta[d:2 * d], theta[2 * d:].reshape(n, d))

    # persistence ----------------------------------------------------------------
    def to_dict(self):
        return {
            "mu": self.mu.tolist(),
            "log_sigma": self.log_sigma.tolist(),
            "reflectors": self.reflectors.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        d = len(doc["mu"])
        refl = np.asarray(doc.get("reflectors", []), dtype=np.float64).reshape(-1, d)
        return cls(doc["mu"], doc["log_sigma"], refl)

    def save(self, path, **extra):
        doc = self.to_dict()
        doc.update(extra)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        return cls.from_dict(doc), doc


def posterior_sample(posterior, n, rng_seed=0):
    """Draw ``n`` reparametrized samples, keeping ``eps`` for pathwise gradients."""
    return posterior.sample(n, rng_seed)


class Adam:
    """Adam ascent/descent on a flat parameter vector."""

    def __init__(self, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, theta, grad, maximize=True):
        grad = np.asarray(grad, dtype=np.float64)
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return theta + update if maximize else theta - update
