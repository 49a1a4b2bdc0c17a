"""Invertible residual flows ``f = f_L o ... o f_1`` with ``f_k(x) = x + h_k(x)``.

Each residual branch is a two-layer perceptron ``h(x) = W2 phi(W1 x + b1) + b2``
with the 1-Lipschitz LipSwish activation. Spectral normalisation keeps
``Lip(h) <= ||W2|| ||W1|| < 1`` so every layer is invertible by Banach
iteration and its Jacobian inverse is a convergent Neumann series.

``f`` maps the latent space (standard normal base) to data space. All
Jacobian products are computed analytically layer by layer, never by
assembling matrices, except in the explicitly dense helpers used for
log-densities and oracles.
"""
import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import precision
from .errors import DimensionMismatch, NoConvergence, NonFinite, SeriesDiverging
from .linalg import dense_logabsdet

__all__ = [
    "lipswish",
    "ResidualLayer",
    "StandardNormal",
    "Flow",
    "Linearization",
    "spectral_norm_estimate",
    "spectral_normalize_matrix",
    "spectral_normalize",
]

LOG_2PI = np.log(2.0 * np.pi)
_SWISH_SCALE = 1.1
ACTIVATIONS = ("lipswish", "linear")


_sigmoid = expit


def lipswish(z):
    return z * _sigmoid(z) / _SWISH_SCALE


def lipswish_d1(z):
    s = _sigmoid(z)
    return (s + z * s * (1.0 - s)) / _SWISH_SCALE


def lipswish_d2(z):
    s = _sigmoid(z)
    return s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s)) / _SWISH_SCALE


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

@dataclass
class ResidualLayer:
    """One residual block ``x -> x + W2 phi(W1 x + b1) + b2``.

    ``activation`` is ``'lipswish'`` or ``'linear'``; the linear variant
    gives exactly linear flows used as Gaussian test cases.
    """

    w1: np.ndarray  # (width, dim)
    b1: np.ndarray  # (width,)
    w2: np.ndarray  # (dim, width)
    b2: np.ndarray  # (dim,)
    lipschitz_bound: float = 0.9
    activation: str = "lipswish"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        dtype = precision.working_dtype()
        self.w1 = np.asarray(self.w1, dtype=dtype)
        self.b1 = np.asarray(self.b1, dtype=dtype)
        self.w2 = np.asarray(self.w2, dtype=dtype)
        self.b2 = np.asarray(self.b2, dtype=dtype)
        width, dim = self.w1.shape
        if self.w2.shape != (dim, width) or self.b1.shape != (width,) or self.b2.shape != (dim,):
            raise DimensionMismatch("inconsistent residual layer parameter shapes")

    @property
    def dim(self):
        return self.w1.shape[1]

    @property
    def width(self):
        return self.w1.shape[0]

    def preactivation(self, x):
        return x @ self.w1.T + self.b1

    def phi(self, z):
        return lipswish(z) if self.activation == "lipswish" else z

    def phi_d1(self, z):
        return lipswish_d1(z) if self.activation == "lipswish" else np.ones_like(z)

    def phi_d2(self, z):
        return lipswish_d2(z) if self.activation == "lipswish" else np.zeros_like(z)

    def residual(self, x):
        return self.phi(self.preactivation(x)) @ self.w2.T + self.b2

    def __call__(self, x):
        return x + self.residual(x)

    def lipschitz_estimate(self, n_power_iter=100):
        return spectral_norm_estimate(self.w1, n_power_iter) * spectral_norm_estimate(self.w2, n_power_iter)

    def inverse(self, y, tol, max_iter=1000, x0=None):
        """Banach iteration ``x <- y - h(x)``; the step equals ``f_k(x) - y``."""
        x = np.array(y if x0 is None else x0, copy=True)
        # steps that stop shrinking this close to machine precision are a rounding cycle
        floor = 1e4 * np.finfo(x.dtype).eps * max(1.0, float(np.abs(y).max()) if y.size else 1.0)
        step, best, flat = np.inf, np.inf, 0
        for it in range(1, max_iter + 1):
            x_new = y - self.residual(x)
            step = np.abs(x_new - x).max() if x.size else 0.0
            x = x_new
            if step <= tol:
                return x
            flat = flat + 1 if step >= best else 0
            best = min(best, step)
            if flat >= 20 and step <= floor:
                return x
            if not np.isfinite(step) or step > 1e100:
                raise NoConvergence("residual layer inverse diverged", step, it)
        raise NoConvergence("residual layer inverse did not converge", step, max_iter)


def spectral_norm_estimate(matrix, n_power_iter=100, tol=1e-12):
    """Largest singular value by power iteration on ``W^T W``."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if not np.any(matrix):
        return 0.0
    v = np.ones(matrix.shape[1]) / np.sqrt(matrix.shape[1])
    # a deterministic start vector can be orthogonal to the top singular vector
    v = v + 1e-3 * np.cos(np.arange(matrix.shape[1]))
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(n_power_iter):
        u = matrix @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        v_new = matrix.T @ (u / nu)
        sigma_new = np.linalg.norm(v_new)
        v = v_new / sigma_new
        if abs(sigma_new - sigma) <= tol * sigma_new:
            sigma = sigma_new
            break
        sigma = sigma_new
    return float(sigma)


def spectral_normalize_matrix(matrix, target, n_power_iter=100):
    """Rescale ``matrix`` so its spectral-norm estimate does not exceed ``target``."""
    sigma = spectral_norm_estimate(matrix, n_power_iter)
    if sigma <= target:
        return np.array(matrix, copy=True)
    return matrix * (target / sigma)


def spectral_normalize(layer, target=0.9, n_power_iter=100):
    """Return a copy of ``layer`` with ``Lip(h) <= target``.

    Both weight matrices are normalised to ``target ** (1/2)``.
    """
    if not 0.0 < target < 1.0:
        raise ValueError(f"Lipschitz target must lie in (0, 1), got {target}")
    per_matrix = target ** 0.5
    return replace(
        layer,
        w1=spectral_normalize_matrix(layer.w1, per_matrix, n_power_iter),
        w2=spectral_normalize_matrix(layer.w2, per_matrix, n_power_iter),
        lipschitz_bound=target,
    )


# ---------------------------------------------------------------------------
# Base distribution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StandardNormal:
    kind: str = "std_normal"

    @staticmethod
    def logpdf(x):
        x = np.asarray(x, dtype=np.float64)
        return -0.5 * np.sum(x * x, axis=-1) - 0.5 * x.shape[-1] * LOG_2PI

    @staticmethod
    def sample(rng, n, dim):
        return rng.standard_normal((n, dim))


# ---------------------------------------------------------------------------
# Flow
# ---------------------------------------------------------------------------

@dataclass
class Flow:
    layers: list
    dim: int
    base: StandardNormal = field(default_factory=StandardNormal)

    def __post_init__(self):
        for layer in self.layers:
            if layer.dim != self.dim:
                raise DimensionMismatch(f"layer of dim {layer.dim} in flow of dim {self.dim}")

    # -- construction -----------------------------------------------------
    @classmethod
    def identity(cls, dim, n_layers=1, width=4):
        layers = [
            ResidualLayer(np.zeros((width, dim)), np.zeros(width), np.zeros((dim, width)), np.zeros(dim))
            for _ in range(n_layers)
        ]
        return cls(layers, dim)

    @classmethod
    def linear(cls, perturbations, shift=None):
        """Linear flow ``f(x) = prod_k (I + B_k) x + shift``.

        Each ``B_k`` must have spectral norm below 1.
        """
        perturbations = [np.asarray(b, dtype=np.float64) for b in perturbations]
        dim = perturbations[0].shape[0]
        layers = []
        for k, b in enumerate(perturbations):
            norm = np.linalg.norm(b, 2)
            if norm >= 1.0:
                raise ValueError(f"perturbation {k} has spectral norm {norm:.3g} >= 1")
            b2 = np.zeros(dim) if shift is None or k < len(perturbations) - 1 else np.asarray(shift, dtype=np.float64)
            layers.append(ResidualLayer(b, np.zeros(dim), np.eye(dim), b2, max(norm, 1e-12), "linear"))
        return cls(layers, dim)

    @classmethod
    def random_linear(cls, dim, n_layers=2, lipschitz=0.6, seed=0):
        """Linear flow with random perturbations of spectral norm ``lipschitz``."""
        rng = np.random.default_rng(seed)
        mats = []
        for _ in range(n_layers):
            b = rng.standard_normal((dim, dim))
            mats.append(b * (lipschitz / np.linalg.norm(b, 2)))
        return cls.linear(mats)

    @classmethod
    def random(cls, dim, n_layers=8, width=64, lipschitz=0.9, seed=0, weight_scale=1.0, bias_scale=0.5):
        """Randomly initialised flow with every block normalised to ``lipschitz``."""
        rng = np.random.default_rng(seed)
        layers = []
        for _ in range(n_layers):
            layer = ResidualLayer(
                weight_scale * rng.standard_normal((width, dim)) / np.sqrt(dim),
                bias_scale * rng.standard_normal(width),
                weight_scale * rng.standard_normal((dim, width)) / np.sqrt(width),
                bias_scale * rng.standard_normal(dim),
            )
            layers.append(spectral_normalize(layer, lipschitz))
        return cls(layers, dim)

    @property
    def dtype(self):
        return self.layers[0].w1.dtype if self.layers else np.float64

    def _check(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(f"expected last axis of length {self.dim}, got {x.shape}")
        return x

    # -- maps ---------------------------------------------------------------
    def forward(self, x):
        """``y = f(x)`` for a point or a batch of row vectors."""
        x = self._check(x)
        for layer in self.layers:
            x = layer(x)
        if not np.all(np.isfinite(x)):
            raise NonFinite("flow forward produced non-finite values")
        return x

    __call__ = forward

    def inverse(self, y, tol=1e-10, max_iter=1000, warm=None):
        """``x = g(y)`` by per-layer Banach iteration with ``||f(x) - y||_inf <= tol``.

        Parameters
        ----------
        warm : list, optional
            One starting point (or None) per layer, shaped like ``y``. It is
            overwritten with the per-layer solutions, so a run of nearby
            inversions can reuse it and skip most Banach iterations.
        """
        y = self._check(y)
        n_layers = max(len(self.layers), 1)
        layer_tol = tol / (10.0 * n_layers)
        eps = 8 * np.finfo(self.dtype).eps * max(1.0, float(np.max(np.abs(y))) if y.size else 1.0)
        guesses = [None] * len(self.layers) if warm is None else list(warm)
        residual = np.inf
        for _ in range(4):
            x = y
            for k in reversed(range(len(self.layers))):
                x = self.layers[k].inverse(x, max(layer_tol, eps), max_iter, guesses[k])
                guesses[k] = x
            residual = float(np.max(np.abs(self.forward(x) - y))) if y.size else 0.0
            if residual <= tol:
                if warm is not None:
                    warm[:] = guesses
                return x
            layer_tol /= 100.0
        raise NoConvergence("flow inverse did not reach tolerance", residual, 4)

    def linearize(self, x):
        """Cache the forward pass at ``x`` for repeated Jacobian products."""
        return Linearization(self, x)

    def jvp(self, x, v):
        return self.linearize(x).jvp(v)

    def vjp(self, x, u):
        return self.linearize(x).vjp(u)

    def inv_jvp(self, x, v, trunc_tol=None):
        return self.linearize(x).inv_jvp(v, trunc_tol)

    def inv_vjp(self, x, u, trunc_tol=None):
        return self.linearize(x).inv_vjp(u, trunc_tol)

    def jacobian(self, x):
        """Dense ``J(x)``; ``x`` may be a batch, giving shape ``(n, d, d)``."""
        x = self._check(x)
        single = x.ndim == 1
        xb = np.atleast_2d(x).astype(np.float64)
        J = np.broadcast_to(np.eye(self.dim), (xb.shape[0], self.dim, self.dim)).copy()
        for layer in self.layers:
            dphi = layer.phi_d1(xb @ layer.w1.T + layer.b1)
            Jk = np.eye(self.dim) + (layer.w2[None] * dphi[:, None, :]) @ layer.w1
            J = Jk @ J
            xb = layer(xb)
        return J[0] if single else J

    # -- densities ----------------------------------------------------------
    def log_density(self, y, tol=1e-10):
        """Exact ``log p(y) = log p0(g(y)) - log|det J(g(y))|`` with dense determinants."""
        x = self.inverse(y, tol)
        return self.log_density_latent(x)

    def log_density_latent(self, x):
        """``log p(f(x))`` evaluated from the latent point."""
        x = self._check(x)
        J = self.jacobian(x)
        if x.ndim == 1:
            return float(self.base.logpdf(x) - dense_logabsdet(J))
        _, logabs = np.linalg.slogdet(J)
        return self.base.logpdf(x) - logabs

    def sample(self, n, seed=0):
        rng = np.random.default_rng(seed)
        return self.forward(self.base.sample(rng, n, self.dim))

    def lipschitz_bounds(self):
        return [layer.lipschitz_estimate() for layer in self.layers]

    # -- persistence --------------------------------------------------------
    def to_dict(self):
        return {
            "version": 1,
            "dim": self.dim,
            "layers": [
                {
                    "w1": layer.w1.astype(np.float64).tolist(),
                    "b1": layer.b1.astype(np.float64).tolist(),
                    "w2": layer.w2.astype(np.float64).tolist(),
                    "b2": layer.b2.astype(np.float64).tolist(),
                    "lipschitz_bound": float(layer.lipschitz_bound),
                    "activation": layer.activation,
                }
                for layer in self.layers
            ],
            "base": self.base.kind,
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("version") != 1:
            raise ValueError(f"unsupported flow document version {doc.get('version')!r}")
        if doc.get("base") != "std_normal":
            raise ValueError(f"unsupported base distribution {doc.get('base')!r}")
        dim = int(doc["dim"])
        layers = [
            ResidualLayer(
                np.array(item["w1"], dtype=np.float64).reshape(-1, dim),
                np.array(item["b1"], dtype=np.float64),
                np.array(item["w2"], dtype=np.float64).reshape(dim, -1),
                np.array(item["b2"], dtype=np.float64),
                float(item["lipschitz_bound"]),
                item.get("activation", "lipswish"),
            )
            for item in doc["layers"]
        ]
        return cls(layers, dim)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# Jacobian products at a fixed point
# ---------------------------------------------------------------------------

def _neumann(apply_grad_h, v, tol, max_terms=10_000):
    """Sum ``sum_j (-A)^j v`` until a term drops below ``tol`` times ``max|v|``.

    The relative cut keeps the truncated operator scale-equivariant, which
    Krylov solvers rely on as their residuals shrink.
    """
    total = np.array(v, dtype=np.float64, copy=True)
    scale = float(np.abs(total).max()) if total.size else 0.0
    if scale == 0.0:
        return total
    tol = tol * scale
    term = total
    prev = np.inf
    growing = 0
    for _ in range(max_terms):
        term = -apply_grad_h(term)
        total = total + term
        size = float(np.abs(term).max()) if term.size else 0.0
        if size < tol:
            return total
        growing = growing + 1 if size > prev else 0
        if growing >= 10 or not np.isfinite(size):
            raise SeriesDiverging(f"Neumann series terms grew for {growing} consecutive steps")
        prev = size
    raise NoConvergence("Neumann series not truncated", prev, max_terms)


class Linearization:
    """Forward pass of a flow at a single latent point ``x``, cached.

    Offers ``J v``, ``u^T J``, ``G v`` and ``u^T G`` (with ``G = J^{-1}``
    evaluated at ``y = f(x)``) plus the second-order products
    ``grad_x (u^T J(x) v)`` and ``grad_y (a^T G(y) b)``. Vectors may be
    batches of rows; the point is always single.
    """

    def __init__(self, flow, x):
        x = flow._check(x)
        if x.ndim != 1:
            raise DimensionMismatch("Linearization needs a single point")
        self.flow = flow
        self.x = x
        self.inputs = []
        self.d1 = []
        self.d2 = []
        h = x.astype(np.float64)
        for layer in flow.layers:
            z = h @ layer.w1.T + layer.b1
            self.inputs.append(h)
            self.d1.append(layer.phi_d1(z))
            self.d2.append(layer.phi_d2(z))
            h = h + layer.phi(z) @ layer.w2.T + layer.b2
        if not np.all(np.isfinite(h)):
            raise NonFinite("flow forward produced non-finite values")
        self.y = h
        self.stats = {"layer_products": 0}

    @property
    def dim(self):
        return self.flow.dim

    # per-layer products of grad h ------------------------------------------
    def _gh(self, k, v):
        layer = self.flow.layers[k]
        self.stats["layer_products"] += 1
        return (self.d1[k] * (v @ layer.w1.T)) @ layer.w2.T

    def _gh_t(self, k, u):
        layer = self.flow.layers[k]
        self.stats["layer_products"] += 1
        return ((u @ layer.w2) * self.d1[k]) @ layer.w1

    def _hvp(self, k, u, v):
        """``grad_x (u^T grad h_k(x) v)`` at the cached input of layer ``k``."""
        layer = self.flow.layers[k]
        self.stats["layer_products"] += 1
        return ((u @ layer.w2) * self.d2[k] * (v @ layer.w1.T)) @ layer.w1

    def _tol(self, trunc_tol):
        return precision.default_trunc_tol() if trunc_tol is None else trunc_tol

    # first order -----------------------------------------------------------
    def jvp(self, v):
        v = np.asarray(v, dtype=np.float64)
        for k in range(len(self.flow.layers)):
            v = v + self._gh(k, v)
        return v

    def vjp(self, u):
        u = np.asarray(u, dtype=np.float64)
        for k in reversed(range(len(self.flow.layers))):
            u = u + self._gh_t(k, u)
        return u

    def inv_jvp(self, v, trunc_tol=None):
        """``G v`` by per-layer truncated Neumann series."""
        tol = self._tol(trunc_tol)
        v = np.asarray(v, dtype=np.float64)
        for k in reversed(range(len(self.flow.layers))):
            v = _neumann(lambda t, k=k: self._gh(k, t), v, tol)
        return v

    def inv_vjp(self, u, trunc_tol=None):
        """``u^T G`` by per-layer truncated Neumann series."""
        tol = self._tol(trunc_tol)
        u = np.asarray(u, dtype=np.float64)
        for k in range(len(self.flow.layers)):
            u = _neumann(lambda t, k=k: self._gh_t(k, t), u, tol)
        return u

    def jacobian(self):
        return self.jvp(np.eye(self.dim)).T

    def inverse_jacobian(self, trunc_tol=None):
        return self.inv_jvp(np.eye(self.dim), trunc_tol).T

    # second order ----------------------------------------------------------
    def jac_bilinear_grad(self, u, v):
        """``grad_x (u^T J(x) v)`` with ``u``, ``v`` held fixed."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        n = len(self.flow.layers)
        tangents = [v]
        for k in range(n):
            tangents.append(tangents[-1] + self._gh(k, tangents[-1]))
        acc = np.zeros(np.broadcast_shapes(u.shape, v.shape))
        cot = u
        for k in reversed(range(n)):
            # cot = u^T J_L ... J_{k+1}; acc = gradient w.r.t. the output of layer k
            acc = acc + self._gh_t(k, acc) + self._hvp(k, cot, tangents[k])
            cot = cot + self._gh_t(k, cot)
        return acc

    def inv_jac_bilinear_grad(self, a, b, trunc_tol=None):
        """``grad_y (a^T G(y) b)`` at ``y = f(x)`` with ``a``, ``b`` held fixed.

        Uses ``dG_k^{-1} = -J_k^{-1} dJ_k J_k^{-1}`` per layer and pulls each
        contribution back to ``y`` through the inverse layers, so only
        Neumann-series products and per-layer curvature terms are needed.
        """
        tol = self._tol(trunc_tol)
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        n = len(self.flow.layers)
        # betas[k] = J_k^{-1} ... J_L^{-1} b
        betas = [None] * n
        beta = b
        for k in reversed(range(n)):
            beta = _neumann(lambda t, k=k: self._gh(k, t), beta, tol)
            betas[k] = beta
        acc = np.zeros(np.broadcast_shapes(a.shape, b.shape))
        alpha = a
        for k in range(n):
            alpha = _neumann(lambda t, k=k: self._gh_t(k, t), alpha, tol)
            acc = acc - self._hvp(k, alpha, betas[k])
            acc = _neumann(lambda t, k=k: self._gh_t(k, t), acc, tol)
        return acc
