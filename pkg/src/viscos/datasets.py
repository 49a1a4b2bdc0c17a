"""Small synthetic datasets with optional missingness masks.

Masks are boolean with ``True`` on observed coordinates. Every row keeps at
least one observed coordinate.
"""
import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidParams

__all__ = ["Dataset", "gen_dataset", "random_mask", "ar1_covariance", "DIGIT_GLYPHS"]

KINDS = ("two_moons", "gauss_mixture", "correlated_gauss", "tiny_digits")


@dataclass
class Dataset:
    name: str
    samples: np.ndarray
    mask: Optional[np.ndarray] = None
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise InvalidParams("samples must be a 2-D array")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.samples.shape:
                raise InvalidParams("mask shape must match samples")
            if not np.all(self.mask.any(axis=1)):
                raise InvalidParams("a mask hides every coordinate of some sample")

    @property
    def dim(self):
        return self.samples.shape[1]

    def __len__(self):
        return self.samples.shape[0]

    def with_missingness(self, rate, seed):
        return Dataset(self.name, self.samples, random_mask(len(self), self.dim, rate, seed),
                       self.seed, {**self.params, "missing_rate": rate})

    def split(self, n_first):
        def part(sl):
            mask = None if self.mask is None else self.mask[sl]
            return Dataset(self.name, self.samples[sl], mask, self.seed, dict(self.params))

        return part(slice(0, n_first)), part(slice(n_first, None))

    def to_csv(self, path):
        d = self.dim
        header = [f"y{j}" for j in range(d)]
        if self.mask is not None:
            header += [f"m{j}" for j in range(d)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for i, row in enumerate(self.samples):
                out = [repr(float(v)) for v in row]
                if self.mask is not None:
                    out += [str(int(m)) for m in self.mask[i]]
                writer.writerow(out)

    @classmethod
    def from_csv(cls, path, name=None):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise InvalidParams(f"{path} is empty")
        header, body = rows[0], rows[1:]
        y_cols = [i for i, h in enumerate(header) if h.startswith("y")]
        m_cols = [i for i, h in enumerate(header) if h.startswith("m")]
        if m_cols and len(m_cols) != len(y_cols):
            raise InvalidParams("mask columns must match value columns")
        data = np.array([[float(r[i]) for i in y_cols] for r in body]).reshape(len(body), len(y_cols))
        mask = None
        if m_cols:
            mask = np.array([[r[i] == "1" for i in m_cols] for r in body]).reshape(len(body), len(m_cols))
        return cls(name or str(path), data, mask)


def random_mask(n, d, rate, seed):
    """Uniform random missingness; rows left fully hidden get one coordinate back."""
    if not 0.0 <= rate < 1.0:
        raise InvalidParams(f"missing rate must lie in [0, 1), got {rate}")
    rng = np.random.default_rng(seed)
    mask = rng.random((n, d)) >= rate
    empty = np.flatnonzero(~mask.any(axis=1))
    mask[empty, rng.integers(0, d, size=empty.size)] = True
    return mask


def ar1_covariance(d, rho=0.8, scale=1.0):
    idx = np.arange(d)
    return scale * rho ** np.abs(idx[:, None] - idx[None, :])


# 6x6 glyphs, '#' = ink
_GLYPH_ROWS = {
    0: [".####.", "#....#", "#....#", "#....#", "#....#", ".####."],
    1: ["..##..", ".###..", "..##..", "..##..", "..##..", ".####."],
    2: [".####.", "#....#", "....#.", "...#..", "..#...", "######"],
    3: ["#####.", ".....#", "..###.", ".....#", ".....#", "#####."],
    4: ["...##.", "..#.#.", ".#..#.", "######", "....#.", "....#."],
    5: ["######", "#.....", "#####.", ".....#", ".....#", "#####."],
    6: [".####.", "#.....", "#####.", "#....#", "#....#", ".####."],
    7: ["######", ".....#", "....#.", "...#..", "..#...", "..#..."],
    8: [".####.", "#....#", ".####.", "#....#", "#....#", ".####."],
    9: [".####.", "#....#", ".#####", ".....#", "....#.", ".###.."],
}
DIGIT_GLYPHS = np.array(
    [[[c == "#" for c in row] for row in _GLYPH_ROWS[k]] for k in range(10)], dtype=np.float64
).reshape(10, 36)


def _two_moons(rng, n, params):
    noise = float(params.get("noise", 0.1))
    if noise < 0:
        raise InvalidParams("noise must be non-negative")
    n_upper = n // 2
    t = rng.uniform(0.0, np.pi, size=n)
    upper = np.arange(n) < n_upper
    x = np.where(upper, np.cos(t), 1.0 - np.cos(t))
    y = np.where(upper, np.sin(t), 0.5 - np.sin(t))
    out = np.stack([x, y], axis=1)
    if noise > 0:
        out = out + noise * rng.standard_normal(out.shape)
    return out[rng.permutation(n)]


def _gauss_mixture(rng, n, d, params):
    weights = np.asarray(params.get("weights", [0.5, 0.5]), dtype=np.float64)
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise InvalidParams("mixture weights must be non-negative and sum to 1")
    k = weights.size
    default_means = np.zeros((k, d))
    default_means[:, 0] = np.linspace(-2.0, 2.0, k)
    means = np.asarray(params.get("means", default_means), dtype=np.float64)
    scales = np.asarray(params.get("scales", np.full(k, 0.5)), dtype=np.float64)
    if means.shape != (k, d) or scales.shape != (k,):
        raise InvalidParams("means must be (k, d) and scales (k,)")
    if np.any(scales <= 0):
        raise InvalidParams("scales must be positive")
    comp = rng.choice(k, size=n, p=weights)
    return means[comp] + scales[comp, None] * rng.standard_normal((n, d))


def _correlated_gauss(rng, n, d, params):
    cov = np.asarray(params.get("cov", ar1_covariance(d, params.get("rho", 0.8))), dtype=np.float64)
    mean = np.asarray(params.get("mean", np.zeros(d)), dtype=np.float64)
    if cov.shape != (d, d) or mean.shape != (d,):
        raise InvalidParams("cov must be (d, d) and mean (d,)")
    if not np.allclose(cov, cov.T):
        raise InvalidParams("cov must be symmetric")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise InvalidParams("cov must be positive definite") from exc
    return mean + rng.standard_normal((n, d)) @ chol.T


def _tiny_digits(rng, n, params):
    noise = float(params.get("noise", 0.1))
    if noise < 0:
        raise InvalidParams("noise must be non-negative")
    labels = rng.integers(0, 10, size=n)
    return DIGIT_GLYPHS[labels] + noise * rng.standard_normal((n, 36))


def gen_dataset(kind, n, d=None, seed=0, params=None):
    """Generate a reproducible synthetic dataset.

    Parameters
    ----------
    kind : {'two_moons', 'gauss_mixture', 'correlated_gauss', 'tiny_digits'}
    n : int
    d : int, optional
        Fixed at 2 for two_moons and 36 for tiny_digits.
    params : dict, optional
        Kind-specific settings (``noise``, ``weights``/``means``/``scales``,
        ``cov``/``mean``/``rho``) plus ``missing_rate`` for a random mask.

    Raises
    ------
    InvalidParams
    """
    params = dict(params or {})
    if kind not in KINDS:
        raise InvalidParams(f"unknown dataset kind {kind!r}")
    if n < 0:
        raise InvalidParams("n must be non-negative")
    fixed = {"two_moons": 2, "tiny_digits": 36}.get(kind)
    if fixed is not None:
        if d not in (None, fixed):
            raise InvalidParams(f"{kind} has dimension {fixed}, got d={d}")
        d = fixed
    elif d is None or d < 1:
        raise InvalidParams(f"{kind} needs a positive dimension d")
    rng = np.random.default_rng(seed)
    if kind == "two_moons":
        samples = _two_moons(rng, n, params)
    elif kind == "gauss_mixture":
        samples = _gauss_mixture(rng, n, d, params)
    elif kind == "correlated_gauss":
        samples = _correlated_gauss(rng, n, d, params)
    else:
        samples = _tiny_digits(rng, n, params)
    mask = None
    rate = params.get("missing_rate")
    if rate:
        mask = random_mask(n, d, float(rate), seed + 1)
    return Dataset(kind, samples.reshape(n, d), mask, seed, params)
