"""Amortized mean-field posteriors from a small fully connected network.

Missing slots of an observation are filled with the training-set median;
the network maps the filled vector to ``(mu, log_sigma)`` for every
coordinate and the hidden entries are gathered into a posterior.
"""
import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .partition import Partition
from .posterior import VariationalPosterior

__all__ = ["InferenceNetwork", "amortized_infer", "median_fill"]


def median_fill(observation, observed_mask, median):
    observation = np.asarray(observation, dtype=np.float64)
    mask = np.asarray(observed_mask, dtype=bool)
    return np.where(mask, np.nan_to_num(observation), np.broadcast_to(median, observation.shape))


@dataclass
class InferenceNetwork:
    """ReLU MLP ``R^d -> R^{2d}``; the first half of the output is ``mu``."""

    weights: list  # [(W, b)], W of shape (out, in)
    median: np.ndarray

    def __post_init__(self):
        self.weights = [(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))
                        for w, b in self.weights]
        self.median = np.asarray(self.median, dtype=np.float64)
        if self.weights[-1][0].shape[0] != 2 * self.dim:
            raise DimensionMismatch("output layer must have 2*d units")

    @property
    def dim(self):
        return self.weights[0][0].shape[1]

    @classmethod
    def zeros(cls, dim, hidden=(64,), median=None):
        sizes = [dim, *hidden, 2 * dim]
        weights = [(np.zeros((o, i)), np.zeros(o)) for i, o in zip(sizes[:-1], sizes[1:])]
        return cls(weights, np.zeros(dim) if median is None else median)

    @classmethod
    def random(cls, dim, hidden=(64,), seed=0, median=None):
        """He-initialised hidden layers and a zero output layer (so ``mu = 0``, ``sigma = 1``)."""
        rng = np.random.default_rng(seed)
        sizes = [dim, *hidden, 2 * dim]
        weights = []
        for k, (i, o) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = k == len(sizes) - 2
            w = np.zeros((o, i)) if last else rng.standard_normal((o, i)) * np.sqrt(2.0 / i)
            weights.append((w, np.zeros(o)))
        return cls(weights, np.zeros(dim) if median is None else median)

    def __call__(self, filled):
        h = np.asarray(filled, dtype=np.float64)
        for k, (w, b) in enumerate(self.weights):
            h = h @ w.T + b
            if k < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
        return h[..., : self.dim], h[..., self.dim:]

    def to_dict(self):
        return {
            "version": 1,
            "dim": self.dim,
            "median": self.median.tolist(),
            "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in self.weights],
        }

    @classmethod
    def from_dict(cls, doc):
        return cls([(layer["w"], layer["b"]) for layer in doc["layers"]], doc["median"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def amortized_infer(network, masked_observation, observed_mask, latent=None):
    """Mean-field posterior over the hidden latent slots for one observation.

    ``latent`` defaults to the partition given by ``observed_mask``.

    Raises
    ------
    DimensionMismatch
        Observation length differs from the network input size.
    InvalidIndices
        The mask observes everything or nothing.
    """
    obs = np.asarray(masked_observation, dtype=np.float64)
    if obs.shape[-1] != network.dim or np.shape(observed_mask)[-1] != network.dim:
        raise DimensionMismatch(f"network expects length {network.dim}, got {obs.shape[-1]}")
    latent = latent or Partition.from_mask(observed_mask)
    mu, log_sigma = network(median_fill(obs, observed_mask, network.median))
    return VariationalPosterior(latent.gather_hidden(mu), latent.gather_hidden(log_sigma))
