"""Maximum-likelihood and incomplete-data training of residual flows (torch, float64).

Flow parameters live in torch during training and are copied back into a
numpy :class:`~viscos.flows.Flow` after every update, where spectral
normalisation is re-applied and the normalised weights are copied back.

The latent point of each data item comes from the numpy inverse (or the
constraint solver for incomplete items) and is made differentiable with
one frozen Newton correction,

    x_hat = x0 - A0^{-1} (f(x0) - y),

whose value equals ``x0`` and whose derivative is the implicit one.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .amortized import InferenceNetwork, median_fill
from .datasets import Dataset
from .errors import InvalidParams, NoConvergence, NonFinite, SolverFailureRate
from .flows import Flow, ResidualLayer, spectral_normalize
from .solvers import FixedPointConfig, NewtonKrylovConfig, solve_constraint_batch

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainResult",
    "learning_rate_at",
    "mle_train",
    "train_incomplete",
    "impute_amortized",
    "median_impute",
    "mean_nll",
]

_LOG2PI = math.log(2.0 * math.pi)
DTYPE = torch.float64


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 1e-2
    lr_decay: float = 0.5
    missing_rate: float = 0.0
    mode: str = "complete"
    seed: int = 0
    lipschitz: float = 0.9
    n_power_iter: int = 100
    inverse_tol: float = 1e-10
    n_probes: int = 1
    max_failure_rate: float = 0.2
    fixed_point: FixedPointConfig = field(default_factory=lambda: FixedPointConfig(alpha0=1.0, beta0=1.0, tol=1e-8, max_iter=200))
    newton_krylov: NewtonKrylovConfig = field(default_factory=lambda: NewtonKrylovConfig(tol=1e-8))

    def __post_init__(self):
        if not 0.0 <= self.missing_rate < 1.0:
            raise InvalidParams(f"missing_rate must lie in [0, 1), got {self.missing_rate}")
        if self.mode not in ("complete", "incomplete"):
            raise InvalidParams(f"mode must be 'complete' or 'incomplete', got {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise InvalidParams("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")


@dataclass
class TrainResult:
    batch_loss: list
    epoch_loss: list
    learning_rates: list
    n_failed: int = 0


def learning_rate_at(cfg, epoch):
    """Step schedule ``lr0 * decay ** epoch``."""
    return cfg.learning_rate * cfg.lr_decay**epoch


# ---------------------------------------------------------------------------
# Torch mirror of the flow
# ---------------------------------------------------------------------------

def _lipswish(z):
    return z * torch.sigmoid(z) / 1.1


def _lipswish_d1(z):
    s = torch.sigmoid(z)
    return (s + z * s * (1.0 - s)) / 1.1


class _TorchFlow:
    def __init__(self, flow):
        if any(layer.activation != "lipswish" for layer in flow.layers):
            raise InvalidParams("training supports LipSwish layers only")
        self.dim = flow.dim
        self.params = []
        for layer in flow.layers:
            self.params.append([torch.tensor(np.asarray(a, dtype=np.float64), dtype=DTYPE, requires_grad=True)
                                for a in (layer.w1, layer.b1, layer.w2, layer.b2)])

    def parameters(self):
        return [p for group in self.params for p in group]

    def forward(self, x):
        for w1, b1, w2, b2 in self.params:
            x = x + _lipswish(x @ w1.T + b1) @ w2.T + b2
        return x

    def jacobian(self, x):
        """Batched ``J(x)``, shape (n, d, d)."""
        eye = torch.eye(self.dim, dtype=DTYPE)
        J = eye.expand(x.shape[0], -1, -1)
        for w1, b1, w2, b2 in self.params:
            z = x @ w1.T + b1
            Jk = eye + (w2 * _lipswish_d1(z)[:, None, :]) @ w1
            J = Jk @ J
            x = x + _lipswish(z) @ w2.T + b2
        return J

    def to_flow(self, lipschitz, n_power_iter):
        """Numpy flow with spectral normalisation applied; the torch copy is updated in place."""
        layers = []
        with torch.no_grad():
            for group in self.params:
                w1, b1, w2, b2 = (p.detach().numpy().copy() for p in group)
                layer = spectral_normalize(ResidualLayer(w1, b1, w2, b2), lipschitz, n_power_iter)
                group[0].copy_(torch.from_numpy(np.asarray(layer.w1, dtype=np.float64)))
                group[2].copy_(torch.from_numpy(np.asarray(layer.w2, dtype=np.float64)))
                layers.append(layer)
        return Flow(layers, self.dim)


class _TorchNet:
    def __init__(self, net):
        self.dim = net.dim
        self.median = torch.tensor(net.median, dtype=DTYPE)
        self.layers = [(torch.tensor(w, dtype=DTYPE, requires_grad=True), torch.tensor(b, dtype=DTYPE, requires_grad=True))
                       for w, b in net.weights]

    def parameters(self):
        return [p for pair in self.layers for p in pair]

    def __call__(self, h):
        for k, (w, b) in enumerate(self.layers):
            h = h @ w.T + b
            if k < len(self.layers) - 1:
                h = torch.relu(h)
        return h[:, : self.dim], h[:, self.dim:]

    def to_network(self):
        weights = [(w.detach().numpy().copy(), b.detach().numpy().copy()) for w, b in self.layers]
        return InferenceNetwork(weights, self.median.numpy().copy())


def _log_normal(x):
    return -0.5 * (x * x).sum(-1) - 0.5 * x.shape[-1] * _LOG2PI


def _nll_terms(tflow, x0, y):
    """Per-item ``-log p(y)`` made differentiable through the implicit latent point."""
    x0 = torch.as_tensor(x0, dtype=DTYPE)
    y = torch.as_tensor(y, dtype=DTYPE)
    J0 = tflow.jacobian(x0).detach()
    r = tflow.forward(x0) - y
    x_hat = x0 - torch.linalg.solve(J0, r.unsqueeze(-1)).squeeze(-1)
    _, logabs = torch.linalg.slogdet(tflow.jacobian(x_hat))
    return -_log_normal(x_hat) + logabs


def mean_nll(flow, samples, tol=1e-10):
    """Average ``-log p(y)`` over samples with the numpy flow (dense determinants)."""
    return float(-np.mean(flow.log_density(np.asarray(samples, dtype=np.float64), tol)))


def _samples_of(dataset):
    return dataset.samples if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=np.float64)


def _non_finite(message, last_good, result):
    err = NonFinite(message)
    err.last_good = last_good
    err.result = result
    return err


def _check_finite(loss, flow, result):
    if not torch.isfinite(loss):
        raise _non_finite("training loss became non-finite", flow, result)


def _invert(flow, y, tol, last_good, result):
    """Inverse pass; divergence after an update means the parameters blew up."""
    try:
        return flow.inverse(y, tol)
    except NoConvergence as exc:
        raise _non_finite(f"flow inverse failed during training: {exc}", last_good, result) from exc


def mle_train(flow, dataset, cfg=None):
    """Minimise the mean negative log-likelihood with Adam.

    Returns
    -------
    (Flow, TrainResult)

    Raises
    ------
    NonFinite
        Non-finite loss, or the inverse diverging after an update. Carries
        the last good flow as ``.last_good``.
    """
    cfg = cfg or TrainConfig()
    data = _samples_of(dataset)
    if isinstance(dataset, Dataset) and dataset.mask is not None and not dataset.mask.all():
        raise InvalidParams("mle_train needs a complete dataset; use train_incomplete")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    tflow = _TorchFlow(flow)
    flow = tflow.to_flow(cfg.lipschitz, cfg.n_power_iter)
    opt = torch.optim.Adam(tflow.parameters(), lr=cfg.learning_rate)
    result = TrainResult([], [], [])
    prev = flow
    for epoch in range(cfg.epochs):
        lr = learning_rate_at(cfg, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        result.learning_rates.append(lr)
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(data), cfg.batch_size):
            y = data[order[start:start + cfg.batch_size]]
            x0 = _invert(flow, y, cfg.inverse_tol, prev, result)
            loss = _nll_terms(tflow, x0, y).mean()
            _check_finite(loss, flow, result)
            opt.zero_grad()
            loss.backward()
            opt.step()
            prev, flow = flow, tflow.to_flow(cfg.lipschitz, cfg.n_power_iter)
            losses.append(loss.item())
            result.batch_loss.append(loss.item())
        result.epoch_loss.append(float(np.mean(losses)) if losses else float("nan"))
        log.info("epoch %d lr %.3g loss %.5f", epoch, lr, result.epoch_loss[-1])
    return flow, result


def _incomplete_terms(tflow, tnet, flow, y, mask, cfg, gen):
    """Per-item negative ELBO for rows with hidden coordinates; failed rows dropped."""
    y_t = torch.as_tensor(y, dtype=DTYPE)
    m = torch.as_tensor(mask)
    mf = m.to(DTYPE)
    mu, log_sigma = tnet(torch.where(m, y_t, tnet.median.expand_as(y_t)))
    eps = torch.randn(y.shape, generator=gen, dtype=DTYPE)
    x_h = mu + torch.exp(log_sigma) * eps
    solved = solve_constraint_batch(flow, y, x_h.detach().numpy(), mask, mask, cfg.fixed_point, cfg.newton_krylov)
    ok = torch.as_tensor(~solved.failed)
    x_bar = torch.as_tensor(solved.x, dtype=DTYPE)
    x_full = torch.where(m, x_bar, x_h)

    both = mf[:, :, None] * mf[:, None, :]
    pad = torch.diag_embed(1.0 - mf)

    def masked_jacobian(x):
        # rows/cols outside O replaced by the identity: det equals det J^OO
        return both * tflow.jacobian(x) + pad

    A0 = masked_jacobian(x_full).detach()
    r = (tflow.forward(x_full) - y_t) * mf
    x_hat = x_full - mf * torch.linalg.solve(A0, r.unsqueeze(-1)).squeeze(-1)

    A = masked_jacobian(x_hat)
    _, logdet = torch.linalg.slogdet(A)
    z = (torch.randint(0, 2, (cfg.n_probes,) + y.shape, generator=gen).to(DTYPE) * 2.0 - 1.0) * mf
    w = torch.linalg.solve(A0.transpose(-1, -2).unsqueeze(0), z.unsqueeze(-1)).squeeze(-1)
    surrogate = (w * (A.unsqueeze(0) @ z.unsqueeze(-1)).squeeze(-1)).sum(-1).mean(0)
    lad = surrogate - surrogate.detach() + logdet.detach()

    hidden = 1.0 - mf
    log_q = (hidden * (-0.5 * eps**2 - log_sigma - 0.5 * _LOG2PI)).sum(-1)
    elbo = _log_normal(x_hat) - log_q - lad
    return -elbo[ok], int((~ok).sum())


def train_incomplete(flow, network, dataset, cfg=None):
    """Jointly train a flow and an amortized inference network on masked data.

    Fully observed items contribute their exact negative log-likelihood;
    the rest contribute the negative ELBO under the amortized mean-field
    posterior, with one NLADE probe per item for the log-determinant
    gradient.

    Returns
    -------
    (Flow, InferenceNetwork, TrainResult)

    Raises
    ------
    NonFinite
    SolverFailureRate
        More than ``cfg.max_failure_rate`` of the incomplete items failed.
    """
    cfg = cfg or TrainConfig(mode="incomplete")
    if not isinstance(dataset, Dataset) or dataset.mask is None:
        raise InvalidParams("train_incomplete needs a dataset with a mask")
    data, masks = dataset.samples, dataset.mask
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    tflow = _TorchFlow(flow)
    tnet = _TorchNet(network)
    flow = tflow.to_flow(cfg.lipschitz, cfg.n_power_iter)
    opt = torch.optim.Adam(tflow.parameters() + tnet.parameters(), lr=cfg.learning_rate)
    result = TrainResult([], [], [])
    prev = flow
    n_partial = 0
    for epoch in range(cfg.epochs):
        lr = learning_rate_at(cfg, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        result.learning_rates.append(lr)
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            y, mask = data[idx], masks[idx]
            full = mask.all(axis=1)
            terms = []
            if full.any():
                terms.append(_nll_terms(tflow, _invert(flow, y[full], cfg.inverse_tol, prev, result), y[full]))
            if (~full).any():
                t, failed = _incomplete_terms(tflow, tnet, flow, y[~full], mask[~full], cfg, gen)
                terms.append(t)
                result.n_failed += failed
                n_partial += int((~full).sum())
                if n_partial >= 100 and result.n_failed / n_partial > cfg.max_failure_rate:
                    raise SolverFailureRate(f"{result.n_failed} of {n_partial} item solves failed")
            loss = torch.cat(terms).mean()
            _check_finite(loss, flow, result)
            opt.zero_grad()
            loss.backward()
            opt.step()
            prev, flow = flow, tflow.to_flow(cfg.lipschitz, cfg.n_power_iter)
            losses.append(loss.item())
            result.batch_loss.append(loss.item())
        result.epoch_loss.append(float(np.mean(losses)) if losses else float("nan"))
        log.info("epoch %d lr %.3g loss %.5f failed %d", epoch, lr, result.epoch_loss[-1], result.n_failed)
    return flow, tnet.to_network(), result


def impute_amortized(flow, network, samples, mask, n_draws=0, seed=0, fp_cfg=None, nk_cfg=None):
    """Complete masked rows from the amortized posterior.

    ``n_draws = 0`` pushes the posterior mean through the constraint;
    otherwise completions of ``n_draws`` posterior draws are averaged.
    Rows whose solve fails fall back to the median fill.
    """
    samples = np.asarray(samples, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    fp_cfg = fp_cfg or FixedPointConfig(alpha0=1.0, beta0=1.0, tol=1e-8, max_iter=200)
    nk_cfg = nk_cfg or NewtonKrylovConfig(tol=1e-8)
    filled = median_fill(samples, mask, network.median)
    mu, log_sigma = network(filled)
    rng = np.random.default_rng(seed)
    draws = [mu] if n_draws == 0 else [mu + np.exp(log_sigma) * rng.standard_normal(mu.shape) for _ in range(n_draws)]
    total = np.zeros_like(samples)
    for x_h in draws:
        solved = solve_constraint_batch(flow, samples, x_h, mask, mask, fp_cfg, nk_cfg)
        y = np.where(solved.failed[:, None], filled, solved.y)
        total += np.where(mask, samples, y)
    return total / len(draws)


def median_impute(samples, mask, median):
    return median_fill(samples, mask, median)
