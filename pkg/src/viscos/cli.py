"""Command-line entry point: ``viscos {train,condition,sample,check}``.

Exit codes: 0 success, 1 failed check, 2 usage or configuration error,
3 numerical failure.
"""
import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from .amortized import InferenceNetwork, amortized_infer
from .checks import run_suite
from .conditioning import conditional_sample, elbo_estimate, fit_conditional
from .config import ConfigError, load_config, resolve, to_jsonable
from .datasets import Dataset, gen_dataset
from .errors import (DimensionMismatch, InvalidIndices, InvalidParams, NoConvergence, NonFinite,
                     SeriesDiverging, SingularMatrix, SolverFailureRate, ZeroReflector)
from .flows import Flow
from .partition import Partition, make_partition
from .posterior import VariationalPosterior
from .solvers import solve_constraint
from .training import mle_train, train_incomplete

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_CHECK", "EXIT_USAGE", "EXIT_NUMERIC"]

log = logging.getLogger("viscos")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

_USAGE_ERRORS = (ConfigError, InvalidIndices, InvalidParams, DimensionMismatch, ZeroReflector,
                 FileNotFoundError, KeyError, json.JSONDecodeError)
_NUMERIC_ERRORS = (NonFinite, NoConvergence, SolverFailureRate, SingularMatrix, SeriesDiverging)

TRACE_COLUMNS = ["iteration", "residual", "alpha", "beta", "step", "method"]


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return int(value)
    return value


def _write_rows(path, columns, rows, comment=None):
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _load_run_config(args):
    cfg = load_config(args.config, args.seed) if args.config else resolve({}, args.seed)
    if args.out is not None:
        cfg.output_dir = args.out
    if getattr(args, "checkpoint", None) is not None:
        cfg.checkpoint = args.checkpoint
    if getattr(args, "observation", None) is not None:
        cfg.observation.csv = args.observation
    if getattr(args, "mask", None) is not None:
        cfg.observation.mask = _parse_mask(args.mask)
    if getattr(args, "posterior", None) is not None:
        cfg.sample.posterior = args.posterior
    if getattr(args, "n", None) is not None:
        cfg.sample.n = args.n
    if getattr(args, "suite", None) is not None:
        cfg.check.suite = args.suite
    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, "resolved_config.json"), "w") as fh:
        json.dump(to_jsonable(cfg), fh, indent=2, sort_keys=True)
    return cfg


def _parse_mask(text):
    text = text.strip()
    if not text:
        return []
    try:
        return [int(tok) for tok in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--mask must be a comma separated index list, got {text!r}", "observation.mask") from exc


def _require(value, key):
    if value is None:
        raise ConfigError(f"{key} is required", key)
    return value


def _load_flow(cfg):
    return Flow.load(_require(cfg.checkpoint, "checkpoint"))


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _dataset(cfg):
    ds = cfg.dataset
    if ds.csv:
        return Dataset.from_csv(ds.csv)
    return gen_dataset(ds.kind, ds.n, ds.d, ds.seed, ds.params)


def _initial_flow(cfg, d):
    fs = cfg.flow
    if fs.init == "identity":
        return Flow.identity(d, fs.n_layers, fs.width)
    if fs.init == "random":
        return Flow.random(d, fs.n_layers, fs.width, fs.lipschitz, fs.init_seed, fs.weight_scale, fs.bias_scale)
    raise ConfigError(f"flow.init must be 'random' or 'identity', got {fs.init!r}", "flow.init")


def cmd_train(cfg):
    dataset = _dataset(cfg)
    flow = _initial_flow(cfg, dataset.dim)
    out = cfg.output_dir
    try:
        if cfg.train.mode == "incomplete":
            if dataset.mask is None:
                if cfg.train.missing_rate <= 0:
                    raise ConfigError("incomplete mode needs a dataset mask or train.missing_rate > 0",
                                      "train.missing_rate")
                dataset = dataset.with_missingness(cfg.train.missing_rate, cfg.dataset.seed + 1)
            values = np.where(dataset.mask, dataset.samples, np.nan)
            median = np.nanmedian(values, axis=0)
            network = InferenceNetwork.random(dataset.dim, tuple(cfg.network.hidden), cfg.network.init_seed, median)
            flow, network, result = train_incomplete(flow, network, dataset, cfg.train)
            network.save(os.path.join(out, "network.json"))
        else:
            flow, result = mle_train(flow, dataset, cfg.train)
    except NonFinite as exc:
        last = getattr(exc, "last_good", None)
        if last is not None:
            last.save(os.path.join(out, "flow_last_good.json"))
        raise
    flow.save(os.path.join(out, "flow.json"))
    per_epoch = -(-len(dataset) // cfg.train.batch_size) if len(dataset) else 0
    rows = []
    for k, loss in enumerate(result.batch_loss):
        epoch = k // per_epoch if per_epoch else 0
        rows.append((epoch, k, loss, result.learning_rates[epoch]))
    _write_rows(os.path.join(out, "loss.csv"), ["epoch", "batch", "loss", "learning_rate"], rows)
    log.info("trained %d epochs, final loss %s", len(result.epoch_loss),
             result.epoch_loss[-1] if result.epoch_loss else "n/a")
    return EXIT_OK


# ---------------------------------------------------------------------------
# condition
# ---------------------------------------------------------------------------

def _observations(cfg, d):
    """Rows of ``(y_O, data_partition)`` from the observation CSV."""
    path = _require(cfg.observation.csv, "observation.csv")
    obs = Dataset.from_csv(path)
    if obs.dim != d:
        raise DimensionMismatch(f"observation has {obs.dim} columns, flow has dimension {d}")
    if cfg.observation.mask is not None:
        shared = make_partition(cfg.observation.mask, d)
        parts = [shared] * len(obs)
    elif obs.mask is not None:
        parts = [Partition.from_mask(m) for m in obs.mask]
    else:
        raise ConfigError("observation.mask is required when the CSV has no mask columns", "observation.mask")
    return [(p.gather_observed(row), p) for row, p in zip(obs.samples, parts)]


def _solver_trace(flow, posterior, y_O, latent, data, cfg):
    try:
        res = solve_constraint(flow, y_O, posterior.mu, latent, data,
                               cfg.condition.fixed_point, cfg.condition.newton_krylov)
        return res.trace
    except NoConvergence as exc:
        log.warning("trace solve failed: %s", exc)
        return getattr(exc, "trace", [])


def cmd_condition(cfg, verbose=False):
    flow = _load_flow(cfg)
    problems = _observations(cfg, flow.dim)
    out = cfg.output_dir
    network = None
    if cfg.observation.amortized:
        network = InferenceNetwork.load(_require(cfg.observation.network, "observation.network"))
    summary = []
    for i, (y_O, data) in enumerate(problems):
        ccfg = dataclasses.replace(cfg.condition, seed=cfg.condition.seed + i)
        if network is not None:
            y_full = data.scatter(y_O, np.zeros(data.d_hidden))
            posterior = amortized_infer(network, y_full, data.observed_mask)
            latent = data
            est = elbo_estimate(flow, posterior, y_O, latent, data, ccfg.final_samples, ccfg.seed,
                                ccfg.fixed_point, ccfg.newton_krylov, ccfg.max_failure_rate)
            posterior.save(os.path.join(out, f"posterior_{i}.json"), latent_partition=latent.to_dict(),
                           data_partition=data.to_dict(), y_observed=np.asarray(y_O).tolist())
            method = "amortized"
        else:
            report = fit_conditional(flow, y_O, data, ccfg)
            report.write_csv(os.path.join(out, f"report_{i}.csv"))
            report.save_posterior(os.path.join(out, f"posterior_{i}.json"))
            posterior, latent, est = report.posterior, report.latent, report.final
            method = "fit"
        if verbose:
            trace = _solver_trace(flow, posterior, y_O, latent, data, cfg)
            _write_rows(os.path.join(out, f"solver_trace_{i}.csv"), TRACE_COLUMNS,
                        [[t[c] for c in TRACE_COLUMNS] for t in trace])
        value = float("nan") if est is None else est.value
        se = float("nan") if est is None else est.standard_error
        n_failed = 0 if est is None else est.n_failed
        summary.append((i, method, value, se, posterior.kl_to_standard_normal(), n_failed))
        log.info("row %d: elbo %.6f se %.2g", i, value, se)
    _write_rows(os.path.join(out, "summary.csv"),
                ["row", "method", "final_elbo", "elbo_se", "kl_to_prior", "n_failed"], summary)
    return EXIT_OK


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------

def draw_completions(flow, posterior, y_O, latent, data, n, seed, cfg):
    """Exactly ``n`` completions; failed draws are replaced by fresh ones.

    Raises :class:`SolverFailureRate` when the first batch fails above the
    configured rate.
    """
    c = cfg.condition
    first = conditional_sample(flow, posterior, y_O, latent, data, n, seed, c.fixed_point, c.newton_krylov,
                               c.max_failure_rate)
    chunks, have, k = [first.y], first.y.shape[0], 1
    while have < n:
        more = conditional_sample(flow, posterior, y_O, latent, data, n - have, seed + k, c.fixed_point,
                                  c.newton_krylov, 1.0)
        chunks.append(more.y)
        have += more.y.shape[0]
        k += 1
        if k > 100:
            raise SolverFailureRate("could not complete the requested number of samples")
    return np.concatenate(chunks)[:n]


def cmd_sample(cfg):
    flow = _load_flow(cfg)
    path = _require(cfg.sample.posterior, "sample.posterior")
    posterior, doc = VariationalPosterior.load(path)
    data = Partition.from_dict(doc["data_partition"])
    latent = Partition.from_dict(doc["latent_partition"])
    y_O = np.asarray(doc["y_observed"], dtype=np.float64)
    if data.dim != flow.dim:
        raise DimensionMismatch(f"posterior dimension {data.dim} does not match flow dimension {flow.dim}")
    n = int(cfg.sample.n)
    if n < 0:
        raise ConfigError("sample.n must be non-negative", "sample.n")
    y = draw_completions(flow, posterior, y_O, latent, data, n, cfg.seed, cfg) if n else np.zeros((0, flow.dim))
    comment = f"checkpoint={cfg.checkpoint} posterior={path} seed={cfg.seed} n={n}"
    _write_rows(os.path.join(cfg.output_dir, "samples.csv"), [f"y{j}" for j in range(flow.dim)], y, comment)
    return EXIT_OK


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------

def cmd_check(cfg):
    flow = _load_flow(cfg)
    observation = None
    if cfg.observation.csv:
        observation = _observations(cfg, flow.dim)[0]
    c = cfg.check
    rows = run_suite(flow, c.suite, cfg.seed, c.n_points, c.n_problems, observation)
    _write_rows(os.path.join(cfg.output_dir, "checks.csv"), ["name", "value", "threshold", "pass"],
                [(r.name, r.value, r.threshold, int(r.passed)) for r in rows])
    failed = [r.name for r in rows if not r.passed]
    for name in failed:
        log.error("check failed: %s", name)
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="viscos", description="Conditional sampling from residual flows.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--verbose", action="store_true", help="debug logging and solver traces")
        return p

    common(sub.add_parser("train", help="train a flow"))
    p = common(sub.add_parser("condition", help="fit one posterior per observation row"))
    p.add_argument("--checkpoint")
    p.add_argument("--observation", help="CSV with columns y0.. and optional m0..")
    p.add_argument("--mask", help="comma separated observed indices shared by every row")
    p = common(sub.add_parser("sample", help="draw completions from a fitted posterior"))
    p.add_argument("--checkpoint")
    p.add_argument("--posterior")
    p.add_argument("--n", type=int)
    p = common(sub.add_parser("check", help="run diagnostic suites"))
    p.add_argument("--checkpoint")
    p.add_argument("--suite", choices=["identities", "gradients", "solvers", "oracles", "all"])
    p.add_argument("--observation")
    p.add_argument("--mask")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _load_run_config(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "condition":
            return cmd_condition(cfg, args.verbose)
        if args.command == "sample":
            return cmd_sample(cfg)
        return cmd_check(cfg)
    except _USAGE_ERRORS as exc:
        key = getattr(exc, "key", None)
        print(f"viscos: error: {exc}" + (f" [key: {key}]" if key else ""), file=sys.stderr)
        return EXIT_USAGE
    except _NUMERIC_ERRORS as exc:
        print(f"viscos: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
