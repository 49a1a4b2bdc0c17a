"""Condition a two-moons flow on one coordinate and compare with brute-force quadrature.

Run with ``python demos/two_moons_conditioning.py``; takes about a minute.
"""
import numpy as np

from viscos import (ConditionConfig, Flow, TrainConfig, build_grid_oracle, conditional_sample, fit_conditional,
                    gen_dataset, importance_log_marginal, ks_to_oracle, make_partition, mean_nll, mle_train)


def main():
    train, test = gen_dataset("two_moons", 6000, seed=0, params={"noise": 0.1}).split(5000)
    flow = Flow.random(2, n_layers=8, width=64, seed=0, weight_scale=0.1, bias_scale=0.1)
    flow, result = mle_train(flow, train, TrainConfig(epochs=5, lr_decay=0.8))
    print(f"test NLL {mean_nll(flow, test.samples) / 2:.3f} nats/dim after {len(result.epoch_loss)} epochs")

    data = make_partition([0], 2)  # observe y0, infer y1
    for y0 in (-0.5, 0.5, 1.5):
        y_O = np.array([y0])
        oracle = build_grid_oracle(flow, y_O, data)
        report = fit_conditional(flow, y_O, data, ConditionConfig(n_steps=300))
        draws = conditional_sample(flow, report.posterior, y_O, report.latent, data, 2000, rng_seed=1)
        est = importance_log_marginal(flow, report.posterior, y_O, report.latent, data, n=2000)
        print(f"y0={y0:+.1f}  ELBO {report.final_elbo:.4f}  IS {est.value:.4f}  quadrature {oracle.log_marginal:.4f}"
              f"  KS {ks_to_oracle(draws.y[:, 1], oracle):.3f}  E[y1] {draws.y[:, 1].mean():+.3f}"
              f" (oracle {oracle.mean()[0]:+.3f})")


if __name__ == "__main__":
    main()
