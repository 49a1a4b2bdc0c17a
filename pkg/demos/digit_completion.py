"""Fill in half of a 6x6 digit from one fitted posterior and print several completions."""
import time

import numpy as np

from viscos import (ConditionConfig, Flow, TrainConfig, conditional_sample, fit_conditional, gen_dataset,
                    make_partition, mle_train)

SHADES = " .:-=+*#%@"


def render(rows):
    """Side-by-side ASCII images of 36-pixel vectors."""
    lines = []
    for r in range(6):
        cells = []
        for img in rows:
            v = np.clip(img.reshape(6, 6)[r], 0.0, 1.0)
            cells.append("".join(SHADES[int(p * (len(SHADES) - 1))] * 2 for p in v))
        lines.append("  ".join(cells))
    return "\n".join(lines)


def main():
    flow = Flow.random(36, n_layers=8, width=64, seed=0, weight_scale=0.1, bias_scale=0.1)
    flow, _ = mle_train(flow, gen_dataset("tiny_digits", 2000, seed=0), TrainConfig(epochs=3))

    truth = gen_dataset("tiny_digits", 1, seed=99, params={"noise": 0.0}).samples[0]
    data = make_partition(np.arange(18), 36)  # top three rows observed
    y_O = data.gather_observed(truth)
    report = fit_conditional(flow, y_O, data, ConditionConfig(n_steps=200, final_samples=200))

    t0 = time.perf_counter()
    out = conditional_sample(flow, report.posterior, y_O, report.latent, data, 64, rng_seed=1)
    print(f"64 completions in {time.perf_counter() - t0:.2f}s, max residual {out.residual.max():.1e}")
    masked = truth.copy()
    masked[list(data.hidden)] = 0.0
    print("truth | observed | completions")
    print(render([truth, masked, *out.y[:4]]))


if __name__ == "__main__":
    main()
