import numpy as np
import pytest

from viscos import (ConditionConfig, DimensionMismatch, Flow, InferenceNetwork, InvalidIndices, Partition,
                    TrainConfig, amortized_infer, elbo_estimate, fit_conditional, gen_dataset, median_fill,
                    train_incomplete)


def test_zero_network_gives_standard_posterior():
    net = InferenceNetwork.zeros(5, median=np.arange(5.0))
    mask = np.array([1, 0, 1, 0, 0], dtype=bool)
    q = amortized_infer(net, np.array([0.3, np.nan, -1.0, np.nan, np.nan]), mask)
    np.testing.assert_array_equal(q.mu, np.zeros(3))
    np.testing.assert_array_equal(q.sigma, np.ones(3))
    assert q.n_reflectors == 0


def test_random_network_starts_standard():
    net = InferenceNetwork.random(4, (16,), seed=3)
    q = amortized_infer(net, np.ones(4), np.array([1, 1, 0, 0], dtype=bool))
    np.testing.assert_array_equal(q.mu, np.zeros(2))
    np.testing.assert_array_equal(q.log_sigma, np.zeros(2))


def test_all_observed_rejected():
    net = InferenceNetwork.zeros(3)
    with pytest.raises(InvalidIndices):
        amortized_infer(net, np.ones(3), np.ones(3, dtype=bool))


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        amortized_infer(InferenceNetwork.zeros(3), np.ones(4), np.array([1, 0, 0, 0], dtype=bool))


def test_median_fill():
    out = median_fill(np.array([1.0, np.nan, 3.0]), np.array([1, 0, 1], dtype=bool), np.array([9.0, 8.0, 7.0]))
    np.testing.assert_array_equal(out, [1.0, 8.0, 3.0])


def test_network_json_roundtrip(tmp_path):
    net = InferenceNetwork.random(3, (8, 4), seed=1, median=[0.1, 0.2, 0.3])
    net.weights[-1] = (np.full_like(net.weights[-1][0], 0.5), net.weights[-1][1])
    net.save(tmp_path / "n.json")
    back = InferenceNetwork.load(tmp_path / "n.json")
    x = np.array([0.4, -0.2, 1.0])
    for a, b in zip(net(x), back(x)):
        np.testing.assert_array_equal(a, b)


def test_trained_amortized_elbo_close_to_per_item_fit():
    ds = gen_dataset("correlated_gauss", 2500, 8, seed=3).with_missingness(0.5, 4)
    train, test = ds.split(2000)
    median = np.nanmedian(np.where(train.mask, train.samples, np.nan), axis=0)
    flow = Flow.random(8, n_layers=4, width=32, seed=0, weight_scale=0.1, bias_scale=0.1)
    net = InferenceNetwork.random(8, (64,), seed=0, median=median)
    flow, net, _ = train_incomplete(flow, net, train, TrainConfig(epochs=3, mode="incomplete", missing_rate=0.5))
    gaps = []
    for y, m in zip(test.samples[:3], test.mask[:3]):
        part = Partition.from_mask(m)
        y_O = part.gather_observed(y)
        q = amortized_infer(net, np.where(m, y, np.nan), m)
        amortized = elbo_estimate(flow, q, y_O, part, part, n_samples=1000).value
        fitted = fit_conditional(flow, y_O, part, ConditionConfig(n_steps=200)).final_elbo
        gaps.append(fitted - amortized)
    assert abs(np.mean(gaps)) < 0.5
