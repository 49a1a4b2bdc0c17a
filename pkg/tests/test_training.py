import numpy as np
import pytest

from viscos import (Flow, InferenceNetwork, InvalidParams, NonFinite, TrainConfig, ar1_covariance, gen_dataset,
                    learning_rate_at, mean_nll, mle_train, train_incomplete)


def _near_identity(d, seed=0):
    return Flow.random(d, n_layers=4, width=32, seed=seed, weight_scale=0.1, bias_scale=0.1)


def test_standard_normal_data_reaches_entropy_rate():
    y = np.random.default_rng(0).standard_normal((3000, 3))
    flow, res = mle_train(Flow.identity(3, n_layers=2), y, TrainConfig(epochs=1))
    assert abs(mean_nll(flow, y) / 3 - 0.5 * np.log(2 * np.pi * np.e)) < 0.05
    assert np.all(np.isfinite(res.batch_loss))


def test_correlated_gauss_near_analytic_nll():
    train = gen_dataset("correlated_gauss", 2000, 8, seed=0)
    test = gen_dataset("correlated_gauss", 5000, 8, seed=99)
    flow, res = mle_train(_near_identity(8), train, TrainConfig(epochs=3))
    analytic = 0.5 * np.linalg.slogdet(2 * np.pi * np.e * ar1_covariance(8))[1] / 8
    assert abs(mean_nll(flow, test.samples) / 8 - analytic) < 0.1
    assert np.all(np.isfinite(res.batch_loss))
    assert all(b <= a for a, b in zip(res.epoch_loss, res.epoch_loss[1:]))


def test_trained_flow_keeps_spectral_bound_and_inverts(flow8):
    assert all(layer.lipschitz_estimate() <= 0.9 + 1e-6 for layer in flow8.layers)
    x = np.random.default_rng(1).standard_normal((10, 8))
    np.testing.assert_allclose(flow8.inverse(flow8.forward(x), 1e-12), x, atol=1e-10)


def test_learning_rate_schedule():
    cfg = TrainConfig(learning_rate=1e-2)
    assert [learning_rate_at(cfg, e) for e in range(4)] == [1e-2, 5e-3, 2.5e-3, 1.25e-3]
    _, res = mle_train(_near_identity(2), gen_dataset("two_moons", 64, seed=0), TrainConfig(epochs=3))
    assert res.learning_rates == [1e-2 * 0.5**e for e in range(3)]


def test_invalid_config():
    with pytest.raises(InvalidParams):
        TrainConfig(missing_rate=1.0)
    with pytest.raises(InvalidParams):
        TrainConfig(mode="partial")


def test_mle_rejects_masked_data():
    ds = gen_dataset("gauss_mixture", 50, 2, seed=0).with_missingness(0.5, 1)
    with pytest.raises(InvalidParams):
        mle_train(_near_identity(2), ds)


def test_blow_up_raises_with_last_good_flow():
    ds = gen_dataset("correlated_gauss", 500, 4, seed=0)
    with pytest.raises(NonFinite) as info:
        mle_train(_near_identity(4), ds, TrainConfig(epochs=1, learning_rate=1e150))
    assert isinstance(info.value.last_good, Flow)


def test_zero_missingness_routes_to_likelihood():
    ds = gen_dataset("correlated_gauss", 300, 3, seed=0)
    complete = ds.with_missingness(0.0, 1)
    assert complete.mask.all()
    a, res_a = mle_train(_near_identity(3), ds, TrainConfig(epochs=2))
    b, _, res_b = train_incomplete(_near_identity(3), InferenceNetwork.random(3, (8,)), complete,
                                   TrainConfig(epochs=2, mode="incomplete"))
    assert res_a.batch_loss == res_b.batch_loss
    x = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_array_equal(a.forward(x), b.forward(x))


def test_incomplete_training_reproducible():
    ds = gen_dataset("correlated_gauss", 300, 4, seed=0).with_missingness(0.5, 1)

    def run():
        return train_incomplete(_near_identity(4), InferenceNetwork.random(4, (16,), seed=2), ds,
                                TrainConfig(epochs=1, mode="incomplete"))

    (f1, n1, r1), (f2, n2, r2) = run(), run()
    assert r1.batch_loss == r2.batch_loss
    assert np.all(np.isfinite(r1.batch_loss))
    np.testing.assert_array_equal(n1(np.ones(4))[0], n2(np.ones(4))[0])
