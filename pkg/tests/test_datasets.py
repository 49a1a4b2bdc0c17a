import numpy as np
import pytest

from viscos import DIGIT_GLYPHS, Dataset, InvalidParams, ar1_covariance, gen_dataset, random_mask


def test_correlated_gauss_covariance():
    cov = ar1_covariance(5, rho=0.6, scale=2.0)
    ds = gen_dataset("correlated_gauss", 100_000, 5, seed=1, params={"cov": cov.tolist()})
    err = np.linalg.norm(np.cov(ds.samples.T) - cov) / np.linalg.norm(cov)
    assert err < 0.05


def test_two_moons_noise_free_on_arcs():
    y = gen_dataset("two_moons", 1000, seed=2, params={"noise": 0.0}).samples
    upper = np.abs(np.hypot(y[:, 0], y[:, 1]) - 1.0) < 1e-12
    lower = np.abs(np.hypot(y[:, 0] - 1.0, y[:, 1] - 0.5) - 1.0) < 1e-12
    assert np.all(upper | lower)
    assert np.all(y[upper, 1] >= 0) and np.all(y[lower & ~upper, 1] <= 0.5)
    assert upper.sum() == 500


@pytest.mark.parametrize("kind,d", [("two_moons", None), ("gauss_mixture", 3), ("correlated_gauss", 4),
                                    ("tiny_digits", None)])
def test_same_seed_bit_identical(kind, d):
    a = gen_dataset(kind, 200, d, seed=7, params={"missing_rate": 0.3})
    b = gen_dataset(kind, 200, d, seed=7, params={"missing_rate": 0.3})
    np.testing.assert_array_equal(a.samples, b.samples)
    np.testing.assert_array_equal(a.mask, b.mask)
    assert not np.array_equal(a.samples, gen_dataset(kind, 200, d, seed=8).samples)


def test_tiny_digits_shape_and_glyphs():
    ds = gen_dataset("tiny_digits", 50, seed=0, params={"noise": 0.0})
    assert ds.dim == 36
    assert all(any(np.array_equal(row, g) for g in DIGIT_GLYPHS) for row in ds.samples)


@pytest.mark.parametrize("kind,d,params", [
    ("gauss_mixture", 2, {"weights": [0.7, 0.7]}),
    ("gauss_mixture", 2, {"scales": [0.5, -1.0]}),
    ("correlated_gauss", 2, {"cov": [[1.0, 2.0], [2.0, 1.0]]}),
    ("two_moons", 3, {}),
    ("unknown", 2, {}),
    ("two_moons", None, {"noise": -1.0}),
])
def test_invalid_params(kind, d, params):
    with pytest.raises(InvalidParams):
        gen_dataset(kind, 10, d, params=params)


def test_random_mask_never_hides_a_whole_row():
    mask = random_mask(2000, 3, 0.9, seed=0)
    assert mask.any(axis=1).all()
    with pytest.raises(InvalidParams):
        random_mask(10, 3, 1.0, seed=0)


def test_csv_roundtrip(tmp_path):
    ds = gen_dataset("gauss_mixture", 20, 3, seed=5).with_missingness(0.4, 6)
    ds.to_csv(tmp_path / "d.csv")
    back = Dataset.from_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.samples, ds.samples)
    np.testing.assert_array_equal(back.mask, ds.mask)


def test_split():
    ds = gen_dataset("gauss_mixture", 30, 2, seed=0)
    a, b = ds.split(10)
    assert len(a) == 10 and len(b) == 20
    np.testing.assert_array_equal(np.vstack([a.samples, b.samples]), ds.samples)
