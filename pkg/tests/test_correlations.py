import numpy as np
import pytest

from expsqlab.correlations import (
    ObservableSpec,
    covariance_from_pairs,
    decay_scan,
    evaluate_observable,
    free_slope_oracle,
    mc_covariance,
    observable_field,
    window_field,
    windowed_free_covariance,
)
from expsqlab.coupling import unit_bump
from expsqlab.lattice import Field, LatticeConfig
from expsqlab.solver import ModelParams

LAT = LatticeConfig(2, 64, 16.0)
FREE = ModelParams(alpha=0.0, eps=0.5)
TANH = ObservableSpec("tanh_mean")
MEAN = ObservableSpec("clipped_mean", scale=1e6)


def _probe():
    r = LAT.distance_from()
    return Field(LAT, np.exp(-r ** 2))


def test_spec_validation():
    with pytest.raises(ValueError):
        ObservableSpec("cubic")
    with pytest.raises(ValueError):
        ObservableSpec("linear_pairing")
    wide = Field(LAT, np.ones(LAT.shape))
    with pytest.raises(ValueError):
        ObservableSpec(window=wide)
    assert not ObservableSpec("linear_pairing", probe=_probe()).bounded


@pytest.mark.parametrize("spec", [TANH, ObservableSpec("clipped_mean", scale=0.3),
                                  ObservableSpec("linear_pairing", probe=_probe())])
def test_field_matches_pointwise(spec):
    phi = Field(LAT, np.random.default_rng(1).standard_normal(LAT.shape))
    allx = observable_field(spec, phi)
    f = spec.window_for(LAT)
    for x in [(0, 0), (5, 9), (40, 63)]:
        assert abs(allx[x] - evaluate_observable(spec, window_field(phi, f, x), x)) <= 1e-12


def test_bounded_observables():
    phi = Field(LAT, 50 * np.random.default_rng(2).standard_normal(LAT.shape))
    assert np.max(np.abs(observable_field(TANH, phi))) <= 1
    assert np.max(np.abs(observable_field(ObservableSpec("clipped_mean", scale=0.3), phi))) <= 0.3


def test_constant_observable_has_zero_covariance():
    c = ObservableSpec("constant", scale=2.0)
    est = mc_covariance(c, TANH, (0, 0), (16, 0), FREE, 100, LAT, seed=1)
    assert est.value == 0.0 and est.stderr == 0.0


def test_min_samples():
    with pytest.raises(ValueError):
        mc_covariance(TANH, TANH, (0, 0), (8, 0), FREE, 50, LAT)


def test_jackknife_matches_naive_for_independent_pairs():
    g = np.random.default_rng(3)
    a = g.standard_normal(5000)
    pairs = np.column_stack([a, 0.3 * a + g.standard_normal(5000)])
    est = covariance_from_pairs(pairs, (0,), (1,))
    assert abs(est.value - 0.3) <= 3 * est.stderr
    assert est.stderr_consistent


def test_free_mean_covariance_matches_exact():
    est = mc_covariance(MEAN, MEAN, (0, 0), (8, 0), FREE, 600, LAT, seed=4)
    exact = windowed_free_covariance(LAT, FREE, [2.0])[0]
    assert abs(est.value - exact) <= 3 * est.stderr
    assert est.stderr_consistent


@pytest.fixture(scope="module")
def free_scan():
    return decay_scan(MEAN, MEAN, [1, 2, 3, 4, 5], FREE, 200, LAT, seed=6, jack_blocks=50)


def test_decay_scan_free_field(free_scan):
    exact = windowed_free_covariance(LAT, FREE, free_scan.r)
    assert np.all(np.abs(free_scan.cov - exact) <= 3 * free_scan.stderr + 1e-12)
    assert free_scan.monotone and free_scan.tainted == 0
    assert len(free_scan.rows()) == 5


def test_free_slope_oracle_negative():
    fit = free_slope_oracle(LAT, FREE, [2, 3, 4, 5, 6])
    assert fit.slope < 0 and fit.r2 > 0.99


def test_decay_scan_distance_range():
    with pytest.raises(ValueError):
        decay_scan(TANH, TANH, [0.5, 2], FREE, 10, LAT)
    with pytest.raises(ValueError):
        decay_scan(TANH, TANH, [7], FREE, 10, LAT)
    with pytest.raises(ValueError):
        decay_scan(TANH, TANH, [2.1], FREE, 10, LAT)


def test_interacting_scan_runs_and_is_deterministic():
    p = ModelParams(alpha=4.0, eps=0.5, R=20.0)
    a = decay_scan(TANH, TANH, [1, 2, 3], p, 20, LAT, seed=7, jack_blocks=10)
    b = decay_scan(TANH, TANH, [1, 2, 3], p, 20, LAT, seed=7, jack_blocks=10, threads=2)
    assert np.array_equal(a.cov, b.cov)
    assert a.cov[0] > 0


def test_default_window_is_unit_bump():
    assert np.array_equal(TANH.window_for(LAT).values, unit_bump(LAT).values)
