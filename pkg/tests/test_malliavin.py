import numpy as np
import pytest

from expsqlab import oracles
from expsqlab.lattice import Field, LatticeConfig, Linv_array
from expsqlab.malliavin import (
    covariance_kernel_I,
    default_kernel_window,
    feynman_kac_estimator,
    finite_difference_oracle,
    fk_discretization_band,
    integral_identity,
    kernel_decay_check,
    kernel_profile,
    linearized_potential,
    malliavin_cov_bound,
    shifted_mollifier,
    solve_malliavin_derivative,
)
from expsqlab.noise import MollifierSpec, RngStream, make_noise_bundle, mollifier
from expsqlab.solver import ModelParams, TruncationKR, solve_sample

LAT = LatticeConfig(2, 32, 8.0)
PARAMS = ModelParams(alpha=4.0, eps=0.5, R=20.0)
Z = (16, 16)


@pytest.fixture(scope="module")
def sample():
    b = make_noise_bundle(LAT, PARAMS.mollifier(), RngStream(5, 0), copies=False)
    sol = solve_sample(b, PARAMS)
    V = linearized_potential(sol.phi, PARAMS, sol.C_eps)
    th = solve_malliavin_derivative(sol.phi, Z, PARAMS, sol.C_eps, V)
    return b, sol, V, th


def test_potential_nonnegative_and_bounded(sample):
    _, _, V, _ = sample
    assert V.V.values.min() >= 0
    assert V.V.values.max() <= 4 / 3 * PARAMS.alpha ** 2 * PARAMS.R + 1e-9


def test_derivative_solves_equation(sample):
    _, _, V, th = sample
    rhs = shifted_mollifier(LAT, PARAMS.mollifier(), Z).values
    direct = oracles.stencil_solve(LAT, rhs, V.V.values)
    assert np.max(np.abs(th.theta.values - direct)) <= 1e-9 * np.max(np.abs(direct))
    assert th.residual_inf <= 1e-10


def test_integral_identity(sample):
    _, _, V, th = sample
    assert abs(integral_identity(th, V) - 1.0) <= 1e-9


def test_positivity_and_comparison(sample):
    _, _, _, th = sample
    free = Linv_array(shifted_mollifier(LAT, PARAMS.mollifier(), Z).values, LAT)
    assert th.theta.values.min() > 0
    assert np.max(th.theta.values - free) <= 1e-12


def test_alpha_zero_is_free_resolvent():
    p = PARAMS.with_(alpha=0.0)
    b = make_noise_bundle(LAT, p.mollifier(), RngStream(5, 1), copies=False)
    sol = solve_sample(b, p)
    th = solve_malliavin_derivative(sol.phi, Z, p, sol.C_eps)
    free = Linv_array(shifted_mollifier(LAT, p.mollifier(), Z).values, LAT)
    np.testing.assert_allclose(th.theta.values, free, atol=1e-10 * free.max())


def test_finite_difference_order(sample):
    b, sol, _, th = sample
    errs = []
    for t in (1e-2, 1e-3):
        fd = finite_difference_oracle(b, Z, t, PARAMS, sol.C_eps)
        errs.append(np.max(np.abs(fd.values - th.theta.values)) / np.max(np.abs(th.theta.values)))
    assert errs[1] <= 1e-6
    assert errs[1] < errs[0] / 20


def test_finite_difference_rejects_bad_step(sample):
    b, sol, _, _ = sample
    with pytest.raises(ValueError):
        finite_difference_oracle(b, Z, 0.0, PARAMS, sol.C_eps)


def test_feynman_kac_within_band(sample):
    _, _, V, th = sample
    dt = LAT.h ** 2 / 8
    x = (18, 16)
    est, se = feynman_kac_estimator(V, Z, x, 20_000, dt, PARAMS.mollifier(), seed=3)
    band = fk_discretization_band(V, Z, dt, PARAMS.mollifier(), th.theta)
    assert se > 0
    assert abs(est - th.theta[x]) <= 3 * se + band[x]


def test_walk_expectation_converges_in_dt(sample):
    _, _, V, th = sample
    bands = [fk_discretization_band(V, Z, LAT.h ** 2 / k, PARAMS.mollifier(), th.theta).values.max()
             for k in (4, 8, 16)]
    assert bands[0] > bands[1] > bands[2]
    assert 1.6 < bands[0] / bands[1] < 2.4


def test_kernel_identity_direct_sum():
    lat = LatticeConfig(2, 8, 4.0)
    spec = MollifierSpec(1.0)
    a = mollifier(lat, spec).values
    for y in [(1, 0), (3, 2), (4, 4)]:
        assert abs(covariance_kernel_I((0, 0), y, spec, lat) - oracles.kernel_direct_sum(lat, a, (0, 0), y)) <= 1e-10


def test_kernel_is_covariance_of_free_field():
    spec = MollifierSpec(0.5)
    n = 4000
    vals = np.array([make_noise_bundle(LAT, spec, RngStream(8, i), copies=False).X_eps.values[[0, 4], [0, 0]]
                     for i in range(n)])
    prod = vals[:, 0] * vals[:, 1]
    target = covariance_kernel_I((0, 0), (4, 0), spec, LAT)
    assert abs(prod.mean() - target) <= 3 * prod.std(ddof=1) / np.sqrt(n)


def test_kernel_decay_rate():
    spec = MollifierSpec(0.5)
    lat = LatticeConfig(2, 128, 32.0)
    fit, ok = kernel_decay_check(spec, lat)
    assert ok and fit.slope < 0
    lo, hi = default_kernel_window(lat)
    assert 2.0 <= lo < hi <= lat.L / 4


def test_kernel_window_refused():
    with pytest.raises(ValueError):
        kernel_decay_check(MollifierSpec(0.5), LAT, (1.0, 2.0))
    with pytest.raises(ValueError):
        kernel_decay_check(MollifierSpec(0.5), LAT, (2.0, 3.0))


def test_kernel_profile_positive_definite():
    prof = kernel_profile(LAT, MollifierSpec(0.5))
    assert np.all(np.fft.rfft2(prof).real > -1e-12)


def test_cov_bound_small():
    rep = malliavin_cov_bound((12, 16), (20, 16), PARAMS, 20, LAT, seed=1)
    assert rep.passed and rep.n_samples == 20
    assert rep.empirical <= rep.analytic * (1 + 1e-12) + 3 * rep.empirical_stderr
    with pytest.raises(ValueError):
        malliavin_cov_bound((1, 1), (1, 1), PARAMS, 2, LAT)


def test_truncation_bound_on_potential():
    t = TruncationKR(20.0)
    y = np.linspace(0.1, 40, 4000)
    assert np.max(t.prime(y) * y) <= 4 / 3 * 20 + 1e-9
