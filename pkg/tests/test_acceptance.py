"""Acceptance run: one PASS/FAIL line per criterion at the stated tolerances."""
import json
import math
import os
import time

import numpy as np
import pytest

from expsqlab import oracles
from expsqlab.cli import main as cli_main
from expsqlab.correlations import ObservableSpec, decay_scan, free_slope_oracle
from expsqlab.coupling import BallSpec, choose_beta, coupling_decay_experiment, difference_samples, gaussian_tail_check
from expsqlab.fitting import map_ordered
from expsqlab.greenfn import GreenSpec, green_bounds_check, green_quadrature
from expsqlab.lattice import LatticeConfig, WeightSpec
from expsqlab.malliavin import (
    covariance_kernel_I,
    feynman_kac_estimator,
    finite_difference_oracle,
    fk_discretization_band,
    kernel_decay_check,
    linearized_potential,
    solve_malliavin_derivative,
)
from expsqlab.noise import MollifierSpec, RngStream, make_noise_bundle, mollifier
from expsqlab.solver import ModelParams, apriori_weighted_bound, solve_sample, uniqueness_check

pytestmark = pytest.mark.slow

THREADS = os.cpu_count() or 1
MAIN = LatticeConfig(2, 256, 32.0)


@pytest.fixture
def verdict(capsys):
    def report(n, title, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}  criterion {n:>2}  {title}: {detail}")
        assert ok, detail
    return report


def _bundle(lat, eps, seed, i, copies=False):
    return make_noise_bundle(lat, MollifierSpec(eps), RngStream(seed, i), copies=copies)


def test_c01_sign_property(verdict):
    t0 = time.perf_counter()
    worst = -math.inf
    for lat, eps in ((MAIN, 0.25), (LatticeConfig(4, 16, 8.0), 1.0)):
        for alpha in (1.0, -1.0, 4.0, -4.0):
            params = ModelParams(alpha=alpha, eps=eps)
            C = params.wick_constant(lat)

            def task(i):
                sol = solve_sample(_bundle(lat, eps, 101, i), params, C)
                return float(np.max(alpha * sol.phibar.values))

            worst = max(worst, max(map_ordered(task, range(100), THREADS)))
    dt = time.perf_counter() - t0
    verdict(1, "sign property", worst <= 1e-8 and dt <= 300,
            f"max alpha*phibar = {worst:.3e} (limit 1e-8), {dt:.0f} s (limit 300 s)")


def test_c02_uniqueness(verdict):
    params = ModelParams(alpha=4.0, eps=0.25, R=20.0)
    C = params.wick_constant(MAIN)

    def task(i):
        sol = solve_sample(_bundle(MAIN, 0.25, 102, i), params, C)
        rep = uniqueness_check(sol.eta, params, 5, seed=i)
        return rep.max_pairwise, rep.conclusive

    res = map_ordered(task, range(20), THREADS)
    worst = max(r[0] for r in res)
    ok = worst <= 1e-8 and all(r[1] for r in res)
    verdict(2, "uniqueness", ok, f"max pairwise sup distance {worst:.3e} over 20 samples x 5 starts (limit 1e-8)")


def test_c03_malliavin_finite_differences(verdict):
    t0 = time.perf_counter()
    hsteps = np.array([1e-2, 3e-3, 1e-3])
    worst_err, orders = 0.0, []
    for lat, eps, n in ((LatticeConfig(2, 64, 8.0), 0.5, 20), (LatticeConfig(4, 16, 8.0), 1.0, 5)):
        params = ModelParams(alpha=4.0, eps=eps, R=20.0)
        C = params.wick_constant(lat)
        z = (lat.N // 2,) * lat.d

        def task(i):
            b = _bundle(lat, eps, 103, i)
            sol = solve_sample(b, params, C)
            th = solve_malliavin_derivative(sol.phi, z, params, C).theta.values
            return [float(np.max(np.abs(finite_difference_oracle(b, z, t, params, C).values - th)) / np.max(th))
                    for t in hsteps]

        for errs in map_ordered(task, range(n), THREADS):
            worst_err = max(worst_err, errs[2])
            orders.append(np.polyfit(np.log(hsteps), np.log(errs), 1)[0])
    dt = time.perf_counter() - t0
    ok = worst_err <= 1e-3 and all(1.8 <= q <= 2.2 for q in orders) and dt <= 600
    verdict(3, "Malliavin derivative vs finite differences", ok,
            f"worst rel err at 1e-3 = {worst_err:.2e}, order in [{min(orders):.2f}, {max(orders):.2f}], {dt:.0f} s")


def test_c04_feynman_kac(verdict):
    lat = LatticeConfig(2, 32, 8.0)
    params = ModelParams(alpha=4.0, eps=0.5, R=20.0)
    sol = solve_sample(_bundle(lat, 0.5, 104, 0), params)
    V = linearized_potential(sol.phi, params, sol.C_eps)
    z = (16, 16)
    th = solve_malliavin_derivative(sol.phi, z, params, sol.C_eps, V).theta
    dt = lat.h ** 2 / 8
    band = fk_discretization_band(V, z, dt, params.mollifier(), th)
    parts, ok = [], True
    for j, x in enumerate([(16, 16), (18, 16), (20, 19)]):
        est, se = feynman_kac_estimator(V, z, x, 100_000, dt, params.mollifier(), seed=j)
        dev = abs(est - th[x])
        ok &= dev <= 3 * se + band[x]
        parts.append(f"x={x}: |dev| {dev:.2e} <= 3se {3 * se:.2e} + band {band[x]:.2e}")
    verdict(4, "Feynman-Kac cross-check", ok, "; ".join(parts))


def test_c05_kernel_identity_and_decay(verdict):
    dev = 0.0
    for d in (2, 4):
        lat = LatticeConfig(d, 8, 4.0)
        spec = MollifierSpec(1.0)
        a = mollifier(lat, spec).values
        for y in [(1,) + (0,) * (d - 1), (3,) + (2,) * (d - 1), (4,) * d]:
            x0 = (0,) * d
            dev = max(dev, abs(covariance_kernel_I(x0, y, spec, lat) - oracles.kernel_direct_sum(lat, a, x0, y)))
    fits = {}
    for m in (1.0, 2.0):
        fits[m], _ = kernel_decay_check(MollifierSpec(0.5), LatticeConfig(4, 64, 16.0, m=m))
    ok = dev <= 1e-10 and all(abs(fits[m].slope / -m - 1) <= 0.15 for m in fits)
    verdict(5, "kernel identity and decay", ok,
            f"direct-sum dev {dev:.1e}; slope m=1 {fits[1.0].slope:.3f}, m=2 {fits[2.0].slope:.3f} (band 15%)")


@pytest.mark.xfail(strict=True, reason=(
    "at alpha=4 the covariance decays like exp(-1.3 r): only r=2 and r=4 clear 3 stderr with 2000 "
    "samples, so the fit on the usable range is refused; see the decisions ledger"))
def test_c06_correlation_decay(verdict):
    t0 = time.perf_counter()
    spec = ObservableSpec("tanh_mean")
    r = [2, 4, 6, 8, 10, 12]
    params = ModelParams(alpha=4.0, eps=0.25, R=20.0)
    scan = decay_scan(spec, spec, r, params, 2000, MAIN, seed=106, threads=THREADS)
    ctrl_params = params.with_(alpha=0.0)
    ctrl = decay_scan(spec, spec, r, ctrl_params, 2000, MAIN, seed=206, threads=THREADS)
    oracle = free_slope_oracle(MAIN, ctrl_params, ctrl.r[ctrl.usable])
    dt = time.perf_counter() - t0
    fit = scan.fit
    ctrl_dev = abs(ctrl.fit.slope / oracle.slope - 1)
    ok = (fit.reliable and fit.slope < 0 and fit.r2 >= 0.9 and ctrl.fit.reliable and ctrl_dev <= 0.15
          and dt <= 1800)
    snr = ", ".join(f"r={r:g}: {c / e:.1f}" for r, c, e in zip(scan.r, scan.cov, scan.stderr))
    verdict(6, "correlation decay", ok,
            f"slope {fit.slope:.3f}, R2 {fit.r2:.3f} on {fit.n_usable} usable r (cov/stderr {snr}); control slope "
            f"{ctrl.fit.slope:.3f} vs free oracle {oracle.slope:.3f} ({100 * ctrl_dev:.1f}%), {dt:.0f} s")


def test_c07_coupling_decay(verdict):
    params = ModelParams(alpha=4.0, eps=0.25, R=20.0, pmom=2.0)
    res = coupling_decay_experiment(params, MAIN, [9, 12, 15, 18], 1000, seed=107, threads=THREADS)
    fit = res.fit
    n_glue = res.gluing_checked
    ok = fit.reliable and fit.slope < 0 and fit.r2 >= 0.9 and res.gluing_ok and n_glue == 4 * res.n
    verdict(7, "coupling decay", ok,
            f"slope {fit.slope:.3f}, R2 {fit.r2:.3f}, gluing held on {n_glue} sample-separations "
            f"(n={res.n}, tainted {res.tainted})")


def test_c08_apriori_bound(verdict):
    params = ModelParams(alpha=4.0, eps=0.25, R=20.0, pmom=2.0)
    C = params.wick_constant(MAIN)
    rho = WeightSpec("rho_exponential", beta=choose_beta(2.0))

    def task(i):
        sol = solve_sample(_bundle(MAIN, 0.25, 108, i), params, C)
        return apriori_weighted_bound(sol.phibar, sol.eta, params, rho)

    reps = map_ordered(task, range(100), THREADS)
    held = sum(r.passed for r in reps)
    worst = max(r.lhs / r.rhs for r in reps)
    ok = held == 100 and math.isclose(reps[0].constant, 1 / math.e)
    verdict(8, "a-priori bound", ok, f"{held}/100 samples, worst lhs/rhs {worst:.3f}, C = {reps[0].constant:.6f}")


def test_c09_hypercontractivity(verdict):
    y = difference_samples(MAIN, MollifierSpec(0.25), BallSpec((0, 0), 4.5), (36, 0), 2000, seed=109)
    r4 = gaussian_tail_check(y, 4)
    r6 = gaussian_tail_check(y, 6)
    verdict(9, "hypercontractivity constants", r4.passed and r6.passed,
            f"E Y^4/Var^2 = {r4.ratio:.2f} +- {r4.ratio_stderr:.2f} (3), "
            f"E|Y|^6/Var^3 = {r6.ratio:.1f} +- {r6.ratio_stderr:.1f} (15)")


def test_c10_green_suite(verdict):
    t0 = time.perf_counter()
    rs = np.geomspace(1e-3, 30, 40)
    closed = max(abs(green_quadrature(r, GreenSpec(d)) / oracles.green_closed_form(r, d, 1.0) - 1)
                 for d in (1, 3) for r in rs)
    r4 = green_bounds_check(GreenSpec(4))
    r2 = green_bounds_check(GreenSpec(2))
    long = {(d, m): green_bounds_check(GreenSpec(d, m)).local_slope_rel_error for d in (1, 2, 3)
            for m in (1.0, 2.0)}
    dt = time.perf_counter() - t0
    ok = (closed <= 1e-8 and r4.short_exponent_ok and r2.log_coefficient_ok
          and all(e <= 0.10 + 1e-9 for e in long.values()) and dt <= 60)
    verdict(10, "Green function suite", ok,
            f"closed-form dev {closed:.1e}; d=4 exponent {r4.short_exponent:.3f}; d=2 log coef "
            f"{r2.log_coefficient:.4f} vs {r2.log_coefficient_expected:.4f}; worst long-range rel err "
            f"{max(long.values()):.3f}; {dt:.1f} s")


def test_c11_determinism(verdict, tmp_path):
    lat = {"d": 2, "N": 128, "L": 32.0}
    configs = {
        "decay": ({"model": {"alpha": 4.0, "eps": 0.5, "R": 20.0}, "run": {"n_samples": 24},
                   "options": {"distances": [2, 4, 6], "control": True}}, "decay.csv"),
        "coupling": ({"model": {"alpha": 4.0, "eps": 0.5, "R": 20.0}, "run": {"n_samples": 6},
                      "options": {"distances": [9, 12]}}, "coupling.csv"),
        "malliavin-check": ({"lattice": {"d": 2, "N": 16, "L": 8.0}, "model": {"alpha": 4.0, "eps": 1.0, "R": 20.0},
                             "run": {"n_samples": 3}, "options": {"fk_walkers": 500, "fk_samples": 2}}, "probes.csv"),
    }
    same = []
    for exp, (cfg, _) in configs.items():
        cfg = {"experiment": exp, "lattice": lat, **cfg}
        cfg["run"]["master_seed"] = 111
        p = tmp_path / f"{exp}.json"
        p.write_text(json.dumps(cfg))
        outs = []
        for t in (1, 4):
            out = tmp_path / f"{exp}-{t}"
            assert cli_main([exp, "--config", str(p), "--threads", str(t), "--out", str(out)]) != 2
            outs.append(out)
        csvs = sorted(f for f in os.listdir(outs[0]) if f.endswith(".csv"))
        same.append(all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in csvs) and csvs)
    verdict(11, "determinism", all(same),
            f"byte-identical CSVs at 1 and 4 threads for {', '.join(configs)}: {[bool(s) for s in same]}")
