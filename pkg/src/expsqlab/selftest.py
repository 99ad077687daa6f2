"""Quick invariant suite across all modules on a small lattice."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import coupling, greenfn, malliavin, noise, oracles, solver
from .lattice import Field, LatticeConfig, L_array, Linv_array, apply_Linv, constant, convolve, delta


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    limit: float
    seconds: float = 0.0


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def run_selftest(d: int = 2, N: int = 64, L: float = 8.0, seed: int = 0) -> list[Check]:
    lat = LatticeConfig(d, N, L)
    g = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    out: list[Check] = []

    def add(name, value, limit, t0, le=True):
        ok = value <= limit if le else value >= limit
        out.append(Check(name, bool(ok), float(value), float(limit), time.perf_counter() - t0))

    t = time.perf_counter()
    f = g.standard_normal(lat.shape)
    add("lattice.roundtrip", _rel(Linv_array(L_array(f, lat), lat), f), 1e-10, t)

    t = time.perf_counter()
    add("lattice.constant_inverse", _rel(apply_Linv(constant(lat, 3.0)).values, np.full(lat.shape, 3.0)), 1e-12, t)

    t = time.perf_counter()
    G = apply_Linv(delta(lat)).values
    add("lattice.green_positive", -float(G.min()), 0.0, t)

    t = time.perf_counter()
    ff = Field(lat, f)
    add("lattice.convolve_identity", _rel(convolve(ff, delta(lat)).values, f), 1e-12, t)

    t = time.perf_counter()
    spec = noise.MollifierSpec(4 * lat.h)
    a = noise.mollifier(lat, spec)
    add("noise.mollifier_mass", abs(a.integral() - 1.0), 1e-12, t)

    t = time.perf_counter()
    v = noise.free_variance(lat, spec)
    v_direct = float(malliavin.kernel_profile(lat, spec)[(0,) * d])
    add("noise.variance_vs_kernel", abs(v - v_direct) / v, 1e-12, t)

    t = time.perf_counter()
    params = solver.ModelParams(alpha=4.0, eps=spec.eps, R=20.0)
    b = noise.make_noise_bundle(lat, spec, noise.RngStream(seed, 0))
    sol = solver.solve_sample(b, params)
    add("solver.sign", sol.report.sign_violation_max, 1e-8, t)
    add("solver.sup_bound", sol.phibar.sup() - abs(params.alpha) * params.R / params.m ** 2, 1e-8, t)
    add("solver.full_residual", solver.full_residual(sol.phi, b.xi_eps, params, sol.C_eps), 1e-8, t)

    t = time.perf_counter()
    c = 2.5
    u, _ = solver.solve_phibar(constant(lat, c), params)
    tr = solver.TruncationKR(params.R)
    root = oracles.scalar_root(1.0, params.alpha, c, params.R, lambda y: float(tr.value(np.array(y))))
    add("solver.scalar_oracle", float(np.max(np.abs(u.values - root))), 1e-10, t)

    t = time.perf_counter()
    rep = solver.uniqueness_check(sol.eta, params, 3, seed)
    add("solver.uniqueness", rep.max_pairwise, 1e-8, t)

    t = time.perf_counter()
    V = malliavin.linearized_potential(sol.phi, params, sol.C_eps)
    z = (N // 2,) * d
    th = malliavin.solve_malliavin_derivative(sol.phi, z, params, sol.C_eps, V)
    add("malliavin.integral_identity", abs(malliavin.integral_identity(th, V) - 1.0), 1e-9, t)
    free = Linv_array(malliavin.shifted_mollifier(lat, spec, z).values, lat)
    add("malliavin.comparison", float(np.max(th.theta.values - free)), 1e-12, t)
    add("malliavin.positivity", -float(th.theta.values.min()), 1e-12, t)
    fd = malliavin.finite_difference_oracle(b, z, 1e-3, params, sol.C_eps)
    add("malliavin.finite_difference", _rel(fd.values, th.theta.values), 1e-3, t)

    t = time.perf_counter()
    small = LatticeConfig(d, 8, 4.0)
    sspec = noise.MollifierSpec(1.0)
    ak = noise.mollifier(small, sspec).values
    y = (3,) + (1,) * (d - 1)
    dev = abs(malliavin.covariance_kernel_I((0,) * d, y, sspec, small)
              - oracles.kernel_direct_sum(small, ak, (0,) * d, y))
    add("malliavin.kernel_direct_sum", dev, 1e-10, t)

    t = time.perf_counter()
    l = 4.0
    D1 = coupling.BallSpec((0,) * d, l / 2)
    x2, la = coupling.diagonal_placement(lat, l)
    D2 = coupling.BallSpec(x2, la / 2)
    cb = coupling.make_coupled_noises(b, coupling.BallSpec((0,) * d, la / 2), D2)
    theta = coupling.cutoff_theta(lat, (0,) * d, la)
    ok = coupling.verify_noise_gluing(cb, coupling.BallSpec((0,) * d, la / 2), theta, la / 8)
    add("coupling.gluing", 0.0 if ok else 1.0, 0.0, t)

    t = time.perf_counter()
    dev = max(abs(greenfn.green_quadrature(r, greenfn.GreenSpec(1)) - oracles.green_closed_form(r, 1, 1.0))
              for r in (0.5, 1.0, 3.0))
    dev3 = max(abs(greenfn.green_quadrature(r, greenfn.GreenSpec(3)) / oracles.green_closed_form(r, 3, 1.0) - 1)
               for r in (0.5, 1.0, 3.0))
    add("greenfn.closed_forms", max(dev, dev3), 1e-8, t)
    return out
