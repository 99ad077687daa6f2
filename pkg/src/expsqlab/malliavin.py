"""Noise derivative of the solution, its oracles, and the covariance kernel I.

The derivative theta^z solves (L + V) theta = a_eps(. - z) with the potential
V = alpha^2 K_R'(y) y, y = exp(alpha phi - C_eps).  Two independent oracles
back it up: central finite differences of the full pipeline along a lattice
delta, and a killed lattice random walk (Feynman-Kac).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fitting import DecayFit, fit_decay, map_ordered
from .lattice import Field, LatticeConfig, L_array, Linv_array, delta, irfft, operator_symbol, rfft
from .noise import (
    MollifierSpec,
    NoiseBundle,
    RngStream,
    free_covariance_profile,
    make_noise_bundle,
    mollifier,
    mollify_array,
    wick_exponential,
)
from .solver import ConvergenceError, ModelParams, _pcg, nonlinearity, solve_phibar_array, solve_sample


@dataclass(frozen=True, eq=False)
class PotentialField:
    V: Field
    alpha: float
    R: float

    @property
    def lattice(self) -> LatticeConfig:
        return self.V.lattice


@dataclass(frozen=True, eq=False)
class DerivativeField:
    z: tuple
    theta: Field
    residual_inf: float = 0.0
    cg_iterations: int = 0


def linearized_potential(phi: Field, params: ModelParams, C_eps: float = None) -> PotentialField:
    """V = alpha^2 K_R'(y) y with y = exp(alpha phi - C); same routine as the Newton Jacobian."""
    lat = phi.lattice
    C = params.wick_constant(lat) if C_eps is None else C_eps
    if params.alpha == 0:
        return PotentialField(Field(lat, np.zeros(lat.shape)), 0.0, params.R)
    _, gp, _ = nonlinearity(phi.values, np.full(lat.shape, -C), params.alpha, params.R)
    return PotentialField(Field(lat, gp), params.alpha, params.R)


def shifted_mollifier(lat: LatticeConfig, spec: MollifierSpec, z: Sequence[int]) -> Field:
    """a_eps(. - z)."""
    return mollifier(lat, spec).shifted(tuple(-int(c) for c in lat.point(z)))


def solve_resolvent(V: PotentialField, rhs: np.ndarray, tol: float = 1e-10) -> tuple[np.ndarray, float, int]:
    """(L + V)^{-1} rhs by PCG; returns (solution, sup residual, CG iterations).

    ``tol`` bounds the sup residual relative to sup|rhs|.
    """
    lat = V.lattice
    v = V.V.values
    if not np.any(v):
        u = Linv_array(rhs, lat)
        return u, float(np.max(np.abs(L_array(u, lat) - rhs))), 0
    pre = 1.0 / (operator_symbol(lat) + float(np.median(v)))
    A = lambda w: L_array(w, lat) + v * w
    P = lambda r: irfft(rfft(r, lat.d) * pre, lat.d, lat.N)
    target = tol * float(np.max(np.abs(rhs)))
    u = np.zeros(lat.shape)
    r = rhs.copy()
    its = 0
    res = float(np.max(np.abs(r)))
    # restarted PCG: a few refinement sweeps reach the sup-norm target
    for _ in range(8):
        if res <= target:
            break
        du, k = _pcg(A, r, P, 1e-13, maxiter=2000)
        its += k
        u += du
        r = rhs - A(u)
        res = float(np.max(np.abs(r)))
    if res > target:
        raise ConvergenceError(f"linearized solve stalled at residual {res:.3e}")
    return u, res, its


def solve_malliavin_derivative(phi: Field, z: Sequence[int], params: ModelParams,
                               C_eps: float = None, V: PotentialField = None,
                               tol: float = 1e-10) -> DerivativeField:
    lat = phi.lattice
    z = lat.point(z)
    if V is None:
        V = linearized_potential(phi, params, C_eps)
    src = shifted_mollifier(lat, params.mollifier(), z).values
    u, res, its = solve_resolvent(V, src, tol)
    return DerivativeField(z, Field(lat, u), res, its)


def integral_identity(theta: DerivativeField, V: PotentialField) -> float:
    """m^2 int theta + int V theta; equals 1 for a unit-mass source."""
    lat = theta.theta.lattice
    t = theta.theta.values
    return float((lat.m ** 2 * t.sum() + (V.V.values * t).sum()) * lat.cell_volume)


def _pipeline_phi(xi_values: np.ndarray, lat, params, C, u0=None, tol=1e-13):
    xe = mollify_array(xi_values, lat, params.mollifier())
    X = Linv_array(xe, lat)
    log_eta = params.alpha * X - C
    u, rep = solve_phibar_array(log_eta, lat, params.alpha, params.R, u0, tol, 1e-6, 200)
    return u + X, u


def finite_difference_oracle(bundle: NoiseBundle, z: Sequence[int], hstep: float, params: ModelParams,
                             C_eps: float = None, tol: float = 1e-13) -> Field:
    """(phi(xi + t delta_z) - phi(xi - t delta_z)) / (2t), delta_z the unit-integral lattice delta.

    With a unit-integral delta the perturbation of xi_eps is t a_eps(. - z), so
    the quotient targets theta^z directly.
    """
    if not hstep > 0:
        raise ValueError("hstep must be positive")
    lat = bundle.lattice
    C = params.wick_constant(lat) if C_eps is None else C_eps
    dz = delta(lat, z).values
    _, u0 = _pipeline_phi(bundle.xi.values, lat, params, C, tol=tol)
    pp, _ = _pipeline_phi(bundle.xi.values + hstep * dz, lat, params, C, u0, tol)
    pm, _ = _pipeline_phi(bundle.xi.values - hstep * dz, lat, params, C, u0, tol)
    return Field(lat, (pp - pm) / (2 * hstep))


def feynman_kac_estimator(V: PotentialField, z: Sequence[int], x: Sequence[int], n_walks: int, dt: float,
                          spec: MollifierSpec, seed: int = 0, cutoff: float = 1e-13,
                          max_time: float = None) -> tuple[float, float]:
    """Killed lazy lattice walk from x scoring a_eps(. - z); returns (estimate, stderr).

    Each step the walker jumps to a uniform neighbour with probability
    2 d dt / h^2 (a time-dt Euler step of the generator Delta_h); the weight is
    multiplied by exp(-(m^2 + V) dt).  Walkers come in antithetic pairs that
    share the jump decision and take opposite directions.
    """
    lat = V.lattice
    d, N, h = lat.d, lat.N, lat.h
    p = 2 * d * dt / h ** 2
    if p > 1 + 1e-12:
        raise ValueError(f"dt={dt} exceeds h^2/(2d)={h * h / (2 * d)}")
    if n_walks < 2:
        raise ValueError("need at least one antithetic pair")
    npair = n_walks // 2
    src = shifted_mollifier(lat, spec, z).values.ravel()
    kill = np.exp(-(lat.m ** 2 + V.V.values.ravel()) * dt)
    strides = np.array([N ** (d - 1 - a) for a in range(d)])
    g = RngStream(seed, 0).generator(0)
    x = np.array(lat.point(x))
    pos = np.empty((2, npair, d), dtype=np.int64)
    pos[:] = x
    W = np.ones((2, npair))
    score = np.zeros((2, npair))
    wmax_t = 1.0
    decay = math.exp(-lat.m ** 2 * dt)
    if max_time is None:
        max_time = math.log(1.0 / cutoff) / lat.m ** 2
    nsteps = int(math.ceil(max_time / dt))
    for _ in range(nsteps):
        flat = pos @ strides
        score += dt * W * src[flat]
        W *= kill[flat]
        wmax_t *= decay
        if wmax_t < cutoff:
            break
        jump = g.random(npair) < p
        nj = int(jump.sum())
        if nj:
            ax = g.integers(0, d, nj)
            sg = np.where(g.random(nj) < 0.5, 1, -1)
            ii = np.nonzero(jump)[0]
            pos[0, ii, ax] = (pos[0, ii, ax] + sg) % N
            pos[1, ii, ax] = (pos[1, ii, ax] - sg) % N
    pair = score.mean(axis=0)
    return float(pair.mean()), float(pair.std(ddof=1) / math.sqrt(npair))


def fk_discretization_band(V: PotentialField, z: Sequence[int], dt: float, spec: MollifierSpec,
                           theta: Field = None) -> Field:
    """|theta_dt - theta| where theta_dt is the exact mean of the lattice walk at step dt."""
    from .oracles import discrete_walk_expectation

    lat = V.lattice
    src = shifted_mollifier(lat, spec, z).values
    if theta is None:
        theta = Field(lat, solve_resolvent(V, src)[0])
    tdt = discrete_walk_expectation(lat, V.V.values, src, dt)
    return Field(lat, np.abs(tdt - theta.values))


# covariance kernel -----------------------------------------------------------------


def kernel_profile(lat: LatticeConfig, spec: MollifierSpec) -> np.ndarray:
    """I(0, x) for every site x."""
    return free_covariance_profile(lat, spec, power=2)


def covariance_kernel_I(x: Sequence[int], y: Sequence[int], spec: MollifierSpec, lat: LatticeConfig) -> float:
    """((m^2 - Delta)^{-2} a_eps * a_eps)(x - y), summed spectrally."""
    prof = kernel_profile(lat, spec)
    return float(prof[lat.point(np.subtract(lat.point(x), lat.point(y)))])


def default_kernel_window(lat: LatticeConfig) -> tuple[float, float]:
    """Upper half of [2/m, L/4], where the polynomial prefactor has flattened out."""
    lo, hi = 2.0 / lat.m, lat.L / 4
    return 0.5 * (lo + hi), hi


def kernel_decay_check(spec: MollifierSpec, lat: LatticeConfig, r_range: tuple = None,
                       band: float = 0.15) -> tuple[DecayFit, bool]:
    """Fit log I(r) along the first axis; passes iff slope is within ``band`` of -m."""
    lo, hi = default_kernel_window(lat) if r_range is None else r_range
    if lo < 2.0 / lat.m - 1e-12 or hi > lat.L / 4 + 1e-12 or lo >= hi:
        raise ValueError(f"window [{lo}, {hi}] not inside [2/m, L/4] = [{2 / lat.m}, {lat.L / 4}]")
    ks = np.arange(int(math.ceil(lo / lat.h - 1e-9)), int(math.floor(hi / lat.h + 1e-9)) + 1)
    prof = kernel_profile(lat, spec)
    vals = np.array([prof[(int(k),) + (0,) * (lat.d - 1)] for k in ks])
    fit = fit_decay(ks * lat.h, vals)
    ok = -(1 + band) * lat.m <= fit.slope <= -(1 - band) * lat.m
    return fit, bool(ok)


@dataclass
class CovBoundReport:
    x1: tuple
    x2: tuple
    analytic: float
    empirical: float
    empirical_stderr: float
    n_samples: int
    passed: bool
    tainted: int = 0


def _theta_at_points(phi: Field, params: ModelParams, C: float, pts) -> list[np.ndarray]:
    """theta^z(x) as a function of z for each x, via the symmetric adjoint solve."""
    lat = phi.lattice
    V = linearized_potential(phi, params, C)
    a_hat = rfft(mollifier(lat, params.mollifier()).values, lat.d) * lat.cell_volume
    out = []
    for x in pts:
        psi, _, _ = solve_resolvent(V, delta(lat, x).values)
        # a is even, so theta^z(x) = (psi * a)(z)
        out.append(irfft(rfft(psi, lat.d) * a_hat, lat.d, lat.N))
    return out


def malliavin_cov_bound(x1: Sequence[int], x2: Sequence[int], params: ModelParams, n_samples: int,
                        lat: LatticeConfig, seed: int = 0, threads: int = 1) -> CovBoundReport:
    """Compare int (E theta^z(x1)^2)^(1/2) (E theta^z(x2)^2)^(1/2) dz with I(x1, x2)."""
    x1, x2 = lat.point(x1), lat.point(x2)
    if x1 == x2:
        raise ValueError("x1 and x2 must differ")
    spec = params.mollifier()
    C = params.wick_constant(lat)
    analytic = covariance_kernel_I(x1, x2, spec, lat)

    def task(i):
        b = make_noise_bundle(lat, spec, RngStream(seed, i), copies=False)
        sol = solve_sample(b, params, C)
        if sol.report.tainted:
            return None
        t1, t2 = _theta_at_points(sol.phi, params, C, (x1, x2))
        return t1 ** 2, t2 ** 2

    res = [r for r in map_ordered(task, range(n_samples), threads) if r is not None]
    n = len(res)
    s1 = np.array([r[0] for r in res])
    s2 = np.array([r[1] for r in res])

    def stat(idx):
        return float(np.sum(np.sqrt(s1[idx].mean(axis=0) * s2[idx].mean(axis=0))) * lat.cell_volume)

    emp = stat(np.arange(n))
    se = 0.0
    if n > 1:
        jk = np.array([stat(np.r_[0:i, i + 1:n]) for i in range(n)])
        se = float(math.sqrt((n - 1) / n * np.sum((jk - jk.mean()) ** 2)))
    passed = emp <= analytic * (1 + 1e-12) + 3 * se
    return CovBoundReport(x1, x2, analytic, emp, se, n, bool(passed), n_samples - n)
