"""Glued noises on disjoint balls and the decay of the coupling error."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .fitting import DecayFit, fit_decay, jackknife_stderr, map_ordered
from .lattice import Field, LatticeConfig, Linv_array, irfft, operator_symbol, rfft
from .noise import (
    MollifierSpec,
    NoiseBundle,
    RngStream,
    XI,
    ZETA1,
    free_field_array,
    make_noise_bundle,
    mollifier_transform,
    mollify,
    sample_white_noise,
)
from .solver import ModelParams, solve_phibar_array


class OverlappingBalls(ValueError):
    pass


class GluingPrecondition(ValueError):
    pass


@dataclass(frozen=True)
class BallSpec:
    center: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")

    def mask(self, lat: LatticeConfig) -> np.ndarray:
        if self.radius >= lat.L / 2:
            raise ValueError("ball radius must be below L/2")
        return lat.distance_from(self.center) < self.radius


@dataclass(frozen=True, eq=False)
class CouplingParams:
    pmom: float
    beta: float
    x1: tuple
    x2: tuple
    l: float
    theta: Field = None

    def __post_init__(self):
        if self.pmom < 2:
            raise ValueError("moment exponent must be >= 2")
        if not beta_feasible(self.beta, self.pmom):
            raise ValueError(f"beta={self.beta} violates the constraints for p={self.pmom}")


def beta_feasible(beta: float, pmom: float) -> bool:
    return beta >= 0 and 1 + beta ** 2 * (2 - 3 * pmom) / pmom > 0 and beta ** 2 <= 0.5


def choose_beta(pmom: float, m: float = 1.0, step: float = 1e-4) -> float:
    """Largest grid value of beta with 1 + beta^2 (2 - 3p)/p > 0 and beta^2 <= 1/2.

    The mass cancels from both constraints; it is accepted for the interface.
    """
    if pmom < 2:
        raise ValueError("moment exponent must be >= 2")
    bound = min(math.sqrt(0.5), math.sqrt(pmom / (3 * pmom - 2)))
    k = int(math.floor(bound / step)) + 1
    while k > 0 and not beta_feasible(k * step, pmom):
        k -= 1
    return round(k * step, 12)


def rate_constant(m: float, beta: float, pmom: float) -> float:
    """K(m, beta, p) = m^2 (1 + beta^2 (2 - 3p)/p)."""
    return m ** 2 * (1 + beta ** 2 * (2 - 3 * pmom) / pmom)


def _smoothstep5(s):
    s = np.clip(s, 0.0, 1.0)
    return s ** 3 * (10 - 15 * s + 6 * s * s)


def cutoff_theta(lat: LatticeConfig, x1: Sequence[int], l: float) -> Field:
    """1 on B(x1, l/8), 0 off B(x1, l/4), quintic smoothstep in between."""
    r = lat.distance_from(x1)
    return Field(lat, 1.0 - _smoothstep5((r - l / 8) / (l / 8)))


def balls_disjoint(lat: LatticeConfig, D1: BallSpec, D2: BallSpec) -> bool:
    return lat.torus_distance(D1.center, D2.center) >= D1.radius + D2.radius and \
        not np.any(D1.mask(lat) & D2.mask(lat))


def make_coupled_noises(bundle: NoiseBundle, D1: BallSpec, D2: BallSpec) -> NoiseBundle:
    """xi_i = 1_{D_i} xi + 1_{D_i^c} zeta_i, with mollified and free-field versions."""
    lat = bundle.lattice
    if not balls_disjoint(lat, D1, D2):
        raise OverlappingBalls("coupling balls overlap on the torus")
    if bundle.zeta1 is None or bundle.zeta2 is None:
        raise ValueError("bundle carries no independent copies")
    m1, m2 = D1.mask(lat), D2.mask(lat)
    xi = bundle.xi.values
    xi1 = Field(lat, np.where(m1, xi, bundle.zeta1.values))
    xi2 = Field(lat, np.where(m2, xi, bundle.zeta2.values))
    spec = bundle.mollifier
    x1e, x2e = mollify(xi1, spec), mollify(xi2, spec)
    return replace(bundle, xi1=xi1, xi2=xi2, xi1_eps=x1e, xi2_eps=x2e,
                   X1_eps=Field(lat, Linv_array(x1e.values, lat)),
                   X2_eps=Field(lat, Linv_array(x2e.values, lat)))


def verify_noise_gluing(bundle: NoiseBundle, D1: BallSpec, theta: Field, eps: float,
                        allow_violation: bool = False) -> bool:
    """max |theta (xi_eps - xi1_eps)| <= 1e-12 sup|xi_eps|; needs eps < l/4 with l = 2 radius."""
    l = 2 * D1.radius
    if eps >= l / 4 and not allow_violation:
        raise GluingPrecondition(f"eps={eps} >= l/4={l / 4}: the identity is not expected")
    dev = float(np.max(np.abs(theta.values * (bundle.xi_eps.values - bundle.xi1_eps.values))))
    return dev <= 1e-12 * bundle.xi_eps.sup()


def coupling_error(phi: Field, phi1: Field, x1: Sequence[int], params: CouplingParams, f: Field) -> float:
    """int |f(. - x1)(phi - phi1)|^p over the lattice (f lives in the unit ball at the origin)."""
    lat = phi.lattice
    fw = f.shifted(tuple(-c for c in lat.point(x1))).values
    return float(np.sum(np.abs(fw * (phi.values - phi1.values)) ** params.pmom) * lat.cell_volume)


def unit_bump(lat: LatticeConfig) -> Field:
    """Smooth bump on the open unit ball at the origin, normalised to f(0) = 1."""
    r = lat.distance_from()
    v = np.zeros(lat.shape)
    inside = r < 1
    v[inside] = np.exp(1.0 - 1.0 / (1.0 - r[inside] ** 2))
    return Field(lat, v)


def diagonal_placement(lat: LatticeConfig, l: float, x1: Sequence[int] = None) -> tuple[tuple, float]:
    """x2 = x1 + (a, a, 0, ...) with a = round(l / (sqrt 2 h)); returns (x2, actual distance).

    The diagonal keeps both balls of radius l/2 inside one fundamental cell for
    l up to about L/sqrt(2); in d = 1 the offset is along the axis.
    """
    x1 = lat.point((0,) * lat.d if x1 is None else x1)
    if lat.d == 1:
        a = int(round(l / lat.h))
        x2 = lat.point((x1[0] + a,))
    else:
        a = int(round(l / (math.sqrt(2) * lat.h)))
        x2 = lat.point((x1[0] + a, x1[1] + a) + x1[2:])
    return x2, lat.torus_distance(x1, x2)


def free_coupling_oracle(lat: LatticeConfig, spec: MollifierSpec, x1: Sequence[int], radius: float,
                         f: Field) -> float:
    """Exact E int |f(. - x1)(X - X1)|^2 at alpha = 0.

    X - X1 = k * ((xi - zeta) 1_{D^c}) with k = L^{-1} a_eps, so its variance at y
    is 2 int_{D^c} k(y - u)^2 du.
    """
    kt = mollifier_transform(lat, spec) / operator_symbol(lat)
    k = irfft(kt, lat.d, lat.N) / lat.cell_volume
    out = 1.0 - BallSpec(lat.point(x1), radius).mask(lat)
    var = 2 * irfft(rfft(k ** 2, lat.d) * rfft(out, lat.d), lat.d, lat.N) * lat.cell_volume
    fw = f.shifted(tuple(-c for c in lat.point(x1))).values
    return float(np.sum(fw ** 2 * var) * lat.cell_volume)


@dataclass
class CouplingResult:
    l_target: list
    l_actual: list
    mean_error: np.ndarray
    stderr: np.ndarray
    n: int
    pmom: float
    beta: float
    slope_ref: float
    fit: DecayFit
    gluing_ok: bool
    gluing_checked: int
    tainted: int
    oracle: list = None
    swapped: bool = False

    def rows(self) -> list[dict]:
        return [dict(l=la, mean_error=float(me), stderr=float(se), n=self.n, p=self.pmom,
                     beta=self.beta, slope_ref=self.slope_ref)
                for la, me, se in zip(self.l_actual, self.mean_error, self.stderr)]


def coupling_decay_experiment(params: ModelParams, lat: LatticeConfig, distances: Sequence[float],
                              n_samples: int, seed: int = 0, threads: int = 1,
                              swap: bool = False, f: Field = None) -> CouplingResult:
    """Average the windowed coupling error over samples for each separation and fit its decay.

    ``swap`` measures around x2 with the D2 copy instead, for the symmetry check.
    """
    spec = params.mollifier()
    C = params.wick_constant(lat)
    pm = params.pmom
    beta = choose_beta(pm, params.m)
    f = unit_bump(lat) if f is None else f
    base = lat.point((0,) * lat.d)
    geo = []
    for l in distances:
        x2, la = diagonal_placement(lat, l, base)
        if not (la > 2 * params.eps and la / 2 < lat.L / 2):
            raise ValueError(f"separation {l} does not fit the torus")
        D1, D2 = BallSpec(base, la / 2), BallSpec(x2, la / 2)
        if not balls_disjoint(lat, D1, D2):
            raise OverlappingBalls(f"balls at separation {la} overlap")
        probe, D = (x2, D2) if swap else (base, D1)
        geo.append((la, probe, D, cutoff_theta(lat, probe, la), D1, D2))

    def task(i):
        b = make_noise_bundle(lat, spec, RngStream(seed, i))
        log_eta = params.alpha * b.X_eps.values - C
        if np.any(log_eta > 700):
            return None
        u, _ = solve_phibar_array(log_eta, lat, params.alpha, params.R, None, params.tol, params.cg_rtol,
                                  params.max_iter)
        phi = Field(lat, u + b.X_eps.values)
        errs, glue = [], True
        for la, probe, D, th, D1, D2 in geo:
            cb = make_coupled_noises(b, D1, D2)
            xe, X = (cb.xi2_eps, cb.X2_eps) if swap else (cb.xi1_eps, cb.X1_eps)
            if params.eps < la / 4:
                chk = replace(cb, xi1_eps=xe)
                glue = glue and verify_noise_gluing(chk, D, th, params.eps)
            le1 = params.alpha * X.values - C
            if np.any(le1 > 700):
                return None
            # warm start from the uncoupled solution: the fields agree near the probe
            u1, _ = solve_phibar_array(le1, lat, params.alpha, params.R, u, params.tol, params.cg_rtol,
                                       params.max_iter)
            phi1 = Field(lat, u1 + X.values)
            cp = CouplingParams(pm, beta, base, x2 if not swap else base, la)
            errs.append(coupling_error(phi, phi1, probe, cp, f))
        return np.array(errs), glue

    res = map_ordered(task, range(n_samples), threads)
    good = [r for r in res if r is not None]
    E = np.array([r[0] for r in good])
    gl = all(r[1] for r in good)
    mean = E.mean(axis=0)
    se = E.std(axis=0, ddof=1) / math.sqrt(len(E))
    ls = [g[0] for g in geo]
    fit = fit_decay(ls, mean, se, refuse=False)
    slope_ref = -params.m * beta / 8
    oracle = None
    if params.alpha == 0 and pm == 2:
        oracle = [free_coupling_oracle(lat, spec, g[1], g[0] / 2, f) for g in geo]
    return CouplingResult(list(distances), ls, mean, se, len(E), pm, beta, slope_ref, fit, gl,
                          len(good) * sum(1 for g in geo if params.eps < g[0] / 4),
                          n_samples - len(good), oracle, swap)


@dataclass
class TailReport:
    pmom: int
    constant: float
    variance: float
    ratio: float
    ratio_stderr: float
    passed: bool
    n: int


def double_factorial(k: int) -> int:
    return math.prod(range(k, 0, -2)) if k > 0 else 1


def difference_samples(lat: LatticeConfig, spec: MollifierSpec, D1: BallSpec, x: Sequence[int], n: int,
                       seed: int = 0) -> np.ndarray:
    """Samples of (X_eps - X_{1,eps})(x) for the coupling around D1.

    The difference only involves (xi - zeta1) outside D1, so each sample is a
    single weighted sum against the kernel L^{-1} a_eps centred at x.
    """
    kt = mollifier_transform(lat, spec) / operator_symbol(lat)
    k = irfft(kt, lat.d, lat.N) / lat.cell_volume
    x = lat.point(x)
    kx = Field(lat, k).shifted(tuple(-c for c in x)).values  # k(u - x) = k(x - u), k even
    w = (kx * (1.0 - D1.mask(lat)) * lat.cell_volume).ravel()
    out = np.empty(n)
    for i in range(n):
        r = RngStream(seed, i)
        xi = sample_white_noise(lat, r, XI).values.ravel()
        z1 = sample_white_noise(lat, r, ZETA1).values.ravel()
        out[i] = w @ (xi - z1)
    return out


def gaussian_tail_check(samples: np.ndarray, pmom: int, blocks: int = 100) -> TailReport:
    """Empirical E|Y|^p / (E Y^2)^(p/2) against the Gaussian constant (p-1)!!."""
    if pmom not in (2, 4, 6):
        raise ValueError("moment exponent must be 2, 4 or 6")
    Cp = float(double_factorial(pmom - 1))
    y = np.asarray(samples, dtype=float)
    stat = lambda s: float(np.mean(np.abs(s) ** pmom) / np.mean(s ** 2) ** (pmom / 2))
    ratio = stat(y)
    if pmom == 2:
        return TailReport(pmom, Cp, float(np.mean(y ** 2)), ratio, 0.0, abs(ratio - 1) <= 1e-12, len(y))
    se = jackknife_stderr(y, stat, blocks)
    return TailReport(pmom, Cp, float(np.mean(y ** 2)), ratio, se, abs(ratio - Cp) <= 3 * se, len(y))
