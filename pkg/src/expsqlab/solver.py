"""Nonlinear elliptic solve for the regularised, truncated remainder field.

Solves  L u + alpha K_R(exp(alpha u) eta) = 0  on the torus with a globalised
Newton-Krylov iteration.  The Jacobian L + diag(g'(u)) is symmetric positive
definite because g' >= 0, and F is the gradient of a strongly convex energy,
which is what the line search descends on.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .lattice import Field, L_array, LatticeConfig, Linv_array, inverse_symbol, irfft, operator_symbol, rfft, require_same_lattice
from .lattice import WeightSpec, weighted_lp_norm
from .noise import EXP_CLAMP, MollifierSpec, NoiseBundle, compute_Ceps, wick_exponential

ALPHA_MAX = 4 * math.pi * math.sqrt(8 - 4 * math.sqrt(3))
FOUR_PI_SQ = (4 * math.pi) ** 2


class ConvergenceError(RuntimeError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


@dataclass(frozen=True)
class ModelParams:
    alpha: float
    m: float = 1.0
    eps: float = 0.25
    R: float = math.inf
    C_eps: Optional[float] = None
    p: Optional[float] = None
    s: Optional[float] = None
    delta: Optional[float] = None
    ell: float = 0.0
    pmom: float = 2.0
    strict: bool = False
    tol: float = 1e-10
    cg_rtol: float = 1e-3
    max_iter: int = 100

    def __post_init__(self):
        if not math.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        if not self.m > 0:
            raise ValueError("mass must be positive")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not self.R >= 1:
            raise ValueError("truncation level R must be >= 1")
        if self.pmom < 2:
            raise ValueError("moment exponent must be >= 2")
        if self.strict:
            rep = validate_params(self)
            if not rep.ok:
                raise ValueError(f"parameters outside the admissible window: {rep.failures()}")

    def with_(self, **kw) -> "ModelParams":
        d = asdict(self)
        d.update(kw)
        return ModelParams(**d)

    def mollifier(self) -> MollifierSpec:
        return MollifierSpec(self.eps)

    def wick_constant(self, lat: LatticeConfig) -> float:
        if self.C_eps is not None:
            return self.C_eps
        return compute_Ceps(lat, self.mollifier(), self.alpha)


@dataclass
class ParamReport:
    alpha_max: float
    alpha_margin: float
    checks: dict
    s_upper: Optional[float] = None

    @property
    def ok(self) -> bool:
        return all(v for v in self.checks.values() if v is not None)

    def failures(self) -> list:
        return [k for k, v in self.checks.items() if v is False]


def validate_params(params: ModelParams) -> ParamReport:
    """Check |alpha| < alpha_max and, when (p, s, delta) are given, the admissibility window."""
    a2 = params.alpha ** 2
    checks = {"alpha_max": abs(params.alpha) < ALPHA_MAX}
    s_upper = None
    p, s, dl = params.p, params.s, params.delta
    if p is not None:
        checks["p_range"] = 1 < p <= 2
        checks["p_alpha"] = True if a2 == 0 else p < 2 * FOUR_PI_SQ / a2
        s_upper = -a2 * (p - 1) / FOUR_PI_SQ
        if s is not None:
            checks["s_range"] = -1 < s <= s_upper
            if dl is not None:
                checks["delta_range"] = 0 < dl < s + 1
    return ParamReport(ALPHA_MAX, ALPHA_MAX - abs(params.alpha), checks, s_upper)


# truncation -----------------------------------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(32)


@dataclass(frozen=True)
class TruncationKR:
    """C^1 monotone cap: identity on (0, R-1], R on [R, inf), cubic Hermite in between.

    The blend is R-1 + s + s^2 - s^3 with s = x - (R-1); its slope peaks at 4/3.
    """

    R: float

    def __post_init__(self):
        if not self.R >= 1:
            raise ValueError("R must be >= 1")

    @property
    def knots(self) -> tuple:
        return (self.R - 1.0, self.R)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        if math.isinf(self.R):
            return x.copy()
        s = np.clip(x - (self.R - 1.0), 0.0, 1.0)
        return np.where(x <= self.R - 1.0, x, self.R - 1.0 + s + s * s - s ** 3)

    def prime(self, x):
        x = np.asarray(x, dtype=float)
        if math.isinf(self.R):
            return np.ones_like(x)
        s = np.clip(x - (self.R - 1.0), 0.0, 1.0)
        return np.where(x <= self.R - 1.0, 1.0, 1.0 + 2 * s - 3 * s * s)

    def energy(self, y):
        """H(y) = int_0^y K_R(t)/t dt for y <= R (so that d/du H(e^{au}eta) = a K_R)."""
        y = np.asarray(y, dtype=float)
        if math.isinf(self.R):
            return y.copy()
        c = self.R - 1.0
        out = np.array(y, copy=True)
        mid = y > c
        if np.any(mid):
            s = np.minimum(y[mid] - c, 1.0)
            nodes = 0.5 * s[:, None] * (_GL_X[None, :] + 1.0)
            integrand = nodes ** 2 * (1.0 - nodes) / (c + nodes)
            out[mid] = c + s + 0.5 * s * (integrand @ _GL_W)
        return out


def k_r(x, trunc: TruncationKR):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("K_R is defined on (0, inf)")
    v = trunc.value(x)
    return float(v) if v.ndim == 0 else v


def k_r_prime(x, trunc: TruncationKR):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("K_R is defined on (0, inf)")
    v = trunc.prime(x)
    return float(v) if v.ndim == 0 else v


def nonlinearity(u: np.ndarray, log_eta: np.ndarray, alpha: float, R: float, energy: bool = False):
    """g(u) = alpha K_R(y), g'(u) = alpha^2 K_R'(y) y and optionally H(y), y = exp(alpha u) eta.

    Evaluated in log space so the plateau never overflows.
    """
    t = TruncationKR(R)
    logy = alpha * u + log_eta
    if math.isinf(R):
        y = np.exp(np.minimum(logy, EXP_CLAMP))
        g = alpha * y
        gp = alpha * alpha * y
        H = y if energy else None
        return g, gp, H
    logR = math.log(R)
    plateau = logy >= logR
    y = np.exp(np.minimum(logy, logR))
    K = t.value(y)
    Kp = t.prime(y)
    g = alpha * K
    gp = alpha * alpha * Kp * y
    H = None
    if energy:
        H = t.energy(y)
        if np.any(plateau):
            HR = float(t.energy(np.array([R]))[0])
            H = np.where(plateau, HR + R * (logy - logR), H)
    return g, gp, H


# solve ------------------------------------------------------------------------


@dataclass
class SolveReport:
    iterations: int = 0
    residual_inf: float = 0.0
    converged: bool = True
    sign_violation_max: float = 0.0
    tolerance: float = 0.0
    cg_iterations: int = 0
    picard_steps: int = 0
    tainted: bool = False
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _pcg(apply_A, b, precond, rtol, maxiter=500):
    x = np.zeros_like(b)
    r = b.copy()
    z = precond(r)
    p = z.copy()
    rz = float(np.vdot(r, z))
    bnorm = math.sqrt(float(np.vdot(b, b)))
    if bnorm == 0:
        return x, 0
    for it in range(1, maxiter + 1):
        Ap = apply_A(p)
        pAp = float(np.vdot(p, Ap))
        if pAp <= 0:
            break
        a = rz / pAp
        x += a * p
        r -= a * Ap
        if math.sqrt(float(np.vdot(r, r))) <= rtol * bnorm:
            return x, it
        z = precond(r)
        rz_new = float(np.vdot(r, z))
        p *= rz_new / rz
        p += z
        rz = rz_new
    return x, maxiter


def residual_scale(eta_values: np.ndarray, alpha: float, R: float) -> float:
    cap = eta_values.max() if math.isinf(R) else min(R, eta_values.max())
    return max(1.0, abs(alpha) * float(cap))


def solve_phibar_array(log_eta: np.ndarray, lat: LatticeConfig, alpha: float, R: float = math.inf,
                       u0: np.ndarray = None, tol: float = 1e-10, cg_rtol: float = 1e-3,
                       max_iter: int = 100, scale: float = None) -> tuple[np.ndarray, SolveReport]:
    """Newton-Krylov with energy line search; ``tol`` is relative to the data scale."""
    if scale is None:
        scale = residual_scale(np.exp(np.minimum(log_eta, EXP_CLAMP)), alpha, R)
    atol = tol * scale
    rep = SolveReport(tolerance=atol)
    u = np.zeros(lat.shape) if u0 is None else np.array(u0, dtype=float)
    if alpha == 0:
        u = np.zeros(lat.shape)
        return u, rep
    sigma = operator_symbol(lat)
    g, gp, H = nonlinearity(u, log_eta, alpha, R, energy=True)
    Lu = L_array(u, lat)
    E = 0.5 * float(np.vdot(u, Lu)) + float(H.sum())
    prev = None
    for it in range(max_iter + 1):
        F = Lu + g
        res = float(np.max(np.abs(F)))
        rep.history.append(res)
        rep.residual_inf = res
        if res <= atol:
            rep.iterations = it
            break
        if it == max_iter:
            rep.iterations = it
            rep.converged = False
            break
        # inexact Newton: loose early, cg_rtol once the residual is moderate
        forcing = cg_rtol if prev is None else min(0.1, max(cg_rtol, 0.9 * (res / prev) ** 2))
        forcing = min(forcing, max(res / scale, 1e-14)) if res < scale * cg_rtol else forcing
        prev = res
        pre_sym = 1.0 / (sigma + float(np.median(gp)))
        d, k = _pcg(lambda v: L_array(v, lat) + gp * v, -F,
                    lambda r: irfft(rfft(r, lat.d) * pre_sym, lat.d, lat.N), forcing)
        rep.cg_iterations += k
        slope = float(np.vdot(F, d))
        Ld = L_array(d, lat)
        t = 1.0
        accepted = False
        for _ in range(40):
            un = u + t * d
            gn, gpn, Hn = nonlinearity(un, log_eta, alpha, R, energy=True)
            Lun = Lu + t * Ld
            En = 0.5 * float(np.vdot(un, Lun)) + float(Hn.sum())
            if En <= E + 1e-4 * t * slope + 1e-13 * abs(E) or np.max(np.abs(Lun + gn)) < 0.5 * res:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # damped Picard fallback
            rep.picard_steps += 1
            un = 0.5 * u + 0.5 * Linv_array(-g, lat)
            gn, gpn, Hn = nonlinearity(un, log_eta, alpha, R, energy=True)
            Lun = L_array(un, lat)
            En = 0.5 * float(np.vdot(un, Lun)) + float(Hn.sum())
        u, g, gp, Lu, E = un, gn, gpn, Lun, En
    rep.sign_violation_max = float(np.max(alpha * u))
    if not rep.converged:
        raise ConvergenceError(
            f"Newton-Krylov did not converge in {max_iter} iterations (residual {rep.residual_inf:.3e})", rep)
    return u, rep


def solve_phibar(eta: Field, params: ModelParams, u0: Field = None) -> tuple[Field, SolveReport]:
    """Solve L phibar + alpha K_R(exp(alpha phibar) eta) = 0."""
    lat = eta.lattice
    _check_mass(lat, params)
    if np.any(eta.values <= 0) or not eta.is_finite():
        raise ValueError("eta must be strictly positive and finite")
    u, rep = solve_phibar_array(np.log(eta.values), lat, params.alpha, params.R,
                                None if u0 is None else u0.values,
                                params.tol, params.cg_rtol, params.max_iter)
    return Field(lat, u), rep


def _check_mass(lat, params):
    if not math.isclose(lat.m, params.m, rel_tol=1e-12):
        raise ValueError(f"lattice mass {lat.m} differs from model mass {params.m}")


def assemble_phi(phibar: Field, X_eps: Field) -> Field:
    require_same_lattice(phibar, X_eps)
    return phibar + X_eps


def full_residual(phi: Field, xi_eps: Field, params: ModelParams, C_eps: float) -> float:
    """sup |L phi + alpha K_R(exp(alpha phi - C)) - xi_eps|."""
    lat = require_same_lattice(phi, xi_eps)
    g, _, _ = nonlinearity(phi.values, np.full(lat.shape, -C_eps), params.alpha, params.R)
    return float(np.max(np.abs(L_array(phi.values, lat) + g - xi_eps.values)))


@dataclass
class SampleSolution:
    """One pass of the pipeline: noise, Wick exponential, solve, assemble."""

    phibar: Field
    phi: Field
    eta: Field
    report: SolveReport
    C_eps: float


def solve_sample(bundle: NoiseBundle, params: ModelParams, C_eps: float = None,
                 X_eps: Field = None) -> SampleSolution:
    lat = bundle.lattice
    C = params.wick_constant(lat) if C_eps is None else C_eps
    X = bundle.X_eps if X_eps is None else X_eps
    w = wick_exponential(X, params.alpha, C)
    phibar, rep = solve_phibar(w.field, params)
    rep.tainted = w.clamped > 0
    return SampleSolution(phibar, assemble_phi(phibar, X), w.field, rep, C)


# structural checks ---------------------------------------------------------------


@dataclass
class UniquenessReport:
    max_pairwise: float
    passed: bool
    conclusive: bool
    tolerance_limited: bool
    n_inits: int
    amplitude: float


def uniqueness_check(eta: Field, params: ModelParams, n_inits: int, seed: int = 0,
                     threshold: float = 1e-8) -> UniquenessReport:
    """Solve from ``n_inits`` random starts of amplitude |alpha| R / m^2 and compare."""
    if n_inits < 2:
        raise ValueError("need at least two initialisations")
    lat = eta.lattice
    if params.alpha != 0 and math.isinf(params.R):
        raise ValueError("random initialisation amplitude |alpha| R / m^2 needs a finite R")
    amp = abs(params.alpha) * params.R / params.m ** 2 if params.alpha else 0.0
    g = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    sols = []
    conclusive = True
    for i in range(n_inits):
        u0 = Field(lat, g.uniform(-amp, amp, lat.shape)) if i else None
        try:
            u, _ = solve_phibar(eta, params, u0)
        except ConvergenceError:
            conclusive = False
            continue
        sols.append(u.values)
    dist = 0.0
    for i in range(len(sols)):
        for j in range(i + 1, len(sols)):
            dist = max(dist, float(np.max(np.abs(sols[i] - sols[j]))))
    return UniquenessReport(dist, conclusive and dist <= threshold, conclusive,
                            dist > threshold, n_inits, amp)


def sup_at_z_e_z(pmom: float) -> float:
    """sup over z <= 0 of |z|^(pmom-1) e^z, attained at z = -(pmom - 1)."""
    k = pmom - 1.0
    return k ** k * math.exp(-k) if k > 0 else 1.0


@dataclass
class AprioriReport:
    lhs: float
    rhs: float
    constant: float
    passed: bool


def apriori_weighted_bound(phibar: Field, eta: Field, params: ModelParams, rho: WeightSpec) -> AprioriReport:
    """(m^2/2) ||rho phibar||_p^p  <=  C |alpha|^(2-p) int eta rho^p."""
    lat = require_same_lattice(phibar, eta)
    if rho.kind != "rho_exponential":
        raise ValueError("a-priori bound uses the exponential weight rho")
    if params.m ** 2 * rho.beta ** 2 > params.m ** 2 / 2 + 1e-15:
        raise ValueError("beta violates m^2 beta^2 <= m^2/2")
    pm = params.pmom
    C = sup_at_z_e_z(pm)
    lhs = 0.5 * params.m ** 2 * weighted_lp_norm(phibar, pm, rho) ** pm
    w = rho.field(lat).values
    a = abs(params.alpha)
    pref = a ** (2 - pm) if a > 0 else (1.0 if pm == 2 else 0.0)
    rhs = C * pref * float(np.sum(eta.values * w ** pm) * lat.cell_volume)
    return AprioriReport(lhs, rhs, C, lhs <= rhs)
