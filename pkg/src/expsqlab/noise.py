"""White noise, mollification, the free field and its Wick exponential."""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .lattice import (
    Field,
    LatticeConfig,
    Linv_array,
    irfft,
    operator_symbol,
    rfft,
    wavenumber_modulus,
)

EXP_CLAMP = 700.0

# substream slots inside one sample
XI, ZETA1, ZETA2 = 0, 1, 2


class UnderResolvedKernel(ValueError):
    pass


@dataclass(frozen=True)
class RngStream:
    """Counter-based stream keyed by ``(seed, stream_id)``.

    Each sample owns one stream id; the white noises of a sample live in
    fixed substream slots so any field can be regenerated on its own.
    """

    seed: int
    stream_id: int = 0

    def generator(self, substream: int = 0) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id), int(substream)))
        return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class MollifierSpec:
    eps: float
    shape: str = "bump"

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("mollifier radius must be positive")
        if self.shape != "bump":
            raise ValueError(f"unsupported mollifier shape {self.shape!r}")


def sample_white_noise(lat: LatticeConfig, rng: RngStream, substream: int = XI) -> Field:
    """I.i.d. N(0, 1/h^d) per site."""
    g = rng.generator(substream)
    return Field(lat, g.standard_normal(lat.shape) / math.sqrt(lat.cell_volume))


@functools.lru_cache(maxsize=32)
def _bump_values(lat: LatticeConfig, eps: float) -> np.ndarray:
    r = lat.distance_from() / eps
    inside = r < 1.0
    v = np.zeros(lat.shape)
    v[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    v /= v.sum() * lat.cell_volume
    v.flags.writeable = False
    return v


def mollifier(lat: LatticeConfig, spec: MollifierSpec) -> Field:
    """Radial bump centred at the origin with exact unit lattice mass."""
    _check_resolved(lat, spec)
    return Field(lat, _bump_values(lat, spec.eps))


def _check_resolved(lat, spec):
    if spec.eps < 2 * lat.h * (1 - 1e-12):
        raise UnderResolvedKernel(f"eps={spec.eps} < 2h={2 * lat.h}: kernel not resolved")
    if spec.eps >= lat.L / 2:
        raise ValueError("mollifier radius must be below L/2")


@functools.lru_cache(maxsize=32)
def _bump_transform(lat: LatticeConfig, eps: float) -> np.ndarray:
    """rfft of the kernel times h^d, i.e. the continuum-normalised transform."""
    out = rfft(_bump_values(lat, eps), lat.d) * lat.cell_volume
    out.flags.writeable = False
    return out


def mollifier_transform(lat: LatticeConfig, spec: MollifierSpec) -> np.ndarray:
    _check_resolved(lat, spec)
    return _bump_transform(lat, spec.eps)


def mollify_array(values: np.ndarray, lat: LatticeConfig, spec: MollifierSpec) -> np.ndarray:
    return irfft(rfft(values, lat.d) * mollifier_transform(lat, spec), lat.d, lat.N)


def mollify(xi: Field, spec: MollifierSpec) -> Field:
    return Field(xi.lattice, mollify_array(xi.values, xi.lattice, spec))


def free_field_array(values: np.ndarray, lat: LatticeConfig, spec: MollifierSpec) -> np.ndarray:
    """L^{-1}(a_eps * xi) in one pass over Fourier space."""
    sym = mollifier_transform(lat, spec) / operator_symbol(lat)
    return irfft(rfft(values, lat.d) * sym, lat.d, lat.N)


def hermitian_weights(lat: LatticeConfig) -> np.ndarray:
    """Multiplicity of each rfft coefficient in the full spectrum."""
    n = lat.N // 2 + 1
    w = np.full(n, 2.0)
    w[0] = 1.0
    w[-1] = 1.0
    shp = [1] * lat.d
    shp[-1] = n
    return w.reshape(shp)


def free_variance(lat: LatticeConfig, spec: MollifierSpec) -> float:
    """Var X_eps(x) = L^{-d} sum_k |a_eps^(k)|^2 / sigma(k)^2."""
    a = mollifier_transform(lat, spec)
    s = np.sum(hermitian_weights(lat) * np.abs(a) ** 2 / operator_symbol(lat) ** 2)
    return float(s / lat.volume)


def compute_Ceps(lat: LatticeConfig, spec: MollifierSpec, alpha: float) -> float:
    return 0.5 * alpha ** 2 * free_variance(lat, spec)


def free_covariance_profile(lat: LatticeConfig, spec: MollifierSpec, power: int = 2) -> np.ndarray:
    """Stationary covariance Cov(X_eps(0), X_eps(x)) for every site x (power=2).

    ``power`` is the exponent of sigma(k) in the denominator.
    """
    a = mollifier_transform(lat, spec)
    spec_vals = np.abs(a) ** 2 / operator_symbol(lat) ** power
    return irfft(spec_vals, lat.d, lat.N) / lat.cell_volume


def ceps_monte_carlo(lat: LatticeConfig, spec: MollifierSpec, alpha: float, n: int, seed: int,
                     site: Sequence[int] = None) -> tuple[float, float]:
    """Monte Carlo estimate of C_eps from n free-field samples; returns (value, stderr)."""
    x = lat.point(site) if site is not None else (0,) * lat.d
    vals = np.empty(n)
    for i in range(n):
        xi = sample_white_noise(lat, RngStream(seed, i))
        vals[i] = free_field_array(xi.values, lat, spec)[x]
    sq = vals ** 2
    c = 0.5 * alpha ** 2
    return c * float(sq.mean()), c * float(sq.std(ddof=1) / math.sqrt(n))


@dataclass(frozen=True)
class WickExponential:
    field: Field
    clamped: int


def wick_exponential(X_eps: Field, alpha: float, C_eps: float) -> WickExponential:
    """eta = exp(alpha X - C); exponents above 700 are clamped and counted."""
    expo = alpha * X_eps.values - C_eps
    over = expo > EXP_CLAMP
    n = int(over.sum())
    if n:
        expo = np.minimum(expo, EXP_CLAMP)
    return WickExponential(Field(X_eps.lattice, np.exp(expo)), n)


def fourier_decay_check(lat: LatticeConfig, spec: MollifierSpec, orders: Sequence[int]) -> dict:
    """Smallest C_N with |a^(k)| <= C_N (1+|k|)^(-N) over the resolved band |k| <= pi/h."""
    a = np.abs(mollifier_transform(lat, spec))
    k = wavenumber_modulus(lat, real=True)
    band = k <= math.pi / lat.h
    out = {}
    for n in orders:
        out[int(n)] = float(np.max(a[band] * (1.0 + k[band]) ** n))
    return out


@dataclass
class NoiseBundle:
    lattice: LatticeConfig
    mollifier: MollifierSpec
    rng: RngStream
    xi: Field
    zeta1: Optional[Field] = None
    zeta2: Optional[Field] = None
    xi1: Optional[Field] = None
    xi2: Optional[Field] = None
    xi_eps: Optional[Field] = None
    xi1_eps: Optional[Field] = None
    xi2_eps: Optional[Field] = None
    X_eps: Optional[Field] = None
    X1_eps: Optional[Field] = None
    X2_eps: Optional[Field] = None
    meta: dict = field(default_factory=dict)


def make_noise_bundle(lat: LatticeConfig, spec: MollifierSpec, rng: RngStream,
                      copies: bool = True) -> NoiseBundle:
    """Sample xi (and the independent copies), mollify, and build X_eps."""
    xi = sample_white_noise(lat, rng, XI)
    b = NoiseBundle(lat, spec, rng, xi)
    if copies:
        b.zeta1 = sample_white_noise(lat, rng, ZETA1)
        b.zeta2 = sample_white_noise(lat, rng, ZETA2)
    b.xi_eps = mollify(xi, spec)
    b.X_eps = Field(lat, Linv_array(b.xi_eps.values, lat))
    return b


def with_zeta1(bundle: NoiseBundle, zeta1: Field) -> NoiseBundle:
    return replace(bundle, zeta1=zeta1)
