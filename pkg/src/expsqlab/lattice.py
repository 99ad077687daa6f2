"""Periodic lattices, the screened Laplacian m^2 - Delta, and weighted norms.

All integrals carry the grid measure h^d, so continuum formulas hold without
per-call rescaling.  The operator is diagonal in Fourier space and is applied
with real FFTs.
"""
from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.fft as sfft

SYMBOL_MODES = ("discrete-laplacian", "continuum")


class LatticeMismatch(ValueError):
    """Two fields that must share a lattice do not."""


@dataclass(frozen=True)
class LatticeConfig:
    d: int
    N: int
    L: float
    m: float = 1.0
    symbol_mode: str = "discrete-laplacian"

    def __post_init__(self):
        if not 1 <= self.d <= 4:
            raise ValueError(f"dimension must be in 1..4, got {self.d}")
        if self.N < 8 or self.N & (self.N - 1):
            raise ValueError(f"N must be a power of two >= 8, got {self.N}")
        if not self.L > 0:
            raise ValueError("L must be positive")
        if not self.m > 0:
            raise ValueError("mass must be positive")
        if self.symbol_mode not in SYMBOL_MODES:
            raise ValueError(f"unknown symbol_mode {self.symbol_mode!r}")

    @property
    def h(self) -> float:
        return self.L / self.N

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d

    @property
    def cell_volume(self) -> float:
        return self.h ** self.d

    @property
    def volume(self) -> float:
        return self.L ** self.d

    def with_mass(self, m: float) -> "LatticeConfig":
        return LatticeConfig(self.d, self.N, self.L, m, self.symbol_mode)

    def with_symbol(self, mode: str) -> "LatticeConfig":
        return LatticeConfig(self.d, self.N, self.L, self.m, mode)

    # geometry -----------------------------------------------------------

    def displacement(self, x: Sequence[int] = None) -> list[np.ndarray]:
        """Per-axis signed torus displacement of every site from ``x`` (physical units)."""
        x = (0,) * self.d if x is None else tuple(x)
        idx = np.arange(self.N)
        out = []
        for ax in range(self.d):
            k = (idx - x[ax]) % self.N
            k = np.where(k > self.N // 2, k - self.N, k)
            shp = [1] * self.d
            shp[ax] = self.N
            out.append((k * self.h).reshape(shp))
        return out

    def distance_from(self, x: Sequence[int] = None) -> np.ndarray:
        """Torus distance of every site from lattice point ``x``."""
        r2 = sum(c ** 2 for c in self.displacement(x))
        return np.sqrt(np.broadcast_to(r2, self.shape))

    def torus_distance(self, x: Sequence[int], y: Sequence[int]) -> float:
        s = 0.0
        for a, b in zip(x, y):
            k = (a - b) % self.N
            k = min(k, self.N - k)
            s += (k * self.h) ** 2
        return math.sqrt(s)

    def point(self, x: Iterable[int]) -> tuple[int, ...]:
        p = tuple(int(v) % self.N for v in x)
        if len(p) != self.d:
            raise ValueError(f"point {p} does not have {self.d} coordinates")
        return p


@dataclass(frozen=True, eq=False)
class Field:
    lattice: LatticeConfig
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != self.lattice.shape:
            if vals.size != self.lattice.N ** self.lattice.d:
                raise ValueError(
                    f"field has {vals.size} values, lattice needs {self.lattice.N ** self.lattice.d}")
            vals = vals.reshape(self.lattice.shape)
        object.__setattr__(self, "values", vals)

    def _other(self, other):
        if isinstance(other, Field):
            require_same_lattice(self, other)
            return other.values
        return other

    def __add__(self, other):
        return Field(self.lattice, self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Field(self.lattice, self.values - self._other(other))

    def __rsub__(self, other):
        return Field(self.lattice, self._other(other) - self.values)

    def __mul__(self, other):
        return Field(self.lattice, self.values * self._other(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Field(self.lattice, self.values / self._other(other))

    def __neg__(self):
        return Field(self.lattice, -self.values)

    def __getitem__(self, x):
        return self.values[tuple(x)]

    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))

    def integral(self) -> float:
        return float(self.values.sum() * self.lattice.cell_volume)

    def shifted(self, v: Sequence[int]) -> "Field":
        """Field ``y -> f(y + v)`` for a lattice shift ``v``."""
        return Field(self.lattice, np.roll(self.values, tuple(-int(c) for c in v), axis=tuple(range(self.lattice.d))))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


def require_same_lattice(*fields: Field) -> LatticeConfig:
    lat = fields[0].lattice
    for f in fields[1:]:
        if f.lattice != lat:
            raise LatticeMismatch(f"lattice mismatch: {lat} vs {f.lattice}")
    return lat


def constant(lat: LatticeConfig, c: float) -> Field:
    return Field(lat, np.full(lat.shape, float(c)))


def delta(lat: LatticeConfig, x: Sequence[int] = None) -> Field:
    """Lattice Dirac mass at ``x`` (value 1/h^d, unit integral)."""
    v = np.zeros(lat.shape)
    v[lat.point(x if x is not None else (0,) * lat.d)] = 1.0 / lat.cell_volume
    return Field(lat, v)


# spectral machinery -------------------------------------------------------


def _axis_wavenumbers(lat: LatticeConfig, real_last: bool):
    ks = []
    for ax in range(lat.d):
        if real_last and ax == lat.d - 1:
            k = 2 * np.pi * np.fft.rfftfreq(lat.N, d=lat.h)
        else:
            k = 2 * np.pi * np.fft.fftfreq(lat.N, d=lat.h)
        shp = [1] * lat.d
        shp[ax] = k.size
        ks.append(k.reshape(shp))
    return ks


@functools.lru_cache(maxsize=16)
def laplacian_symbol(lat: LatticeConfig, real: bool = True) -> np.ndarray:
    """Symbol of -Delta on the rfft (``real=True``) or full fft grid."""
    ks = _axis_wavenumbers(lat, real)
    if lat.symbol_mode == "continuum":
        terms = [k ** 2 for k in ks]
    else:
        terms = [(2.0 / lat.h ** 2) * (1.0 - np.cos(k * lat.h)) for k in ks]
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    out = np.ascontiguousarray(np.broadcast_to(out, _spectral_shape(lat, real)))
    out.flags.writeable = False
    return out


@functools.lru_cache(maxsize=16)
def operator_symbol(lat: LatticeConfig, real: bool = True) -> np.ndarray:
    """Symbol sigma(k) = m^2 + (-Delta)(k) of the screened operator."""
    out = lat.m ** 2 + laplacian_symbol(lat, real)
    out.flags.writeable = False
    return out


@functools.lru_cache(maxsize=16)
def inverse_symbol(lat: LatticeConfig, real: bool = True) -> np.ndarray:
    out = 1.0 / operator_symbol(lat, real)
    out.flags.writeable = False
    return out


@functools.lru_cache(maxsize=16)
def wavenumber_modulus(lat: LatticeConfig, real: bool = False) -> np.ndarray:
    ks = _axis_wavenumbers(lat, real)
    r2 = ks[0] ** 2
    for k in ks[1:]:
        r2 = r2 + k ** 2
    out = np.ascontiguousarray(np.broadcast_to(np.sqrt(r2), _spectral_shape(lat, real)))
    out.flags.writeable = False
    return out


def _spectral_shape(lat, real):
    if real:
        return (lat.N,) * (lat.d - 1) + (lat.N // 2 + 1,)
    return lat.shape


def _axes(arr_ndim, d):
    return tuple(range(arr_ndim - d, arr_ndim))


def rfft(values: np.ndarray, d: int) -> np.ndarray:
    return sfft.rfftn(values, axes=_axes(values.ndim, d))


def irfft(coeffs: np.ndarray, d: int, N: int) -> np.ndarray:
    shape = (N,) * d
    return sfft.irfftn(coeffs, s=shape, axes=_axes(coeffs.ndim, d))


def multiply_symbol(values: np.ndarray, lat: LatticeConfig, symbol: np.ndarray) -> np.ndarray:
    """Apply a Fourier multiplier; leading axes of ``values`` are treated as a batch."""
    return irfft(rfft(values, lat.d) * symbol, lat.d, lat.N)


def Linv_array(values: np.ndarray, lat: LatticeConfig) -> np.ndarray:
    return multiply_symbol(values, lat, inverse_symbol(lat))


def L_array(values: np.ndarray, lat: LatticeConfig) -> np.ndarray:
    if lat.symbol_mode == "continuum":
        return multiply_symbol(values, lat, operator_symbol(lat))
    # nearest-neighbour stencil; same symbol as the spectral discrete Laplacian
    ih2 = 1.0 / lat.h ** 2
    out = (lat.m ** 2 + 2 * lat.d * ih2) * values
    for ax in range(values.ndim - lat.d, values.ndim):
        out -= ih2 * (np.roll(values, 1, ax) + np.roll(values, -1, ax))
    return out


def apply_Linv(f: Field) -> Field:
    """Solve (m^2 - Delta_h) u = f diagonally in Fourier space."""
    if not f.is_finite():
        raise ValueError("apply_Linv: input field has non-finite values")
    return Field(f.lattice, Linv_array(f.values, f.lattice))


def apply_L(u: Field) -> Field:
    if not u.is_finite():
        raise ValueError("apply_L: input field has non-finite values")
    return Field(u.lattice, L_array(u.values, u.lattice))


def convolve(f: Field, g: Field) -> Field:
    """Periodic convolution with measure h^d."""
    lat = require_same_lattice(f, g)
    c = irfft(rfft(f.values, lat.d) * rfft(g.values, lat.d), lat.d, lat.N)
    return Field(lat, c * lat.cell_volume)


def fourier_transform(f: Field) -> np.ndarray:
    """Continuum-normalised transform h^d sum_x f(x) e^{-ikx} on the full grid."""
    return sfft.fftn(f.values) * f.lattice.cell_volume


# weights and norms --------------------------------------------------------

WEIGHT_KINDS = ("r_ell", "r_lambda_ell", "rho_exponential")


@dataclass(frozen=True)
class WeightSpec:
    kind: str = "r_ell"
    ell: float = 0.0
    lam: float = 1.0
    beta: float = 0.0
    center: tuple = None

    def __post_init__(self):
        if self.kind not in WEIGHT_KINDS:
            raise ValueError(f"unknown weight kind {self.kind!r}")
        if self.ell < 0:
            raise ValueError("ell must be >= 0")
        if self.kind == "r_lambda_ell" and not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.kind == "rho_exponential" and self.beta < 0:
            raise ValueError("beta must be >= 0")

    def field(self, lat: LatticeConfig) -> Field:
        """Weight values on the lattice; centred at ``center`` (origin by default)."""
        r = lat.distance_from(self.center)
        if self.kind == "r_ell":
            w = (1.0 + r ** 2) ** (-self.ell / 2)
        elif self.kind == "r_lambda_ell":
            w = (1.0 + self.lam * r ** 2) ** (-self.ell / 2)
        else:
            w = np.exp(-self.beta * lat.m * r)
        return Field(lat, w)


@dataclass(frozen=True)
class NormSpec:
    p: float = 2.0
    q: float = 2.0
    s: float = 0.0
    weight: WeightSpec = WeightSpec()
    k0: float = 1.0

    def __post_init__(self):
        if self.p < 1 or self.q < 1:
            raise ValueError("p and q must be >= 1")


def _lp(values: np.ndarray, p: float, dv: float) -> float:
    a = np.abs(values)
    if math.isinf(p):
        return float(a.max())
    return float((np.sum(a ** p) * dv) ** (1.0 / p))


def weighted_lp_norm(f: Field, p: float, w: WeightSpec = None) -> float:
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    vals = f.values if w is None else f.values * w.field(f.lattice).values
    return _lp(vals, p, f.lattice.cell_volume)


def dyadic_blocks(f: Field, k0: float = 1.0) -> list[tuple[int, np.ndarray]]:
    """Sharp spectral blocks: j=-1 is |k| < k0/2, block j >= 0 is [2^(j-1) k0, 2^j k0)."""
    lat = f.lattice
    kk = wavenumber_modulus(lat, real=True)
    fh = rfft(f.values, lat.d)
    kmax = float(kk.max())
    blocks = [(-1, kk < k0 / 2)]
    j = 0
    while 2.0 ** (j - 1) * k0 <= kmax:
        blocks.append((j, (kk >= 2.0 ** (j - 1) * k0) & (kk < 2.0 ** j * k0)))
        j += 1
    return [(j, irfft(np.where(mask, fh, 0), lat.d, lat.N)) for j, mask in blocks]


def besov_norm(f: Field, spec: NormSpec) -> float:
    w = spec.weight.field(f.lattice).values
    terms = []
    for j, block in dyadic_blocks(f, spec.k0):
        terms.append(2.0 ** (spec.s * j) * _lp(block * w, spec.p, f.lattice.cell_volume))
    terms = np.asarray(terms)
    if math.isinf(spec.q):
        return float(terms.max())
    return float(np.sum(terms ** spec.q) ** (1.0 / spec.q))


# binary field format --------------------------------------------------------

_HEADER = struct.Struct("<qqdd")


def write_field(path, f: Field) -> None:
    lat = f.lattice
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(lat.d, lat.N, lat.L, lat.m))
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def read_field(path, symbol_mode: str = "discrete-laplacian") -> Field:
    with open(path, "rb") as fh:
        d, N, L, m = _HEADER.unpack(fh.read(_HEADER.size))
        vals = np.frombuffer(fh.read(), dtype="<f8")
    lat = LatticeConfig(int(d), int(N), float(L), float(m), symbol_mode)
    if vals.size != N ** d:
        raise ValueError(f"truncated field file: {vals.size} values, expected {N ** d}")
    return Field(lat, vals.astype(np.float64))
