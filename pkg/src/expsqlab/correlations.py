"""Monte Carlo truncated correlations of windowed observables and their decay."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .coupling import unit_bump
from .fitting import DecayFit, InsufficientData, fit_decay, isotonic_decreasing, map_ordered, monotone_within
from .lattice import Field, LatticeConfig, irfft, rfft
from .noise import RngStream, make_noise_bundle
from .solver import ModelParams, solve_phibar_array

KINDS = ("tanh_mean", "clipped_mean", "linear_pairing", "constant")


@dataclass(frozen=True, eq=False)
class ObservableSpec:
    """F applied to the windowed field.

    ``window`` is f centred at the origin (default: unit bump with f(0) = 1);
    ``probe`` is the fixed g of linear_pairing, also centred at the origin.
    """

    kind: str = "tanh_mean"
    scale: float = 1.0
    window: Field = None
    probe: Field = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown observable {self.kind!r}")
        if self.kind == "linear_pairing" and self.probe is None:
            raise ValueError("linear_pairing needs a probe field")
        if self.window is not None:
            lat = self.window.lattice
            if np.any(self.window.values[lat.distance_from() >= 1.0] != 0):
                raise ValueError("window must vanish outside the unit ball")

    @property
    def bounded(self) -> bool:
        return self.kind != "linear_pairing"

    def window_for(self, lat: LatticeConfig) -> Field:
        if self.window is not None:
            if self.window.lattice != lat:
                raise ValueError("window lives on a different lattice")
            return self.window
        return unit_bump(lat)


@dataclass
class CovEstimate:
    value: float
    stderr: float
    n: int
    x1: tuple
    x2: tuple
    naive_stderr: float = float("nan")
    tainted: int = 0

    @property
    def stderr_consistent(self) -> bool:
        if self.stderr == 0 and self.naive_stderr == 0:
            return True
        return 0.5 <= self.stderr / self.naive_stderr <= 2.0


def window_field(phi: Field, f: Field, x: Sequence[int]) -> Field:
    """f(. - x) phi."""
    lat = phi.lattice
    return f.shifted(tuple(-c for c in lat.point(x))) * phi


def _apply(kind, scale, mean):
    if kind == "tanh_mean":
        return np.tanh(scale * mean)
    if kind == "clipped_mean":
        return np.clip(mean, -scale, scale)
    if kind == "constant":
        return np.full_like(np.asarray(mean, dtype=float), scale)
    raise ValueError(kind)


def evaluate_observable(spec: ObservableSpec, w: Field, x: Sequence[int] = None) -> float:
    """F of a windowed field sitting at ``x`` (origin by default)."""
    lat = w.lattice
    x = lat.point((0,) * lat.d if x is None else x)
    if spec.kind == "linear_pairing":
        g = spec.probe.shifted(tuple(-c for c in x))
        return float(np.sum(w.values * g.values) * lat.cell_volume)
    f = spec.window_for(lat)
    mean = float(w.values.sum() / f.values.sum())
    return float(_apply(spec.kind, spec.scale, mean))


def observable_field(spec: ObservableSpec, phi: Field) -> np.ndarray:
    """F(f(. - x) phi) for every site x at once (f is even, so a convolution)."""
    lat = phi.lattice
    if spec.kind == "linear_pairing":
        g = spec.probe.values
        f = spec.window_for(lat).values
        # <f(. - x) phi, g(. - x)> = ((f g) reflected * phi)(x); f g is even when both are
        fg = f * g
        fg_ref = np.roll(np.flip(fg), 1, axis=tuple(range(lat.d)))
        return irfft(rfft(phi.values, lat.d) * rfft(fg_ref, lat.d), lat.d, lat.N) * lat.cell_volume
    f = spec.window_for(lat).values
    mean = irfft(rfft(phi.values, lat.d) * rfft(f, lat.d), lat.d, lat.N) / f.sum()
    return _apply(spec.kind, spec.scale, mean)


# sampling -------------------------------------------------------------------------


def _sample_phi(params: ModelParams, lat: LatticeConfig, C: float, seed: int, i: int):
    b = make_noise_bundle(lat, params.mollifier(), RngStream(seed, i), copies=False)
    log_eta = params.alpha * b.X_eps.values - C
    if np.any(log_eta > 700):
        return None
    u, _ = solve_phibar_array(log_eta, lat, params.alpha, params.R, None, params.tol, params.cg_rtol,
                              params.max_iter)
    return Field(lat, u + b.X_eps.values)


def sample_observables(s1: ObservableSpec, s2: ObservableSpec, x1, x2, params: ModelParams,
                       lat: LatticeConfig, n: int, seed: int = 0, threads: int = 1) -> tuple[np.ndarray, int]:
    """Pairs (F1, F2) per untainted sample, ordered by stream id; also the tainted count."""
    C = params.wick_constant(lat)
    f1, f2 = s1.window_for(lat), s2.window_for(lat)

    def task(i):
        phi = _sample_phi(params, lat, C, seed, i)
        if phi is None:
            return None
        return (evaluate_observable(s1, window_field(phi, f1, x1), x1),
                evaluate_observable(s2, window_field(phi, f2, x2), x2))

    res = map_ordered(task, range(n), threads)
    good = np.array([r for r in res if r is not None]).reshape(-1, 2)
    return good, n - len(good)


def covariance_from_pairs(pairs: np.ndarray, x1, x2, tainted: int = 0) -> CovEstimate:
    a, b = pairs[:, 0], pairs[:, 1]
    n = len(a)
    val = float(np.mean(a * b) - np.mean(a) * np.mean(b))
    # delete-one jackknife in closed form
    Sa, Sb, Sab = a.sum(), b.sum(), (a * b).sum()
    ja = (Sa - a) / (n - 1)
    jb = (Sb - b) / (n - 1)
    jab = (Sab - a * b) / (n - 1)
    jk = jab - ja * jb
    se = float(math.sqrt((n - 1) / n * np.sum((jk - jk.mean()) ** 2)))
    prod = (a - a.mean()) * (b - b.mean())
    naive = float(prod.std(ddof=1) / math.sqrt(n))
    return CovEstimate(val, se, n, tuple(x1), tuple(x2), naive, tainted)


def mc_covariance(s1: ObservableSpec, s2: ObservableSpec, x1, x2, params: ModelParams, n: int,
                  lat: LatticeConfig, seed: int = 0, threads: int = 1) -> CovEstimate:
    if n < 100:
        raise ValueError("mc_covariance needs n >= 100")
    x1, x2 = lat.point(x1), lat.point(x2)
    pairs, bad = sample_observables(s1, s2, x1, x2, params, lat, n, seed, threads)
    return covariance_from_pairs(pairs, x1, x2, bad)


# decay scan -------------------------------------------------------------------------


@dataclass
class DecayScan:
    r: np.ndarray
    cov: np.ndarray
    stderr: np.ndarray
    n: int
    fit: DecayFit
    usable: np.ndarray
    monotone: bool
    tainted: int
    oracle_slope: float = None
    oracle_fit: DecayFit = None

    def rows(self) -> list[dict]:
        return [dict(r=float(r), cov=float(c), stderr=float(s), n_usable=int(self.fit.n_usable))
                for r, c, s in zip(self.r, self.cov, self.stderr)]


def decay_scan(s1: ObservableSpec, s2: ObservableSpec, distances: Sequence[float], params: ModelParams,
               n: int, lat: LatticeConfig, seed: int = 0, threads: int = 1,
               jack_blocks: int = 100) -> DecayScan:
    """Cov(F1 at x, F2 at x + r e_a) on shared samples, averaged over all base points x and axes a.

    Averaging over translations and axes uses invariance in law of the
    periodic model; per-sample spatial means are the jackknife units.
    """
    r = np.asarray(distances, dtype=float)
    # up to L/2 - 2 the two unit windows never meet through the periodic images
    if np.any(r < 1 - 1e-12) or np.any(r > lat.L / 2 - 2 + 1e-12):
        raise ValueError("distances must lie in [1, L/2 - 2]")
    ks = np.rint(r / lat.h).astype(int)
    if np.any(np.abs(ks * lat.h - r) > 1e-9):
        raise ValueError("distances must be lattice multiples of h")
    C = params.wick_constant(lat)
    axes = tuple(range(lat.d))

    def task(i):
        phi = _sample_phi(params, lat, C, seed, i)
        if phi is None:
            return None
        o1 = observable_field(s1, phi)
        o2 = observable_field(s2, phi)
        prods = [np.mean([np.mean(o1 * np.roll(o2, -k, axis=ax)) for ax in axes]) for k in ks]
        return np.concatenate([[o1.mean(), o2.mean()], prods])

    res = map_ordered(task, range(n), threads)
    S = np.array([x for x in res if x is not None])
    ns = len(S)

    def cov_of(rows):
        m = rows.mean(axis=0)
        return m[2:] - m[0] * m[1]

    cov = cov_of(S)
    nb = min(jack_blocks, ns)
    edges = np.linspace(0, ns, nb + 1).astype(int)
    jk = np.array([cov_of(np.delete(S, np.s_[edges[b]:edges[b + 1]], axis=0)) for b in range(nb)])
    se = np.sqrt((nb - 1) / nb * np.sum((jk - jk.mean(axis=0)) ** 2, axis=0))
    mag = np.abs(cov)
    try:
        fit = fit_decay(r, mag, se)
    except InsufficientData:
        fit = fit_decay(r, mag, se, refuse=False)
    usable = mag > 3 * se
    mono = monotone_within(cov, np.maximum(se, 1e-300), 2.0)
    return DecayScan(r, cov, se, ns, fit, usable, mono, n - ns)


def windowed_free_covariance(lat: LatticeConfig, params: ModelParams, r: Sequence[float],
                             window: Field = None) -> np.ndarray:
    """Exact alpha = 0 covariance of two window means at separation r, averaged over axes.

    The free field has covariance I, so the window means have covariance I
    smoothed twice by f / sum f.
    """
    from .malliavin import kernel_profile

    f = (unit_bump(lat) if window is None else window).values
    fh = rfft(f, lat.d) / f.sum()
    prof = irfft(rfft(kernel_profile(lat, params.mollifier()), lat.d) * np.abs(fh) ** 2, lat.d, lat.N)
    ks = np.rint(np.asarray(r, dtype=float) / lat.h).astype(int)
    out = []
    for k in ks:
        vals = []
        for ax in range(lat.d):
            idx = [0] * lat.d
            idx[ax] = int(k) % lat.N
            vals.append(prof[tuple(idx)])
        out.append(np.mean(vals))
    return np.array(out)


def free_slope_oracle(lat: LatticeConfig, params: ModelParams, r: Sequence[float],
                      window: Field = None) -> DecayFit:
    """Decay fit of the exact free covariance of the window means at the given separations."""
    r = np.asarray(r, dtype=float)
    return fit_decay(r, windowed_free_covariance(lat, params, r, window))
