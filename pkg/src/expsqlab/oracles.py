"""Brute-force reference computations.

Everything here avoids the FFT path: sparse stencil matrices, direct sums and
scalar root finding.  Tests and the selftest compare the fast routines
against these.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import integrate, optimize

from .lattice import LatticeConfig


def stencil_matrix(lat: LatticeConfig, potential: np.ndarray = None) -> sp.csr_matrix:
    """Sparse m^2 - Delta_h (+ diag(V)) with periodic nearest-neighbour stencil."""
    if lat.symbol_mode != "discrete-laplacian":
        raise ValueError("stencil oracle only exists for the discrete Laplacian")
    n = lat.N ** lat.d
    idx = np.arange(n).reshape(lat.shape)
    ih2 = 1.0 / lat.h ** 2
    rows, cols, vals = [idx.ravel()], [idx.ravel()], [np.full(n, lat.m ** 2 + 2 * lat.d * ih2)]
    for ax in range(lat.d):
        for sh in (1, -1):
            rows.append(idx.ravel())
            cols.append(np.roll(idx, sh, axis=ax).ravel())
            vals.append(np.full(n, -ih2))
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    if potential is not None:
        A = A + sp.diags(np.asarray(potential).ravel())
    return A.tocsc()


def stencil_solve(lat: LatticeConfig, rhs: np.ndarray, potential: np.ndarray = None) -> np.ndarray:
    return spla.spsolve(stencil_matrix(lat, potential), rhs.ravel()).reshape(lat.shape)


def kernel_direct_sum(lat: LatticeConfig, kernel: np.ndarray, x: Sequence[int], y: Sequence[int]) -> float:
    """I(x, y) = h^d sum_u w(x-u) w(y-u) with w = (m^2 - Delta_h)^{-1} kernel by sparse LU."""
    w = stencil_solve(lat, kernel)
    tot = 0.0
    xs = np.array(x)
    ys = np.array(y)
    for u in np.ndindex(*lat.shape):
        u = np.array(u)
        tot += w[tuple((xs - u) % lat.N)] * w[tuple((ys - u) % lat.N)]
    return float(tot * lat.cell_volume)


def convolution_at(lat: LatticeConfig, f: np.ndarray, g: np.ndarray, x: Sequence[int]) -> float:
    """(f * g)(x) = h^d sum_y f(x - y) g(y) by direct summation."""
    tot = 0.0
    xs = np.array(x)
    for y in np.ndindex(*lat.shape):
        tot += f[tuple((xs - np.array(y)) % lat.N)] * g[y]
    return float(tot * lat.cell_volume)


def scalar_root(m: float, alpha: float, c: float, R: float, kr) -> float:
    """Root of m^2 u + alpha K_R(c e^{alpha u}) = 0 by bisection."""
    if alpha == 0:
        return 0.0

    def f(u):
        y = c * math.exp(alpha * u) if alpha * u < 700 else math.inf
        k = kr(min(y, 1e300))
        return m * m * u + alpha * k

    lo, hi = -1.0, 1.0
    while f(lo) > 0:
        lo *= 2
    while f(hi) < 0:
        hi *= 2
    return optimize.bisect(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=400)


def green_closed_form(r: float, d: int, m: float) -> float:
    if d == 1:
        return math.exp(-m * r) / (2 * m)
    if d == 3:
        return math.exp(-m * r) / (4 * math.pi * r)
    raise ValueError("closed form only for d = 1, 3")


def periodized_weight_integral(L: float, ell: float) -> float:
    """int over [-L/2, L/2] of (1 + x^2)^(-ell) by adaptive quadrature."""
    return integrate.quad(lambda x: (1 + x * x) ** (-ell), -L / 2, L / 2, epsabs=0, epsrel=1e-13)[0]


def discrete_walk_expectation(lat: LatticeConfig, V: np.ndarray, source: np.ndarray, dt: float) -> np.ndarray:
    """Exact mean score of the lazy lattice walk used by the Feynman-Kac estimator.

    theta_dt = dt * source + exp(-(m^2 + V) dt) * (P theta_dt), P the lazy
    nearest-neighbour transition with jump probability 2 d dt / h^2.
    """
    n = lat.N ** lat.d
    p = 2 * lat.d * dt / lat.h ** 2
    if p > 1 + 1e-12:
        raise ValueError("dt too large for the lattice walk")
    idx = np.arange(n).reshape(lat.shape)
    rows, cols, vals = [idx.ravel()], [idx.ravel()], [np.full(n, 1.0 - p)]
    for ax in range(lat.d):
        for sh in (1, -1):
            rows.append(idx.ravel())
            cols.append(np.roll(idx, -sh, axis=ax).ravel())
            vals.append(np.full(n, p / (2 * lat.d)))
    P = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    kill = sp.diags(np.exp(-(lat.m ** 2 + np.asarray(V).ravel()) * dt))
    A = sp.identity(n, format="csc") - (kill @ P).tocsc()
    return spla.spsolve(A, dt * np.asarray(source).ravel()).reshape(lat.shape)
