"""Log-linear decay fits and small statistics helpers shared by the experiments."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class InsufficientData(ValueError):
    """Fewer usable points than a fit needs."""


@dataclass
class DecayFit:
    points: list
    slope: float
    intercept: float
    r2: float
    usable_range: tuple
    slope_stderr: float = float("nan")
    n_usable: int = 0
    reliable: bool = True

    @property
    def amplitude(self) -> float:
        return math.exp(self.intercept)

    @property
    def rate(self) -> float:
        return -self.slope

    def to_dict(self) -> dict:
        d = asdict(self)
        d["points"] = [list(map(float, p)) for p in self.points]
        d["usable_range"] = list(self.usable_range)
        return d


def fit_decay(r: Sequence[float], values: Sequence[float], stderr: Optional[Sequence[float]] = None,
              min_points: int = 3, refuse: bool = True, floor: float = 3.0) -> DecayFit:
    """Fit log(value) = intercept + slope * r.

    With ``stderr`` the fit is weighted least squares on the log with
    delta-method variances (stderr/value)^2, and points with
    value <= floor * stderr are dropped.  Without it, plain least squares on
    the positive values.
    """
    r = np.asarray(r, dtype=float)
    v = np.asarray(values, dtype=float)
    se = None if stderr is None else np.asarray(stderr, dtype=float)
    pts = [(float(a), float(b), float("nan") if se is None else float(c))
           for a, b, c in zip(r, v, se if se is not None else [0] * len(r))]
    if se is None:
        use = v > 0
        w = np.ones_like(v)
    else:
        use = v > floor * se
        w = v ** 2 / np.maximum(se ** 2, 1e-300)
    n = int(use.sum())
    if n < min_points:
        if refuse:
            raise InsufficientData(f"only {n} usable points (need {min_points})")
        return DecayFit(pts, float("nan"), float("nan"), float("nan"), (float("nan"),) * 2,
                        n_usable=n, reliable=False)
    x = r[use]
    y = np.log(v[use])
    wt = w[use]
    W = wt.sum()
    xm = (wt * x).sum() / W
    ym = (wt * y).sum() / W
    sxx = (wt * (x - xm) ** 2).sum()
    slope = float((wt * (x - xm) * (y - ym)).sum() / sxx)
    icpt = float(ym - slope * xm)
    resid = y - icpt - slope * x
    ss_res = float((wt * resid ** 2).sum())
    ss_tot = float((wt * (y - ym) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    if se is not None:
        slope_se = math.sqrt(1.0 / sxx)
    elif n > 2:
        slope_se = math.sqrt(ss_res / (n - 2) / sxx)
    else:
        slope_se = float("nan")
    return DecayFit(pts, slope, icpt, float(r2), (float(x.min()), float(x.max())), slope_se, n, True)


def isotonic_decreasing(y: Sequence[float], w: Sequence[float] = None) -> np.ndarray:
    """Pool-adjacent-violators fit of a nonincreasing sequence."""
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    blocks = []  # (mean, weight, count)
    for yi, wi in zip(y, w):
        blocks.append([yi, wi, 1])
        while len(blocks) > 1 and blocks[-2][0] < blocks[-1][0]:
            m2, w2, c2 = blocks.pop()
            m1, w1, c1 = blocks.pop()
            blocks.append([(m1 * w1 + m2 * w2) / (w1 + w2), w1 + w2, c1 + c2])
    return np.concatenate([[m] * c for m, _, c in blocks])


def monotone_within(y, stderr, nsigma: float = 2.0) -> bool:
    """True if y is nonincreasing up to ``nsigma`` standard errors."""
    y = np.asarray(y, dtype=float)
    se = np.asarray(stderr, dtype=float)
    fit = isotonic_decreasing(y, 1.0 / np.maximum(se, 1e-300) ** 2)
    return bool(np.all(np.abs(y - fit) <= nsigma * se + 1e-300))


def jackknife_stderr(samples: np.ndarray, stat: Callable[[np.ndarray], float], blocks: int = None) -> float:
    """Delete-block jackknife standard error of ``stat`` over the first axis."""
    n = len(samples)
    nb = n if blocks is None else min(blocks, n)
    edges = np.linspace(0, n, nb + 1).astype(int)
    vals = np.empty(nb)
    for b in range(nb):
        keep = np.r_[0:edges[b], edges[b + 1]:n]
        vals[b] = stat(samples[keep])
    return float(math.sqrt((nb - 1) / nb * np.sum((vals - vals.mean()) ** 2)))


def map_ordered(fn: Callable, items: Iterable, threads: int = 1) -> list:
    """Map ``fn`` over ``items``; results come back in input order for any thread count."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))
