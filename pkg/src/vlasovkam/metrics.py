"""Distances between particle configurations on the circle.

All inputs are lifted positions; every function here reduces them modulo 1
before comparing.  The Wasserstein distance between two uniform empirical
measures on the circle is computed by quantile alignment over cyclic cuts,
with an exhaustive permutation search kept alongside as an oracle.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import MonotoneConfiguration
from .errors import ParameterError, ShapeError


def _frac(x) -> np.ndarray:
    """Reduce to [0, 1); guards the case where fmod of a tiny negative rounds to 1."""
    r = np.mod(np.asarray(x, dtype=float), 1.0)
    return np.where(r >= 1.0, 0.0, r)


def circle_dist(a, b):
    """Distance on R/Z, vectorized; values lie in [0, 1/2]."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    r = np.abs(d - np.round(d))
    return float(r) if r.ndim == 0 else r


def _pair(m, mbar):
    m = np.asarray(m, dtype=float).reshape(-1)
    mbar = np.asarray(mbar, dtype=float).reshape(-1)
    if m.shape != mbar.shape:
        raise ShapeError(f"length mismatch: {m.size} vs {mbar.size}")
    if m.size == 0:
        raise ShapeError("empty configuration")
    return m, mbar


def dist_Z(m, mbar) -> float:
    """Root-mean-square circle distance between matched particles."""
    m, mbar = _pair(m, mbar)
    return float(np.sqrt(np.mean(circle_dist(m, mbar) ** 2)))


def monotone_rearrange(positions) -> MonotoneConfiguration:
    """Sort the positions reduced to [0, 1)."""
    x = np.asarray(positions, dtype=float).reshape(-1)
    if x.size == 0:
        raise ShapeError("empty configuration")
    return MonotoneConfiguration(np.sort(_frac(x)))


def _cut_table(q: np.ndarray) -> np.ndarray:
    """Row j lists q cyclically shifted by j with +1 added past the wrap."""
    n = q.size
    idx = np.arange(n)[None, :] + np.arange(n)[:, None]
    return q[idx % n] + idx // n


def dist_weak(m, mbar) -> float:
    """Circle 2-Wasserstein distance between the two empirical measures.

    Scans every cyclic cut j of the first quantile array and integer
    offsets z in {-1, 0, 1}; the optimal coupling between uniform
    empirical measures on the circle is among these matchings.
    """
    m, mbar = _pair(m, mbar)
    q = np.sort(_frac(m))
    qbar = np.sort(_frac(mbar))
    # fixed argument order makes the result exactly symmetric
    if tuple(qbar) < tuple(q):
        q, qbar = qbar, q
    lifted = _cut_table(q)
    best = np.inf
    for z in (-1.0, 0.0, 1.0):
        sq = np.mean((lifted + z - qbar[None, :]) ** 2, axis=1)
        best = min(best, float(np.min(sq)))
    return float(np.sqrt(best))


@lru_cache(maxsize=16)
def _perms(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n))), dtype=np.intp)


def dist_weak_bruteforce(m, mbar) -> float:
    """Exhaustive minimum over all matchings; an oracle for small n (n <= 8)."""
    m, mbar = _pair(m, mbar)
    if m.size > 8:
        raise ParameterError("brute force is limited to n <= 8")
    cost = circle_dist(m[:, None], mbar[None, :]) ** 2
    perms = _perms(m.size)
    totals = cost[perms, np.arange(m.size)[None, :]].sum(axis=1)
    return float(np.sqrt(np.min(totals) / m.size))


def dist_to_point(m, x: float) -> float:
    """Circle W2 between an empirical measure and the Dirac mass at x."""
    m = np.asarray(m, dtype=float).reshape(-1)
    return float(np.sqrt(np.mean(circle_dist(m, x) ** 2)))


@dataclass(frozen=True)
class CircleHistogram:
    bins: int
    mass: np.ndarray

    def __post_init__(self):
        if self.bins < 2:
            raise ParameterError(f"bins must be >= 2, got {self.bins}")
        mass = np.asarray(self.mass, dtype=float)
        if mass.shape != (self.bins,) or np.any(mass < 0):
            raise ParameterError("mass must be a nonnegative array of length bins")
        if abs(mass.sum() - 1.0) > 1e-12:
            raise ParameterError(f"masses sum to {mass.sum()!r}, expected 1")
        object.__setattr__(self, "mass", mass)


def pushforward_histogram(m, bins: int) -> CircleHistogram:
    """Fraction of particles per bin [k/bins, (k+1)/bins) of the circle."""
    if int(bins) != bins or bins < 2:
        raise ParameterError(f"bins must be an integer >= 2, got {bins!r}")
    bins = int(bins)
    x = _frac(np.asarray(m, dtype=float).reshape(-1))
    if x.size == 0:
        raise ShapeError("empty configuration")
    k = np.minimum((x * bins).astype(np.intp), bins - 1)
    counts = np.bincount(k, minlength=bins)
    return CircleHistogram(bins, counts / x.size)


def window_fraction(m, x: float, delta: float) -> float:
    """Fraction of particles within circle distance delta of x."""
    m = np.asarray(m, dtype=float).reshape(-1)
    return float(np.mean(circle_dist(m, x) <= delta))


def concentration_witness(m, delta: float) -> float | None:
    """A particle position carrying at least 1 - delta of the mass within delta.

    Candidates are the particle positions in index order; the first that
    works is returned (reduced to [0, 1)), otherwise None.
    """
    if not (0.0 < delta <= 0.125):
        raise ParameterError(f"delta must lie in (0, 1/8], got {delta!r}")
    m = np.asarray(m, dtype=float).reshape(-1)
    if m.size == 0:
        raise ShapeError("empty configuration")
    near = circle_dist(m[:, None], m[None, :]) <= delta
    # integer counts avoid rounding trouble at the threshold
    ok = near.sum(axis=1) >= (1.0 - delta) * m.size - 1e-9
    hits = np.flatnonzero(ok)
    if hits.size == 0:
        return None
    return float(_frac(m[hits[0]]))
