"""Domain types: potentials, monotone configurations, ensembles and trajectories.

Positions are always stored on the universal cover (lifted to the reals);
reduction to the circle happens only inside metrics and reports.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ParameterError, ShapeError

TWO_PI = 2.0 * np.pi

Field2 = Callable[[np.ndarray, np.ndarray], np.ndarray]
Field1 = Callable[[np.ndarray], np.ndarray]


def _zero2(t, x):
    return np.zeros(np.broadcast(np.asarray(t), np.asarray(x)).shape)


def _zero1(x):
    return np.zeros(np.shape(x))


@dataclass(frozen=True)
class PotentialModel:
    """External potential V(t, x) and pair interaction W(x) with derivatives.

    All callables are vectorized over numpy arrays. ``V_xx`` and ``W_xx`` are
    used by the Newton solvers; when omitted they are replaced by centered
    differences of the first derivatives.
    """

    V: Field2
    V_x: Field2
    W: Field1
    W_x: Field1
    V_xx: Field2 | None = None
    W_xx: Field1 | None = None
    params: dict = field(default_factory=dict)
    v_bound: float | None = None
    # (w0, w1) when W(x) = w0 + w1 cos(2 pi x); enables O(n) pair sums
    w_cos: tuple | None = None

    def vxx(self, t, x):
        if self.V_xx is not None:
            return self.V_xx(t, x)
        h = 1e-5
        return (self.V_x(t, x + h) - self.V_x(t, x - h)) / (2 * h)

    def wxx(self, x):
        if self.W_xx is not None:
            return self.W_xx(x)
        h = 1e-5
        return (self.W_x(x + h) - self.W_x(x - h)) / (2 * h)

    def sup_abs_v(self) -> float:
        """Upper bound on |V|; sampled with a safety margin when not declared."""
        if self.v_bound is not None:
            return float(self.v_bound)
        g = np.linspace(0.0, 1.0, 257)
        tt, xx = np.meshgrid(g, g, indexing="ij")
        return 1.01 * float(np.max(np.abs(self.V(tt, xx)))) + 1e-12

    @property
    def has_interaction(self) -> bool:
        return bool(self.params.get("kappa", 1.0) != 0.0)

    def cache_key(self) -> str:
        return ",".join(f"{k}={self.params[k]!r}" for k in sorted(self.params))


def make_potential(a: float = 0.0, b: float = 0.0, kappa: float = 0.0) -> PotentialModel:
    """Forced pendulum family without positivity checks (zeros allowed).

    V(t,x) = a cos(2 pi x) + b cos(2 pi x) cos(2 pi t),  W(x) = -kappa sin^2(pi x).
    """
    a, b, kappa = float(a), float(b), float(kappa)

    def amp(t):
        return a + b * np.cos(TWO_PI * np.asarray(t, dtype=float))

    def V(t, x):
        return amp(t) * np.cos(TWO_PI * np.asarray(x, dtype=float))

    def V_x(t, x):
        return -TWO_PI * amp(t) * np.sin(TWO_PI * np.asarray(x, dtype=float))

    def V_xx(t, x):
        return -TWO_PI**2 * amp(t) * np.cos(TWO_PI * np.asarray(x, dtype=float))

    def W(x):
        return -kappa * np.sin(np.pi * np.asarray(x, dtype=float)) ** 2

    # -kappa sin^2(pi x) = -kappa/2 (1 - cos 2 pi x)
    def W_x(x):
        return -kappa * np.pi * np.sin(TWO_PI * np.asarray(x, dtype=float))

    def W_xx(x):
        return -kappa * TWO_PI * np.pi * np.cos(TWO_PI * np.asarray(x, dtype=float))

    return PotentialModel(
        V=V, V_x=V_x, W=W, W_x=W_x, V_xx=V_xx, W_xx=W_xx,
        params={"a": a, "b": b, "kappa": kappa},
        v_bound=abs(a) + abs(b),
        w_cos=(-0.5 * kappa, 0.5 * kappa),
    )


def make_forced_pendulum(a: float, b: float, kappa: float) -> PotentialModel:
    """The forced pendulum with attractive-in-minimization interaction.

    Raises
    ------
    ParameterError
        If any amplitude is not strictly positive.
    """
    for name, val in (("a", a), ("b", b), ("kappa", kappa)):
        if not np.isfinite(val) or val <= 0:
            raise ParameterError(f"{name} must be > 0, got {val!r}")
    return make_potential(a, b, kappa)


def free_potential() -> PotentialModel:
    """V = 0 and W = 0."""
    return make_potential(0.0, 0.0, 0.0)


def is_mon(m, tol: float = 1e-12) -> bool:
    """True when ``m`` is nondecreasing with m[-1] <= m[0] + 1."""
    m = np.asarray(m, dtype=float)
    if m.size == 0:
        return False
    return bool(np.all(np.diff(m) >= -tol) and m[-1] <= m[0] + 1.0 + tol)


@dataclass(frozen=True)
class MonotoneConfiguration:
    """Quantile representative of a particle distribution on the circle."""

    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=float).reshape(-1)
        if m.size == 0:
            raise ShapeError("empty configuration")
        if not np.all(np.isfinite(m)):
            raise ParameterError("configuration has non-finite entries")
        if not is_mon(m, tol=1e-12):
            raise ParameterError("configuration violates the Mon conditions")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @property
    def n(self) -> int:
        return int(self.m.size)

    @property
    def in_mon0(self) -> bool:
        return bool(0.0 <= self.m[0] <= 1.0)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.m, dtype=dtype)

    def __len__(self):
        return self.n


@dataclass(frozen=True)
class EnsembleState:
    """Lifted positions and velocities of n particles at time t."""

    t: float
    q: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(-1)
        v = np.array(self.v, dtype=float).reshape(-1)
        if q.size < 1 or q.shape != v.shape:
            raise ShapeError(f"q and v must have equal length >= 1, got {q.size}, {v.size}")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(v))):
            raise ParameterError("non-finite ensemble state")
        q.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "t", float(self.t))

    @property
    def n(self) -> int:
        return int(self.q.size)


@dataclass(frozen=True)
class DiscreteTrajectory:
    """Positions of an ensemble on the grid t0 + k*dt, one row per time."""

    t0: float
    dt: float
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        if nodes.ndim == 1:
            nodes = nodes[:, None]
        if nodes.ndim != 2 or nodes.shape[0] < 2:
            raise ShapeError(f"need at least 2 rows of positions, got shape {nodes.shape}")
        if not self.dt > 0:
            raise ParameterError(f"dt must be > 0, got {self.dt}")
        if not np.all(np.isfinite(nodes)):
            raise ParameterError("trajectory has non-finite nodes")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def steps(self) -> int:
        return self.nodes.shape[0] - 1

    @property
    def n(self) -> int:
        return self.nodes.shape[1]

    @property
    def t1(self) -> float:
        return self.t0 + self.steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    def velocities(self) -> np.ndarray:
        """Node velocities: centered differences inside, one-sided at the ends."""
        return np.gradient(self.nodes, self.dt, axis=0, edge_order=2) if self.steps >= 2 \
            else np.repeat(np.diff(self.nodes, axis=0) / self.dt, 2, axis=0)


@dataclass(frozen=True)
class ProjectionSpec:
    """Block count for the conditional-expectation projection onto step functions."""

    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ParameterError(f"block count must be an integer >= 1, got {self.n!r}")


def project_ensemble(m, spec: ProjectionSpec | int) -> np.ndarray:
    """Average a step function with len(m) equal pieces over n equal blocks.

    The input is read as the step function taking value m[i] on
    [i/L, (i+1)/L); the output is its L2-orthogonal projection onto
    functions constant on [j/n, (j+1)/n).
    """
    if not isinstance(spec, ProjectionSpec):
        spec = ProjectionSpec(spec)
    m = np.asarray(m, dtype=float).reshape(-1)
    if m.size == 0:
        raise ShapeError("cannot project an empty array")
    n, L = spec.n, m.size
    if L == n:
        return m.copy()
    if L % n == 0:
        return m.reshape(n, L // n).mean(axis=1)
    # overlap lengths of [i/L,(i+1)/L) with [j/n,(j+1)/n), in units of 1/(nL)
    src = np.arange(L + 1) * n
    dst = np.arange(n + 1) * L
    lo = np.maximum(src[None, :-1], dst[:-1, None])
    hi = np.minimum(src[None, 1:], dst[1:, None])
    weights = np.clip(hi - lo, 0, None).astype(float)
    return weights @ m / L


def interaction_energy(p: PotentialModel, q) -> float:
    """The mean-field interaction (1/2n^2) sum_ij W(q_i - q_j) (nonpositive)."""
    q = np.asarray(q, dtype=float)
    n = q.size
    return float(0.5 * np.sum(p.W(q[:, None] - q[None, :])) / n**2)


@dataclass
class HypothesisCheck:
    name: str
    passed: bool
    worst_point: tuple
    worst_value: float


@dataclass
class PotentialReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list:
        return [c.name for c in self.checks if not c.passed]

    def __getitem__(self, name) -> HypothesisCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def _check(name, values, points, ok_mask):
    """Build a check from per-sample violation magnitudes."""
    values = np.asarray(values, dtype=float).reshape(-1)
    ok_mask = np.asarray(ok_mask, dtype=bool).reshape(-1)
    idx = int(np.argmax(values)) if values.size else 0
    pt = tuple(float(np.asarray(p).reshape(-1)[idx]) for p in points)
    return HypothesisCheck(name, bool(ok_mask.all()), pt, float(values[idx]))


def validate_potential(p: PotentialModel, samples: int = 64) -> PotentialReport:
    """Check the standing hypotheses on (V, W) at sampled points.

    Each entry of the report carries the worst violating sample, so a
    failing report says where the hypothesis breaks.
    """
    if samples < 16:
        raise ParameterError(f"samples must be >= 16, got {samples}")
    g = (np.arange(samples) + 0.37) / samples
    tt, xx = np.meshgrid(g, g, indexing="ij")
    checks = []

    v0 = p.V(tt, xx)
    d = np.abs(p.V(tt + 1.0, xx) - v0)
    checks.append(_check("V periodic in t", d, (tt, xx), d <= 1e-12))
    d = np.abs(p.V(tt, xx + 1.0) - v0)
    checks.append(_check("V periodic in x", d, (tt, xx), d <= 1e-12))

    x = np.concatenate([g - 0.5, [0.5]])
    d = np.abs(p.W(x) - p.W(-x))
    checks.append(_check("W even", d, (x,), d <= 1e-12))
    d = np.abs(p.W(x + 1.0) - p.W(x))
    checks.append(_check("W periodic", d, (x,), d <= 1e-12))
    w = p.W(x)
    checks.append(_check("W <= 0", w, (x,), w <= 0.0))
    w0 = float(p.W(np.array(0.0)))
    checks.append(HypothesisCheck("W(0) = 0", abs(w0) <= 1e-15, (0.0,), abs(w0)))
    away = np.abs(x - np.round(x)) >= 1e-3
    xa = x[away]
    wa = p.W(xa)
    checks.append(_check("W < 0 away from integers", wa, (xa,), wa < 0.0))
    h = 1e-4
    d2 = float((p.W(np.array(h)) - 2 * w0 + p.W(np.array(-h))) / h**2)
    checks.append(HypothesisCheck("W'' (0) < 0", d2 < 0.0, (0.0,), d2))

    h = 1e-5
    fd = (p.V(tt, xx + h) - p.V(tt, xx - h)) / (2 * h)
    an = p.V_x(tt, xx)
    scale = max(float(np.max(np.abs(an))), float(np.max(np.abs(fd))), 1e-300)
    err = np.abs(an - fd) / scale
    checks.append(_check("V_x matches finite differences", err, (tt, xx), err <= 1e-6))
    fd = (p.W(x + h) - p.W(x - h)) / (2 * h)
    an = p.W_x(x)
    scale = max(float(np.max(np.abs(an))), float(np.max(np.abs(fd))), 1e-300)
    err = np.abs(an - fd) / scale
    checks.append(_check("W_x matches finite differences", err, (x,), err <= 1e-6))
    return PotentialReport(checks)
