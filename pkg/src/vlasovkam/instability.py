"""Cohomology schedules, concentration conditions and windowed diffusion runs.

A schedule interpolates target classes c_0, c_1, ... by a gap-filler
sequence f_s and assigns each f_s a window [Tcum[s-1], Tcum[s]] of integer
length.  The class switch from f_s to f_{s+1} is carried by the one-form
(f_{s+1} - f_s) * eta_s(t) dx, with eta_s a cubic smoothstep rising on the
last unit of window s.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.interpolate import PchipInterpolator

from .action import (ActionProblem, MeanFieldTerminal, TerminalBoundary,
                     _descend, _Objective, _pick, action_gradient, as_terminal, discrete_action,
                     minimize_terminal)
from .core import DiscreteTrajectory, PotentialModel
from .errors import (DiffusionError, EstimateError, ExtensionError, ParameterError,
                     ScheduleError)
from .metrics import circle_dist, concentration_witness, dist_to_point
from .weakkam import (MatherSample, TransitionCost, ValueFunction, build_transition_cost,
                      gap_detector, mather_set_samples, solve_weak_kam)


# ---------------------------------------------------------------- schedules

def build_gap_filler(c_list, k_list) -> np.ndarray:
    """Uniformly spaced classes c_i + j (c_{i+1} - c_i)/k_i, closed by the last target.

    Spacings are formed with exact rational arithmetic when the inputs are
    decimal literals, so the within-block step bound holds exactly.
    """
    c_list = [float(c) for c in c_list]
    k_list = list(k_list)
    if len(k_list) != max(len(c_list) - 1, 0):
        raise ParameterError(f"need {len(c_list) - 1} k values, got {len(k_list)}")
    for k in k_list:
        if int(k) != k or k < 1:
            raise ParameterError(f"k_i must be integers >= 1, got {k!r}")
    if not c_list:
        raise ParameterError("empty class list")
    out = []
    for i, k in enumerate(k_list):
        a = Fraction(str(c_list[i]))
        b = Fraction(str(c_list[i + 1]))
        for j in range(int(k)):
            out.append(float(a + j * (b - a) / int(k)))
    out.append(c_list[-1])
    f = np.array(out)
    _check_gap_filler(f, c_list, k_list)
    return f


def _check_gap_filler(f, c_list, k_list):
    s = 0
    for i, k in enumerate(k_list):
        block = f[s:s + k + 1]
        if block[0] != c_list[i]:
            raise ScheduleError(f"block {i} does not start at c_{i}")
        step = abs(c_list[i + 1] - c_list[i]) / k
        d = np.diff(block)
        if np.any(np.abs(d) > step * (1 + 1e-12) + 1e-15):
            raise ScheduleError(f"block {i} violates the step bound {step}")
        if not (np.all(d >= 0) or np.all(d <= 0)):
            raise ScheduleError(f"block {i} is not monotone")
        s += k


@dataclass
class CohomologySchedule:
    c_list: np.ndarray
    eps_list: np.ndarray
    k_list: np.ndarray
    t_prime: np.ndarray
    t_dprime: np.ndarray
    f: np.ndarray
    T: np.ndarray
    Tcum: np.ndarray
    r_U: np.ndarray
    r_V: np.ndarray
    delta: np.ndarray
    block: np.ndarray

    @property
    def windows(self) -> int:
        return int(self.f.size)

    @property
    def horizon(self) -> int:
        return int(self.Tcum[-1])

    def window(self, s: int) -> tuple[int, int]:
        return (int(self.Tcum[s - 1]) if s > 0 else 0, int(self.Tcum[s]))

    def window_of(self, t: float) -> int:
        """Index of the window containing t (right-closed, first window left-closed)."""
        s = int(np.searchsorted(self.Tcum, t - 1e-9))
        return min(s, self.windows - 1)

    def to_dict(self) -> dict:
        return {
            "classes": [float(c) for c in self.c_list],
            "eps": [float(e) for e in self.eps_list],
            "k": [int(k) for k in self.k_list],
            "t_prime": [int(t) for t in self.t_prime],
            "t_dprime": [int(t) for t in self.t_dprime],
            "radii": [float(self.r_U[0]), float(self.r_V[0])],
            "f": [float(x) for x in self.f],
            "T": [int(x) for x in self.T],
            "Tcum": [int(x) for x in self.Tcum],
            "delta": [float(x) for x in self.delta],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "CohomologySchedule":
        r = d.get("radii", [0.1, 0.05])
        return build_schedule(d["classes"], d["eps"], d["k"], d["t_prime"], d["t_dprime"],
                              r_U=r[0], r_V=r[1])


def _as_int_times(name, xs):
    out = []
    for x in xs:
        if abs(x - round(x)) > 1e-9:
            raise ScheduleError(f"{name} entries must be integers, got {x!r}")
        out.append(int(round(x)))
    return np.array(out, dtype=np.int64)


def block_start_window(start, t_dprime, t_prime_next, k: int) -> int:
    """Length of the first window of a block: t'' - start - (k-1)k + (t'_next - t'')."""
    return int(t_dprime - start - (k - 1) * k + (t_prime_next - t_dprime))


def build_schedule(c_list, eps_list, k_list, t_prime, t_dprime, r_U: float = 0.1,
                   r_V: float = 0.05, shadow_times=None) -> CohomologySchedule:
    """Timetable for a gap-filler sequence.

    Within block i the windows after the first have length k_i; the first
    window of block i has length

        t_i'' - t_i' - (k_i - 1) k_i + (t_{i+1}' - t_i''),

    with the first block measured from time 0, so block i >= 1 starts at
    t_i'.  The last class keeps its window up to t_last''.

    Raises
    ------
    ScheduleError
        Naming the violated inequality.
    """
    c_list = np.asarray(c_list, dtype=float).reshape(-1)
    m = c_list.size
    eps_list = np.asarray(eps_list, dtype=float).reshape(-1)
    k_list = np.asarray(k_list, dtype=np.int64).reshape(-1)
    tp = _as_int_times("t_prime", np.asarray(t_prime, dtype=float).reshape(-1))
    tpp = _as_int_times("t_dprime", np.asarray(t_dprime, dtype=float).reshape(-1))
    if not (eps_list.size == tp.size == tpp.size == m):
        raise ParameterError("classes, eps, t_prime and t_dprime must have equal lengths")
    if np.any(eps_list <= 0):
        raise ParameterError("eps entries must be > 0")
    if not (0 < r_V < r_U):
        raise ParameterError(f"need 0 < r_V < r_U, got r_U={r_U}, r_V={r_V}")
    delta = (r_U - r_V) / 64.0
    if delta > 1.0 / 64:
        raise ScheduleError(f"delta = (r_U - r_V)/64 = {delta} exceeds 1/64")
    for i in range(m):
        if tpp[i] <= tp[i]:
            raise ScheduleError(f"t_dprime[{i}] = {tpp[i]} must exceed t_prime[{i}] = {tp[i]}")
        if shadow_times is not None and tpp[i] - tp[i] < shadow_times[i]:
            raise ScheduleError(
                f"t_dprime[{i}] - t_prime[{i}] = {tpp[i] - tp[i]} < shadow time {shadow_times[i]}")
    for i in range(m - 1):
        if tp[i + 1] - tpp[i] < k_list[i] ** 2:
            raise ScheduleError(
                f"t_prime[{i + 1}] - t_dprime[{i}] = {tp[i + 1] - tpp[i]} < k_{i}^2 = {k_list[i] ** 2}")
    f = build_gap_filler(c_list, k_list)
    T, blk = [], []
    for i in range(m - 1):
        k = int(k_list[i])
        start = 0 if i == 0 else tp[i]
        T.append(block_start_window(start, tpp[i], tp[i + 1], k))
        blk.append(i)
        T.extend([k] * (k - 1))
        blk.extend([i] * (k - 1))
    last_start = 0 if m == 1 else tp[m - 1]
    T.append(int(tpp[m - 1] - last_start))
    blk.append(m - 1)
    T = np.array(T, dtype=np.int64)
    if np.any(T < 1):
        s = int(np.flatnonzero(T < 1)[0])
        raise ScheduleError(f"window {s} has length {T[s]} < 1")
    S = f.size
    return CohomologySchedule(c_list, eps_list, k_list, tp, tpp, f, T, np.cumsum(T),
                              np.full(S, float(r_U)), np.full(S, float(r_V)),
                              np.full(S, delta), np.array(blk))


# ------------------------------------------------------------- step forms

def smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


@dataclass
class StepFormSurrogate:
    """omega = sum_s dc_s * eta_s(t) dx with eta_s rising on [Tcum[s]-1, Tcum[s]]."""

    dc: np.ndarray
    ramp_end: np.ndarray

    @classmethod
    def from_schedule(cls, sched: CohomologySchedule) -> "StepFormSurrogate":
        return cls(np.diff(sched.f), sched.Tcum[:-1].astype(float))

    def eta(self, s: int, t):
        return smoothstep(np.asarray(t, dtype=float) - (self.ramp_end[s] - 1.0))

    def coefficient(self, t):
        """sum_s dc_s eta_s(t): the class shift carried by the form at time t."""
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for s in range(self.dc.size):
            out = out + self.dc[s] * self.eta(s, t)
        return out

    def on_ramp(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        hit = np.zeros(t.shape, dtype=bool)
        for e in self.ramp_end:
            hit |= (t >= e - 1.0 - 1e-9) & (t <= e + 1e-9)
        return hit


# -------------------------------------------------------------- extensions

@dataclass
class ExtensionPath:
    """A C^1 single-point path on the cover shadowing a concentrated ensemble."""

    t: np.ndarray
    q: np.ndarray
    witness: np.ndarray
    eps: np.ndarray
    parent: DiscreteTrajectory | None = None
    _interp: PchipInterpolator | None = field(default=None, repr=False)

    def __post_init__(self):
        if self._interp is None and self.t.size >= 2:
            self._interp = PchipInterpolator(self.t, self.q)

    def __call__(self, t):
        return self._interp(t)

    def velocity(self, t=None):
        t = self.t if t is None else t
        return self._interp.derivative()(t)


def build_extension(traj: DiscreteTrajectory, sched: CohomologySchedule,
                    t_from: float | None = None) -> ExtensionPath:
    """Follow the concentration witness of each row and lift it continuously.

    The path starts at Tcum[0] - 1, or earlier when every row from some
    earlier time on has a witness.  The witness x_t uses the window's
    delta; its lift is the one nearest to the previous value (the first is
    nearest to the witnessing particle).  A monotone C^1 cubic interpolates
    the lifts.

    Raises
    ------
    ExtensionError
        When some row has no witness or a shadowing bound fails.
    """
    times = traj.times
    if t_from is None:
        # from Tcum[0] - 1 on, or earlier if every later row already concentrates
        t_from = max(0.0, sched.Tcum[0] - 1.0)
        k = int(np.searchsorted(times, t_from - 1e-9))
        while k > 0 and concentration_witness(
                traj.nodes[k - 1], float(sched.delta[sched.window_of(times[k - 1])])) is not None:
            k -= 1
        t_from = float(times[k])
    rows = np.flatnonzero(times >= t_from - 1e-9)
    qs, xs, eps = [], [], []
    prev = None
    for k in rows:
        t = times[k]
        d = float(sched.delta[sched.window_of(t)])
        row = traj.nodes[k]
        x = concentration_witness(row, d)
        if x is None:
            raise ExtensionError(f"no concentration witness at t={t:.6g}", t=float(t))
        if prev is None:
            near = row[np.argmin(circle_dist(row, x))]
            lift = x + np.round(near - x)
        else:
            lift = x + np.round(prev - x)
        qs.append(lift)
        xs.append(x)
        eps.append(d)
        prev = lift
    ext = ExtensionPath(times[rows].copy(), np.array(qs), np.array(xs), np.array(eps), traj)
    for k, t, q, x, e in zip(rows, ext.t, ext.q, ext.witness, ext.eps):
        if dist_to_point(traj.nodes[k], q) >= 4 * e or circle_dist(q, x) >= 4 * e:
            raise ExtensionError(f"shadowing bound fails at t={t:.6g}", t=float(t))
    return ext


def modulated_action(traj: DiscreteTrajectory, ext: ExtensionPath, p: PotentialModel,
                     sched: CohomologySchedule) -> float:
    """Ensemble action at class f_0 minus the surrogate form integrated along q."""
    base = discrete_action(traj, p, float(sched.f[0]))
    return base - form_integral(ext, sched, traj.dt)


def form_integral(ext: ExtensionPath, sched: CohomologySchedule, dt: float | None = None) -> float:
    """sum_s dc_s * integral eta_s(t) q'(t) dt by midpoint increments of q."""
    form = StepFormSurrogate.from_schedule(sched)
    t = ext.t
    if dt is not None and t.size >= 2 and not np.allclose(np.diff(t), dt):
        t = np.arange(ext.t[0], ext.t[-1] + 0.5 * dt, dt)
    q = ext(t)
    mid = 0.5 * (t[1:] + t[:-1])
    return float(np.sum(form.coefficient(mid) * np.diff(q)))


# ------------------------------------------------------------ conditions

@dataclass
class ABReport:
    passed: bool
    first_failure: tuple | None
    failures: list
    a_rows: np.ndarray
    b_rows: np.ndarray

    def to_dict(self):
        return {"passed": self.passed,
                "first_failure": None if self.first_failure is None else
                {"window": self.first_failure[0], "t": self.first_failure[1],
                 "condition": self.first_failure[2]},
                "failures": len(self.failures)}


def _slice_distance(samples: MatherSample, t: float, x):
    xs, _ = samples.slice(t)
    if xs.size == 0:
        return np.full(np.shape(x), 0.5)
    return np.min(circle_dist(np.asarray(x)[..., None], xs), axis=-1)


def check_conditions_AB(traj: DiscreteTrajectory, sched: CohomologySchedule,
                        samples: dict | list) -> ABReport:
    """Check concentration (A) and tube confinement (B) window by window.

    A: on rows with t in [Tcum[s]-1, Tcum[s+1]-1] some x carries mass
    >= 1 - delta_s within delta_s.  B: on rows with t in [Tcum[s]-1,
    Tcum[s]] at least 1 - delta_s of the particles lie within r_V of the
    time slice of the class-f_s Mather samples.
    """
    times = traj.times
    fails = []
    a_rows = np.zeros(times.size, dtype=bool)
    b_rows = np.zeros(times.size, dtype=bool)
    S = sched.windows
    for s in range(S):
        d = float(sched.delta[s])
        lo = sched.Tcum[s] - 1.0
        hi = sched.Tcum[s + 1] - 1.0 if s + 1 < S else times[-1]
        ms = samples[s] if isinstance(samples, list) else samples[float(sched.f[s])]
        for k in np.flatnonzero((times >= lo - 1e-9) & (times <= hi + 1e-9)):
            if concentration_witness(traj.nodes[k], d) is None:
                a_rows[k] = True
                fails.append((s, float(times[k]), "A"))
        for k in np.flatnonzero((times >= lo - 1e-9) & (times <= sched.Tcum[s] + 1e-9)):
            dist = _slice_distance(ms, times[k], traj.nodes[k])
            if np.mean(dist <= sched.r_V[s]) < 1.0 - d:
                b_rows[k] = True
                fails.append((s, float(times[k]), "B"))
    fails.sort(key=lambda x: (x[1], x[0], x[2]))
    return ABReport(not fails, fails[0] if fails else None, fails, a_rows, b_rows)


# ------------------------------------------------------------- penalties

class _RowPenalty:
    """Soft A/B penalty, lam * dt * sum over flagged rows of squared excesses.

    A rows: sum_{i<j} relu(|q_i - q_j|_circle - delta)^2, which vanishes iff
    every pair is within delta (so every particle is a witness).
    B rows: sum_i relu(dist(q_i, Mather slice) - r_V/2)^2.
    """

    def __init__(self, times, a_mask, b_mask, delta, r_V, slices, lam, dt):
        self.times = times
        self.a_mask, self.b_mask = a_mask, b_mask
        self.delta, self.r_V = delta, r_V
        self.slices = slices
        self.lam = lam
        self.w = lam * dt

    def _a_terms(self, row, d):
        diff = row[:, None] - row[None, :]
        wrap = diff - np.round(diff)
        ex = np.maximum(np.abs(wrap) - d, 0.0)
        np.fill_diagonal(ex, 0.0)
        return wrap, ex

    def _b_terms(self, row, xs, r):
        diff = row[:, None] - xs[None, :]
        wrap = diff - np.round(diff)
        j = np.argmin(np.abs(wrap), axis=1)
        w = wrap[np.arange(row.size), j]
        ex = np.maximum(np.abs(w) - 0.5 * r, 0.0)
        return w, ex

    def value(self, X):
        out = np.zeros(X.shape[0])
        for b in range(X.shape[0]):
            tot = 0.0
            for k in np.flatnonzero(self.a_mask):
                _, ex = self._a_terms(X[b, k], self.delta[k])
                tot += 0.5 * np.sum(ex**2)
            for k in np.flatnonzero(self.b_mask):
                _, ex = self._b_terms(X[b, k], self.slices[k], self.r_V[k])
                tot += np.sum(ex**2)
            out[b] = self.w * tot
        return out

    def grad(self, X):
        G = np.zeros_like(X)
        for b in range(X.shape[0]):
            for k in np.flatnonzero(self.a_mask):
                wrap, ex = self._a_terms(X[b, k], self.delta[k])
                G[b, k] += 2 * self.w * np.sum(ex * np.sign(wrap), axis=1)
            for k in np.flatnonzero(self.b_mask):
                w, ex = self._b_terms(X[b, k], self.slices[k], self.r_V[k])
                G[b, k] += 2 * self.w * ex * np.sign(w)
        return G

    def hess(self, X):
        n = X.shape[-1]
        H = np.zeros(X.shape + (n,))
        idx = np.arange(n)
        for b in range(X.shape[0]):
            for k in np.flatnonzero(self.a_mask):
                _, ex = self._a_terms(X[b, k], self.delta[k])
                act = (ex > 0).astype(float)
                H[b, k] += 2 * self.w * (np.diag(act.sum(axis=1)) - act)
            for k in np.flatnonzero(self.b_mask):
                _, ex = self._b_terms(X[b, k], self.slices[k], self.r_V[k])
                H[b, k, idx, idx] += 2 * self.w * (ex > 0)
        return H

    def active_rows(self, X) -> np.ndarray:
        act = np.zeros(X.shape[0], dtype=bool)
        for k in np.flatnonzero(self.a_mask):
            act[k] |= bool(np.any(self._a_terms(X[k], self.delta[k])[1] > 0))
        for k in np.flatnonzero(self.b_mask):
            act[k] |= bool(np.any(self._b_terms(X[k], self.slices[k], self.r_V[k])[1] > 0))
        return act


class _PenalizedObjective(_Objective):
    def __init__(self, base: _Objective, penalty: _RowPenalty):
        self.__dict__.update(base.__dict__)
        self.penalty = penalty

    def value(self, X):
        return super().value(X) + self.penalty.value(X)

    def full_grad(self, X):
        return super().full_grad(X) + self.penalty.grad(X)

    def hess(self, X):
        Dg, Of = super().hess(X)
        H = self.penalty.hess(X)
        Dg = Dg + (H[:, 1:] if self.free_last else H[:, 1:-1])
        return Dg, Of


# ----------------------------------------------------------- class data

@dataclass
class ClassData:
    c: float
    cost: TransitionCost
    u: ValueFunction
    samples: MatherSample

    @property
    def terminal(self) -> MeanFieldTerminal:
        return self.u.terminal()


def prepare_class(p: PotentialModel, c: float, grid_n: int, dt: float, T: int = 16,
                  cache_dir=None) -> ClassData:
    """Transition cost, weak-KAM fixed point and Mather samples for one class."""
    cost = build_transition_cost(p, c, grid_n, dt, cache_dir=cache_dir)
    u = solve_weak_kam(p, c, cost=cost)
    ms = mather_set_samples(p, c, dt=dt, T=T, u=u, cost=cost)
    return ClassData(float(c), cost, u, ms)


def chain_paths(x0, t0: int, periods: int, data: ClassData, dt: float) -> np.ndarray:
    """Piecewise-linear paths through the grid chains started near each particle.

    Used as solver starts on long horizons, where straight or resting
    paths lie far from the minimizer.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    G = data.cost.grid_n
    from .weakkam import _raw
    _, succ = _raw(data.u.values, data.cost.h)
    K1 = int(round(1.0 / dt))
    fr = np.mod(x0, 1.0)
    j = np.round(fr * G).astype(np.int64)
    base = x0 - fr + j / G
    j %= G
    pts = np.empty((periods + 1, x0.size))
    pts[0] = x0
    cur = j
    lift = base
    for s in range(periods):
        nxt = succ[cur]
        lift = lift + (nxt - cur) / G + data.cost.winding[cur, nxt]
        pts[s + 1] = lift
        cur = nxt
    s = np.arange(K1) / K1
    rows = [(1 - s)[:, None] * pts[r][None, :] + s[:, None] * pts[r + 1][None, :]
            for r in range(periods)]
    return np.vstack(rows + [pts[-1][None, :]])


# ------------------------------------------------------------- diffusion

@dataclass
class DiffusionReport:
    ab: ABReport
    el_residual: float
    el_residual_rows: str
    polish_mode: str
    window_actions: list
    penalty_rounds: list
    surrogate_bounds: list
    extension_ok: bool

    def to_dict(self):
        return {"conditions": self.ab.to_dict(), "el_residual": self.el_residual,
                "el_residual_rows": self.el_residual_rows, "polish_mode": self.polish_mode,
                "window_actions": self.window_actions, "penalty_rounds": self.penalty_rounds,
                "surrogate_bounds": self.surrogate_bounds, "extension_ok": self.extension_ok}


@dataclass
class DiffusionResult:
    traj: DiscreteTrajectory
    ext: ExtensionPath | None
    report: DiffusionReport
    velocities: np.ndarray


def _window_masks(times, sched, s, lo_t, hi_t):
    """A and B masks for the rows of one window."""
    S = sched.windows
    a = np.zeros(times.size, dtype=bool)
    b = np.zeros(times.size, dtype=bool)
    for r in range(S):
        lo = sched.Tcum[r] - 1.0
        hi = sched.Tcum[r + 1] - 1.0 if r + 1 < S else np.inf
        a |= (times >= lo - 1e-9) & (times <= hi + 1e-9)
        b |= (times >= lo - 1e-9) & (times <= sched.Tcum[r] + 1e-9) & (r == s)
    return a, b


def windowed_diffusion(p: PotentialModel, M, sched: CohomologySchedule, dt: float = 0.02,
                       grid_n: int = 64, lam: float = 10.0, rounds: int = 3,
                       classes: dict | None = None, polish: bool = True,
                       arc_threshold: float = 0.25, tol: float = 1e-8,
                       max_iter: int = 100_000, terminal=None) -> DiffusionResult:
    """Window-by-window minimization along the schedule, then a global polish.

    Window s minimizes the ensemble action at the frozen class f_s over
    [Tcum[s-1], Tcum[s]] with terminal cost the weak-KAM fixed point of
    f_{s+1} (of f_s for the last window), starting from the previous final
    row.  If A or B fails, a quadratic penalty of weight lam (times 10 per
    round, at most ``rounds`` rounds) is added on the offending window.

    The polish minimizes over the whole horizon starting from the
    concatenation.  When every class has a gap in its Mather slice
    ("closed"), the step forms can be taken closed on the tube, their
    integral depends only on the endpoint, and the polish runs at the last
    class.  Otherwise ("ramp") the class follows f_0 + sum_s dc_s eta_s(t).
    The polished path is kept only if A and B still hold.  ``terminal``
    replaces the weak-KAM terminal costs in every window and the polish.

    Raises
    ------
    DiffusionError
        If a window still violates A or B after the last penalty round.
    """
    m = np.asarray(getattr(M, "m", M), dtype=float).reshape(-1)
    n = m.size
    K1 = int(round(1.0 / dt))
    if abs(K1 * dt - 1.0) > 1e-9:
        raise ParameterError("1/dt must be an integer")
    if classes is None:
        classes = {}
    for c in sorted(set(float(x) for x in sched.f)):
        if c not in classes:
            classes[c] = prepare_class(p, c, grid_n, dt)
    samples = {c: classes[c].samples for c in classes}
    S = sched.windows
    H = sched.horizon
    Ktot = H * K1
    times_all = dt * np.arange(Ktot + 1)
    X = np.empty((Ktot + 1, n))
    X[0] = m
    window_actions, rounds_used, bounds = [], [], []
    form = StepFormSurrogate.from_schedule(sched)
    for s in range(S):
        a, b = sched.window(s)
        k0, k1 = a * K1, b * K1
        fs = float(sched.f[s])
        nxt = float(sched.f[s + 1]) if s + 1 < S else fs
        term = classes[nxt].terminal if terminal is None else as_terminal(terminal)
        prob = ActionProblem(p, fs, float(a), float(b), dt, TerminalBoundary(X[k0]),
                             tol=tol, max_iter=max_iter)
        init = chain_paths(X[k0], a, b - a, classes[fs], dt)
        traj, val = minimize_terminal(prob, term, init=init)
        times = traj.times
        amask, bmask = _window_masks(times, sched, s, a, b)
        rep = _local_ab(traj, sched, samples, s, amask, bmask)
        used = 0
        weight = lam
        while not rep and used < rounds:
            used += 1
            pen = _make_penalty(traj, sched, samples, s, amask, bmask, weight)
            obj = _PenalizedObjective(_Objective(p, fs, float(a), dt, traj.steps, n, term), pen)
            Xs, fv, _ = _descend(obj, np.stack([traj.nodes, init]), tol, max_iter)
            best = _pick(fv, [0, 1])
            traj = DiscreteTrajectory(float(a), dt, Xs[best])
            val = float(obj.value(Xs[best:best + 1])[0] - pen.value(Xs[best:best + 1])[0])
            rep = _local_ab(traj, sched, samples, s, amask, bmask)
            weight *= 10.0
        if not rep:
            raise DiffusionError(f"conditions A/B still fail in window {s} after {used} penalty rounds",
                                 window=s)
        rounds_used.append(used)
        window_actions.append({"window": s, "class": fs, "t0": a, "t1": b, "value": val})
        X[k0:k1 + 1] = traj.nodes
        if s + 1 < S:
            bounds.append(float(abs(form.dc[s]) * sched.r_U[s]))
    traj = DiscreteTrajectory(0.0, dt, X)
    ab = check_conditions_AB(traj, sched, samples)
    mode = "closed" if all(gap_detector(samples[float(c)], 0.0, arc_threshold)[1]
                           for c in sched.f) else "ramp"
    if polish:
        c_prof = float(sched.f[-1]) if mode == "closed" else \
            float(sched.f[0]) + form.coefficient(times_all[:-1] + 0.5 * dt)
        term = classes[float(sched.f[-1])].terminal if terminal is None else as_terminal(terminal)
        obj = _Objective(p, c_prof if np.ndim(c_prof) == 0 else c_prof[:, None], 0.0, dt, Ktot, n, term)
        Xp, _, _ = _descend(obj, X[None], tol, max_iter)
        cand = DiscreteTrajectory(0.0, dt, Xp[0])
        ab2 = check_conditions_AB(cand, sched, samples)
        if ab2.passed or not ab.passed:
            traj, ab = cand, ab2
        else:
            mode = mode + "-rejected"
    G = action_gradient(traj, p, 0.0) if traj.steps >= 2 else np.zeros((0, n))
    inner = np.ones(traj.steps - 1, dtype=bool)
    pen_rows = ab.a_rows[1:-1] | ab.b_rows[1:-1]
    inner &= ~pen_rows
    label = "off-penalty"
    if mode.startswith("ramp"):
        inner &= ~form.on_ramp(traj.times[1:-1])
        label = "off-penalty, off-ramp"
    el = float(np.max(np.abs(G[inner]))) if inner.any() else 0.0
    try:
        ext = build_extension(traj, sched)
        ext_ok = True
    except ExtensionError:
        ext, ext_ok = None, False
    vel = np.gradient(traj.nodes, dt, axis=0, edge_order=2)
    report = DiffusionReport(ab, el, label, mode, window_actions, rounds_used, bounds, ext_ok)
    return DiffusionResult(traj, ext, report, vel)


def _local_ab(traj, sched, samples, s, amask, bmask) -> bool:
    d = float(sched.delta[s])
    times = traj.times
    ms = samples[float(sched.f[s])]
    for k in np.flatnonzero(amask):
        ss = sched.window_of(times[k])
        if concentration_witness(traj.nodes[k], float(sched.delta[ss])) is None:
            return False
    for k in np.flatnonzero(bmask):
        dist = _slice_distance(ms, times[k], traj.nodes[k])
        if np.mean(dist <= sched.r_V[s]) < 1.0 - d:
            return False
    return True


def _make_penalty(traj, sched, samples, s, amask, bmask, weight):
    times = traj.times
    ms = samples[float(sched.f[s])]
    delta = np.array([float(sched.delta[sched.window_of(t)]) for t in times])
    slices = {k: ms.slice(times[k])[0] for k in np.flatnonzero(bmask)}
    for k in slices:
        if slices[k].size == 0:
            slices[k] = np.array([0.0])
    rV = np.full(times.size, float(sched.r_V[s]))
    return _RowPenalty(times, amask, bmask, delta, rV, slices, weight, traj.dt)


# ------------------------------------------------------------- statistics

def mather_statistic(row, vel_row, samples: MatherSample, t: float):
    """min over samples at phase t of dist_weak(row, x) + rms(vel - v).

    Returns (statistic, distance part, velocity part) at the minimizing sample.
    """
    xs, vs = samples.slice(t)
    if xs.size == 0:
        return np.inf, np.inf, np.inf
    row = np.asarray(row, dtype=float)
    vel_row = np.asarray(vel_row, dtype=float)
    d = np.sqrt(np.mean(circle_dist(row[:, None], xs[None, :]) ** 2, axis=0))
    v = np.sqrt(np.mean((vel_row[:, None] - vs[None, :]) ** 2, axis=0))
    j = int(np.argmin(d + v))
    return float(d[j] + v[j]), float(d[j]), float(v[j])


@dataclass
class VisitReport:
    statistic: np.ndarray
    t_at: np.ndarray
    passed: np.ndarray

    @property
    def all_passed(self) -> bool:
        return bool(np.all(self.passed))

    def to_dict(self):
        return {"checkpoints": [{"i": i, "statistic": float(s), "t": float(t), "pass": bool(p)}
                                for i, (s, t, p) in enumerate(zip(self.statistic, self.t_at, self.passed))],
                "all_passed": self.all_passed}


def verify_visits(traj: DiscreteTrajectory, velocities, sched: CohomologySchedule,
                    samples: dict) -> VisitReport:
    """Smallest Mather statistic inside each visiting interval (t_i', t_i'')."""
    times = traj.times
    velocities = np.asarray(velocities, dtype=float)
    m = sched.c_list.size
    stat = np.full(m, np.inf)
    at = np.full(m, np.nan)
    for i in range(m):
        ms = samples[float(sched.c_list[i])]
        rows = np.flatnonzero((times > sched.t_prime[i] + 1e-9) & (times < sched.t_dprime[i] - 1e-9))
        for k in rows:
            val = mather_statistic(traj.nodes[k], velocities[k], ms, times[k])[0]
            if val < stat[i]:
                stat[i], at[i] = val, times[k]
    return VisitReport(stat, at, stat <= sched.eps_list)


def shadow_time(p: PotentialModel, c: float, eps: float, trials=4, n: int = 8,
                dt: float = 0.02, grid_n: int = 64, cap: int = 64, seed: int = 0,
                data: ClassData | None = None, return_report: bool = False):
    """Smallest T in 1, 2, 4, ... such that every trial minimizer gets within eps.

    Each trial starts from a Mon configuration (sorted uniform samples for
    an integer ``trials``, or the given arrays) and minimizes the class-c
    action over [0, T] with the weak-KAM fixed point as terminal cost.

    Raises
    ------
    EstimateError
        When T would exceed ``cap``.
    """
    if not eps > 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    if data is None:
        data = prepare_class(p, c, grid_n, dt)
    if isinstance(trials, (int, np.integer)):
        rng = np.random.default_rng(seed)
        trials = [np.sort(rng.random(n)) for _ in range(int(trials))]
    trials = [np.asarray(getattr(tr, "m", tr), dtype=float) for tr in trials]
    term = data.terminal
    T = 1
    history = []
    while T <= cap:
        ok = True
        for m in trials:
            prob = ActionProblem(p, c, 0.0, float(T), dt, TerminalBoundary(m))
            traj, _ = minimize_terminal(prob, term, init=chain_paths(m, 0, T, data, dt))
            vel = np.gradient(traj.nodes, dt, axis=0, edge_order=2)
            best = min(mather_statistic(traj.nodes[k], vel[k], data.samples, traj.times[k])[0]
                       for k in range(traj.steps + 1))
            history.append((T, best))
            if best > eps:
                ok = False
                break
        if ok:
            return (T, history) if return_report else T
        T *= 2
    raise EstimateError(f"shadow time for c={c}, eps={eps} exceeds cap {cap}")
