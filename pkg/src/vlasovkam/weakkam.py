"""Lax-Oleinik value iteration, alpha functions, minimizer chains and Mather samples.

The one-period Lax-Oleinik operator of the single-particle Lagrangian L_c is
discretized on the grid x_k = k/G through the transition cost

    h[i, j] = min over windings w of the action from (0, x_i) to (1, x_j + w),

so that one application reads raw[i] = min_j h[i, j] + u[j].
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .action import (ActionProblem, MeanFieldTerminal, TerminalBoundary, as_terminal,
                     minimize_terminal, solve_fixed_batch)
from .core import PotentialModel, ProjectionSpec, project_ensemble
from .errors import ConvergenceError, ParameterError, ShapeError
from .metrics import circle_dist

DEFAULT_WINDINGS = tuple(range(-3, 4))


@dataclass
class ValueFunction:
    """Grid function on the circle with its class c and subtracted constant alpha."""

    grid_n: int
    values: np.ndarray
    c: float = 0.0
    alpha: float = 0.0
    iterations: int = 0
    residuals: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.values.size != self.grid_n:
            raise ShapeError(f"{self.values.size} values for grid_n={self.grid_n}")
        if not np.all(np.isfinite(self.values)):
            raise ParameterError("value function has non-finite entries")

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.grid_n) / self.grid_n

    @classmethod
    def zeros(cls, grid_n: int, c: float = 0.0) -> "ValueFunction":
        return cls(grid_n, np.zeros(grid_n), c)

    def terminal(self) -> MeanFieldTerminal:
        """Mean-field extension of the periodic spline through the values."""
        return MeanFieldTerminal.from_grid(self.values)


@dataclass
class TransitionCost:
    """One-period minimal actions between grid points and the winning windings."""

    grid_n: int
    c: float
    dt: float
    params: dict
    h: np.ndarray
    winding: np.ndarray

    def header(self) -> str:
        par = ",".join(f"{k}={self.params[k]!r}" for k in sorted(self.params))
        return f"transition-cost v1 grid_n={self.grid_n} c={self.c!r} dt={self.dt!r} params={par}"

    def save(self, path) -> None:
        """Text header line, then h as float64 and the windings as int8 (little endian)."""
        d = os.path.dirname(os.path.abspath(path))
        os.makedirs(d, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=d)
        with os.fdopen(fd, "wb") as fh:
            fh.write((self.header() + "\n").encode())
            fh.write(np.ascontiguousarray(self.h, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.winding, dtype="i1").tobytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path, expect_header: str | None = None) -> "TransitionCost":
        with open(path, "rb") as fh:
            head = fh.readline().decode().rstrip("\n")
            if expect_header is not None and head != expect_header:
                raise ParameterError(f"cache header mismatch in {path}")
            fields = dict(tok.split("=", 1) for tok in head.split()[2:])
            g = int(fields["grid_n"])
            h = np.frombuffer(fh.read(8 * g * g), dtype="<f8").reshape(g, g).copy()
            w = np.frombuffer(fh.read(g * g), dtype="i1").reshape(g, g).copy()
        params = {}
        if fields["params"]:
            for tok in fields["params"].split(","):
                k, v = tok.split("=")
                params[k] = float(v)
        return cls(g, float(fields["c"]), float(fields["dt"]), params, h, w)


def _cache_path(cache_dir, header: str) -> str:
    key = hashlib.sha256(header.encode()).hexdigest()[:20]
    return os.path.join(cache_dir, f"tc_{key}.bin")


def _pair_windings(G, c, T, vmax, windings):
    """All (i, j, w) triples not excluded by the free-motion action bounds."""
    x = np.arange(G) / G
    delta = x[None, :] - x[:, None]
    ks = np.array(windings)
    d = delta[..., None] + ks
    free = d**2 / (2 * T) - c * d
    ub = np.min(free, axis=-1) + T * vmax
    keep = free - T * vmax <= ub[..., None] + 1e-12
    i, j, kk = np.nonzero(keep)
    return i, j, ks[kk]


def _segments(p, c, t0, dt, steps, G, windings, vmax, tol, max_iter):
    """Solve all pairwise problems on one time interval; returns best cost, winding, paths."""
    T = steps * dt
    i, j, w = _pair_windings(G, c, T, vmax, windings)
    x = np.arange(G) / G
    X, f = solve_fixed_batch(p, c, t0, dt, steps, x[i, None], (x[j] + w)[:, None],
                             tol=tol, max_iter=max_iter)
    return i, j, w, X[..., 0], f


def build_transition_cost(p: PotentialModel, c: float, grid_n: int, dt: float,
                          windings=DEFAULT_WINDINGS, cache_dir=None, substeps: int = 4,
                          tol: float = 1e-8, max_iter: int = 100_000) -> TransitionCost:
    """Minimal one-period actions between all pairs of grid points.

    Each entry comes from the fixed-endpoint minimizer over the winding
    range.  When V is not identically zero the solver is also started from
    a path assembled by min-plus composition of up to ``substeps`` shorter
    transitions (on which the action is closer to convex), and the lower of
    the two local minima is kept.
    """
    if grid_n < 16:
        raise ParameterError(f"grid_n must be >= 16, got {grid_n}")
    steps = int(round(1.0 / dt))
    if abs(steps * dt - 1.0) > 1e-9:
        raise ParameterError(f"1/dt must be an integer, got dt={dt}")
    tc = TransitionCost(grid_n, float(c), float(dt), dict(p.params), None, None)
    path = None
    if cache_dir is not None:
        path = _cache_path(cache_dir, tc.header())
        if os.path.exists(path):
            return TransitionCost.load(path, expect_header=tc.header())

    G = grid_n
    vmax = p.sup_abs_v()
    i, j, w, X, f = _segments(p, c, 0.0, dt, steps, G, windings, vmax, tol, max_iter)
    h, win = _best_per_pair(G, i, j, w, f)

    m = next((k for k in range(substeps, 1, -1) if steps % k == 0), 1) if substeps > 1 else 1
    if vmax > 0 and m > 1:
        h2, win2 = _composed_refine(p, c, dt, steps, G, windings, vmax, m, tol, max_iter)
        better = h2 < h - 1e-12 * np.maximum(1.0, np.abs(h))
        h = np.where(better, h2, h)
        win = np.where(better, win2, win)

    tc.h = h
    tc.winding = win.astype(np.int8)
    if path is not None:
        tc.save(path)
    return tc


def _best_per_pair(G, i, j, w, f):
    """Minimum over windings per (i, j); near-ties go to the smallest |w|, then w."""
    h = np.full((G, G), np.inf)
    np.minimum.at(h, (i, j), f)
    near = f <= h[i, j] + 1e-12 * np.maximum(1.0, np.abs(h[i, j]))
    key = np.where(near, np.abs(w) * 16 + (w + 8), 1 << 20)
    best = np.full((G, G), 1 << 20)
    np.minimum.at(best, (i, j), key)
    sel = near & (key == best[i, j])
    win = np.zeros((G, G), dtype=np.int64)
    win[i[sel], j[sel]] = w[sel]
    hh = np.full((G, G), np.inf)
    hh[i[sel], j[sel]] = f[sel]
    return hh, win


def _composed_refine(p, c, dt, steps, G, windings, vmax, m, tol, max_iter):
    """Second start per pair: min-plus composition of m sub-interval transitions."""
    sub = steps // m
    x = np.arange(G) / G
    costs, wins, paths = [], [], []
    for r in range(m):
        i, j, w, X, f = _segments(p, c, r * sub * dt, dt, sub, G, windings, vmax, tol, max_iter)
        hr, wr = _best_per_pair(G, i, j, w, f)
        # keep the path that realized the chosen winding
        sel = w == wr[i, j]
        P = np.zeros((G, G, sub + 1))
        P[i[sel], j[sel]] = X[sel]
        costs.append(hr)
        wins.append(wr)
        paths.append(P)
    # compose left to right keeping intermediate indices
    acc, accw = costs[0], wins[0].astype(np.int64)
    mids = []
    for r in range(1, m):
        nxt, nw = costs[r], wins[r]
        newc = np.empty((G, G))
        arg = np.empty((G, G), dtype=np.int64)
        for a in range(G):
            tot = acc[a][:, None] + nxt          # (mid, j)
            k = np.argmin(tot, axis=0)
            arg[a] = k
            newc[a] = tot[k, np.arange(G)]
        accw = accw[np.arange(G)[:, None], arg] + nw[arg, np.arange(G)[None, :]]
        acc = newc
        mids.append(arg)
    # rebuild full initial paths
    K = steps
    init = np.empty((G, G, K + 1))
    ends = np.broadcast_to(np.arange(G)[None, :], (G, G)).copy()
    # walk back through the argmin tables
    cur = ends
    seq = [cur]
    for r in range(m - 1, 0, -1):
        # the middle index before segment r, given endpoints (row a, current index)
        cur = _back(mids, r, cur, G)
        seq.append(cur)
    seq.append(np.broadcast_to(np.arange(G)[:, None], (G, G)))
    seq = seq[::-1]                               # seq[r] = index at time r*sub*dt
    offset = np.zeros((G, G))
    for r in range(m):
        a_idx, b_idx = seq[r], seq[r + 1]
        seg = paths[r][a_idx, b_idx]              # (G, G, sub+1), starts at x[a_idx]
        seg = seg - x[a_idx][..., None] + (x[a_idx] + offset)[..., None]
        init[..., r * sub:(r + 1) * sub + 1] = seg
        offset = offset + x[b_idx] - x[a_idx] + wins[r][a_idx, b_idx]
    total_w = np.round(init[..., -1] - x[None, :]).astype(np.int64)
    wmax = max(windings)
    ok = (np.abs(total_w) <= wmax) & np.isfinite(acc)
    ii, jj = np.nonzero(ok)
    Xs, fs = solve_fixed_batch(p, c, 0.0, dt, K, x[ii, None], (x[jj] + total_w[ii, jj])[:, None],
                               inits=init[ii, jj][..., None], tol=tol, max_iter=max_iter)
    h2 = np.full((G, G), np.inf)
    w2 = np.zeros((G, G), dtype=np.int64)
    h2[ii, jj] = fs
    w2[ii, jj] = total_w[ii, jj]
    return h2, w2


def _back(mids, r, cur, G):
    """Index at time r*sub given the start row and the index at time (r+1)*sub.

    ``mids[r-1][a, b]`` stores the optimal index at time r*sub for a path from
    a at time 0 to b at time (r+1)*sub.
    """
    A = np.arange(G)[:, None]
    return mids[r - 1][A, cur]


# ----------------------------------------------------------- value iteration

def _raw(values, h):
    tot = h + values[None, :]
    j = np.argmin(tot, axis=1)
    return tot[np.arange(h.shape[0]), j], j


def lax_oleinik_raw(values, cost: TransitionCost) -> np.ndarray:
    """Unnormalized operator: raw[i] = min_j h[i, j] + values[j]."""
    return _raw(np.asarray(values, dtype=float), cost.h)[0]


def lax_oleinik_apply(u: ValueFunction, cost: TransitionCost) -> ValueFunction:
    """One step of the operator, normalized to vanish at x = 0."""
    if u.grid_n != cost.grid_n:
        raise ShapeError(f"grid mismatch: {u.grid_n} vs {cost.grid_n}")
    raw, _ = _raw(u.values, cost.h)
    return ValueFunction(u.grid_n, raw - raw[0], cost.c, float(-raw[0]))


def solve_weak_kam(p: PotentialModel, c: float, grid_n: int = 128, dt: float = 0.01,
                   tol: float = 1e-9, max_iter: int = 20_000, cost: TransitionCost | None = None,
                   cache_dir=None) -> ValueFunction:
    """Iterate the normalized operator from u = 0 to its fixed point.

    Stops when both the sup-norm change of the values and the change of
    alpha are <= tol.  ``residuals`` records the span of raw(u) - u, which
    cannot increase along the iteration.  If the plain iteration stalls on
    a cycle, it switches to the averaged map u <- (u + N(u))/2, which has
    the same fixed points.
    """
    if not tol > 0:
        raise ParameterError(f"tol must be > 0, got {tol}")
    if cost is None:
        cost = build_transition_cost(p, c, grid_n, dt, cache_dir=cache_dir)
    G = cost.grid_n
    u = np.zeros(G)
    alpha = np.nan
    residuals = []
    damped = False
    for it in range(1, max_iter + 1):
        raw, _ = _raw(u, cost.h)
        span = float(np.ptp(raw - u))
        residuals.append(span)
        new_alpha = float(-raw[0])
        new = raw - raw[0]
        if damped:
            new = 0.5 * (u + new)
        du = float(np.max(np.abs(new - u)))
        da = abs(new_alpha - alpha) if np.isfinite(alpha) else np.inf
        u, alpha = new, new_alpha
        if du <= tol and da <= tol:
            vf = ValueFunction(G, u, cost.c, alpha, it, residuals)
            vf.damped = damped
            return vf
        if not damped and it >= 200 and it % 100 == 0:
            if residuals[-1] > 0.999 * residuals[-100]:
                damped = True
    raise ConvergenceError(f"value iteration did not converge in {max_iter} steps",
                           residual=residuals[-1], iterations=max_iter)


# ------------------------------------------------------------------ chains

@dataclass
class Chain:
    indices: np.ndarray
    lifted: np.ndarray


def backward_minimizer_chain(u: ValueFunction, cost: TransitionCost, steps: int,
                             start: int = 0) -> Chain:
    """Follow the argmin of the fixed-point equation for ``steps`` periods.

    The chain is the grid trace of a calibrated curve: from index i the
    next index is the smallest j attaining min_j h[i, j] + u[j].  Lifted
    positions add the winding of each step.
    """
    _, succ = _raw(u.values, cost.h)
    G = cost.grid_n
    idx = np.empty(steps + 1, dtype=np.int64)
    lift = np.empty(steps + 1)
    idx[0] = start
    lift[0] = start / G
    for s in range(steps):
        i = idx[s]
        j = succ[i]
        idx[s + 1] = j
        lift[s + 1] = lift[s] + (j - i) / G + cost.winding[i, j]
    return Chain(idx, lift)


def rotation_number(u: ValueFunction, cost: TransitionCost, start: int = 0) -> float:
    """Average lifted displacement per period on the cycle the chain falls into."""
    _, succ = _raw(u.values, cost.h)
    G = cost.grid_n
    seen = {}
    i, s = start, 0
    while i not in seen:
        seen[i] = s
        i = int(succ[i])
        s += 1
    # i starts the cycle; walk it once
    length, disp, a = 0, 0.0, i
    while True:
        b = int(succ[a])
        disp += (b - a) / G + cost.winding[a, b]
        length += 1
        a = b
        if a == i:
            break
    return disp / length


# --------------------------------------------------------- Mather samples

@dataclass
class MatherSample:
    """Points (t mod 1, x, v) along long minimizers, x reduced to [0, 1)."""

    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    c: float = 0.0
    dt: float = 0.01

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.x = np.mod(np.asarray(self.x, dtype=float), 1.0)
        self.x = np.where(self.x >= 1.0, 0.0, self.x)
        self.v = np.asarray(self.v, dtype=float)

    def __len__(self):
        return self.x.size

    def slice(self, t: float, width: float | None = None):
        """Samples whose time phase lies within ``width`` (default dt/2) of t."""
        width = 0.5 * self.dt + 1e-12 if width is None else width
        sel = circle_dist(self.t, t) <= width
        return self.x[sel], self.v[sel]

    def phase_index(self, t: float) -> int:
        return int(np.round(np.mod(t, 1.0) / self.dt)) % int(round(1.0 / self.dt))


def mather_set_samples(p: PotentialModel, c: float, grid_n: int = 128, dt: float = 0.01,
                       T: int = 16, u: ValueFunction | None = None,
                       cost: TransitionCost | None = None, tail: bool = False,
                       tol: float = 1e-8) -> MatherSample:
    """Samples of minimal orbits from the middle (or tail) of long chains.

    Chains of length 2T are run from every grid start.  Each distinct
    step kept from the middle T periods (last T when ``tail``) is refined
    by a fixed-endpoint minimization over one period, and the refined
    segments are sampled at every time node with centered velocities.
    """
    if T < 16:
        raise ParameterError(f"T must be >= 16 periods, got {T}")
    if cost is None:
        cost = build_transition_cost(p, c, grid_n, dt)
    if u is None:
        u = solve_weak_kam(p, c, cost=cost)
    G = cost.grid_n
    _, succ = _raw(u.values, cost.h)
    lo = T if tail else T // 2
    # state after lo steps from every start, then the kept triples (prev, cur, next)
    cur = np.arange(G)
    for _ in range(lo - 1):
        cur = succ[cur]
    triples = set()
    for _ in range(T):
        nxt = succ[cur]
        nn = succ[nxt]
        triples.update(zip(cur.tolist(), nxt.tolist(), nn.tolist()))
        cur = nxt
    triples = sorted(triples)
    pairs = sorted({(a, b) for a, b, _ in triples} | {(b, c2) for _, b, c2 in triples})
    K = int(round(1.0 / dt))
    x = np.arange(G) / G
    pi = np.array([a for a, _ in pairs])
    pj = np.array([b for _, b in pairs])
    w = cost.winding[pi, pj].astype(float)
    X, _ = solve_fixed_batch(p, c, 0.0, dt, K, x[pi, None], (x[pj] + w)[:, None], tol=tol)
    seg = {pr: X[k, :, 0] for k, pr in enumerate(pairs)}
    ts, xs, vs = [], [], []
    tgrid = np.arange(K) * dt
    for a, b, c2 in triples:
        P = seg[(a, b)]
        Q = seg[(b, c2)] - x[b] + P[-1]
        full = np.concatenate([P, Q[1:2]])
        vel = np.empty(K)
        vel[1:] = (full[2:K + 1] - full[0:K - 1]) / (2 * dt)
        # velocity at the start of segment (a, b) needs the previous one; use the
        # junction at its end instead, which is recorded by the next triple
        vel[0] = np.nan
        ts.append(tgrid[1:])
        xs.append(P[1:K])
        vs.append(vel[1:])
        ts.append(np.zeros(1))
        xs.append(np.array([P[-1]]))
        vs.append(np.array([(Q[1] - P[-2]) / (2 * dt)]))
    return MatherSample(np.concatenate(ts), np.concatenate(xs), np.concatenate(vs), c, dt)


def flow_defect(samples: MatherSample, p: PotentialModel, periods: int = 1) -> float:
    """Re-integrate samples at phase 0 for whole periods; distance to the nearest sample.

    Distance is measured in (x on the circle, v) at phase 0.
    """
    from .dynamics import IntegratorConfig, integrate
    x0, v0 = samples.slice(0.0)
    if x0.size == 0:
        return np.nan
    traj, vel = integrate(p, x0, v0, 0.0, float(periods), IntegratorConfig(samples.dt))
    xe, ve = traj.nodes[-1], vel[-1]
    d = np.hypot(circle_dist(xe[:, None], x0[None, :]), ve[:, None] - v0[None, :])
    return float(np.max(np.min(d, axis=1)))


def gap_detector(samples: MatherSample, t_slice: float = 0.0, arc_threshold: float = 0.25,
                 width: float | None = None):
    """Largest arc of the circle free of sample positions at the given time phase.

    Returns
    -------
    gap : float
        1.0 when the slice is empty.
    flag : bool
        gap >= arc_threshold.
    """
    xs, _ = samples.slice(t_slice, width)
    if xs.size == 0:
        return 1.0, bool(1.0 >= arc_threshold)
    xs = np.unique(np.sort(xs))
    gaps = np.diff(np.append(xs, xs[0] + 1.0))
    gap = float(np.max(gaps))
    return gap, bool(gap >= arc_threshold)


# --------------------------------------------------------- n particles

def n_particle_value(p: PotentialModel, M, U, c: float, n: int, dt: float,
                     init=None, return_traj: bool = False, tol: float = 1e-8):
    """Minimal one-period action plus terminal cost for the n-block projection of M.

    The terminal cost acts on rows through the mean-field extension of U,
    which depends only on the monotone rearrangement of the row.
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    m = np.asarray(getattr(M, "m", M), dtype=float)
    q0 = project_ensemble(m, ProjectionSpec(n))
    term = as_value_terminal(U)
    prob = ActionProblem(p, c, 0.0, 1.0, dt, TerminalBoundary(q0), tol=tol)
    traj, val = minimize_terminal(prob, term, init=init)
    return (val, traj) if return_traj else val


def as_value_terminal(U):
    """Terminal cost from a ValueFunction, constant, Terminal or callable."""
    if isinstance(U, ValueFunction):
        return U.terminal()
    return as_terminal(U)


def alpha_vlasov(p: PotentialModel, c: float, n: int = 16, dt: float = 0.02,
                 periods: int = 200, tol: float = 1e-6, descriptors: int = 32,
                 seed: int = 0, return_value: bool = False):
    """Alpha of the n-particle operator on synchronized descriptor configurations.

    The value function lives on configurations with all n particles at one
    point x_d = d/descriptors; one step solves the n-particle terminal
    problem from each descriptor with the mean-field extension of the
    current values as terminal cost.  The solver is started from slightly
    desynchronized paths so that synchrony of the minimizer is found, not
    imposed, and also toward the endpoint that is best for free motion.
    ``periods`` caps the number of operator applications.
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    D = descriptors
    xd = np.arange(D) / D
    K = int(round(1.0 / dt))
    rng = np.random.default_rng(seed)
    spread = 1e-3 * rng.standard_normal((D, n)) if n > 1 else np.zeros((D, 1))
    s = np.linspace(0.0, 1.0, K + 1)[:, None]
    inits = [xd[d] + spread[d] * np.sin(np.pi * s) + c * s for d in range(D)]
    u = np.zeros(D)
    alpha = np.nan
    history = []
    for it in range(1, periods + 1):
        term = MeanFieldTerminal.from_grid(u)
        raw = np.empty(D)
        for d in range(D):
            prob = ActionProblem(p, c, 0.0, 1.0, dt, TerminalBoundary(np.full(n, xd[d])))
            # symmetric points (e.g. the bottom of V) are stationary for every
            # symmetric start, so also aim at the best endpoint under free motion
            lift = xd[None, :] + np.arange(-2, 3)[:, None] - xd[d]
            score = 0.5 * lift**2 - c * lift + u[None, :]
            y = xd[d] + lift.flat[int(np.argmin(score))]
            aim = xd[d] + (y - xd[d]) * s + (spread[d] * np.sin(np.pi * s) if n > 1 else 0.0)
            traj, raw[d] = minimize_terminal(prob, term, init=np.stack([inits[d], aim]))
            inits[d] = traj.nodes + (spread[d] * np.sin(np.pi * s) if n > 1 else 0.0)
        new_alpha = float(-raw[0])
        new = raw - raw[0]
        du = float(np.max(np.abs(new - u)))
        da = abs(new_alpha - alpha) if np.isfinite(alpha) else np.inf
        history.append(new_alpha)
        u, alpha = new, new_alpha
        if du <= tol and da <= tol:
            vf = ValueFunction(D, u, c, alpha, it, history)
            return vf if return_value else alpha
    raise ConvergenceError(f"n-particle iteration did not settle in {periods} periods",
                           residual=da, iterations=periods)
