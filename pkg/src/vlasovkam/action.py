"""Discrete action of L_c and L_{n,c}, its derivatives, and direct minimization.

A path is a matrix of node positions, one row per time t0 + k*dt.  The
action uses midpoint quadrature,

    A = sum_k dt * L_{n,c}(t_k + dt/2, (X_k + X_{k+1})/2, (X_{k+1} - X_k)/dt),

so its Hessian in the node positions is block tridiagonal.  Minimization is
a damped Newton iteration on that structure with a backtracking line search;
batches of single-particle problems are solved together.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline, PchipInterpolator
from scipy.linalg import LinAlgError, solveh_banded

from .core import TWO_PI, DiscreteTrajectory, PotentialModel, is_mon
from .errors import ConvergenceError, ParameterError, ShapeError

GRAD_TOL = 1e-8
MAX_ITER = 100_000


# ---------------------------------------------------------------- Lagrangians

def lagrangian_single(p: PotentialModel, t, q, v, c: float):
    """1/2 v^2 - V(t, q) - c v."""
    v = np.asarray(v, dtype=float)
    return 0.5 * v**2 - p.V(t, q) - c * v


def lagrangian_ensemble(p: PotentialModel, t, q, v, c: float) -> float:
    """Mean-field Lagrangian of n particles with the class-c term removed."""
    q = np.asarray(q, dtype=float).reshape(-1)
    v = np.asarray(v, dtype=float).reshape(-1)
    if q.shape != v.shape:
        raise ShapeError(f"length mismatch: {q.size} vs {v.size}")
    n = q.size
    kin = 0.5 * np.mean(v**2) - c * np.mean(v)
    pot = np.mean(p.V(t, q)) + 0.5 * np.sum(p.W(q[:, None] - q[None, :])) / n**2
    return float(kin - pot)


# ------------------------------------------------------------ terminal costs

class Terminal:
    """Terminal cost on the last row; subclasses give value, gradient, Hessian."""

    def value(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hess(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ConstantTerminal(Terminal):
    def __init__(self, beta: float = 0.0):
        self.beta = float(beta)

    def value(self, x):
        return np.full(x.shape[0], self.beta)

    def grad(self, x):
        return np.zeros_like(x)

    def hess(self, x):
        return np.zeros(x.shape + (x.shape[-1],))


class MeanFieldTerminal(Terminal):
    """U(x_1..x_n) = (1/n) sum_i u(x_i) for a 1-periodic scalar u.

    Invariant under permutations and integer shifts, so it depends only on
    the monotone rearrangement of the row, and reduces to u on synchronized
    rows.
    """

    def __init__(self, u, du, d2u, offset: float = 0.0):
        self.u, self.du, self.d2u = u, du, d2u
        self.offset = float(offset)

    @classmethod
    def from_grid(cls, values, offset: float = 0.0, kind: str = "pchip") -> "MeanFieldTerminal":
        """Periodic C^1 interpolant of values at x_k = k/len(values).

        ``kind="pchip"`` (default) is the monotone cubic: it stays within the
        neighbouring data, so min-plus iterations through it cannot drift by
        overshoot.  ``kind="spline"`` is the periodic C^2 cubic spline.
        """
        values = np.asarray(values, dtype=float)
        g = values.size
        if kind == "spline":
            x = np.arange(g + 1) / g
            f = CubicSpline(x, np.append(values, values[0]), bc_type="periodic")
        elif kind == "pchip":
            # three wrapped nodes on each side make the derivative estimates periodic
            k = np.arange(-3, g + 4)
            f = PchipInterpolator(k / g, values[k % g])
        else:
            raise ParameterError(f"unknown interpolation kind {kind!r}")
        d1, d2 = f.derivative(1), f.derivative(2)

        def wrap(fn):
            return lambda y: fn(np.mod(y, 1.0))

        return cls(wrap(f), wrap(d1), wrap(d2), offset)

    def value(self, x):
        return np.mean(self.u(x), axis=-1) + self.offset

    def grad(self, x):
        return self.du(x) / x.shape[-1]

    def hess(self, x):
        n = x.shape[-1]
        h = np.zeros(x.shape + (n,))
        idx = np.arange(n)
        h[..., idx, idx] = self.d2u(x) / n
        return h


class CallableTerminal(Terminal):
    """Arbitrary U over rows, differentiated by central differences.

    ``fn(row)`` returns a scalar, or one value per particle, which is then
    averaged (the mean-field extension of a function on the circle).
    """

    def __init__(self, fn, step: float = 1e-5):
        self.fn = fn
        self.h = float(step)

    def _f(self, x):
        return np.array([float(np.mean(self.fn(row))) for row in x])

    def value(self, x):
        return self._f(x)

    def grad(self, x):
        g = np.empty_like(x)
        for i in range(x.shape[-1]):
            e = np.zeros(x.shape[-1])
            e[i] = self.h
            g[:, i] = (self._f(x + e) - self._f(x - e)) / (2 * self.h)
        return g

    def hess(self, x):
        n = x.shape[-1]
        out = np.empty(x.shape + (n,))
        for i in range(n):
            e = np.zeros(n)
            e[i] = self.h
            out[:, i, :] = (self.grad(x + e) - self.grad(x - e)) / (2 * self.h)
        return 0.5 * (out + np.swapaxes(out, -1, -2))


def as_terminal(U) -> Terminal:
    """Accept None, a constant, a grid value function, a Terminal or a callable."""
    if U is None:
        return ConstantTerminal(0.0)
    if isinstance(U, Terminal):
        return U
    if np.isscalar(U):
        return ConstantTerminal(float(U))
    if hasattr(U, "values"):
        return MeanFieldTerminal.from_grid(U.values)
    if callable(U):
        return CallableTerminal(U)
    raise ParameterError(f"cannot interpret terminal cost of type {type(U).__name__}")


# ------------------------------------------------------------------ problems

@dataclass(frozen=True)
class FixedEndpoints:
    x0: np.ndarray
    x1: np.ndarray
    windings: tuple = tuple(range(-3, 4))

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        x1 = np.atleast_1d(np.asarray(self.x1, dtype=float))
        if x0.shape != x1.shape:
            raise ShapeError(f"endpoint lengths differ: {x0.size} vs {x1.size}")
        w = tuple(int(k) for k in self.windings)
        if not w:
            raise ParameterError("winding range is empty")
        if sorted(w) != list(range(min(w), max(w) + 1)) or min(w) != -max(w):
            raise ParameterError(f"winding range must be a symmetric integer interval, got {w}")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "x1", x1)
        object.__setattr__(self, "windings", w)


@dataclass(frozen=True)
class TerminalBoundary:
    x0: np.ndarray
    U: object = None

    def __post_init__(self):
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))


@dataclass(frozen=True)
class ActionProblem:
    potential: PotentialModel
    c: float
    t0: float
    t1: float
    dt: float
    boundary: object
    tol: float = GRAD_TOL
    max_iter: int = MAX_ITER

    def __post_init__(self):
        if not self.dt > 0 or not self.t1 - self.t0 >= self.dt * (1 - 1e-12):
            raise ParameterError(f"need t1 - t0 >= dt > 0, got t0={self.t0}, t1={self.t1}, dt={self.dt}")
        steps = (self.t1 - self.t0) / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ParameterError(f"(t1 - t0)/dt = {steps} is not an integer")

    @property
    def steps(self) -> int:
        return int(round((self.t1 - self.t0) / self.dt))

    @property
    def n(self) -> int:
        return int(self.boundary.x0.size)


# ------------------------------------------------------- batched objective

class _Objective:
    """Action (+ optional terminal cost) over a batch of node arrays (B, K+1, n)."""

    def __init__(self, p, c, t0, dt, K, n, terminal: Terminal | None = None):
        # c may vary per step, shape (K, 1), to carry a time-dependent class
        c = float(c) if np.ndim(c) == 0 else np.asarray(c, dtype=float).reshape(K, 1)
        self.p, self.c, self.t0, self.dt, self.K, self.n = p, c, float(t0), float(dt), K, n
        self.tau = t0 + dt * (np.arange(K) + 0.5)
        self.terminal = terminal

    @property
    def free_last(self) -> bool:
        return self.terminal is not None

    def _pot(self, X, order):
        """Potential part of the Lagrangian at midpoints: P (order 0), dP (1) or H (2).

        dP and H are the derivatives with respect to the midpoints.
        """
        p, n = self.p, self.n
        M = 0.5 * (X[:, 1:] + X[:, :-1])
        tau = self.tau[None, :, None]
        fourier = n > 1 and p.w_cos is not None
        if fourier:
            # sum_j cos 2pi(x_i - x_j) = cos_i C + sin_i S
            w0, w1 = p.w_cos
            cs, sn = np.cos(TWO_PI * M), np.sin(TWO_PI * M)
        elif n > 1:
            D = M[..., :, None] - M[..., None, :]
        if order == 0:
            P = -np.mean(p.V(tau, M), axis=-1)
            if fourier:
                C, S = np.sum(cs, axis=-1), np.sum(sn, axis=-1)
                P = P - 0.5 * (n * n * w0 + w1 * (C * C + S * S)) / n**2
            elif n > 1:
                P = P - 0.5 * np.sum(p.W(D), axis=(-1, -2)) / n**2
            return P
        if order == 1:
            dP = -p.V_x(tau, M) / n
            if fourier:
                C, S = np.sum(cs, axis=-1), np.sum(sn, axis=-1)
                dP = dP - TWO_PI * w1 * (cs * S[..., None] - sn * C[..., None]) / n**2
            elif n > 1:
                dP = dP - np.sum(p.W_x(D), axis=-1) / n**2
            return dP
        idx = np.arange(n)
        H = np.zeros(M.shape + (n,))
        if n > 1:
            if fourier:
                W2 = -(TWO_PI**2 * w1 / n**2) * (cs[..., :, None] * cs[..., None, :]
                                                 + sn[..., :, None] * sn[..., None, :])
            else:
                W2 = p.wxx(D) / n**2
            H += W2
            H[..., idx, idx] = -np.sum(W2, axis=-1) + W2[..., idx, idx]
        H[..., idx, idx] += -p.vxx(tau, M) / n
        return H

    def value(self, X):
        dt, n = self.dt, self.n
        vel = np.diff(X, axis=1) / dt
        kin = np.sum(0.5 * vel**2 - self.c * vel, axis=(-1, -2)) / n
        f = dt * (kin + np.sum(self._pot(X, 0), axis=-1))
        if self.terminal is not None:
            f = f + self.terminal.value(X[:, -1])
        return f

    def full_grad(self, X):
        """Gradient with respect to every row, boundary rows included."""
        dt, n = self.dt, self.n
        vel = np.diff(X, axis=1) / dt
        dP = self._pot(X, 1)
        G = np.zeros_like(X)
        G[:, :-1] -= (vel - self.c) / n
        G[:, 1:] += (vel - self.c) / n
        G[:, :-1] += 0.5 * dt * dP
        G[:, 1:] += 0.5 * dt * dP
        if self.terminal is not None:
            G[:, -1] += self.terminal.grad(X[:, -1])
        return G

    def grad(self, X):
        G = self.full_grad(X)
        return G[:, 1:] if self.free_last else G[:, 1:-1]

    def hess(self, X):
        """Diagonal and super-diagonal blocks over the free rows."""
        dt, n = self.dt, self.n
        H = self._pot(X, 2)
        B, K = X.shape[0], self.K
        eye = np.eye(n) / (n * dt)
        Dg = np.zeros((B, K + 1, n, n))
        Dg[:, :-1] += eye + 0.25 * dt * H
        Dg[:, 1:] += eye + 0.25 * dt * H
        Of = -eye + 0.25 * dt * H
        if self.free_last:
            Dg = Dg[:, 1:]
            Dg[:, -1] += self.terminal.hess(X[:, -1])
            Of = Of[:, 1:]
        else:
            Dg = Dg[:, 1:-1]
            Of = Of[:, 1:-1]
        return Dg, Of

    def set_free(self, X, Y):
        X = X.copy()
        if self.free_last:
            X[:, 1:] = Y
        else:
            X[:, 1:-1] = Y
        return X

    def free(self, X):
        return X[:, 1:] if self.free_last else X[:, 1:-1]


def _ldl_tridiag(D, E, rhs):
    """Batched symmetric tridiagonal solve; flags batches with a nonpositive pivot."""
    B, m = D.shape
    d = np.empty((B, m))
    y = np.empty((B, m))
    d[:, 0] = D[:, 0]
    y[:, 0] = rhs[:, 0]
    for k in range(1, m):
        lk = E[:, k - 1] / d[:, k - 1]
        d[:, k] = D[:, k] - lk * E[:, k - 1]
        y[:, k] = rhs[:, k] - lk * y[:, k - 1]
    ok = np.all(d > 0, axis=1)
    x = np.empty((B, m))
    x[:, -1] = y[:, -1] / d[:, -1]
    for k in range(m - 2, -1, -1):
        x[:, k] = (y[:, k] - E[:, k] * x[:, k + 1]) / d[:, k]
    return x, ok


def _banded(Dg, Of):
    """Upper banded storage of a symmetric block tridiagonal matrix."""
    m, n = Dg.shape[:2]
    u = 2 * n - 1 if m > 1 else n - 1
    ab = np.zeros((u + 1, m * n))
    ii, jj = np.triu_indices(n)
    cols = np.arange(m)[:, None] * n + jj[None, :]
    ab[(u - (jj - ii))[None, :].repeat(m, 0), cols] = Dg[:, ii, jj]
    if m > 1:
        I, J = np.divmod(np.arange(n * n), n)
        cols = (np.arange(1, m)[:, None]) * n + J[None, :]
        ab[(u - (n + J - I))[None, :].repeat(m - 1, 0), cols] = Of[:, I, J]
    return ab, u


def _newton_dirs(Dg, Of, g, mu):
    """Solve (H + mu I) d = -g per batch; returns d and a positive-definiteness mask."""
    B, m, n = g.shape
    if n == 1:
        d, ok = _ldl_tridiag(Dg[..., 0, 0] + mu[:, None], Of[..., 0, 0], -g[..., 0])
        return d[..., None], ok
    d = np.zeros_like(g)
    ok = np.zeros(B, dtype=bool)
    for b in range(B):
        ab, u = _banded(Dg[b], Of[b])
        ab[u] += mu[b]
        try:
            d[b] = solveh_banded(ab, -g[b].ravel(), check_finite=False).reshape(m, n)
            ok[b] = np.all(np.isfinite(d[b]))
        except (LinAlgError, ValueError):
            ok[b] = False
    return d, ok


@dataclass
class SolveInfo:
    iterations: int = 0
    residual: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _descend(obj: _Objective, X, tol=GRAD_TOL, max_iter=MAX_ITER, context=""):
    """Damped Newton with backtracking until the gradient sup-norm is <= tol.

    The damping mu is raised when the Hessian is not positive definite or the
    line search stalls, and lowered after full steps.
    """
    X = np.array(X, dtype=float)
    B = X.shape[0]
    mu = np.zeros(B)
    mu_floor = 1e-3 / (obj.n * obj.dt)
    f = obj.value(X)
    g = obj.grad(X)
    gn = np.max(np.abs(g), axis=(1, 2)) if g.size else np.zeros(B)
    it = 0
    while True:
        act = np.flatnonzero(gn > tol)
        if act.size == 0:
            break
        if it >= max_iter:
            raise ConvergenceError(
                f"descent stopped after {it} iterations{context}; gradient sup-norm {gn.max():.3e}",
                residual=float(gn.max()), iterations=it)
        it += 1
        Xa = X[act]
        Dg, Of = obj.hess(Xa)
        d, ok = _newton_dirs(Dg, Of, g[act], mu[act])
        bad = act[~ok]
        mu[bad] = np.maximum(10 * mu[bad], mu_floor)
        todo = act[ok]
        d = d[ok]
        slope = np.sum(g[todo] * d, axis=(1, 2))
        alpha = np.ones(todo.size)
        pending = np.ones(todo.size, dtype=bool)
        for ls in range(40):
            sel = np.flatnonzero(pending)
            if sel.size == 0:
                break
            b = todo[sel]
            Y = obj.free(X[b]) + alpha[sel, None, None] * d[sel]
            Xt = obj.set_free(X[b], Y)
            ft = obj.value(Xt)
            slack = 1e-13 * (1.0 + np.abs(f[b])) if ls == 0 else 0.0
            acc = np.isfinite(ft) & (ft <= f[b] + 1e-4 * alpha[sel] * slope[sel] + slack)
            X[b[acc]] = Xt[acc]
            f[b[acc]] = ft[acc]
            pending[sel[acc]] = False
            alpha[sel[~acc]] *= 0.5
        took = ~pending
        full = took & (alpha == 1.0)
        mu[todo[full]] *= 0.25
        mu[todo[full & (mu[todo] < 1e-12)]] = 0.0
        short = took & (alpha < 1.0 / 16)
        mu[todo[short]] = np.maximum(4 * mu[todo[short]], mu_floor)
        mu[todo[pending]] = np.maximum(10 * mu[todo[pending]], mu_floor)
        upd = todo[took]
        if upd.size:
            g[upd] = obj.grad(X[upd])
            gn[upd] = np.max(np.abs(g[upd]), axis=(1, 2))
    return X, f, SolveInfo(it, gn)


# -------------------------------------------------------- public functions

def _as_nodes(traj: DiscreteTrajectory) -> np.ndarray:
    return np.asarray(traj.nodes, dtype=float)[None]


def discrete_action(traj: DiscreteTrajectory, p: PotentialModel, c: float) -> float:
    """Midpoint-rule action of L_{n,c} along the trajectory."""
    X = _as_nodes(traj)
    obj = _Objective(p, c, traj.t0, traj.dt, traj.steps, traj.n)
    return float(obj.value(X)[0])


def action_gradient(traj: DiscreteTrajectory, p: PotentialModel, c: float) -> np.ndarray:
    """Exact gradient of discrete_action in the interior rows, shape (steps-1, n)."""
    if traj.steps < 2:
        raise ShapeError("need at least 3 rows for an interior gradient")
    obj = _Objective(p, c, traj.t0, traj.dt, traj.steps, traj.n)
    return obj.grad(_as_nodes(traj))[0]


def straight_line(x0, x1, steps: int) -> np.ndarray:
    s = np.linspace(0.0, 1.0, steps + 1)[:, None]
    return (1 - s) * np.asarray(x0, float)[None, :] + s * np.asarray(x1, float)[None, :]


def _winding_candidates(p, c, T, x0, x1, windings):
    """Winding vectors worth solving, with pruning by a free-motion lower bound.

    Uniform shifts plus the per-particle best free winding (and its uniform
    shifts) are considered; a candidate is dropped when the lower bound
    on its action exceeds the straight-line action of the best candidate.
    """
    n = x0.size
    ks = np.array(windings)
    delta = x1 - x0
    free = ((delta[:, None] + ks[None, :]) ** 2 / (2 * T) - c * (delta[:, None] + ks[None, :]))
    best_k = ks[np.argmin(free, axis=1)]
    cands = {tuple([int(z)] * n) for z in ks}
    for z in ks:
        k = best_k + z
        if np.all(np.abs(k) <= ks.max()):
            cands.add(tuple(int(v) for v in k))
    cands = sorted(cands, key=lambda k: (sum(abs(v) for v in k), k))
    vmax = p.sup_abs_v()

    def lower(k):
        d = delta + np.array(k)
        return float(np.mean(d**2 / (2 * T) - c * d)) - T * vmax

    def upper(k):
        d = delta + np.array(k)
        # straight line: kinetic exact, potential terms bounded by sup|V| (W part <= 0 contributes >= 0 to -W)
        wmax = 0.0
        if n > 1:
            g = np.linspace(0, 1, 65)
            wmax = float(-np.min(p.W(g)))
        return float(np.mean(d**2 / (2 * T) - c * d)) + T * vmax + 0.5 * T * wmax

    ub = min(upper(k) for k in cands)
    return [k for k in cands if lower(k) <= ub + 1e-12]


def minimize_fixed_endpoints(prob: ActionProblem, init=None, return_value: bool = False):
    """Least-action path between fixed endpoints over a range of windings.

    Every admissible winding vector k gives a problem with endpoint x1 + k
    solved by damped Newton from the straight line (and from ``init`` if
    its endpoint matches); the smallest action wins, ties going to the
    smallest |k| and then lexicographic order.
    """
    b = prob.boundary
    if not isinstance(b, FixedEndpoints):
        raise ParameterError("minimize_fixed_endpoints needs a FixedEndpoints boundary")
    p, K, n = prob.potential, prob.steps, prob.n
    T = prob.t1 - prob.t0
    cands = _winding_candidates(p, prob.c, T, b.x0, b.x1, b.windings)
    starts, owners = [], []
    for ci, k in enumerate(cands):
        x1k = b.x1 + np.array(k, dtype=float)
        starts.append(straight_line(b.x0, x1k, K))
        owners.append(ci)
        if init is not None:
            X0 = np.asarray(init, dtype=float).reshape(K + 1, n)
            if np.allclose(X0[-1], x1k, atol=1e-9) and np.allclose(X0[0], b.x0, atol=1e-9):
                X0 = X0.copy()
                X0[0], X0[-1] = b.x0, x1k
                starts.append(X0)
                owners.append(ci)
    obj = _Objective(p, prob.c, prob.t0, prob.dt, K, n)
    X, f, info = _descend(obj, np.stack(starts), prob.tol, prob.max_iter)
    best = _pick(f, owners)
    k = cands[owners[best]]
    if len(b.windings) > 1 and max(abs(v) for v in k) == max(b.windings):
        warnings.warn(f"winning winding {k} lies on the boundary of the range {b.windings}",
                      RuntimeWarning, stacklevel=2)
    traj = DiscreteTrajectory(prob.t0, prob.dt, X[best])
    return (traj, float(f[best])) if return_value else traj


def _pick(f, owners):
    """Index of the smallest value; near-ties go to the earliest candidate."""
    f = np.asarray(f)
    fmin = np.min(f)
    tie = np.flatnonzero(f <= fmin + 1e-12 * max(1.0, abs(fmin)))
    return int(min(tie, key=lambda i: (owners[i], i)))


def minimize_terminal(prob: ActionProblem, U=None, init=None):
    """Minimize action plus terminal cost over interior and final rows.

    Starts: free motion at slope c, the resting path, and ``init`` rows
    (a single path or a stack of paths) when supplied.

    Returns
    -------
    traj : DiscreteTrajectory
    value : float
        Action plus terminal cost at the minimizer.
    """
    b = prob.boundary
    x0 = np.atleast_1d(np.asarray(b.x0, dtype=float))
    if U is None:
        U = getattr(b, "U", None)
    term = as_terminal(U)
    p, K, n = prob.potential, prob.steps, x0.size
    s = np.linspace(0.0, 1.0, K + 1)[:, None]
    T = prob.t1 - prob.t0
    starts = [x0[None, :] + prob.c * T * s, np.repeat(x0[None, :], K + 1, 0)]
    if init is not None:
        extra = np.asarray(init, dtype=float)
        extra = extra.reshape((-1, K + 1, n))
        for X0 in extra:
            X0 = X0.copy()
            X0[0] = x0
            starts.append(X0)
    obj = _Objective(p, prob.c, prob.t0, prob.dt, K, n, terminal=term)
    X, f, _ = _descend(obj, np.stack(starts), prob.tol, prob.max_iter)
    best = _pick(f, list(range(len(starts))))
    Xb, fb = X[best], float(f[best])
    if n > 1 and is_mon(x0, tol=1e-9):
        # a crossing stationary point is not minimal; restart from the uncrossed path
        for _ in range(3):
            Y = _uncross(Xb)
            if Y is None:
                break
            Xn, fn, _ = _descend(obj, Y[None], prob.tol, prob.max_iter)
            if fn[0] > fb + 1e-12 * max(1.0, abs(fb)):
                break
            Xb, fb = Xn[0], float(fn[0])
    return DiscreteTrajectory(prob.t0, prob.dt, Xb), fb


def _uncross(X, tol: float = 1e-9):
    """Swap labels row by row until every row is Mon; None if nothing to do.

    Neighbours out of order are exchanged, and so are the last particle and
    the first one when x[-1] > x[0] + 1 (with the integer shift that keeps
    both positions).  Each row is relabeled, never moved.
    """
    Y = np.array(X, dtype=float)
    changed = False
    n = Y.shape[1]
    for k in range(1, Y.shape[0]):
        row = Y[k]
        for _ in range(n * n + 1):
            done = True
            for i in range(n - 1):
                if row[i] > row[i + 1] + tol:
                    row[i], row[i + 1] = row[i + 1], row[i]
                    done = False
            if row[-1] > row[0] + 1 + tol:
                row[0], row[-1] = row[-1] - 1.0, row[0] + 1.0
                done = False
            if done:
                break
            changed = True
    return Y if changed else None


def solve_fixed_batch(p, c, t0, dt, steps, x0, x1, inits=None, tol=GRAD_TOL,
                      max_iter=MAX_ITER, chunk=8192):
    """Solve many fixed-endpoint problems with one winding each.

    Parameters
    ----------
    x0, x1 : ndarray, shape (B, n)
        Lifted endpoints (windings already applied to x1).
    inits : ndarray, shape (B, steps+1, n), optional

    Returns
    -------
    X : ndarray, shape (B, steps+1, n)
    values : ndarray, shape (B,)
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    B, n = x0.shape
    obj = _Objective(p, c, t0, dt, steps, n)
    s = np.linspace(0.0, 1.0, steps + 1)[None, :, None]
    Xout = np.empty((B, steps + 1, n))
    fout = np.empty(B)
    for lo in range(0, B, chunk):
        hi = min(B, lo + chunk)
        if inits is None:
            X = (1 - s) * x0[lo:hi, None, :] + s * x1[lo:hi, None, :]
        else:
            X = np.array(inits[lo:hi], dtype=float)
            X[:, 0], X[:, -1] = x0[lo:hi], x1[lo:hi]
        X, f, _ = _descend(obj, X, tol, max_iter)
        Xout[lo:hi], fout[lo:hi] = X, f
    return Xout, fout


def assert_order_preserved(traj, tol: float = 1e-9):
    """Check that no two particles cross.

    Particles tied in the first row may be relabeled (ties are ordered by
    their subsequent rows).  Returns ``(True, None)`` or ``(False, (k, i))``
    for the first row k and column i with X[k, i+1] < X[k, i] - tol.
    """
    X = np.asarray(traj.nodes if hasattr(traj, "nodes") else traj, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    d0 = np.diff(X[0])
    if np.any(d0 < -tol):
        return False, (0, int(np.flatnonzero(d0 < -tol)[0]))
    perm = np.lexsort(X[::-1])
    X = X[:, perm]
    bad = np.argwhere(np.diff(X, axis=1) < -tol)
    if bad.size:
        k, i = bad[0]
        return False, (int(k), int(i))
    return True, None


def rows_in_mon(traj, tol: float = 1e-9) -> bool:
    """Every row nondecreasing with last <= first + 1."""
    X = np.asarray(traj.nodes if hasattr(traj, "nodes") else traj, dtype=float)
    return all(is_mon(row, tol=tol) for row in X)
