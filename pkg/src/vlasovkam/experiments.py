"""Experiment drivers behind the command line: plain functions returning arrays."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .action import ActionProblem, TerminalBoundary, minimize_terminal
from .core import interaction_energy, make_potential, validate_potential
from .errors import ParameterError
from .instability import (ClassData, build_schedule, chain_paths,
                          mather_statistic, prepare_class, verify_visits, windowed_diffusion)
from .weakkam import alpha_vlasov, gap_detector, rotation_number

DEFAULTS = {
    "a": 1.0, "b": 0.5, "kappa": 2.0,
    "n": 32, "dt": 0.02, "grid_n": 64, "tol": 1e-8,
    "c": 0.0, "c_values": None, "c_min": -1.0, "c_max": 1.0, "c_count": 5,
    "horizon": 40, "init": "uniform", "sample_every": 5,
    "alpha_n": 16, "alpha_periods": 200, "alpha_tol": 1e-6,
    "classes": [0.0, 0.3], "eps": [0.15, 0.15], "k": [3],
    "t_prime": [0, 24], "t_dprime": [8, 40], "r_U": 0.1, "r_V": 0.05,
    "penalty": 10.0, "selftest_pairs": 200,
    "seed": 0, "cache_dir": None,
}


@dataclass
class ExperimentConfig:
    """Flat experiment settings; unknown keys are rejected."""

    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    @classmethod
    def from_mapping(cls, d: dict | None) -> "ExperimentConfig":
        d = dict(d or {})
        bad = sorted(set(d) - set(DEFAULTS))
        if bad:
            raise ParameterError(f"unknown config keys: {', '.join(bad)}")
        v = dict(DEFAULTS)
        v.update(d)
        cfg = cls(v)
        cfg.validate()
        return cfg

    def __getitem__(self, k):
        return self.values[k]

    def validate(self):
        v = self.values
        if int(v["n"]) != v["n"] or v["n"] < 1:
            raise ParameterError(f"n must be a positive integer, got {v['n']!r}")
        if not (0 < v["dt"] <= 0.1) or abs(round(1 / v["dt"]) * v["dt"] - 1) > 1e-9:
            raise ParameterError(f"dt must lie in (0, 0.1] and divide 1, got {v['dt']!r}")
        if int(v["grid_n"]) != v["grid_n"] or v["grid_n"] < 16:
            raise ParameterError(f"grid_n must be an integer >= 16, got {v['grid_n']!r}")
        if v["tol"] <= 0:
            raise ParameterError("tol must be > 0")
        if int(v["horizon"]) != v["horizon"] or v["horizon"] < 1:
            raise ParameterError("horizon must be a positive integer")
        if v["init"] not in ("uniform", "synchronized"):
            raise ParameterError(f"init must be 'uniform' or 'synchronized', got {v['init']!r}")
        if int(v["sample_every"]) != v["sample_every"] or v["sample_every"] < 1:
            raise ParameterError("sample_every must be a positive integer")
        if int(v["seed"]) != v["seed"] or v["seed"] < 0:
            raise ParameterError("seed must be a nonnegative integer")
        if v["cache_dir"] is not None and not isinstance(v["cache_dir"], str):
            raise ParameterError("cache_dir must be a path string")

    def potential(self):
        return make_potential(self["a"], self["b"], self["kappa"])

    def c_range(self) -> np.ndarray:
        if self["c_values"] is not None:
            cs = np.asarray(self["c_values"], dtype=float).reshape(-1)
        else:
            cs = np.linspace(self["c_min"], self["c_max"], int(self["c_count"]))
        if cs.size == 0:
            raise ParameterError("empty c range")
        return cs

    def initial(self, n=None) -> np.ndarray:
        """Sorted uniform samples on [0, 1) from the seed, or all particles at 0."""
        n = int(self["n"] if n is None else n)
        if self["init"] == "synchronized":
            return np.zeros(n)
        return np.sort(np.random.default_rng(int(self["seed"])).random(n))


class Timer:
    def __init__(self):
        self.stages = {}

    def __call__(self, name):
        timer = self

        class _T:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                timer.stages[name] = timer.stages.get(name, 0.0) + time.perf_counter() - self.t
        return _T()


# ---------------------------------------------------------------- sweeps

def alpha_sweep(cfg: ExperimentConfig, timer: Timer | None = None) -> np.ndarray:
    """Rows (c, alpha_single, alpha_vlasov, rotation_number, gap)."""
    timer = timer or Timer()
    p = cfg.potential()
    rows = []
    for c in cfg.c_range():
        with timer("weak-kam"):
            data = prepare_class(p, float(c), int(cfg["grid_n"]), float(cfg["dt"]),
                                 cache_dir=cfg["cache_dir"])
        with timer("alpha-vlasov"):
            av = alpha_vlasov(p, float(c), n=int(cfg["alpha_n"]), dt=float(cfg["dt"]),
                              periods=int(cfg["alpha_periods"]), tol=float(cfg["alpha_tol"]),
                              seed=int(cfg["seed"]))
        rho = rotation_number(data.u, data.cost)
        gap, _ = gap_detector(data.samples, 0.0)
        rows.append((float(c), data.u.alpha, av, rho, gap))
    return np.array(rows)


def concentration_run(cfg: ExperimentConfig, timer: Timer | None = None,
                 data: ClassData | None = None) -> dict:
    """Long-horizon terminal minimization from a fixed initial configuration.

    The terminal cost is the weak-KAM fixed point at class c and the start
    is the grid chain through each particle.  Returns the sampled series
    (t, interaction energy, distance part, velocity part) and the path.
    """
    timer = timer or Timer()
    p = cfg.potential()
    c, dt, T = float(cfg["c"]), float(cfg["dt"]), int(cfg["horizon"])
    if data is None:
        with timer("weak-kam"):
            data = prepare_class(p, c, int(cfg["grid_n"]), dt, cache_dir=cfg["cache_dir"])
    M = cfg.initial()
    with timer("minimize"):
        prob = ActionProblem(p, c, 0.0, float(T), dt, TerminalBoundary(M), tol=float(cfg["tol"]))
        traj, value = minimize_terminal(prob, data.terminal, init=chain_paths(M, 0, T, data, dt))
    vel = np.gradient(traj.nodes, dt, axis=0, edge_order=2)
    every = int(cfg["sample_every"])
    rows = []
    with timer("diagnostics"):
        for k in range(0, traj.steps + 1, every):
            _, d, v = mather_statistic(traj.nodes[k], vel[k], data.samples, traj.times[k])
            rows.append((traj.times[k], interaction_energy(p, traj.nodes[k]), d, v))
    return {"series": np.array(rows), "traj": traj, "velocities": vel, "value": value,
            "data": data}


def diffuse_run(cfg: ExperimentConfig, timer: Timer | None = None, classes=None) -> dict:
    """Windowed diffusion along the configured schedule plus visiting statistics."""
    timer = timer or Timer()
    p = cfg.potential()
    dt = float(cfg["dt"])
    sched = build_schedule(cfg["classes"], cfg["eps"], cfg["k"], cfg["t_prime"],
                           cfg["t_dprime"], r_U=float(cfg["r_U"]), r_V=float(cfg["r_V"]))
    classes = {} if classes is None else classes
    with timer("weak-kam"):
        for c in sorted(set(float(x) for x in sched.f) | set(float(x) for x in sched.c_list)):
            if c not in classes:
                classes[c] = prepare_class(p, c, int(cfg["grid_n"]), dt,
                                           cache_dir=cfg["cache_dir"])
    M = cfg.initial()
    with timer("diffusion"):
        res = windowed_diffusion(p, M, sched, dt=dt, grid_n=int(cfg["grid_n"]),
                                 lam=float(cfg["penalty"]), classes=classes, tol=float(cfg["tol"]))
    samples = {c: classes[c].samples for c in classes}
    with timer("verify"):
        visits = verify_visits(res.traj, res.velocities, sched, samples)
    times = res.traj.times
    ext = res.ext
    if ext is None:
        ext_q = np.full(times.size, np.nan)
        ext_v = np.full(times.size, np.nan)
    else:
        ext_q = np.full(times.size, np.nan)
        ext_v = np.full(times.size, np.nan)
        k0 = times.size - ext.t.size
        ext_q[k0:] = ext.q
        ext_v[k0:] = ext.velocity()
    windows = []
    for s in range(sched.windows):
        a, b = sched.window(s)
        sel = (times >= a - 1e-9) & (times <= b + 1e-9)
        ev = ext_v[sel]
        ev = ev[np.isfinite(ev)]
        windows.append((s, float(sched.f[s]), a, b, res.report.window_actions[s]["value"],
                        float(np.mean(ev)) if ev.size else np.nan,
                        float(np.mean(res.velocities[sel])), res.report.penalty_rounds[s]))
    return {"schedule": sched, "result": res, "visits": visits, "windows": np.array(windows),
            "ext_q": ext_q, "ext_v": ext_v}


# --------------------------------------------------------------- selftest

def selftest_suites(cfg: ExperimentConfig) -> list[tuple[str, int, int, str]]:
    """Run the oracle suites; each entry is (suite, checks, failures, note)."""
    from .action import action_gradient, discrete_action
    from .core import DiscreteTrajectory
    from .metrics import dist_weak, dist_weak_bruteforce
    from .weakkam import build_transition_cost, lax_oleinik_raw

    rng = np.random.default_rng(int(cfg["seed"]))
    pairs = int(cfg["selftest_pairs"])
    p = cfg.potential()
    out = []

    rep = validate_potential(p)
    out.append(("potential", len(rep.checks), len(rep.failures()),
                ", ".join(rep.failures())))

    n = min(int(cfg["n"]), 7)
    fails = 0
    for _ in range(pairs):
        a, b = rng.random(n) * 3 - 1, rng.random(n) * 3 - 1
        if abs(dist_weak(a, b) - dist_weak_bruteforce(a, b)) > 1e-12:
            fails += 1
    out.append(("optimal transport", pairs, fails, f"n={n}"))

    cost = build_transition_cost(p, float(cfg["c"]), 16, 0.05)
    fails = 0
    for _ in range(pairs):
        u, w = rng.normal(size=16), rng.normal(size=16)
        Tu, Tw = lax_oleinik_raw(u, cost), lax_oleinik_raw(w, cost)
        if np.max(np.abs(Tu - Tw)) > np.max(np.abs(u - w)) + 1e-12:
            fails += 1
        s = rng.normal()
        if np.max(np.abs(lax_oleinik_raw(u + s, cost) - (Tu + s))) > 1e-12:
            fails += 1
        if np.any(lax_oleinik_raw(np.maximum(u, w), cost) < np.maximum(Tu, Tw) - 1e-12):
            fails += 1
    out.append(("lax-oleinik laws", 3 * pairs, fails, "grid_n=16"))

    fails = 0
    checks = max(pairs // 10, 5)
    h = 1e-6
    for _ in range(checks):
        nn = int(rng.integers(1, 5))
        K = int(rng.integers(3, 12))
        X = np.cumsum(rng.normal(scale=0.05, size=(K + 1, nn)), axis=0) + rng.random(nn)
        c = float(rng.normal())
        tr = DiscreteTrajectory(0.0, 0.05, X)
        g = action_gradient(tr, p, c)
        num = np.zeros_like(g)
        for k in range(1, K):
            for i in range(nn):
                Xp, Xm = X.copy(), X.copy()
                Xp[k, i] += h
                Xm[k, i] -= h
                num[k - 1, i] = (discrete_action(DiscreteTrajectory(0.0, 0.05, Xp), p, c)
                                 - discrete_action(DiscreteTrajectory(0.0, 0.05, Xm), p, c)) / (2 * h)
        if np.max(np.abs(g - num)) > 1e-5 * max(1.0, np.max(np.abs(num))):
            fails += 1
    out.append(("gradient", checks, fails, "central differences"))
    return out


__all__ = ["DEFAULTS", "ExperimentConfig", "Timer", "alpha_sweep", "concentration_run",
           "diffuse_run", "selftest_suites"]
