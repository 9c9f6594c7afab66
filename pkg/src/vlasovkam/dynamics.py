"""Forces and velocity-Verlet integration of the mean-field particle system."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (DiscreteTrajectory, EnsembleState, MonotoneConfiguration,
                   PotentialModel, interaction_energy)
from .errors import DivergenceError, ParameterError, ShapeError


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float
    scheme: str = "velocity-verlet"

    def __post_init__(self):
        if not (0.0 < self.dt <= 0.1):
            raise ParameterError(f"dt must lie in (0, 0.1], got {self.dt!r}")
        if self.scheme != "velocity-verlet":
            raise ParameterError(f"unknown scheme {self.scheme!r}")


def vlasov_force(p: PotentialModel, t: float, q) -> np.ndarray:
    """F_i = -V_x(t, q_i) - (1/n) sum_j W_x(q_i - q_j).

    The j = i term is kept; it vanishes because W_x(0) = 0.
    """
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.size == 0:
        raise ShapeError("need at least one particle")
    f = -p.V_x(t, q)
    if q.size > 1:
        f = f - np.mean(p.W_x(q[:, None] - q[None, :]), axis=1)
    else:
        f = f - p.W_x(np.zeros(1))
    return np.asarray(f, dtype=float)


def _verlet(p, t, q, v, dt, f):
    vh = v + 0.5 * dt * f
    q1 = q + dt * vh
    f1 = vlasov_force(p, t + dt, q1)
    v1 = vh + 0.5 * dt * f1
    return q1, v1, f1


def verlet_step(p: PotentialModel, s: EnsembleState, dt: float) -> EnsembleState:
    """One kick-drift-kick step; a negative dt runs the scheme backwards in time."""
    if dt == 0 or not np.isfinite(dt):
        raise ParameterError(f"dt must be finite and nonzero, got {dt!r}")
    q1, v1, _ = _verlet(p, s.t, s.q, s.v, dt, vlasov_force(p, s.t, s.q))
    return EnsembleState(s.t + dt, q1, v1)


def integrate(p: PotentialModel, M, N, t0: float, t1: float,
              cfg: IntegratorConfig) -> tuple[DiscreteTrajectory, np.ndarray]:
    """Integrate from positions M and velocities N over [t0, t1].

    Returns
    -------
    traj : DiscreteTrajectory
        Positions at t0 + k*dt; the final time is the first grid time >= t1.
    velocities : ndarray, shape (steps+1, n)
    """
    q = np.array(M.m if isinstance(M, MonotoneConfiguration) else M, dtype=float).reshape(-1)
    v = np.array(N, dtype=float).reshape(-1)
    if q.shape != v.shape or q.size == 0:
        raise ShapeError(f"positions and velocities differ in length: {q.size} vs {v.size}")
    if not t1 > t0:
        raise ParameterError(f"need t1 > t0, got {t0}, {t1}")
    dt = cfg.dt
    steps = max(1, int(np.ceil((t1 - t0) / dt - 1e-9)))
    Q = np.empty((steps + 1, q.size))
    Vel = np.empty_like(Q)
    Q[0], Vel[0] = q, v
    f = vlasov_force(p, t0, q)
    # blow-up is detected below and raised with its step
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps):
            q, v, f = _verlet(p, t0 + k * dt, q, v, dt, f)
            if not (np.all(np.isfinite(q)) and np.all(np.isfinite(v))):
                raise DivergenceError(f"non-finite state at step {k + 1}", step=k + 1)
            Q[k + 1], Vel[k + 1] = q, v
    return DiscreteTrajectory(t0, dt, Q), Vel


def ensemble_energy(p: PotentialModel, t: float, q, v) -> float:
    """Kinetic plus external plus interaction energy per particle."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    return float(0.5 * np.mean(v**2) + np.mean(p.V(t, q)) + interaction_energy(p, q))
