"""Simulation of the two stochastic constrained systems and their stability functionals.

Both systems are integrated with classical fixed-step RK4 on a uniform grid.
The pendulum is an index-3 DAE; the rod multiplier is eliminated by
differentiating the constraint twice, and position/velocity are projected back
onto the constraint manifold after every step.

Batch versions operate on an ``(n, dim)`` array of contexts and are what the
harness uses; the single-context functions are thin wrappers.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from .errors import ConstraintDriftError, DivergenceError, InvalidWindowError, MissingFieldError

TOL_CONSTRAINT = 1e-8
ABORT_RESIDUAL = 1e-2


@dataclass(frozen=True)
class TimeGrid:
    t_start: float = 0.0
    t_end: float = 10.0
    dt: float = 0.05

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.t_end > self.t_start:
            raise ValueError("t_end must exceed t_start")

    @property
    def n_steps(self) -> int:
        return int(round((self.t_end - self.t_start) / self.dt))

    @property
    def times(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.n_steps)


@dataclass(frozen=True)
class SpringParams:
    m: float = 1.0
    c: float = 1.0
    k: float = 2.0
    s0: float = 0.0
    v0: float = 0.0

    def __post_init__(self):
        if self.m <= 0 or self.k < 0 or self.c < 0:
            raise ValueError("spring requires m > 0, k >= 0, c >= 0")


@dataclass(frozen=True)
class PendulumParams:
    m: float = 1.0
    ell: float = 1.0
    g: float = 9.81
    s0: tuple[float, float, float] = (0.15, 0.0, -0.9887)
    v0: tuple[float, float, float] = (0.0, 0.8, 0.0)
    t0: float = 2.3

    def __post_init__(self):
        if self.m <= 0 or self.ell <= 0 or self.g <= 0:
            raise ValueError("pendulum requires m, ell, g > 0")


@dataclass(frozen=True)
class StabilitySpec:
    kind: Literal["max_abs", "max_swing_angle"]
    tau: float
    window: tuple[float, float] | None = None
    alpha: float = 0.1

    def __post_init__(self):
        if self.kind not in ("max_abs", "max_swing_angle"):
            raise ValueError(f"unknown stability functional {self.kind!r}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.kind == "max_swing_angle" and not self.tau < np.pi / 2:
            raise ValueError("swing-angle threshold must lie in (0, pi/2)")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


SPRING_STABILITY = StabilitySpec("max_abs", tau=1.0)
PENDULUM_STABILITY = StabilitySpec("max_swing_angle", tau=float(np.deg2rad(35.0)))


@dataclass(frozen=True)
class Trajectory:
    """One simulated run. ``states`` has shape ``(n_steps, state_dim)``."""

    grid: TimeGrid
    states: np.ndarray
    multipliers: np.ndarray | None = None
    pivot: np.ndarray | None = None

    def __post_init__(self):
        if self.states.shape[0] != self.grid.n_steps:
            raise ValueError(
                f"states has {self.states.shape[0]} rows, grid has {self.grid.n_steps} steps"
            )
        if not np.all(np.isfinite(self.states)):
            raise ValueError("trajectory contains non-finite states")


@dataclass(frozen=True)
class TrajectoryBatch:
    """Stacked trajectories on a shared grid; ``states`` is ``(n, n_steps, state_dim)``."""

    grid: TimeGrid
    states: np.ndarray
    multipliers: np.ndarray | None = None
    pivot: np.ndarray | None = None

    def __len__(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, i: int) -> Trajectory:
        return Trajectory(
            self.grid,
            self.states[i],
            None if self.multipliers is None else self.multipliers[i],
            None if self.pivot is None else self.pivot[i],
        )

    def take(self, idx) -> "TrajectoryBatch":
        idx = np.asarray(idx)
        return TrajectoryBatch(
            self.grid,
            self.states[idx],
            None if self.multipliers is None else self.multipliers[idx],
            None if self.pivot is None else self.pivot[idx],
        )

    @classmethod
    def concat(cls, batches: list["TrajectoryBatch"]) -> "TrajectoryBatch":
        if not batches:
            raise ValueError("nothing to concatenate")
        grid = batches[0].grid
        if any(b.grid != grid for b in batches):
            raise ValueError("batches must share a time grid")

        def cat(name):
            parts = [getattr(b, name) for b in batches]
            return None if parts[0] is None else np.concatenate(parts)

        return cls(grid, cat("states"), cat("multipliers"), cat("pivot"))


# ---------------------------------------------------------------------------
# mass-spring-damper

def simulate_spring_batch(X, p: SpringParams = SpringParams(), grid: TimeGrid = TimeGrid()) -> TrajectoryBatch:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != 2:
        raise ValueError(f"spring context must have dimension 2, got {X.shape[1]}")
    amp, freq = X[:, 0], X[:, 1]
    n, N, dt = X.shape[0], grid.n_steps, grid.dt

    def rhs(t, s, v):
        # overflow is detected below and reported with its step
        with np.errstate(over="ignore", invalid="ignore"):
            return v, (amp * np.sin(freq * t) - p.c * v - p.k * s) / p.m

    s = np.full(n, float(p.s0))
    v = np.full(n, float(p.v0))
    out = np.empty((n, N, 2))
    for i, t in enumerate(grid.times):
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(v))):
            raise DivergenceError("non-finite spring state", step=i)
        out[:, i, 0] = s
        out[:, i, 1] = v
        k1s, k1v = rhs(t, s, v)
        k2s, k2v = rhs(t + dt / 2, s + dt / 2 * k1s, v + dt / 2 * k1v)
        k3s, k3v = rhs(t + dt / 2, s + dt / 2 * k2s, v + dt / 2 * k2v)
        k4s, k4v = rhs(t + dt, s + dt * k3s, v + dt * k3v)
        s = s + dt / 6 * (k1s + 2 * k2s + 2 * k3s + k4s)
        v = v + dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return TrajectoryBatch(grid, out)


def simulate_spring(x, p: SpringParams = SpringParams(), grid: TimeGrid = TimeGrid()) -> Trajectory:
    """Integrate ``m s'' + c s' + k s = x1 sin(x2 t)``; states are (position, velocity)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (2,):
        raise ValueError(f"spring context must have dimension 2, got shape {x.shape}")
    return simulate_spring_batch(x[None], p, grid)[0]


# ---------------------------------------------------------------------------
# Cartesian pendulum with a moving pivot

def pivot_path(t, X, t0: float):
    """Pivot position, velocity and acceleration along x for contexts ``X`` at time ``t``.

    Returns three ``(n, 3)`` arrays. Derivatives are analytic.
    """
    X = np.atleast_2d(X)
    amp, freq, spread = X[:, 0], X[:, 1], X[:, 2]
    tau = t - t0
    env = np.exp(-(tau**2) / (2 * spread**2))
    sn, cs = np.sin(freq * tau), np.cos(freq * tau)
    a = tau / spread**2
    pos = amp * env * sn
    vel = amp * env * (freq * cs - a * sn)
    acc = amp * env * ((a**2 - 1 / spread**2 - freq**2) * sn - 2 * a * freq * cs)
    zeros = np.zeros((X.shape[0], 2))
    return (
        np.column_stack([pos, zeros]),
        np.column_stack([vel, zeros]),
        np.column_stack([acc, zeros]),
    )


def _multiplier(r, rv, acc_pivot, g0, m):
    # second derivative of 0.5(|r|^2 - l^2) set to zero, solved for a
    return -m * (np.einsum("ij,ij->i", rv, rv) + r @ g0 - np.einsum("ij,ij->i", r, acc_pivot)) / np.einsum(
        "ij,ij->i", r, r
    )


def _project(s, v, u, ud, ell):
    r = s - u
    r = r * (ell / np.linalg.norm(r, axis=1, keepdims=True))
    rv = v - ud
    rv = rv - (np.einsum("ij,ij->i", rv, r) / ell**2)[:, None] * r
    return u + r, ud + rv


def constraint_residual(s, u, ell) -> np.ndarray:
    r = np.asarray(s) - np.asarray(u)
    return 0.5 * np.abs(np.sum(r * r, axis=-1) - ell**2)


def simulate_pendulum_batch(
    X, p: PendulumParams = PendulumParams(), grid: TimeGrid = TimeGrid(), tol: float = TOL_CONSTRAINT
) -> TrajectoryBatch:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != 3:
        raise ValueError(f"pendulum context must have dimension 3, got {X.shape[1]}")
    if np.any(X[:, 2] <= 0):
        raise ValueError("pivot spread X3 must be positive")
    n, N, dt, ell, m = X.shape[0], grid.n_steps, grid.dt, p.ell, p.m
    g0 = np.array([0.0, 0.0, -p.g])

    def rhs(t, s, v):
        u, ud, udd = pivot_path(t, X, p.t0)
        a = _multiplier(s - u, v - ud, udd, g0, m)
        return v, g0 + (s - u) * (a / m)[:, None]

    s = np.tile(np.asarray(p.s0, dtype=float), (n, 1))
    v = np.tile(np.asarray(p.v0, dtype=float), (n, 1))
    u, ud, _ = pivot_path(grid.t_start, X, p.t0)
    res0 = constraint_residual(s, u, ell)
    if np.max(res0) > ABORT_RESIDUAL:
        raise ConstraintDriftError("initial state is far from the rod constraint", step=0, residual=float(res0.max()))
    s, v = _project(s, v, u, ud, ell)

    states = np.empty((n, N, 6))
    mult = np.empty((n, N))
    piv = np.empty((n, N, 3))
    times = grid.times
    for i, t in enumerate(times):
        u, ud, udd = pivot_path(t, X, p.t0)
        res = constraint_residual(s, u, ell)
        if np.max(res) > tol:
            raise ConstraintDriftError("rod constraint drifted after projection", step=i, residual=float(res.max()))
        states[:, i, :3] = s
        states[:, i, 3:] = v
        mult[:, i] = _multiplier(s - u, v - ud, udd, g0, m)
        piv[:, i] = u
        if i == N - 1:
            break
        k1s, k1v = rhs(t, s, v)
        k2s, k2v = rhs(t + dt / 2, s + dt / 2 * k1s, v + dt / 2 * k1v)
        k3s, k3v = rhs(t + dt / 2, s + dt / 2 * k2s, v + dt / 2 * k2v)
        k4s, k4v = rhs(t + dt, s + dt * k3s, v + dt * k3v)
        s = s + dt / 6 * (k1s + 2 * k2s + 2 * k3s + k4s)
        v = v + dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(v))):
            raise DivergenceError("non-finite pendulum state", step=i + 1)
        u1, ud1, _ = pivot_path(t + dt, X, p.t0)
        pre = constraint_residual(s, u1, ell)
        if np.max(pre) > ABORT_RESIDUAL:
            raise DivergenceError(f"pre-projection residual {pre.max():.3g} exceeds {ABORT_RESIDUAL}", step=i + 1)
        s, v = _project(s, v, u1, ud1, ell)
    return TrajectoryBatch(grid, states, mult, piv)


def simulate_pendulum(x, p: PendulumParams = PendulumParams(), grid: TimeGrid = TimeGrid()) -> Trajectory:
    """Bob position/velocity (6 columns), rod multiplier a(t) and pivot path per step."""
    x = np.asarray(x, dtype=float)
    if x.shape != (3,):
        raise ValueError(f"pendulum context must have dimension 3, got shape {x.shape}")
    return simulate_pendulum_batch(x[None], p, grid)[0]


def mechanical_energy(traj: Trajectory | TrajectoryBatch, p: PendulumParams = PendulumParams()) -> np.ndarray:
    s, v = traj.states[..., :3], traj.states[..., 3:6]
    return 0.5 * p.m * np.sum(v * v, axis=-1) + p.m * p.g * s[..., 2]


# ---------------------------------------------------------------------------
# stability functionals

def _window_mask(grid: TimeGrid, spec: StabilitySpec) -> np.ndarray:
    times = grid.times
    if spec.window is None:
        return np.ones_like(times, dtype=bool)
    lo, hi = spec.window
    eps = 1e-9 * max(1.0, abs(grid.t_end))
    mask = (times >= lo - eps) & (times <= hi + eps)
    if not mask.any():
        raise InvalidWindowError(f"window [{lo}, {hi}] contains no grid points")
    return mask


def stability_max_abs(traj: Trajectory | TrajectoryBatch, spec: StabilitySpec = SPRING_STABILITY):
    """Maximum |position| over the window; scalar for a Trajectory, array for a batch."""
    if spec.kind != "max_abs":
        raise ValueError("spec.kind must be 'max_abs'")
    mask = _window_mask(traj.grid, spec)
    pos = traj.states[..., 0]
    out = np.max(np.abs(pos[..., mask]), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def swing_angles(traj: Trajectory | TrajectoryBatch, ell: float) -> np.ndarray:
    if traj.pivot is None:
        raise MissingFieldError("trajectory has no pivot path")
    rel = traj.states[..., :3] - traj.pivot
    return np.arccos(np.clip(-rel[..., 2] / ell, -1.0, 1.0))


def stability_max_swing_angle(
    traj: Trajectory | TrajectoryBatch, spec: StabilitySpec = PENDULUM_STABILITY, ell: float = 1.0
):
    if spec.kind != "max_swing_angle":
        raise ValueError("spec.kind must be 'max_swing_angle'")
    mask = _window_mask(traj.grid, spec)
    out = np.max(swing_angles(traj, ell)[..., mask], axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def label_stable(eta, spec: StabilitySpec):
    """True where ``eta <= tau`` (boundary inclusive)."""
    out = np.asarray(eta) <= spec.tau
    return bool(out) if out.ndim == 0 else out


def add_measurement_noise(traj, noise: NoiseSpec, seed=None):
    """I.i.d. Gaussian noise on the recorded states only; sigma=0 returns the input unchanged."""
    if noise.sigma == 0:
        return traj
    rng = np.random.default_rng(seed)
    return replace(traj, states=traj.states + noise.sigma * rng.standard_normal(traj.states.shape))
