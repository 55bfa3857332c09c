"""Rectified-flow primitives: latents, time grids, the interpolant and ODE integrators.

Time runs from t=0 (data) to t=1 (pure noise). A velocity field predicts
``noise - data``, so denoising moves backwards in time with negative steps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Protocol, Sequence, Union

import numpy as np

from .errors import IntegrationError, RejectedInput

# None is the null (unconditional) condition; ints are class ids.
Condition = Optional[int]
NULL: Condition = None

Direction = Literal["forward", "backward"]

REFERENCE_REFINEMENT = 10


class VelocityField(Protocol):
    def __call__(self, z: np.ndarray, t: float, c: Condition) -> np.ndarray: ...


def as_latent(x, name: str = "latent") -> np.ndarray:
    """Coerce to a finite 1-D float64 vector."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1 or arr.size == 0:
        raise RejectedInput(f"{name} must be a non-empty vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise RejectedInput(f"{name} has non-finite entries")
    return arr


def _check_time(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise RejectedInput(f"time {t} outside [0, 1]")
    return t


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = i / n_steps, i = 0..n_steps.

    ``n_max`` is the index a backward (editing) pass starts from; the pass
    visits i = n_max, ..., 1 and steps to t_{i-1}.
    """

    n_steps: int
    n_max: int | None = None

    def __post_init__(self):
        if self.n_steps < 1:
            raise RejectedInput(f"n_steps must be >= 1, got {self.n_steps}")
        if self.n_max is None:
            object.__setattr__(self, "n_max", self.n_steps)
        if not 1 <= self.n_max <= self.n_steps:
            raise RejectedInput(f"n_max={self.n_max} outside [1, {self.n_steps}]")

    @classmethod
    def from_fraction(cls, n_steps: int, start_fraction: float = 1.0) -> "TimeGrid":
        n_max = max(1, min(n_steps, int(round(start_fraction * n_steps))))
        return cls(n_steps, n_max)

    @property
    def points(self) -> np.ndarray:
        return np.arange(self.n_steps + 1, dtype=np.float64) / self.n_steps

    def t(self, i: int) -> float:
        return i / self.n_steps

    def backward_steps(self) -> list[tuple[int, float, float]]:
        """(i, t_i, t_{i-1}) for i = n_max..1."""
        return [(i, self.t(i), self.t(i - 1)) for i in range(self.n_max, 0, -1)]

    def forward_steps(self) -> list[tuple[int, float, float]]:
        """(i, t_i, t_{i+1}) for i = 0..n_max-1."""
        return [(i, self.t(i), self.t(i + 1)) for i in range(self.n_max)]


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    # velocities[k] is the velocity used to leave states[k]; the last row is NaN.
    velocities: np.ndarray
    annotations: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def __len__(self) -> int:
        return len(self.times)

    def to_csv(self, path: Union[str, Path]) -> None:
        write_trajectory_csv(self, path)


def interpolate(x0, noise, t: float) -> np.ndarray:
    """Point on the straight path from data ``x0`` (t=0) to ``noise`` (t=1)."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise RejectedInput(f"dimension mismatch: {x0.shape} vs {noise.shape}")
    t = _check_time(t)
    return (1.0 - t) * x0 + t * noise


def euler_step(z: np.ndarray, v: np.ndarray, dt: float, step: int | None = None) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != z.shape:
        raise RejectedInput(f"velocity shape {v.shape} does not match latent {z.shape}")
    if not np.all(np.isfinite(v)):
        raise IntegrationError("non-finite velocity", step)
    return z + dt * v


def _eval(field: VelocityField, z, t, c, step) -> np.ndarray:
    try:
        v = np.asarray(field(z, t, c), dtype=np.float64)
    except IntegrationError:
        raise
    except Exception as exc:
        raise IntegrationError(f"field evaluation failed at t={t}: {exc}", step) from exc
    return v


def _steps(grid: TimeGrid, direction: Direction):
    if direction == "backward":
        return grid.backward_steps()
    if direction == "forward":
        return grid.forward_steps()
    raise RejectedInput(f"unknown direction {direction!r}")


def integrate_euler(
    field: VelocityField,
    z_start,
    grid: TimeGrid,
    c: Condition = NULL,
    direction: Direction = "backward",
) -> Trajectory:
    z = as_latent(z_start, "z_start")
    steps = _steps(grid, direction)
    times = [steps[0][1]]
    states = [z]
    vels = []
    for i, t, t_next in steps:
        v = _eval(field, z, t, c, i)
        z = euler_step(z, v, t_next - t, step=i)
        vels.append(v)
        states.append(z)
        times.append(t_next)
    vels.append(np.full_like(z, np.nan))
    return Trajectory(np.array(times), np.array(states), np.array(vels))


def _rk4_step(field, z, t, t_end, c, step):
    h = t_end - t
    mid = 0.5 * (t + t_end)
    k1 = _eval(field, z, t, c, step)
    k2 = _eval(field, z + 0.5 * h * k1, mid, c, step)
    k3 = _eval(field, z + 0.5 * h * k2, mid, c, step)
    k4 = _eval(field, z + h * k3, t_end, c, step)
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), k1


def integrate_reference(
    field: VelocityField,
    z_start,
    grid: TimeGrid,
    c: Condition = NULL,
    direction: Direction = "backward",
) -> Trajectory:
    """Classical RK4 on a grid refined 10x; states reported on the input grid."""
    z = as_latent(z_start, "z_start")
    steps = _steps(grid, direction)
    times = [steps[0][1]]
    states = [z]
    vels = []
    for i, t, t_next in steps:
        sub = np.linspace(t, t_next, REFERENCE_REFINEMENT + 1)
        first = None
        for a, b in zip(sub[:-1], sub[1:]):
            z, k1 = _rk4_step(field, z, float(a), float(b), c, i)
            if first is None:
                first = k1
        if not np.all(np.isfinite(z)):
            raise IntegrationError("non-finite state", i)
        vels.append(first)
        states.append(z)
        times.append(t_next)
    vels.append(np.full_like(z, np.nan))
    return Trajectory(np.array(times), np.array(states), np.array(vels))


def write_trajectory_csv(traj: Trajectory, path: Union[str, Path], extra: Sequence[str] = ()) -> None:
    states = np.atleast_2d(traj.states)
    d = states.shape[1]
    names = list(extra) or sorted(traj.annotations)
    header = ["step", "t"] + [f"z_{j}" for j in range(d)] + names
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(traj.times)):
            row = [k, repr(float(traj.times[k]))] + [repr(float(x)) for x in states[k]]
            row += [repr(float(traj.annotations[n][k])) for n in names]
            w.writerow(row)
