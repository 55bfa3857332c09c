"""Inversion-free flow editing: the FlowEdit baseline and Conditioned Velocity Correction.

Both editors walk an edit latent from the source sample (at t = t_{n_max})
down to t = 0. At each step a fresh noise draw places the source on its
forward path, the target latent is coupled as ``z_src + (z_edit - x_src)``,
and a velocity difference between the two drives the edit latent.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Union

import numpy as np

from .errors import IntegrationError, RejectedInput
from .flowcore import NULL, Condition, TimeGrid, VelocityField, as_latent, euler_step, interpolate

CorrectionMode = Literal["literal", "tweedie_residual", "off"]
CORRECTION_MODES = ("literal", "tweedie_residual", "off")


@dataclass(frozen=True)
class GuidanceParams:
    omega1: float = 1.5
    omega2: float = 5.5

    def __post_init__(self):
        for name in ("omega1", "omega2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise RejectedInput(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class CvcParams:
    alpha: float = 1.0
    beta: float = 7.0
    eta: float = 0.2
    correction_mode: CorrectionMode = "tweedie_residual"
    second_eta_in_update: bool = False
    t_floor: float = 1e-3

    def __post_init__(self):
        if self.correction_mode not in CORRECTION_MODES:
            raise RejectedInput(f"correction_mode must be one of {CORRECTION_MODES}, got {self.correction_mode!r}")
        if not self.eta > 0:
            raise RejectedInput(f"eta must be positive, got {self.eta}")


@dataclass
class VelocityBreakdown:
    conditional_term: np.ndarray
    unconditional_term: np.ndarray
    total: np.ndarray


@dataclass
class StepRecord:
    step: int  # 1-based count of executed steps
    index: int  # grid index i of t_i
    t: float
    t_next: float
    z_src: np.ndarray
    z_tar: np.ndarray
    z_edit: np.ndarray  # after the update, i.e. at t_next
    v_delta: np.ndarray
    v_applied: np.ndarray
    cond_term: np.ndarray
    uncond_term: np.ndarray
    correction: np.ndarray
    correction_skipped: bool = False


@dataclass
class EditReport:
    method: str
    x_src: np.ndarray
    final: np.ndarray
    records: list[StepRecord]
    x1_delta: np.ndarray
    x2_delta: np.ndarray
    params: dict = field(default_factory=dict)
    t_start: float = 1.0

    @property
    def final_mse(self) -> float:
        return mse(self.final, self.x_src)

    def mse_curve(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(step, t, mse) including the initial state as step 0."""
        steps = [0] + [r.step for r in self.records]
        ts = [self.t_start] + [r.t_next for r in self.records]
        errs = [0.0] + [mse(r.z_edit, self.x_src) for r in self.records]
        return np.array(steps), np.array(ts), np.array(errs)


def mse(a, b) -> float:
    return float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))


def _eval(field: VelocityField, z, t, c) -> np.ndarray:
    return np.asarray(field(z, t, c), dtype=np.float64)


def cfg_velocity(field: VelocityField, z, t: float, c: Condition, omega: float) -> np.ndarray:
    """Classifier-free guidance: uncond + omega * (cond - uncond)."""
    uncond = _eval(field, z, t, NULL)
    cond = _eval(field, z, t, c)
    return uncond + omega * (cond - uncond)


def flowedit_delta(
    field: VelocityField, z_src, z_tar, t: float, c_src: Condition, c_tar: Condition, g: GuidanceParams
) -> tuple[np.ndarray, VelocityBreakdown]:
    """V2 - V1 for CFG velocities, split into conditional and unconditional terms."""
    z_src = np.asarray(z_src, dtype=np.float64)
    z_tar = np.asarray(z_tar, dtype=np.float64)
    if z_src.shape != z_tar.shape:
        raise RejectedInput(f"dimension mismatch: {z_src.shape} vs {z_tar.shape}")
    src_u = _eval(field, z_src, t, NULL)
    src_c = _eval(field, z_src, t, c_src)
    tar_u = _eval(field, z_tar, t, NULL)
    tar_c = _eval(field, z_tar, t, c_tar)
    cond = g.omega2 * tar_c - g.omega1 * src_c
    uncond = (1.0 - g.omega2) * tar_u - (1.0 - g.omega1) * src_u
    total = cond + uncond
    return total, VelocityBreakdown(cond, uncond, total)


def cvc_velocity(
    field: VelocityField, z_src, z_tar, t: float, c_src: Condition, c_tar: Condition, p: CvcParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Dual-perspective difference alpha (v2 - v1) + beta (v3 - v2).

    v1 = V(z_src, c_src) and v2 = V(z_tar, c_src) form the structure branch;
    v3 = V(z_tar, c_tar) adds the semantic branch. The null condition is never queried.
    """
    z_src = np.asarray(z_src, dtype=np.float64)
    z_tar = np.asarray(z_tar, dtype=np.float64)
    if z_src.shape != z_tar.shape:
        raise RejectedInput(f"dimension mismatch: {z_src.shape} vs {z_tar.shape}")
    v1 = _eval(field, z_src, t, c_src)
    v2 = _eval(field, z_tar, t, c_src)
    v3 = _eval(field, z_tar, t, c_tar)
    v_delta = p.alpha * (v2 - v1) + p.beta * (v3 - v2)
    return v_delta, v1, v2, v3


def tweedie_denoise(z, t: float, v) -> np.ndarray:
    """Clean estimate z - t v for the straight interpolant with v = noise - data."""
    if not 0.0 <= t <= 1.0:
        raise RejectedInput(f"time {t} outside [0, 1]")
    return np.asarray(z, dtype=np.float64) - t * np.asarray(v, dtype=np.float64)


def alignment_gradient(v_delta, dt: float, target) -> tuple[float, np.ndarray]:
    """Loss ||dt v - g||^2 and its gradient 2 dt (dt v - g) with respect to v."""
    v_delta = np.asarray(v_delta, dtype=np.float64)
    resid = dt * v_delta - np.asarray(target, dtype=np.float64)
    return float(resid @ resid), 2.0 * dt * resid


@dataclass
class CorrectionContext:
    t: float
    dt: float
    x_src: np.ndarray
    z_src: np.ndarray | None = None
    z_tar: np.ndarray | None = None
    z_edit: np.ndarray | None = None
    v1: np.ndarray | None = None
    v2: np.ndarray | None = None


def velocity_correct(v_delta, ctx: CorrectionContext, p: CvcParams) -> tuple[np.ndarray, bool]:
    """One correction step on the velocity difference.

    Returns (corrected velocity, skipped flag). ``literal`` takes one gradient
    step on ||dt V - x_src||^2. ``tweedie_residual`` compares the clean-level
    displacement predicted under the source condition with the displacement
    the edit latent has accumulated and pushes back on the mismatch.
    """
    v_delta = np.asarray(v_delta, dtype=np.float64)
    if p.correction_mode == "off":
        return v_delta, False
    if p.correction_mode == "literal":
        if ctx.dt == 0 or not np.isfinite(ctx.dt):
            raise RejectedInput(f"literal correction needs a finite nonzero dt, got {ctx.dt}")
        _, grad = alignment_gradient(v_delta, ctx.dt, ctx.x_src)
        return v_delta - p.eta * grad, False
    if ctx.t < p.t_floor:
        return v_delta, True
    predicted = tweedie_denoise(ctx.z_tar, ctx.t, ctx.v2) - tweedie_denoise(ctx.z_src, ctx.t, ctx.v1)
    resid = predicted - (ctx.z_edit - ctx.x_src)
    return v_delta - (p.eta / max(ctx.t, p.t_floor)) * resid, False


def _check_run_inputs(x_src, grid: TimeGrid) -> np.ndarray:
    if not isinstance(grid, TimeGrid):
        raise RejectedInput("grid must be a TimeGrid")
    return as_latent(x_src, "x_src")


def flowedit_run(
    field: VelocityField,
    x_src,
    c_src: Condition,
    c_tar: Condition,
    g: GuidanceParams,
    grid: TimeGrid,
    seed=0,
) -> EditReport:
    x_src = _check_run_inputs(x_src, grid)
    rng = np.random.default_rng(seed)
    z_edit = x_src.copy()
    x1 = np.zeros_like(x_src)
    x2 = np.zeros_like(x_src)
    records = []
    zero = np.zeros_like(x_src)
    for k, (i, t, t_next) in enumerate(grid.backward_steps(), start=1):
        try:
            noise = rng.standard_normal(x_src.shape)
            z_src = interpolate(x_src, noise, t)
            z_tar = z_src + (z_edit - x_src)
            v_delta, parts = flowedit_delta(field, z_src, z_tar, t, c_src, c_tar, g)
            dt = t_next - t
            z_edit = euler_step(z_edit, v_delta, dt, step=i)
        except IntegrationError:
            raise
        except Exception as exc:
            raise IntegrationError(str(exc), i) from exc
        x1 = x1 + dt * parts.conditional_term
        x2 = x2 + dt * parts.unconditional_term
        records.append(
            StepRecord(k, i, t, t_next, z_src, z_tar, z_edit, v_delta, v_delta, parts.conditional_term, parts.unconditional_term, zero)
        )
    return EditReport(
        "flowedit", x_src, z_edit, records, x1, x2,
        params={"omega1": g.omega1, "omega2": g.omega2, "c_src": c_src, "c_tar": c_tar},
        t_start=grid.t(grid.n_max),
    )


def cvc_run(
    field: VelocityField,
    x_src,
    c_src: Condition,
    c_tar: Condition,
    p: CvcParams,
    grid: TimeGrid,
    seed=0,
) -> EditReport:
    x_src = _check_run_inputs(x_src, grid)
    rng = np.random.default_rng(seed)
    z_edit = x_src.copy()
    x1 = np.zeros_like(x_src)
    records = []
    zero = np.zeros_like(x_src)
    for k, (i, t, t_next) in enumerate(grid.backward_steps(), start=1):
        dt = t_next - t
        try:
            noise = rng.standard_normal(x_src.shape)
            z_src = interpolate(x_src, noise, t)
            # Same coupling as z_edit + z_src - x_src, ordered so that z_tar == z_src
            # bit-for-bit while the edit latent still equals the source.
            z_tar = z_src + (z_edit - x_src)
            v_delta, v1, v2, _ = cvc_velocity(field, z_src, z_tar, t, c_src, c_tar, p)
            ctx = CorrectionContext(t, dt, x_src, z_src, z_tar, z_edit, v1, v2)
            v_new, skipped = velocity_correct(v_delta, ctx, p)
            step_dt = p.eta * dt if p.second_eta_in_update else dt
            z_edit = euler_step(z_edit, v_new, step_dt, step=i)
        except IntegrationError:
            raise
        except Exception as exc:
            raise IntegrationError(str(exc), i) from exc
        x1 = x1 + step_dt * v_new
        records.append(
            StepRecord(k, i, t, t_next, z_src, z_tar, z_edit, v_delta, v_new, v_delta, zero, v_new - v_delta, skipped)
        )
    params = asdict(p)
    params.update(c_src=c_src, c_tar=c_tar)
    return EditReport("cvc", x_src, z_edit, records, x1, np.zeros_like(x_src), params=params, t_start=grid.t(grid.n_max))


# --- export ------------------------------------------------------------------

REPORT_COLUMNS = ["step", "t", "mse_to_src", "vdelta_norm", "uncond_norm", "cond_norm", "correction_norm"]


def write_edit_report(report: EditReport, csv_path: Union[str, Path], summary_path: Union[str, Path], seed=None) -> None:
    """Per-step table plus a ``key = value`` summary."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in report.records:
            w.writerow([
                r.step, repr(r.t_next), repr(mse(r.z_edit, report.x_src)),
                repr(float(np.linalg.norm(r.v_delta))), repr(float(np.linalg.norm(r.uncond_term))),
                repr(float(np.linalg.norm(r.cond_term))), repr(float(np.linalg.norm(r.correction))),
            ])
    lines = [
        f"method = {report.method}",
        f"final_mse = {report.final_mse!r}",
        f"x1_delta_norm = {float(np.linalg.norm(report.x1_delta))!r}",
        f"x2_delta_norm = {float(np.linalg.norm(report.x2_delta))!r}",
        f"seed = {seed}",
    ]
    lines += [f"{k} = {v}" for k, v in sorted(report.params.items())]
    Path(summary_path).write_text("\n".join(lines) + "\n")
