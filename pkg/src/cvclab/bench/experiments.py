"""Reconstruction, edit, guidance-sweep and ablation experiments.

Fidelity (MSE to source) and the semantic score (posterior probability of
the target class) are always computed with the exact GMM, whichever backend
drives the edit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from ..editors import CvcParams, EditReport, GuidanceParams, cvc_run, flowedit_run
from ..errors import IntegrationError, RejectedInput
from ..flowcore import TimeGrid
from ..nnvf import load_checkpoint
from ..oracle import GmmConditionalModel, OracleField, class_posterior, sample_data
from .config import EDIT_GUIDANCE, RECONSTRUCT_GUIDANCE, ExperimentConfig

METRIC_COLUMNS = ["run_id", "seed", "method", "final_mse", "semantic_score", "x2_norm", "wall_ms"]


@dataclass
class MetricRow:
    run_id: str
    seed: int
    method: str
    final_mse: float
    semantic_score: float
    x2_norm: float
    wall_ms: float

    def as_list(self) -> list[str]:
        return [self.run_id, str(self.seed), self.method, repr(self.final_mse), repr(self.semantic_score), repr(self.x2_norm), repr(self.wall_ms)]


@dataclass
class ExperimentResult:
    label: str
    rows: list[MetricRow]
    steps: np.ndarray
    times: np.ndarray
    curves: np.ndarray  # (n_runs, n_points) per-step MSE to source
    guidance: GuidanceParams | None = None

    @property
    def mean_curve(self) -> np.ndarray:
        return self.curves.mean(axis=0)

    @property
    def mean_final_mse(self) -> float:
        return float(np.mean([r.final_mse for r in self.rows]))

    @property
    def mean_x2_norm(self) -> float:
        return float(np.mean([r.x2_norm for r in self.rows]))

    @property
    def mean_semantic_score(self) -> float:
        return float(np.mean([r.semantic_score for r in self.rows]))


class ExperimentFailed(RuntimeError):
    def __init__(self, message: str, partial: ExperimentResult):
        super().__init__(message)
        self.partial = partial


def setup(cfg: ExperimentConfig):
    """(model, velocity field) for the configured backend."""
    model = cfg.data.build()
    if cfg.backend == "oracle":
        return model, OracleField(model)
    net, _ = load_checkpoint(cfg.checkpoint)
    if net.d != model.dim or net.n_conditions != model.n_conditions:
        raise RejectedInput(
            f"checkpoint (d={net.d}, {net.n_conditions} conditions) does not match model (d={model.dim}, {model.n_conditions})"
        )
    return model, net


def source_samples(model: GmmConditionalModel, c_src: int, n: int, seed: int) -> np.ndarray:
    return sample_data(model, c_src, n, [seed, 0])


def run_seed(seed: int, j: int) -> list[int]:
    """Noise seed for source j under experiment seed; shared by every method."""
    return [seed, 1, j]


def _edit(field, method: str, x_src, c_src, c_tar, g: GuidanceParams, p: CvcParams, grid: TimeGrid, seed) -> EditReport:
    if method == "flowedit":
        return flowedit_run(field, x_src, c_src, c_tar, g, grid, seed)
    if method == "cvc":
        return cvc_run(field, x_src, c_src, c_tar, p, grid, seed)
    raise RejectedInput(f"unknown method {method!r}")


def _sweep_sources(cfg: ExperimentConfig, label: str, method: str, c_src: int, c_tar: int,
                   g: GuidanceParams, p: CvcParams, model=None, field=None) -> ExperimentResult:
    if model is None:
        model, field = setup(cfg)
    grid = TimeGrid.from_fraction(cfg.steps, cfg.resolved_start_fraction())
    rows, curves = [], []
    steps = times = np.zeros(0)
    result = ExperimentResult(label, rows, steps, times, np.zeros((0, 0)), g if method == "flowedit" else None)
    for seed in cfg.seeds:
        for j, x_src in enumerate(source_samples(model, c_src, cfg.n_sources, seed)):
            start = time.perf_counter()
            try:
                report = _edit(field, method, x_src, c_src, c_tar, g, p, grid, run_seed(seed, j))
            except IntegrationError as exc:
                if curves:
                    result.curves = np.array(curves)
                raise ExperimentFailed(f"{label} seed {seed} source {j}: {exc}", result) from exc
            wall = (time.perf_counter() - start) * 1000.0 if cfg.timing else 0.0
            steps, times, errs = report.mse_curve()
            curves.append(errs)
            score = float(class_posterior(model, report.final)[c_tar])
            rows.append(MetricRow(
                f"{label}/s{seed}/src{j}", seed, label, report.final_mse, score,
                float(np.linalg.norm(report.x2_delta)), wall,
            ))
    result.steps, result.times, result.curves = steps, times, np.array(curves)
    return result


def method_label(method: str, p: CvcParams) -> str:
    if method == "cvc" and p.correction_mode == "off":
        return "cvc-no-correction"
    return method


def run_reconstruction(cfg: ExperimentConfig, method: str | None = None, p: CvcParams | None = None,
                       label: str | None = None, **kw) -> ExperimentResult:
    """Edit with c_tar forced to c_src; the ideal output is the source itself."""
    method = method or cfg.method
    p = p or cfg.cvc
    g = cfg.guidance_or(RECONSTRUCT_GUIDANCE)
    return _sweep_sources(cfg, label or method_label(method, p), method, cfg.c_src, cfg.c_src, g, p, **kw)


def run_edit(cfg: ExperimentConfig, **kw) -> ExperimentResult:
    if cfg.c_src == cfg.c_tar:
        raise RejectedInput("edit needs c_src != c_tar")
    g = cfg.guidance_or(EDIT_GUIDANCE)
    return _sweep_sources(cfg, method_label(cfg.method, cfg.cvc), cfg.method, cfg.c_src, cfg.c_tar, g, cfg.cvc, **kw)


def run_guidance_sweep(cfg: ExperimentConfig, omega2_list=None) -> tuple[list[tuple[float, float, float]], dict[float, ExperimentResult]]:
    """FlowEdit reconstructions across target guidance scales.

    Returns rows (omega2, mean accumulated ||x2||, mean final MSE) and per-omega2 results.
    """
    omega2_list = tuple(omega2_list if omega2_list is not None else cfg.omega2_list)
    base = cfg.guidance_or(RECONSTRUCT_GUIDANCE)
    model, field = setup(cfg)
    table, results = [], {}
    for w2 in omega2_list:
        sub = replace(cfg, guidance=GuidanceParams(base.omega1, float(w2)))
        res = run_reconstruction(sub, "flowedit", label=f"flowedit-omega2={float(w2)!r}", model=model, field=field)
        results[float(w2)] = res
        table.append((float(w2), res.mean_x2_norm, res.mean_final_mse))
    return table, results


ABLATION_LABELS = ("flowedit", "cvc-no-correction", "cvc-full")


def run_ablation(cfg: ExperimentConfig) -> dict[str, ExperimentResult]:
    """Three reconstruction configurations on identical seeds and sources."""
    model, field = setup(cfg)
    off = replace(cfg.cvc, correction_mode="off")
    full = cfg.cvc if cfg.cvc.correction_mode != "off" else replace(cfg.cvc, correction_mode="tweedie_residual")
    return {
        "flowedit": run_reconstruction(cfg, "flowedit", label="flowedit", model=model, field=field),
        "cvc-no-correction": run_reconstruction(cfg, "cvc", off, label="cvc-no-correction", model=model, field=field),
        "cvc-full": run_reconstruction(cfg, "cvc", full, label="cvc-full", model=model, field=field),
    }
