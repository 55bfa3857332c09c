"""Experiment harness and CLI."""

from .config import ExperimentConfig, from_ini, load_config, to_ini
from .datasets import build_family, gen_dataset, ring_kgmm, symmetric_2gmm
from .experiments import (
    ExperimentResult,
    MetricRow,
    run_ablation,
    run_edit,
    run_guidance_sweep,
    run_reconstruction,
)
from .runner import ensure_checkpoint, execute, merge_reports, read_manifest, rerun, train_checkpoint
