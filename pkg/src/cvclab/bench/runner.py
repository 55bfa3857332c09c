"""Run directories: fixed-name outputs, manifests and report merging.

Every run directory holds ``curve.csv``, ``metrics.csv``, ``summary.txt`` and
``manifest.txt``. A manifest embeds the full config snapshot, so passing it
back as ``--config`` re-runs the experiment.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import os
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from .. import __version__
from ..editors import GuidanceParams
from ..nnvf import MlpVelocityNet, save_checkpoint, train, write_loss_history
from .config import EDIT_GUIDANCE, RECONSTRUCT_GUIDANCE, ExperimentConfig, from_ini, to_ini
from .experiments import (
    METRIC_COLUMNS,
    ExperimentFailed,
    ExperimentResult,
    run_ablation,
    run_edit,
    run_guidance_sweep,
    run_reconstruction,
)

EXPERIMENT_COMMANDS = ("reconstruct", "edit", "sweep", "ablate")


def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, started: str,
                   guidance: GuidanceParams | None = None, status: str = "ok", error: str = "") -> Path:
    out = Path(out)
    files = sorted(
        p for p in out.rglob("*")
        if p.is_file() and p.name != "manifest.txt" and not p.name.startswith(".")
    )
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    head = {"command": command, "tool_version": __version__, "started": started, "finished": _now(), "status": status}
    if error:
        head["error"] = error.replace("\n", " ")
    cp["manifest"] = head
    cp["files"] = {p.relative_to(out).as_posix(): sha256(p) for p in files}
    text = io.StringIO()
    cp.write(text)
    path = out / "manifest.txt"
    atomic_write(path, text.getvalue() + to_ini(cfg, guidance))
    return path


def read_manifest(path) -> tuple[str, dict[str, str], ExperimentConfig]:
    """(command, {relative file: sha256}, config) from a manifest."""
    text = Path(path).read_text()
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    return cp["manifest"]["command"], dict(cp["files"]) if cp.has_section("files") else {}, from_ini(text)


def write_result(out: Path, result: ExperimentResult, extra_summary: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    curve = result.mean_curve
    atomic_write(out / "curve.csv", _csv_text(
        ["step", "t", "mse"],
        [[int(s), repr(float(t)), repr(float(m))] for s, t, m in zip(result.steps, result.times, curve)],
    ))
    atomic_write(out / "metrics.csv", _csv_text(METRIC_COLUMNS, [r.as_list() for r in result.rows]))
    summary = {
        "label": result.label,
        "n_runs": len(result.rows),
        "mean_final_mse": repr(result.mean_final_mse),
        "mean_semantic_score": repr(result.mean_semantic_score),
        "mean_x2_norm": repr(result.mean_x2_norm),
    }
    if result.guidance is not None:
        summary["omega1"] = repr(float(result.guidance.omega1))
        summary["omega2"] = repr(float(result.guidance.omega2))
    summary.update(extra_summary or {})
    atomic_write(out / "summary.txt", "".join(f"{k} = {v}\n" for k, v in summary.items()))


def _write_sub(out: Path, result: ExperimentResult, cfg: ExperimentConfig, started: str, guidance=None) -> None:
    write_result(out, result)
    write_manifest(out, "reconstruct", cfg, started, guidance)


def execute(command: str, cfg: ExperimentConfig, out) -> Path:
    """Run an experiment command and write its run directory. Returns the manifest path."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    cfg.validate()
    try:
        if command == "reconstruct":
            g = cfg.guidance_or(RECONSTRUCT_GUIDANCE)
            write_result(out, run_reconstruction(cfg))
            return write_manifest(out, command, cfg, started, g)
        if command == "edit":
            g = cfg.guidance_or(EDIT_GUIDANCE)
            write_result(out, run_edit(cfg))
            return write_manifest(out, command, cfg, started, g)
        if command == "sweep":
            base = cfg.guidance_or(RECONSTRUCT_GUIDANCE)
            table, results = run_guidance_sweep(cfg)
            for w2, res in results.items():
                g = GuidanceParams(base.omega1, w2)
                _write_sub(out / f"omega2_{w2!r}", res, replace(cfg, method="flowedit", guidance=g), started, g)
            atomic_write(out / "sweep.csv", _csv_text(
                ["omega2", "x2_norm", "final_mse"], [[repr(w), repr(x), repr(m)] for w, x, m in table]
            ))
            atomic_write(out / "summary.txt", f"omega1 = {base.omega1!r}\nn_omega2 = {len(table)}\n")
            return write_manifest(out, command, cfg, started, base)
        if command == "ablate":
            g = cfg.guidance_or(RECONSTRUCT_GUIDANCE)
            results = run_ablation(cfg)
            rows = []
            for label, res in results.items():
                if label == "flowedit":
                    sub = replace(cfg, method="flowedit")
                else:
                    mode = "off" if label == "cvc-no-correction" else _full_mode(cfg)
                    sub = replace(cfg, method="cvc", cvc=replace(cfg.cvc, correction_mode=mode))
                _write_sub(out / label, res, sub, started, g)
                rows.append([label, repr(res.mean_final_mse), repr(res.mean_semantic_score), repr(res.mean_x2_norm)])
            atomic_write(out / "ablation.csv", _csv_text(["config", "mean_final_mse", "mean_semantic_score", "mean_x2_norm"], rows))
            atomic_write(out / "summary.txt", "".join(f"{r[0]} = {r[1]}\n" for r in rows))
            return write_manifest(out, command, cfg, started, g)
    except ExperimentFailed as exc:
        if exc.partial.rows:
            write_result(out, exc.partial)
        write_manifest(out, command, cfg, started, status="failed", error=str(exc))
        raise
    raise ValueError(f"unknown experiment command {command!r}")


def _full_mode(cfg: ExperimentConfig) -> str:
    return cfg.cvc.correction_mode if cfg.cvc.correction_mode != "off" else "tweedie_residual"


def rerun(manifest_path, out) -> Path:
    """Re-execute the run described by a manifest into ``out``."""
    command, _, cfg = read_manifest(manifest_path)
    return execute(command, cfg, out)


def merge_reports(run_dir, out_csv=None) -> Path:
    """Concatenate every ``metrics.csv`` below ``run_dir`` into one CSV."""
    run_dir = Path(run_dir)
    out_csv = Path(out_csv) if out_csv else run_dir / "report.csv"
    rows = []
    for path in sorted(run_dir.rglob("metrics.csv")):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != METRIC_COLUMNS:
                raise ValueError(f"{path}: unexpected header {header}")
            rows.extend(reader)
    if not rows:
        raise FileNotFoundError(f"no metrics.csv found under {run_dir}")
    atomic_write(out_csv, _csv_text(METRIC_COLUMNS, rows))
    return out_csv


def train_checkpoint(cfg: ExperimentConfig, out) -> Path:
    """Train on the configured GMM; writes the checkpoint, ``loss.csv`` and a manifest."""
    out = Path(out)
    ckpt = out if out.suffix == ".json" else out / "checkpoint.json"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    started = _now()
    model = cfg.data.build()
    tc = cfg.train
    net = MlpVelocityNet.init(model.dim, model.n_conditions, tc.hidden, seed=[tc.seed, 7])
    net, history = train(net, model, tc)
    save_checkpoint(net, ckpt, {"seed": tc.seed, "epochs": tc.epochs, "final_loss": history[-1], "lr": tc.lr, "p_drop": tc.p_drop})
    write_loss_history(history, loss_history_path(ckpt))
    if ckpt.name == "checkpoint.json":
        write_manifest(ckpt.parent, "train", cfg, started)
    return ckpt


def loss_history_path(ckpt) -> Path:
    """``loss.csv`` beside a directory-style checkpoint, ``<stem>.loss.csv`` otherwise."""
    ckpt = Path(ckpt)
    return ckpt.with_name("loss.csv" if ckpt.name == "checkpoint.json" else f"{ckpt.stem}.loss.csv")


def ensure_checkpoint(cfg: ExperimentConfig, path) -> Path:
    """Train into ``path`` unless a checkpoint already exists there."""
    path = Path(path)
    if not path.exists():
        train_checkpoint(cfg, path)
    return path
