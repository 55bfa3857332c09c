"""Experiment configuration and its INI file form.

A config file holds ``key = value`` lines under section headers; ``#`` and
``;`` start comment lines. Every key is optional. Recognized sections:

    [experiment]  backend, checkpoint, method, steps, start_fraction, seeds,
                  n_sources, c_src, c_tar, timing
    [data]        model (path; overrides family), family, d, sep, sigma, k, radius
    [guidance]    omega1, omega2
    [cvc]         alpha, beta, eta, correction_mode, second_eta_in_update, t_floor
    [sweep]       omega2_list
    [train]       lr, batch_size, epochs, p_drop, seed, n_data, hidden

Lists are comma separated. Unknown sections are ignored, so a run manifest
(which embeds a snapshot of these sections) is itself a valid config.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from ..editors import CORRECTION_MODES, CvcParams, GuidanceParams
from ..errors import RejectedInput
from ..nnvf import TrainConfig
from ..oracle import GmmConditionalModel, load_model
from .datasets import FAMILIES, build_family

STEP_PRESETS = (28, 50)
RECONSTRUCT_GUIDANCE = GuidanceParams(1.0, 2.0)
EDIT_GUIDANCE = GuidanceParams(1.5, 5.5)
LEARNED_START_FRACTION = 0.9


@dataclass
class DataSpec:
    model: Optional[str] = None
    family: str = "symmetric-2gmm"
    d: int = 2
    sep: float = 4.0
    sigma: float = 0.5
    k: int = 8
    radius: float = 3.0

    def build(self) -> GmmConditionalModel:
        if self.model:
            return load_model(self.model)
        if self.family not in FAMILIES:
            raise RejectedInput(f"unknown family {self.family!r}; choose from {', '.join(FAMILIES)}")
        params = {"d": self.d, "sigma": self.sigma}
        params.update({"sep": self.sep} if self.family == "symmetric-2gmm" else {"k": self.k, "radius": self.radius})
        return build_family(self.family, **params)


@dataclass
class ExperimentConfig:
    backend: str = "oracle"
    checkpoint: Optional[str] = None
    method: str = "cvc"
    steps: int = 50
    start_fraction: Optional[float] = None  # None: 1.0 on oracle, 0.9 on learned
    seeds: tuple[int, ...] = (0,)
    n_sources: int = 20
    c_src: int = 0
    c_tar: int = 1
    timing: bool = False
    data: DataSpec = field(default_factory=DataSpec)
    guidance: Optional[GuidanceParams] = None  # None: per-experiment default
    cvc: CvcParams = field(default_factory=CvcParams)
    omega2_list: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "ExperimentConfig":
        if self.backend not in ("oracle", "learned"):
            raise RejectedInput(f"backend must be oracle or learned, got {self.backend!r}")
        if self.method not in ("flowedit", "cvc"):
            raise RejectedInput(f"method must be flowedit or cvc, got {self.method!r}")
        if not self.seeds:
            raise RejectedInput("at least one seed required")
        if self.steps < 1 or self.n_sources < 1:
            raise RejectedInput("steps and n_sources must be positive")
        if self.backend == "learned":
            if not self.checkpoint:
                raise RejectedInput("learned backend needs a checkpoint path")
            if not Path(self.checkpoint).exists():
                raise RejectedInput(f"checkpoint not found: {self.checkpoint}")
        if self.data.model and not Path(self.data.model).exists():
            raise RejectedInput(f"model description not found: {self.data.model}")
        return self

    def resolved_start_fraction(self) -> float:
        if self.start_fraction is not None:
            return self.start_fraction
        return LEARNED_START_FRACTION if self.backend == "learned" else 1.0

    def guidance_or(self, default: GuidanceParams) -> GuidanceParams:
        return self.guidance if self.guidance is not None else default


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise RejectedInput(f"not a boolean: {text!r}")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def to_ini(cfg: ExperimentConfig, guidance: GuidanceParams | None = None) -> str:
    """Snapshot with every value spelled out, so re-reading it reproduces ``cfg``."""
    cp = configparser.ConfigParser(interpolation=None)
    exp = {
        "backend": cfg.backend,
        "method": cfg.method,
        "steps": cfg.steps,
        "start_fraction": cfg.resolved_start_fraction(),
        "seeds": cfg.seeds,
        "n_sources": cfg.n_sources,
        "c_src": cfg.c_src,
        "c_tar": cfg.c_tar,
        "timing": cfg.timing,
    }
    if cfg.checkpoint:
        exp["checkpoint"] = str(Path(cfg.checkpoint).resolve())
    cp["experiment"] = {k: _fmt(v) for k, v in exp.items()}
    data = {f.name: getattr(cfg.data, f.name) for f in fields(DataSpec)}
    if data["model"]:
        data["model"] = str(Path(data["model"]).resolve())
    else:
        del data["model"]
    cp["data"] = {k: _fmt(v) for k, v in data.items()}
    g = guidance or cfg.guidance
    if g is not None:
        cp["guidance"] = {"omega1": _fmt(float(g.omega1)), "omega2": _fmt(float(g.omega2))}
    cp["cvc"] = {f.name: _fmt(getattr(cfg.cvc, f.name)) for f in fields(CvcParams)}
    cp["sweep"] = {"omega2_list": _fmt(tuple(float(w) for w in cfg.omega2_list))}
    cp["train"] = {f.name: _fmt(getattr(cfg.train, f.name)) for f in fields(TrainConfig)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def from_ini(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise RejectedInput(f"malformed config: {exc}") from exc
    cfg = replace(base) if base is not None else ExperimentConfig()
    try:
        if cp.has_section("experiment"):
            s = cp["experiment"]
            conv = {
                "backend": str, "checkpoint": str, "method": str, "steps": int, "start_fraction": float,
                "seeds": _ints, "n_sources": int, "c_src": int, "c_tar": int, "timing": _bool,
            }
            for key, value in s.items():
                if key not in conv:
                    raise RejectedInput(f"unknown key [experiment] {key}")
                setattr(cfg, key, conv[key](value))
        if cp.has_section("data"):
            s = cp["data"]
            conv = {"model": str, "family": str, "d": int, "sep": float, "sigma": float, "k": int, "radius": float}
            kw = {}
            for key, value in s.items():
                if key not in conv:
                    raise RejectedInput(f"unknown key [data] {key}")
                kw[key] = conv[key](value)
            cfg.data = replace(cfg.data, **kw)
        if cp.has_section("guidance"):
            s = cp["guidance"]
            g = cfg.guidance or GuidanceParams(1.0, 1.0)
            cfg.guidance = GuidanceParams(float(s.get("omega1", g.omega1)), float(s.get("omega2", g.omega2)))
        if cp.has_section("cvc"):
            s = cp["cvc"]
            conv = {
                "alpha": float, "beta": float, "eta": float, "correction_mode": str,
                "second_eta_in_update": _bool, "t_floor": float,
            }
            kw = {}
            for key, value in s.items():
                if key not in conv:
                    raise RejectedInput(f"unknown key [cvc] {key}")
                kw[key] = conv[key](value)
            cfg.cvc = replace(cfg.cvc, **kw)
        if cp.has_section("sweep") and "omega2_list" in cp["sweep"]:
            cfg.omega2_list = _floats(cp["sweep"]["omega2_list"])
        if cp.has_section("train"):
            s = cp["train"]
            conv = {"lr": float, "batch_size": int, "epochs": int, "p_drop": float, "seed": int, "n_data": int, "hidden": _ints}
            kw = {}
            for key, value in s.items():
                if key not in conv:
                    raise RejectedInput(f"unknown key [train] {key}")
                kw[key] = conv[key](value)
            cfg.train = replace(cfg.train, **kw)
    except ValueError as exc:
        if isinstance(exc, RejectedInput):
            raise
        raise RejectedInput(f"bad config value: {exc}") from exc
    return cfg


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise RejectedInput(f"config file not found: {path}")
    return from_ini(path.read_text(), base)


__all__ = [
    "CORRECTION_MODES", "DataSpec", "EDIT_GUIDANCE", "ExperimentConfig", "RECONSTRUCT_GUIDANCE",
    "STEP_PRESETS", "from_ini", "load_config", "to_ini",
]
