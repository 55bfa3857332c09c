"""Built-in GMM families and dataset generation."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..errors import RejectedInput
from ..oracle import GmmConditionalModel, make_model, sample_data, save_model

FAMILIES = ("symmetric-2gmm", "ring-kgmm")


def symmetric_2gmm(d: int = 2, sep: float = 4.0, sigma: float = 0.5) -> GmmConditionalModel:
    """Two classes at +-(sep/2) e_1; class 0 sits on the positive side."""
    if d < 1:
        raise RejectedInput(f"d must be >= 1, got {d}")
    mu = np.zeros(d)
    mu[0] = sep / 2.0
    return make_model([mu, 0.0 - mu], sigma)


def ring_kgmm(k: int = 8, radius: float = 3.0, sigma: float = 0.3, d: int = 2) -> GmmConditionalModel:
    """k classes evenly spaced on a circle in the first two coordinates."""
    if k < 1 or d < 2:
        raise RejectedInput(f"ring-kgmm needs k >= 1 and d >= 2, got k={k}, d={d}")
    means = []
    for j in range(k):
        mu = np.zeros(d)
        mu[0] = radius * np.cos(2 * np.pi * j / k)
        mu[1] = radius * np.sin(2 * np.pi * j / k)
        means.append(mu)
    return make_model(means, sigma, [1.0 / k] * k)


def build_family(family: str, **params) -> GmmConditionalModel:
    if family == "symmetric-2gmm":
        return symmetric_2gmm(int(params.get("d", 2)), float(params.get("sep", 4.0)), float(params.get("sigma", 0.5)))
    if family == "ring-kgmm":
        return ring_kgmm(
            int(params.get("k", 8)), float(params.get("radius", 3.0)), float(params.get("sigma", 0.3)), int(params.get("d", 2))
        )
    raise RejectedInput(f"unknown family {family!r}; choose from {', '.join(FAMILIES)}")


def gen_dataset(family: str, params: dict, seed: int, out, n: int = 1000) -> list[Path]:
    """Write ``model.txt`` and ``samples_c<k>.csv`` for each condition."""
    model = build_family(family, **params)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "model.txt"]
    save_model(model, written[0])
    for k, child in enumerate(np.random.SeedSequence(seed).spawn(model.n_conditions)):
        xs = sample_data(model, k, n, child)
        path = out / f"samples_c{k}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x_{j}" for j in range(model.dim)])
            w.writerows([[repr(float(v)) for v in row] for row in xs])
        written.append(path)
    return written
