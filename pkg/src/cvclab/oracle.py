"""Conditional isotropic Gaussian mixtures with exact flow-matching quantities.

Under the interpolant z_t = (1 - t) x + t eps with x ~ N(mu, sigma^2 I) and
eps ~ N(0, I), each component gives a jointly Gaussian (x, eps, z_t), so the
ideal velocity E[eps - x | z_t] and the posterior mean E[x | z_t] are closed
form. Mixtures combine components with posterior responsibilities.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import EstimateUnreliable, RejectedInput
from .flowcore import NULL, Condition

MIN_EFFECTIVE_SAMPLES = 50.0


@dataclass(frozen=True)
class GaussianComponent:
    mean: tuple[float, ...]
    sigma: float
    weight: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise RejectedInput(f"sigma must be positive, got {self.sigma}")
        if not self.weight > 0:
            raise RejectedInput(f"weight must be positive, got {self.weight}")
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))


@dataclass(frozen=True)
class GmmConditionalModel:
    """One Gaussian mixture per class id plus class priors for the null condition."""

    conditions: tuple[tuple[GaussianComponent, ...], ...]
    priors: tuple[float, ...]

    def __post_init__(self):
        if not self.conditions:
            raise RejectedInput("model needs at least one condition")
        if len(self.priors) != len(self.conditions):
            raise RejectedInput("one prior per condition required")
        dims = {len(comp.mean) for comps in self.conditions for comp in comps}
        if any(len(comps) == 0 for comps in self.conditions):
            raise RejectedInput("every condition needs at least one component")
        if len(dims) != 1:
            raise RejectedInput(f"inconsistent component dimensions {sorted(dims)}")
        priors = np.asarray(self.priors, dtype=np.float64)
        if np.any(priors <= 0):
            raise RejectedInput("class priors must be positive")
        # Already-normalized values are kept bit-for-bit so file round trips are exact.
        if abs(priors.sum() - 1.0) > 1e-12:
            priors = priors / priors.sum()
        object.__setattr__(self, "priors", tuple(float(p) for p in priors))
        normed = []
        for comps in self.conditions:
            total = sum(c.weight for c in comps)
            if abs(total - 1.0) > 1e-12:
                comps = tuple(GaussianComponent(c.mean, c.sigma, c.weight / total) for c in comps)
            normed.append(tuple(comps))
        object.__setattr__(self, "conditions", tuple(normed))

    @property
    def dim(self) -> int:
        return len(self.conditions[0][0].mean)

    @property
    def n_conditions(self) -> int:
        return len(self.conditions)

    def components(self, c: Condition) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(means (K, d), sigmas (K,), weights (K,)) for a condition.

        The null condition is the prior-weighted union of every class's components.
        """
        if c is NULL:
            comps = [(comp, p * comp.weight) for comps, p in zip(self.conditions, self.priors) for comp in comps]
        else:
            if not isinstance(c, (int, np.integer)) or not 0 <= c < self.n_conditions:
                raise RejectedInput(f"unknown condition {c!r}; model has {self.n_conditions}")
            comps = [(comp, comp.weight) for comp in self.conditions[c]]
        means = np.array([comp.mean for comp, _ in comps], dtype=np.float64)
        sigmas = np.array([comp.sigma for comp, _ in comps], dtype=np.float64)
        weights = np.array([w for _, w in comps], dtype=np.float64)
        return means, sigmas, weights


def _check_t(t: float) -> float:
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise RejectedInput(f"time {t} outside [0, 1]")
    return t


def _component_posteriors(model: GmmConditionalModel, z: np.ndarray, t: float, c: Condition):
    """Per-component conditional means of x and eps, and responsibilities.

    Returns (resp (..., K), ex (..., K, d), eeps (..., K, d)).
    """
    means, sigmas, weights = model.components(c)
    d = means.shape[1]
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != d:
        raise RejectedInput(f"latent dimension {z.shape[-1]} != model dimension {d}")
    shifted = (1.0 - t) * means  # (K, d)
    s2 = (1.0 - t) ** 2 * sigmas**2 + t**2  # (K,)
    resid = z[..., None, :] - shifted  # (..., K, d)
    logp = np.log(weights) - 0.5 * d * np.log(2 * np.pi * s2) - 0.5 * np.sum(resid**2, axis=-1) / s2
    logp = logp - logp.max(axis=-1, keepdims=True)
    resp = np.exp(logp)
    resp /= resp.sum(axis=-1, keepdims=True)
    ex = means + ((1.0 - t) * sigmas**2 / s2)[:, None] * resid
    eeps = (t / s2)[:, None] * resid
    return resp, ex, eeps


def oracle_velocity(model: GmmConditionalModel, z, t: float, c: Condition) -> np.ndarray:
    """Exact E[eps - x | z_t = z, c]. Accepts a single latent or a batch (..., d)."""
    t = _check_t(t)
    resp, ex, eeps = _component_posteriors(model, z, t, c)
    return np.sum(resp[..., None] * (eeps - ex), axis=-2)


def posterior_mean_x0(model: GmmConditionalModel, z, t: float, c: Condition) -> np.ndarray:
    """Exact E[x | z_t = z, c]; at t=0 the latent is the data point itself."""
    t = _check_t(t)
    if t == 0.0:
        return np.array(z, dtype=np.float64)
    resp, ex, _ = _component_posteriors(model, z, t, c)
    return np.sum(resp[..., None] * ex, axis=-2)


def single_gaussian_velocity(z, t: float, mu, sigma: float) -> np.ndarray:
    """Closed form for one isotropic component."""
    z = np.asarray(z, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    s2 = (1 - t) ** 2 * sigma**2 + t**2
    return (t - (1 - t) * sigma**2) / s2 * (z - (1 - t) * mu) - mu


def class_posterior(model: GmmConditionalModel, x) -> np.ndarray:
    """p(c | x) under the data distribution (t = 0), shape (..., n_conditions)."""
    x = np.asarray(x, dtype=np.float64)
    logs = []
    for k, prior in enumerate(model.priors):
        means, sigmas, weights = model.components(k)
        d = means.shape[1]
        resid = x[..., None, :] - means
        lp = np.log(weights) - 0.5 * d * np.log(2 * np.pi * sigmas**2) - 0.5 * np.sum(resid**2, axis=-1) / sigmas**2
        m = lp.max(axis=-1, keepdims=True)
        logs.append(np.log(prior) + m[..., 0] + np.log(np.exp(lp - m).sum(axis=-1)))
    logs = np.stack(logs, axis=-1)
    logs -= logs.max(axis=-1, keepdims=True)
    p = np.exp(logs)
    return p / p.sum(axis=-1, keepdims=True)


def sample_data(model: GmmConditionalModel, c: Condition, n: int, seed) -> np.ndarray:
    """Draw ``n`` i.i.d. points from the condition's mixture, shape (n, d)."""
    if n < 1:
        raise RejectedInput(f"n must be >= 1, got {n}")
    means, sigmas, weights = model.components(c)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(weights), size=n, p=weights / weights.sum())
    eps = rng.standard_normal((n, model.dim))
    return means[idx] + sigmas[idx, None] * eps


def mc_velocity_estimate(
    model: GmmConditionalModel,
    z,
    t: float,
    c: Condition,
    n_samples: int = 100_000,
    bandwidth: float = 0.1,
    seed=0,
) -> np.ndarray:
    """Nadaraya-Watson estimate of E[eps - x | z_t ~= z] from simulated triples.

    Shares nothing with the closed form beyond the sampler, so it serves as an
    independent check of ``oracle_velocity``.
    """
    if n_samples < 1000:
        raise RejectedInput(f"n_samples must be >= 1000, got {n_samples}")
    t = _check_t(t)
    z = np.asarray(z, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = sample_data(model, c, n_samples, rng)
    eps = rng.standard_normal(x.shape)
    zt = (1.0 - t) * x + t * eps
    w = np.exp(-0.5 * np.sum((zt - z) ** 2, axis=1) / bandwidth**2)
    ess = w.sum() ** 2 / np.sum(w**2) if w.sum() > 0 else 0.0
    if ess < MIN_EFFECTIVE_SAMPLES:
        raise EstimateUnreliable(f"effective sample size {ess:.1f} below {MIN_EFFECTIVE_SAMPLES}")
    target = eps - x
    return (w[:, None] * target).sum(axis=0) / w.sum()


class OracleField:
    """Adapts a model to the velocity-field call signature."""

    def __init__(self, model: GmmConditionalModel):
        self.model = model

    def __call__(self, z, t, c):
        return oracle_velocity(self.model, z, t, c)


# --- model description files -------------------------------------------------
#
# INI layout, floats written with repr() so a save/load round trip is exact:
#
#   [model]
#   dim = 2
#   n_conditions = 2
#
#   [condition.0]
#   prior = 0.5
#   n_components = 1
#   component.0.weight = 1.0
#   component.0.sigma = 0.5
#   component.0.mean = 2.0, 0.0


def dumps_model(model: GmmConditionalModel) -> str:
    cp = configparser.ConfigParser()
    cp["model"] = {"dim": str(model.dim), "n_conditions": str(model.n_conditions)}
    for k, (comps, prior) in enumerate(zip(model.conditions, model.priors)):
        sec = {"prior": repr(prior), "n_components": str(len(comps))}
        for j, comp in enumerate(comps):
            sec[f"component.{j}.weight"] = repr(comp.weight)
            sec[f"component.{j}.sigma"] = repr(comp.sigma)
            sec[f"component.{j}.mean"] = ", ".join(repr(m) for m in comp.mean)
        cp[f"condition.{k}"] = sec
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def loads_model(text: str) -> GmmConditionalModel:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
        dim = cp.getint("model", "dim")
        n_cond = cp.getint("model", "n_conditions")
        conditions, priors = [], []
        for k in range(n_cond):
            sec = cp[f"condition.{k}"]
            comps = []
            for j in range(int(sec["n_components"])):
                mean = tuple(float(v) for v in sec[f"component.{j}.mean"].split(","))
                if len(mean) != dim:
                    raise RejectedInput(f"condition {k} component {j}: mean has {len(mean)} entries, dim is {dim}")
                comps.append(GaussianComponent(mean, float(sec[f"component.{j}.sigma"]), float(sec[f"component.{j}.weight"])))
            conditions.append(tuple(comps))
            priors.append(float(sec["prior"]))
    except (configparser.Error, KeyError) as exc:
        raise RejectedInput(f"malformed model description: {exc}") from exc
    return GmmConditionalModel(tuple(conditions), tuple(priors))


def save_model(model: GmmConditionalModel, path: Union[str, Path]) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path: Union[str, Path]) -> GmmConditionalModel:
    return loads_model(Path(path).read_text())


def make_model(means: Sequence[Sequence[float]], sigma: float, priors: Sequence[float] | None = None) -> GmmConditionalModel:
    """One single-component condition per mean."""
    comps = tuple((GaussianComponent(tuple(m), sigma),) for m in means)
    if priors is None:
        priors = [1.0] * len(comps)
    return GmmConditionalModel(comps, tuple(priors))
