"""Post-hoc diagonal Laplace approximation and Monte-Carlo predictive inference.

The weight posterior is approximated by independent Gaussians around the
trained parameters with precision ``fisher_multiplier * F + tau``, where
``F`` is the empirical-Fisher diagonal (mean of squared per-sample loss
gradients).  Predictions average ``T`` forward passes with sampled weights.

Models used here need ``named_parameters``/``state_dict``/``load_state_dict``
(see :class:`mhavio.nn.Module`), ``sample_loss(item) -> Tensor`` and
``predict(data) -> ndarray``.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .checkpoint import atomic_write_text, decode_params, encode_params
from .errors import ConfigError, ContractError, FormatError, TrainingError

POSTERIOR_FORMAT = "mhavio-posterior"
POSTERIOR_VERSION = 1
# variances below this are clamped when scoring a Gaussian NLL
VARIANCE_FLOOR = 1e-12
DEFAULT_SAMPLES = 30


@dataclass
class PosteriorApprox:
    theta_map: "OrderedDict[str, np.ndarray]"
    fisher_diag: "OrderedDict[str, np.ndarray]"
    fisher_multiplier: float = 1.0
    tau: float = 1.0
    stochastic: list | None = None   # parameter names that get sampled; None = all

    def __post_init__(self):
        if list(self.theta_map) != list(self.fisher_diag):
            raise ContractError("theta_map and fisher_diag must list the same parameters in the same order")
        for name, f in self.fisher_diag.items():
            if f.shape != self.theta_map[name].shape:
                raise ContractError(f"fisher/theta shape mismatch for {name}")
            if np.any(f < 0):
                raise ContractError(f"negative Fisher entry in {name}")
        if self.fisher_multiplier <= 0 or self.tau <= 0:
            raise ConfigError("fisher_multiplier and tau must be > 0")

    @property
    def names(self) -> list[str]:
        return list(self.theta_map) if self.stochastic is None else list(self.stochastic)

    def precision(self) -> "OrderedDict[str, np.ndarray]":
        return regularize(self.fisher_diag, self.fisher_multiplier, self.tau)

    def with_hyperparams(self, fisher_multiplier: float, tau: float) -> "PosteriorApprox":
        return PosteriorApprox(self.theta_map, self.fisher_diag, fisher_multiplier, tau, self.stochastic)


@dataclass
class PredictiveResult:
    mean: np.ndarray
    variance: np.ndarray
    num_samples: int
    samples: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.num_samples < 2:
            raise ContractError("predictive variance needs at least 2 samples")


def fit_fisher(model, items: Sequence, loss_fn: Callable | None = None) -> "OrderedDict[str, np.ndarray]":
    """Empirical-Fisher diagonal: mean over items of squared loss gradients."""
    if len(items) == 0:
        raise ContractError("fit_fisher needs at least one data item")
    loss_fn = loss_fn or model.sample_loss
    params = OrderedDict(model.named_parameters())
    acc = OrderedDict((n, np.zeros_like(p.data)) for n, p in params.items())
    for i, item in enumerate(items):
        for p in params.values():
            p.grad = None
        value = loss_fn(item)
        if not np.isfinite(value.data):
            raise TrainingError(f"non-finite loss at data item {i}")
        value.backward()
        for n, p in params.items():
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient for {n} at data item {i}")
            acc[n] += p.grad * p.grad
    for p in params.values():
        p.grad = None
    return OrderedDict((n, a / len(items)) for n, a in acc.items())


def regularize(fisher_diag: dict, fisher_multiplier: float, tau: float) -> "OrderedDict[str, np.ndarray]":
    """Elementwise posterior precision ``fisher_multiplier * F + tau``."""
    if fisher_multiplier <= 0 or tau <= 0:
        raise ConfigError(f"fisher_multiplier and tau must be > 0, got {fisher_multiplier}, {tau}")
    return OrderedDict((n, fisher_multiplier * f + tau) for n, f in fisher_diag.items())


def fit_laplace(model, items: Sequence, fisher_multiplier: float = 1.0, tau: float = 1.0,
                stochastic: Iterable[str] | None = None, loss_fn: Callable | None = None) -> PosteriorApprox:
    fisher = fit_fisher(model, items, loss_fn)
    return PosteriorApprox(model.state_dict(), fisher, fisher_multiplier, tau,
                           None if stochastic is None else list(stochastic))


def select_parameters(model, scope: str) -> list[str] | None:
    """``"all"`` -> None (every parameter); ``"fusion_head"`` -> fusion block and pose head only."""
    if scope == "all":
        return None
    if scope == "fusion_head":
        return [n for n, _ in model.named_parameters() if n.startswith(("fusion.", "head."))]
    raise ConfigError(f"unknown stochastic scope {scope!r}")


def sample_params(post: PosteriorApprox, rng: np.random.Generator) -> "OrderedDict[str, np.ndarray]":
    """One draw ``theta_MAP + eps / sqrt(precision)``; non-stochastic entries stay at the MAP."""
    prec = post.precision()
    chosen = set(post.names)
    out = OrderedDict()
    for name, theta in post.theta_map.items():
        if name in chosen:
            out[name] = theta + rng.standard_normal(theta.shape) / np.sqrt(prec[name])
        else:
            out[name] = theta.copy()
    return out


def sample_seeds(seed: int, T: int) -> list[np.random.SeedSequence]:
    """Per-sample seeds derived from one master seed (order-independent)."""
    return np.random.SeedSequence(seed).spawn(T)


def predict_bayesian(model, data, post: PosteriorApprox, T: int = DEFAULT_SAMPLES, seed: int = 0,
                     seeds: Sequence | None = None, predict_fn: Callable | None = None,
                     keep_samples: bool = False) -> PredictiveResult:
    """Monte-Carlo model average over ``T`` posterior samples.

    Returns the sample mean and unbiased sample variance of the outputs.
    ``seeds`` overrides the per-sample seeds (one per sample).  The model
    itself is not modified; sampling happens on a private copy.
    """
    if T < 2:
        raise ContractError("T must be >= 2")
    seeds = list(seeds) if seeds is not None else sample_seeds(seed, T)
    if len(seeds) != T:
        raise ContractError(f"{len(seeds)} seeds for {T} samples")
    work = model.clone()
    predict = predict_fn or (lambda m: m.predict(data))
    outs = []
    for s in seeds:
        work.load_state_dict(sample_params(post, np.random.default_rng(s)))
        outs.append(np.asarray(predict(work), dtype=np.float64))
    samples = np.stack(outs)
    return PredictiveResult(samples.mean(axis=0), samples.var(axis=0, ddof=1), T,
                            samples if keep_samples else None)


def gaussian_nll(mean: np.ndarray, variance: np.ndarray, target: np.ndarray) -> float:
    """Mean per-component Gaussian negative log-likelihood with a variance floor."""
    var = np.maximum(variance, VARIANCE_FLOOR)
    return float(np.mean(0.5 * (np.log(2 * np.pi * var) + (target - mean) ** 2 / var)))


def tune_hyperparams(model, data, targets: np.ndarray, post: PosteriorApprox, grid: Sequence[tuple[float, float]],
                     T: int = DEFAULT_SAMPLES, seed: int = 0, predict_fn: Callable | None = None):
    """Pick (fisher_multiplier, tau) from ``grid`` minimizing validation Gaussian NLL.

    Ties keep the earlier grid point.  Returns ``((N, tau), scores)``.
    """
    if not grid:
        raise ContractError("empty hyperparameter grid")
    targets = np.asarray(targets, dtype=np.float64)
    scores = []
    for N, tau in grid:
        res = predict_bayesian(model, data, post.with_hyperparams(N, tau), T, seed, predict_fn=predict_fn)
        score = gaussian_nll(res.mean, res.variance, targets)
        scores.append(score if np.isfinite(score) else np.nan)
    arr = np.array(scores)
    if np.all(np.isnan(arr)):
        raise TrainingError("every grid point produced a non-finite score")
    best = int(np.nanargmin(arr))
    return tuple(grid[best]), scores


def save_posterior(path: str | Path, post: PosteriorApprox, theta_ref: str | None = None) -> None:
    """Write fisher diagonal + hyperparameters; ``theta_ref`` points at the MAP checkpoint."""
    doc = {
        "format": POSTERIOR_FORMAT,
        "version": POSTERIOR_VERSION,
        "theta_map_checkpoint": theta_ref,
        "fisher_multiplier": post.fisher_multiplier,
        "tau": post.tau,
        "stochastic": post.stochastic,
        "fisher_diag": encode_params(post.fisher_diag),
    }
    if theta_ref is None:
        doc["theta_map"] = encode_params(post.theta_map)
    atomic_write_text(path, json.dumps(doc))


def load_posterior(path: str | Path, theta_map: dict | None = None) -> PosteriorApprox:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON") from exc
    if doc.get("format") != POSTERIOR_FORMAT or doc.get("version") != POSTERIOR_VERSION:
        raise FormatError(f"{path}: not a version-{POSTERIOR_VERSION} posterior file")
    if theta_map is None:
        if "theta_map" in doc:
            theta_map = decode_params(doc["theta_map"])
        elif doc.get("theta_map_checkpoint"):
            from .checkpoint import load_params

            ref = Path(doc["theta_map_checkpoint"])
            theta_map = load_params(ref if ref.is_absolute() else path.parent / ref)
        else:
            raise FormatError(f"{path}: no MAP parameters referenced")
    fisher = decode_params(doc["fisher_diag"])
    theta_map = OrderedDict((n, np.asarray(theta_map[n])) for n in fisher)
    return PosteriorApprox(theta_map, fisher, float(doc["fisher_multiplier"]), float(doc["tau"]), doc.get("stochastic"))
