"""Test-time adaptation: entropy descent on codebook-query confidence, GA parameters only."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .codebook import QuantizationResult
from .errors import ArgumentError, ConfigurationError
from .ganet import Mcga, Trace, reconstruct_rgb_to_hsi
from .optim import SGD
from .tensor import Tensor

PROB_FLOOR = 1e-12


@dataclass
class TtaConfig:
    steps: int = 10
    learning_rate: float = 1e-4
    temperature: float = 1.0
    param_filter: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigurationError(f"TTA steps must be >= 0, got {self.steps}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"TTA learning rate must be positive, got {self.learning_rate}")
        if not self.temperature > 0:
            raise ConfigurationError(f"TTA temperature must be positive, got {self.temperature}")


def entropy(probabilities: Tensor) -> Tensor:
    """Sum over rows of ``-sum_e p log p``; ``0 log 0`` counts as 0."""
    p = T.as_tensor(probabilities)
    return -T.tsum(p * T.log(T.clip(p, PROB_FLOOR, 1.0)))


def tta_loss(results: Sequence[QuantizationResult], temperature: float = 1.0) -> Tensor:
    """Total entropy of every quantised location across all quantisation calls."""
    if not results:
        raise ArgumentError("tta_loss needs at least one quantisation result")
    total = None
    for r in results:
        term = entropy(r.probabilities(temperature))
        total = term if total is None else total + term
    return total


def tta_objective(model: Mcga, rgbs: Sequence[np.ndarray], temperature: float = 1.0) -> Tensor:
    total = None
    for rgb in rgbs:
        trace = Trace()
        reconstruct_rgb_to_hsi(rgb, model, trace)
        term = tta_loss(trace.results, temperature)
        total = term if total is None else total + term
    return total


def adapt(model: Mcga, rgbs: Sequence[np.ndarray], cfg: TtaConfig | None = None) -> tuple[Mcga, list[float]]:
    """Run ``cfg.steps`` gradient steps on the TTA entropy, in place.

    Only the GA parameters named in ``cfg.param_filter`` (default: the model's
    GA manifest) move. Returns the model and the loss before each step.
    """
    cfg = cfg or TtaConfig()
    rgbs = [np.asarray(r, dtype=model.decoder.head.weight.dtype) for r in rgbs]
    if not rgbs:
        raise ArgumentError("TTA needs at least one input image")
    names = list(cfg.param_filter) if cfg.param_filter is not None else model.ga_parameter_names()
    params = dict(model.named_parameters())
    unknown = [n for n in names if n not in params]
    if unknown:
        raise ConfigurationError(f"unknown TTA parameters: {unknown}")
    chosen = {n for n in names}
    saved = {n: p.requires_grad for n, p in params.items()}
    trajectory: list[float] = []
    try:
        for n, p in params.items():
            p.requires_grad = n in chosen
            p.grad = None
        opt = SGD([params[n] for n in names], cfg.learning_rate)
        for _ in range(cfg.steps):
            opt.zero_grad()
            loss = tta_objective(model, rgbs, cfg.temperature)
            trajectory.append(loss.item())
            loss.backward()
            opt.step()
    finally:
        for n, p in params.items():
            p.requires_grad = saved[n]
            p.grad = None
    return model, trajectory


def evaluate_tta_loss(model: Mcga, rgbs: Sequence[np.ndarray], temperature: float = 1.0) -> float:
    with T.no_grad():
        return tta_objective(model, rgbs, temperature).item()
