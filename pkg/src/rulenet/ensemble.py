"""Masking-ensemble inference.

A trained model is rolled out K times with its stochastic elements left on
(feature masking, rule masking, dropout); the rollouts are averaged into a
mean prediction and their spread becomes a per-row uncertainty. Each rollout
draws from its own rng stream keyed by (seed, rollout index), so results do
not depend on evaluation order and rollouts could run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import softmax as sp_softmax

from .data import EncodedSplit, TASK_REGRESSION, take_rows
from .errors import ConfigError
from .model import RuleNetModel
from .training import EVAL_CHUNK, predict_split


@dataclass(frozen=True)
class EnsemblePrediction:
    """Aggregate of K rollouts.

    mean: [rows] denormalized predictions (regression) or [rows, n_classes]
    probabilities (classification). std: [rows] uncertainty; for
    classification it is the spread of the winning class's probability.
    """

    mean: np.ndarray
    std: np.ndarray
    k: int
    rollouts: Optional[np.ndarray] = None


def aggregate_scalar(rollouts: np.ndarray) -> tuple:
    """Population mean/std over the rollout axis (axis 0).

    Moments are taken after shifting by the first rollout: identical
    rollouts then give a std of exactly zero, which a plain axis
    reduction does not guarantee (summing K equal floats rounds at the
    odd multiples).
    """
    base = rollouts[0]
    shifted = rollouts - base
    shifted_mean = shifted.mean(axis=0)
    std = np.sqrt(np.mean(np.square(shifted - shifted_mean), axis=0))
    return base + shifted_mean, std


def _one_rollout(model: RuleNetModel, split_: EncodedSplit, rng) -> np.ndarray:
    """One stochastic pass over the whole split, in fixed-size chunks."""
    outs = []
    for lo in range(0, split_.n_rows, EVAL_CHUNK):
        idx = np.arange(lo, min(lo + EVAL_CHUNK, split_.n_rows))
        outs.append(model.forward(take_rows(split_, idx), "rollout", rng=rng).data)
    raw = np.concatenate(outs, axis=0).astype(np.float64)
    if model.config.task == TASK_REGRESSION:
        return model.prep.normalizer.denormalize(raw)
    return sp_softmax(raw, axis=1)


def predict_ensemble(
    model: RuleNetModel,
    split_: EncodedSplit,
    k: int,
    seed: int = 0,
    keep_rollouts: bool = False,
) -> EnsemblePrediction:
    """K stochastic rollouts aggregated per row."""
    if k < 1:
        raise ConfigError(f"ensemble size must be >= 1, got {k}")
    rollouts = np.stack(
        [_one_rollout(model, split_, np.random.default_rng([seed, i])) for i in range(k)]
    )
    if model.config.task == TASK_REGRESSION:
        mean, std = aggregate_scalar(rollouts)
    else:
        mean, _ = aggregate_scalar(rollouts)
        winner = np.argmax(mean, axis=1)
        winning_prob = rollouts[:, np.arange(split_.n_rows), winner]
        _, std = aggregate_scalar(winning_prob)
    return EnsemblePrediction(mean, std, k, rollouts if keep_rollouts else None)


def predict_point(model: RuleNetModel, split_: EncodedSplit) -> np.ndarray:
    """Single deterministic eval-mode pass, in the same units as the ensemble."""
    raw = predict_split(model, split_).astype(np.float64)
    if model.config.task == TASK_REGRESSION:
        return model.prep.normalizer.denormalize(raw)
    return sp_softmax(raw, axis=1)
