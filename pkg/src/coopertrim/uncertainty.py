"""Temporal-uncertainty scoring: quantile gate and per-channel reduction.

A nonconformity map is the elementwise L1 deviation between the current
frame's features and the previous fused frame (grids.l1_deviation). This
module turns such a map into a per-channel uncertainty vector:

    q = quantile_threshold(scores, level)     # nearest-rank quantile
    gated = gate_scores(scores, q)            # zero out scores <= q
    u = channel_uncertainty(gated)            # per-channel reduction

The quantile level is learnable through QuantileGate: a raw parameter
squashed by a logistic, so gradient steps can never push the level out of
(0, 1). Gradients reach the raw parameter through a differentiable
relaxation (interpolated_quantile + soft_gate) used only by training;
inference always uses the exact nearest-rank / strict-gate path above.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import FeatureGrid, GridError, grid_from_array


class UncertaintyError(ValueError):
    pass


def _scores_array(scores: FeatureGrid) -> np.ndarray:
    v = scores.values
    if v.size == 0:
        raise UncertaintyError("empty score map")
    if np.any(v < 0):
        raise UncertaintyError("nonconformity scores must be non-negative")
    return v


def logistic(x):
    x = np.asarray(x, dtype=np.float64)
    # Split by sign so exp() never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass
class QuantileGate:
    """Learnable quantile level, parameterized on the whole real line."""

    raw_level: float = 0.0

    def level(self) -> float:
        return float(logistic(np.float64(self.raw_level)))


def quantile_threshold(scores: FeatureGrid, level: float) -> float:
    """Nearest-rank quantile of all C*H*W scores.

    Sorts ascending and returns the element at 1-based index
    ceil(level * n). level must lie in (0, 1]; level -> 0+ returns the
    minimum, level = 1 the maximum. The result is always a member of the
    score multiset.
    """
    v = _scores_array(scores)
    if not (0.0 < level <= 1.0):
        raise UncertaintyError(f"quantile level must be in (0, 1], got {level}")
    flat = np.sort(v.reshape(-1))
    n = flat.size
    rank = int(np.ceil(level * n))
    rank = min(max(rank, 1), n)
    return float(flat[rank - 1])


def gate_scores(scores: FeatureGrid, q: float) -> FeatureGrid:
    """Keep scores strictly above q, zero elsewhere. Shape-preserving."""
    if not np.isfinite(q):
        raise UncertaintyError(f"gate threshold must be finite, got {q}")
    v = _scores_array(scores)
    return grid_from_array(np.where(v > q, v, 0.0))


def channel_uncertainty(gated: FeatureGrid, mode: str = "mean") -> np.ndarray:
    """Reduce a gated score map to one non-negative value per channel.

    mode: "mean" (default; arithmetic mean over the H*W cells of each
    channel), "max", or "fraction_above" (fraction of cells surviving
    the gate).
    """
    v = _scores_array(gated)
    if mode == "mean":
        return v.mean(axis=(1, 2))
    if mode == "max":
        return v.max(axis=(1, 2))
    if mode == "fraction_above":
        return (v > 0).mean(axis=(1, 2))
    raise UncertaintyError(f"unknown reduction mode {mode!r}")


# ---------------------------------------------------------------------------
# Differentiable relaxation (training only).
#
# The nearest-rank quantile is piecewise constant in `level` and the strict
# gate is a step in q, so neither passes gradient to the learnable level.
# Training instead differentiates through:
#   q~(level)  = linear interpolation between order statistics
#   soft gate  = s * logistic((s - q~) / temperature)
# and uses the exact hard path for forward values (straight-through).
# ---------------------------------------------------------------------------


def interpolated_quantile(scores: FeatureGrid, level: float) -> tuple[float, float]:
    """Piecewise-linear quantile and its derivative d q~ / d level.

    Position h = level * (n - 1) over the ascending order statistics;
    returns (x[k] + (h - k) * (x[k+1] - x[k]), (n - 1) * (x[k+1] - x[k]))
    with k = floor(h). The derivative is the slope of the active segment
    (taken to the left at exact knots).
    """
    v = _scores_array(scores)
    if not (0.0 <= level <= 1.0):
        raise UncertaintyError(f"quantile level must be in [0, 1], got {level}")
    flat = np.sort(v.reshape(-1))
    n = flat.size
    if n == 1:
        return float(flat[0]), 0.0
    h = level * (n - 1)
    k = min(int(np.floor(h)), n - 2)
    gap = float(flat[k + 1] - flat[k])
    value = float(flat[k]) + (h - k) * gap
    return value, (n - 1) * gap


def soft_gate(scores: FeatureGrid, q: float, temperature: float) -> np.ndarray:
    """s * logistic((s - q) / temperature); smooth surrogate of gate_scores."""
    if temperature <= 0:
        raise UncertaintyError("gate temperature must be positive")
    v = _scores_array(scores)
    return v * logistic((v - q) / temperature)


def soft_gate_dq(scores: FeatureGrid, q: float, temperature: float) -> np.ndarray:
    """d soft_gate / d q, elementwise."""
    v = _scores_array(scores)
    sig = logistic((v - q) / temperature)
    return -v * sig * (1.0 - sig) / temperature
