"""Learnable selection pipeline: parameters, forward passes, hand backprop.

One SelectionModel bundles every learnable quantity:

- the four attention projections (relevance.AttentionParams),
- raw_level, the logistic-squashed quantile level of the score gate,
- raw_tau, the relevance cutoff,
- a per-channel linear task head producing dynamic and static logit planes.

Three forward flavors share the same math:

- inference (select / head_logits): hard nearest-rank quantile, strict
  gate, strict mask. Deterministic, used by episodes.
- soft (soft_selection): interpolated quantile, logistic gate, logistic
  mask; fully differentiable, so central finite differences validate the
  analytic backward pass coordinate by coordinate.
- straight-through (training_forward_backward): hard values everywhere in
  the forward pass; the backward pass swaps each step's derivative for its
  soft surrogate's, so both thresholds receive gradient.

The model is small enough that all backward passes are written by hand and
verified by training.grad_check rather than pulled from an autodiff
framework.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import FeatureGrid, GridError, LinearMap, Rng
from .relevance import (AttentionParams, ChannelMask, MaskThreshold,
                        cross_attention_relevance, init_attention,
                        select_channels, selected_fraction, soft_mask)
from .uncertainty import (QuantileGate, channel_uncertainty, gate_scores,
                          interpolated_quantile, logistic, quantile_threshold,
                          soft_gate, soft_gate_dq)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    d_k: int = 16
    d_v: int = 16
    reduction: str = "mean"
    gate_temperature: float = 0.1     # fixed soft-gate width (score units)
    mask_temperature: float = 0.1     # initial; annealed by the trainer
    # Annealing below ~0.1 freezes the thresholds: the straight-through
    # slope dies once |R - tau| exceeds a few temperatures, so decay
    # defaults to 1.0 (constant width) and the floor only guards explicit
    # decay configs.
    temperature_decay: float = 1.0
    temperature_floor: float = 0.01
    ema_reference: bool = False       # EMA temporal reference, off by default
    ema_alpha: float = 0.5
    fusion_rule: str = "average"


@dataclass
class TaskHead:
    """Per-channel linear scorer: one logit plane per semantic task."""

    dyn_weights: np.ndarray
    dyn_bias: float
    stat_weights: np.ndarray
    stat_bias: float


@dataclass
class FrameSample:
    """One training/inference frame, already aligned to the ego's perspective."""

    ego: FeatureGrid
    responders: list[tuple[FeatureGrid, np.ndarray]]  # (warped grid, validity)
    dyn_truth: np.ndarray
    stat_truth: np.ndarray


PARAM_KEYS = ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o",
              "raw_tau", "raw_level", "w_dyn", "b_dyn", "w_stat", "b_stat")


class SelectionModel:
    def __init__(self, channels: int, height: int, width: int,
                 cfg: PipelineConfig | None = None, rng: Rng | None = None):
        self.channels = channels
        self.height = height
        self.width = width
        self.cfg = cfg or PipelineConfig()
        rng = rng or Rng(0)
        self.attention = init_attention(height * width, self.cfg.d_k,
                                        self.cfg.d_v, rng.substream(0))
        self.gate = QuantileGate(raw_level=0.0)
        self.cutoff = MaskThreshold(raw_tau=0.0)
        head_rng = rng.substream(1).generator
        bound = 1.0 / np.sqrt(channels)
        self.head = TaskHead(
            dyn_weights=head_rng.uniform(-bound, bound, channels),
            dyn_bias=0.0,
            stat_weights=head_rng.uniform(-bound, bound, channels),
            stat_bias=0.0)

    # -- parameter vector -------------------------------------------------

    def param_arrays(self) -> dict[str, np.ndarray]:
        a = self.attention
        return {
            "w_q": a.query_proj.weights, "b_q": a.query_proj.bias,
            "w_k": a.key_proj.weights, "b_k": a.key_proj.bias,
            "w_v": a.value_proj.weights, "b_v": a.value_proj.bias,
            "w_o": a.out_proj.weights, "b_o": a.out_proj.bias,
            "raw_tau": np.array([self.cutoff.raw_tau]),
            "raw_level": np.array([self.gate.raw_level]),
            "w_dyn": self.head.dyn_weights,
            "b_dyn": np.array([self.head.dyn_bias]),
            "w_stat": self.head.stat_weights,
            "b_stat": np.array([self.head.stat_bias]),
        }

    def param_vector(self) -> np.ndarray:
        arrs = self.param_arrays()
        return np.concatenate([arrs[k].ravel() for k in PARAM_KEYS])

    def set_param_vector(self, vec: np.ndarray) -> None:
        arrs = self.param_arrays()
        shapes = [(k, arrs[k].shape) for k in PARAM_KEYS]
        total = sum(int(np.prod(s)) for _, s in shapes)
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (total,):
            raise GridError(f"parameter vector must have length {total}")
        out: dict[str, np.ndarray] = {}
        off = 0
        for key, shape in shapes:
            n = int(np.prod(shape))
            out[key] = vec[off:off + n].reshape(shape).copy()
            off += n
        hw = self.height * self.width
        self.attention = AttentionParams(
            query_proj=LinearMap(1, self.cfg.d_k, out["w_q"], out["b_q"]),
            key_proj=LinearMap(hw, self.cfg.d_k, out["w_k"], out["b_k"]),
            value_proj=LinearMap(hw, self.cfg.d_v, out["w_v"], out["b_v"]),
            out_proj=LinearMap(self.cfg.d_v, 1, out["w_o"], out["b_o"]),
            d_k=self.cfg.d_k, d_v=self.cfg.d_v)
        self.cutoff = MaskThreshold(float(out["raw_tau"][0]))
        self.gate = QuantileGate(float(out["raw_level"][0]))
        self.head = TaskHead(out["w_dyn"], float(out["b_dyn"][0]),
                             out["w_stat"], float(out["b_stat"][0]))

    def grad_vector(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        arrs = self.param_arrays()
        parts = []
        for key in PARAM_KEYS:
            g = grads.get(key)
            parts.append(np.zeros(arrs[key].size) if g is None
                         else np.asarray(g, dtype=np.float64).ravel())
        return np.concatenate(parts)

    # -- inference path ----------------------------------------------------

    def select(self, scores: FeatureGrid, ego: FeatureGrid) -> tuple[ChannelMask, dict]:
        """Hard selection decision for one frame; returns mask + diagnostics."""
        level = self.gate.level()
        q = quantile_threshold(scores, level)
        gated = gate_scores(scores, q)
        u = channel_uncertainty(gated, self.cfg.reduction)
        r = cross_attention_relevance(u, ego, self.attention)
        mask = select_channels(r, self.cutoff.tau())
        return mask, {"level": level, "q": q, "u": u, "relevance": r,
                      "fraction": selected_fraction(mask)}

    def head_logits(self, fused: FeatureGrid) -> tuple[np.ndarray, np.ndarray]:
        planes = fused.values
        dyn = np.tensordot(self.head.dyn_weights, planes, axes=1) + self.head.dyn_bias
        stat = np.tensordot(self.head.stat_weights, planes, axes=1) + self.head.stat_bias
        return dyn, stat


# ---------------------------------------------------------------------------
# Shared backward building blocks
# ---------------------------------------------------------------------------


def attention_backward(cache: dict, p: AttentionParams,
                       g_r: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backprop g_r (d out / d relevance) through the attention stack.

    Returns (projection grads, d out / d uncertainty).
    """
    u, planes = cache["u"], cache["planes"]
    q, k, v, a, o = cache["q"], cache["k"], cache["v"], cache["a"], cache["o"]
    w_o_row = p.out_proj.weights[0]
    g_o = g_r[:, None] * w_o_row[None, :]
    grad_w_o = (g_r[:, None] * o).sum(axis=0)[None, :]
    grad_b_o = np.array([g_r.sum()])
    g_a = g_o @ v.T
    g_v = a.T @ g_o
    # Softmax rows: dZ = A * (dA - sum(dA * A, row))
    g_z = a * (g_a - (g_a * a).sum(axis=1, keepdims=True))
    scale = 1.0 / np.sqrt(p.d_k)
    g_q = g_z @ k * scale
    g_k = g_z.T @ q * scale
    grads = {
        "w_o": grad_w_o, "b_o": grad_b_o,
        "w_q": (g_q.T @ u[:, None]), "b_q": g_q.sum(axis=0),
        "w_k": g_k.T @ planes, "b_k": g_k.sum(axis=0),
        "w_v": g_v.T @ planes, "b_v": g_v.sum(axis=0),
    }
    g_u = g_q @ p.query_proj.weights[:, 0]
    return grads, g_u


def _gate_chain_backward(model: SelectionModel, scores: FeatureGrid,
                         g_u: np.ndarray, q: float, slope: float,
                         level: float) -> float:
    """d out / d raw_level through mean-reduction, soft gate, and quantile."""
    if model.cfg.reduction != "mean":
        raise TrainingError(
            "the differentiable path supports the mean reduction only")
    hw = model.height * model.width
    g_gated = np.repeat(g_u / hw, hw).reshape(scores.shape)
    dq = float((g_gated * soft_gate_dq(scores, q, model.cfg.gate_temperature)).sum())
    return dq * slope * level * (1.0 - level)


# ---------------------------------------------------------------------------
# Fully soft pipeline (finite-difference checkable)
# ---------------------------------------------------------------------------


def soft_selection(model: SelectionModel, scores: FeatureGrid,
                   ego: FeatureGrid,
                   mask_temperature: float | None = None,
                   with_grads: bool = True):
    """out = sum_c soft_mask(relevance(soft-gated uncertainty, features)).

    Every step is smooth: interpolated quantile, logistic gate, logistic
    mask. Returns (out, grads) with analytic gradients for all attention
    projections, raw_tau, and raw_level.
    """
    t_mask = mask_temperature or model.cfg.mask_temperature
    level = model.gate.level()
    q, slope = interpolated_quantile(scores, level)
    gated = soft_gate(scores, q, model.cfg.gate_temperature)
    u = gated.mean(axis=(1, 2))
    r, cache = cross_attention_relevance(u, ego, model.attention,
                                         return_cache=True)
    tau = model.cutoff.tau()
    m = soft_mask(r, tau, t_mask)
    out = float(m.sum())
    if not with_grads:
        return out, None
    dm = np.ones_like(m)
    sig_prime = m * (1.0 - m) / t_mask
    g_r = dm * sig_prime
    grads, g_u = attention_backward(cache, model.attention, g_r)
    grads["raw_tau"] = np.array([-(dm * sig_prime).sum()])
    grads["raw_level"] = np.array([
        _gate_chain_backward(model, scores, g_u, q, slope, level)])
    return out, grads


# ---------------------------------------------------------------------------
# Straight-through training objective
# ---------------------------------------------------------------------------


def _bce_with_logits(logits: np.ndarray, truth: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. the logits."""
    y = truth.astype(np.float64)
    loss = np.maximum(logits, 0.0) - logits * y + np.log1p(np.exp(-np.abs(logits)))
    grad = (logistic(logits) - y) / logits.size
    return float(loss.mean()), grad


def _fuse_hard(ego: FeatureGrid, responders, exchange_bits: np.ndarray):
    """Masked uniform average plus the per-responder gates and denominator."""
    num = ego.values.copy()
    den = np.ones_like(num)
    gates = []
    for grid, validity in responders:
        gate = exchange_bits[:, None, None] & np.asarray(validity, dtype=bool)[None, :, :]
        num += np.where(gate, grid.values, 0.0)
        den += gate
        gates.append(gate)
    return num / den, den, gates


def training_forward_backward(model: SelectionModel, sample: FrameSample,
                              scores: FeatureGrid, lam: float,
                              c_target: float, full_exchange: bool,
                              mask_temperature: float,
                              hinge: bool = False) -> dict:
    """One straight-through step: hard forward, soft backward.

    Forward values use the exact inference ops (nearest-rank quantile,
    strict gate, strict mask, hard-masked fusion); the returned grads use
    the logistic surrogates evaluated at those hard values. The exchange
    mask is all-ones on full draws, but the constraint penalty always
    measures the policy's own hard mask.
    """
    level = model.gate.level()
    q = quantile_threshold(scores, level)
    gated = gate_scores(scores, q)
    u = channel_uncertainty(gated, model.cfg.reduction)
    r, cache = cross_attention_relevance(u, sample.ego, model.attention,
                                         return_cache=True)
    tau = model.cutoff.tau()
    mask = select_channels(r, tau)
    fraction = selected_fraction(mask)

    exchange_bits = (np.ones(model.channels, dtype=bool) if full_exchange
                     else mask.bits)
    fused_vals, den, gates = _fuse_hard(sample.ego, sample.responders,
                                        exchange_bits)
    dyn_logits = (np.tensordot(model.head.dyn_weights, fused_vals, axes=1)
                  + model.head.dyn_bias)
    stat_logits = (np.tensordot(model.head.stat_weights, fused_vals, axes=1)
                   + model.head.stat_bias)
    bce_dyn, g_dyn = _bce_with_logits(dyn_logits, sample.dyn_truth)
    bce_stat, g_stat = _bce_with_logits(stat_logits, sample.stat_truth)
    task_loss = 0.5 * (bce_dyn + bce_stat)
    overshoot = fraction - c_target
    penalty = max(0.0, overshoot) if hinge else overshoot
    total = task_loss + lam * penalty
    if not np.isfinite(total):
        raise TrainingError(
            f"non-finite loss (task={task_loss}, lambda={lam}, "
            f"fraction={fraction})")

    # ---- backward ----
    g_dyn *= 0.5
    g_stat *= 0.5
    grads: dict[str, np.ndarray] = {
        "w_dyn": np.tensordot(g_dyn, fused_vals, axes=([0, 1], [1, 2])),
        "b_dyn": np.array([g_dyn.sum()]),
        "w_stat": np.tensordot(g_stat, fused_vals, axes=([0, 1], [1, 2])),
        "b_stat": np.array([g_stat.sum()]),
    }
    g_fused = (model.head.dyn_weights[:, None, None] * g_dyn[None, :, :]
               + model.head.stat_weights[:, None, None] * g_stat[None, :, :])

    # Task loss reaches the mask only when the exchange used the policy mask.
    # The fusion surrogate (ego + sum m*v) / (1 + sum m*valid) is smooth in
    # m, so its mask derivative valid*(v - fused)/den is evaluated wherever
    # the responder is valid, selected or not; otherwise deselected
    # channels could never earn their way back in.
    g_mask = np.zeros(model.channels)
    if not full_exchange:
        for grid, validity in sample.responders:
            valid = np.asarray(validity, dtype=bool)[None, :, :]
            contrib = np.where(valid, (grid.values - fused_vals) / den, 0.0)
            g_mask += (g_fused * contrib).sum(axis=(1, 2))

    # Constraint penalty measures the policy fraction on every draw.
    if not hinge or overshoot > 0:
        g_mask += lam / model.channels

    m_soft = soft_mask(r, tau, mask_temperature)
    sig_prime = m_soft * (1.0 - m_soft) / mask_temperature
    g_r = g_mask * sig_prime
    att_grads, g_u = attention_backward(cache, model.attention, g_r)
    grads.update(att_grads)
    grads["raw_tau"] = np.array([-(g_mask * sig_prime).sum()])
    _, slope = interpolated_quantile(scores, level)
    grads["raw_level"] = np.array([
        _gate_chain_backward(model, scores, g_u, q, slope, level)])

    return {
        "total": float(total), "task_loss": float(task_loss),
        "fraction": float(fraction), "mask": mask,
        "fused": fused_vals, "grads": grads,
    }
