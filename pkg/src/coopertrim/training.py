"""Bandwidth-constrained training: penalty schedule, epsilon-greedy batching,
gradient verification, and the bias Monte Carlo.

The total loss is task_loss + lambda * (fraction_selected - c_target) with
the penalty signed as written: staying under budget is rewarded, and the
trainer relies on the task loss to stop the fraction from collapsing (a
hinge variant is available behind a flag).

lambda follows a three-regime schedule driven by the epoch counter and the
epoch's mean selected percentage P in [0, 100]:

- epoch <= itc:                     lambda = 0 (unconstrained warm-up)
- first epoch past itc:             lambda = lambda_seed, then the regular
                                    update below also applies that epoch
- every 10th epoch:                 lambda *= 2 ** (P / 100)
- any other epoch past itc:         lambda *= 1 + 0.1 * floor((epoch - itc) / 10)

update_lambda is called once at the end of each epoch with that epoch's
average P; the result is the multiplier for the next epoch. Starting the
multiplicative schedule from an explicit seed is required because both
update factors fix lambda = 0 forever.

Checkpoint layout (little-endian):
    "CTCK" | u8 version=1 | u16 C | u16 H | u16 W | u16 d_k | u16 d_v |
    u32 n_params | f64[n_params] (model.PARAM_KEYS order, row-major) |
    f64 lambda | u64 epoch | u64 itc | f64 c_target | f64 lambda_seed

Per-epoch metrics CSV header:
    epoch,task_loss,fraction_selected,lambda,epsilon_draws_full
"""

from __future__ import annotations

import csv
import enum
import struct
from dataclasses import dataclass, replace

import numpy as np

from .grids import FeatureGrid, Rng, grid_from_array, l1_deviation, zeros_grid
from .model import (FrameSample, PipelineConfig, SelectionModel, TrainingError,
                    training_forward_backward)


@dataclass(frozen=True)
class LagrangeState:
    lam: float
    epoch: int
    itc: int
    c_target: float
    lambda_seed: float = 0.01

    def __post_init__(self):
        if self.lam < 0:
            raise TrainingError("lambda must be non-negative")
        if not (0.0 <= self.c_target <= 1.0):
            raise TrainingError("c_target must be a fraction in [0, 1]")
        if self.lambda_seed <= 0:
            raise TrainingError("lambda_seed must be positive")


def initial_lagrange_state(c_target: float, itc: int = 5,
                           lambda_seed: float = 0.01) -> LagrangeState:
    return LagrangeState(lam=0.0, epoch=1, itc=itc, c_target=c_target,
                         lambda_seed=lambda_seed)


@dataclass(frozen=True)
class TrainConfig:
    epsilon: float = 0.2
    learning_rate: float = 0.05
    epochs: int = 60
    seed: int = 0
    hinge: bool = False

    def __post_init__(self):
        if not (0.0 <= self.epsilon <= 1.0):
            raise TrainingError("epsilon must be in [0, 1]")
        if self.learning_rate <= 0 or self.epochs <= 0:
            raise TrainingError("learning rate and epochs must be positive")


def total_loss(task_loss: float, fraction_selected: float,
               state: LagrangeState, hinge: bool = False) -> float:
    """task + lambda * (fraction - target); affine in the fraction."""
    if not (np.isfinite(task_loss) and np.isfinite(fraction_selected)):
        raise TrainingError("non-finite loss inputs")
    overshoot = fraction_selected - state.c_target
    if hinge:
        overshoot = max(0.0, overshoot)
    return task_loss + state.lam * overshoot


def update_lambda(state: LagrangeState,
                  fraction_selected_pct: float) -> LagrangeState:
    """End-of-epoch lambda transition; see the module docstring for regimes."""
    if not (0.0 <= fraction_selected_pct <= 100.0):
        raise TrainingError(
            f"P must be a percentage in [0, 100], got {fraction_selected_pct}")
    e = state.epoch
    if e <= state.itc:
        lam = 0.0
    else:
        lam = state.lambda_seed if e == state.itc + 1 else state.lam
        if e % 10 == 0:
            lam *= 2.0 ** (fraction_selected_pct / 100.0)
        else:
            lam *= 1.0 + 0.1 * ((e - state.itc) // 10)
    return replace(state, lam=lam, epoch=e + 1)


class BatchChoice(enum.Enum):
    FULL = "full"
    PARTIAL = "partial"


def epsilon_greedy_choice(rng: Rng, epsilon: float) -> BatchChoice:
    """FULL with probability epsilon, PARTIAL otherwise."""
    if not (0.0 <= epsilon <= 1.0):
        raise TrainingError("epsilon must be in [0, 1]")
    if epsilon == 0.0:
        return BatchChoice.PARTIAL
    if epsilon == 1.0:
        return BatchChoice.FULL
    return BatchChoice.FULL if rng.generator.random() < epsilon else BatchChoice.PARTIAL


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def grad_check(loss_fn, params: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn(p) must return (value, grad); the grad is read only at the
    unperturbed point. Relative error per coordinate is
    |analytic - numeric| / max(1, |numeric|).
    """
    params = np.asarray(params, dtype=np.float64)
    _, grad = loss_fn(params)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise TrainingError("analytic gradient shape mismatch")
    worst = 0.0
    for i in range(params.size):
        bump = np.zeros_like(params)
        bump[i] = step
        f_plus, _ = loss_fn(params + bump)
        f_minus, _ = loss_fn(params - bump)
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise TrainingError(f"non-finite loss at coordinate {i}")
        numeric = (f_plus - f_minus) / (2.0 * step)
        err = abs(grad[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Epsilon-greedy bias Monte Carlo
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BiasRow:
    epsilon: float
    measured_bias_norm: float
    predicted_bias_norm: float   # (1 - epsilon) * ||b||
    std_error: float

    @property
    def within_3se(self) -> bool:
        gap = abs(self.measured_bias_norm - self.predicted_bias_norm)
        return gap <= 3.0 * self.std_error + 1e-12


def proposition1_test(bias_vector, epsilons, trials: int, rng: Rng,
                      noise_sigma: float = 0.5,
                      full_gradient=None) -> list[BiasRow]:
    """Monte Carlo check that mixing full draws scales the bias by (1 - eps).

    Synthetic estimation problem: the full-data gradient is known exactly;
    each partial draw adds the planted bias plus zero-mean noise. For each
    epsilon the empirical mean gradient's bias norm is compared to
    (1 - eps) * ||b|| with a CLT standard error along the bias direction.
    """
    b = np.asarray(bias_vector, dtype=np.float64)
    g0 = (np.zeros_like(b) if full_gradient is None
          else np.asarray(full_gradient, dtype=np.float64))
    norm_b = float(np.linalg.norm(b))
    if norm_b == 0:
        raise TrainingError("planted bias must be nonzero")
    bhat = b / norm_b
    rows = []
    for i, eps in enumerate(epsilons):
        g = rng.substream(i).generator
        partial = g.random(trials) < (1.0 - eps)
        noise = g.normal(0.0, noise_sigma, size=(trials, b.size))
        draws = g0[None, :] + partial[:, None] * (b[None, :] + noise)
        bias_hat = draws.mean(axis=0) - g0
        proj = (draws - g0[None, :]) @ bhat
        se = float(proj.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
        rows.append(BiasRow(
            epsilon=float(eps),
            measured_bias_norm=float(np.linalg.norm(bias_hat)),
            predicted_bias_norm=(1.0 - eps) * norm_b,
            std_error=se))
    return rows


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    task_loss: float
    fraction_selected: float
    lam: float
    epsilon_draws_full: int


def mask_temperature_at(cfg: PipelineConfig, epoch: int) -> float:
    return max(cfg.temperature_floor,
               cfg.mask_temperature * cfg.temperature_decay ** (epoch - 1))


def _advance_reference(model: SelectionModel, ref: FeatureGrid,
                       fused_vals: np.ndarray) -> FeatureGrid:
    if model.cfg.ema_reference:
        a = model.cfg.ema_alpha
        return grid_from_array((1.0 - a) * ref.values + a * fused_vals)
    return grid_from_array(fused_vals)


def train(model: SelectionModel, frames: list[FrameSample], cfg: TrainConfig,
          state: LagrangeState) -> tuple[list[EpochMetrics], LagrangeState]:
    """Straight-through SGD over replayed scenario frames.

    Each epoch replays the frames in order with a fresh temporal reference
    (frame 0 scores against a zero grid). Every frame draws FULL/PARTIAL,
    takes one gradient step, and rolls the fused output into the next
    frame's reference. lambda advances once per epoch from the epoch's mean
    hard-mask percentage.
    """
    if not frames:
        raise TrainingError("no training frames")
    rng = Rng(cfg.seed)
    history: list[EpochMetrics] = []
    for epoch in range(1, cfg.epochs + 1):
        t_mask = mask_temperature_at(model.cfg, epoch)
        draw_rng = rng.substream(epoch)
        ref = zeros_grid(model.channels, model.height, model.width)
        lam_epoch = state.lam
        task_sum = 0.0
        frac_sum = 0.0
        full_draws = 0
        for sample in frames:
            scores = l1_deviation(sample.ego, ref)
            choice = epsilon_greedy_choice(draw_rng, cfg.epsilon)
            full = choice is BatchChoice.FULL
            full_draws += int(full)
            out = training_forward_backward(
                model, sample, scores, lam_epoch, state.c_target, full,
                t_mask, cfg.hinge)
            vec = model.param_vector() - cfg.learning_rate * model.grad_vector(out["grads"])
            model.set_param_vector(vec)
            ref = _advance_reference(model, ref, out["fused"])
            task_sum += out["task_loss"]
            frac_sum += out["fraction"]
        mean_frac = frac_sum / len(frames)
        history.append(EpochMetrics(
            epoch=epoch, task_loss=task_sum / len(frames),
            fraction_selected=mean_frac, lam=lam_epoch,
            epsilon_draws_full=full_draws))
        state = update_lambda(state, mean_frac * 100.0)
    return history, state


METRICS_HEADER = ["epoch", "task_loss", "fraction_selected", "lambda",
                  "epsilon_draws_full"]


def write_metrics_csv(path, history: list[EpochMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for m in history:
            w.writerow([m.epoch, repr(m.task_loss), repr(m.fraction_selected),
                        repr(m.lam), m.epsilon_draws_full])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CTCK"
CHECKPOINT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sBHHHHHI")
_CKPT_TAIL = struct.Struct("<dQQdd")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: SelectionModel, state: LagrangeState) -> None:
    vec = model.param_vector()
    head = _CKPT_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                           model.channels, model.height, model.width,
                           model.cfg.d_k, model.cfg.d_v, vec.size)
    tail = _CKPT_TAIL.pack(state.lam, state.epoch, state.itc,
                           state.c_target, state.lambda_seed)
    with open(path, "wb") as fh:
        fh.write(head + vec.astype("<f8").tobytes() + tail)


def load_checkpoint(path, cfg: PipelineConfig | None = None
                    ) -> tuple[SelectionModel, LagrangeState]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _CKPT_HEAD.size:
        raise CheckpointError("checkpoint truncated")
    magic, version, c, h, w, d_k, d_v, n = _CKPT_HEAD.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unknown checkpoint version {version}")
    need = _CKPT_HEAD.size + 8 * n + _CKPT_TAIL.size
    if len(data) != need:
        raise CheckpointError(f"checkpoint needs {need} bytes, got {len(data)}")
    base = cfg or PipelineConfig()
    if base.d_k != d_k or base.d_v != d_v:
        base = replace(base, d_k=d_k, d_v=d_v)
    model = SelectionModel(c, h, w, base, Rng(0))
    vec = np.frombuffer(data, dtype="<f8", count=n, offset=_CKPT_HEAD.size)
    model.set_param_vector(vec.astype(np.float64))
    lam, epoch, itc, c_target, lambda_seed = _CKPT_TAIL.unpack_from(
        data, _CKPT_HEAD.size + 8 * n)
    return model, LagrangeState(lam, epoch, itc, c_target, lambda_seed)
