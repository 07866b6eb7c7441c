"""Cross-attention relevance over channels and the learned quantity cutoff.

Channels are the attention tokens: each channel's scalar gated uncertainty
is lifted to a d_k query by a learned 1 -> d_k map, while the channel's
flattened H*W feature plane provides its key and value. A C x C row-softmax
then mixes value projections across channels, and a final d_v -> 1 map
yields one relevance score per channel. Channels whose relevance exceeds
the learned cutoff tau are selected for exchange.

select_channels is the exact inference rule (strict >). soft_mask is its
logistic relaxation, used by training to pass gradient through the cutoff.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grids import FeatureGrid, GridError, LinearMap, Rng, apply_linear, init_linear
from .uncertainty import logistic


@dataclass(frozen=True)
class AttentionParams:
    """The four learned projections of the relevance scorer."""

    query_proj: LinearMap   # 1 -> d_k, applied to each channel's scalar uncertainty
    key_proj: LinearMap     # H*W -> d_k
    value_proj: LinearMap   # H*W -> d_v
    out_proj: LinearMap     # d_v -> 1
    d_k: int
    d_v: int

    def __post_init__(self):
        ok = (self.query_proj.in_dim == 1 and self.query_proj.out_dim == self.d_k
              and self.key_proj.out_dim == self.d_k
              and self.value_proj.out_dim == self.d_v
              and self.key_proj.in_dim == self.value_proj.in_dim
              and self.out_proj.in_dim == self.d_v and self.out_proj.out_dim == 1)
        if not ok:
            raise GridError("inconsistent attention projection dimensions")

    @property
    def plane_dim(self) -> int:
        return self.key_proj.in_dim


def init_attention(plane_dim: int, d_k: int = 16, d_v: int = 16,
                   rng: Rng | None = None) -> AttentionParams:
    rng = rng or Rng(0)
    return AttentionParams(
        query_proj=init_linear(1, d_k, rng.substream(0)),
        key_proj=init_linear(plane_dim, d_k, rng.substream(1)),
        value_proj=init_linear(plane_dim, d_v, rng.substream(2)),
        out_proj=init_linear(d_v, 1, rng.substream(3)),
        d_k=d_k, d_v=d_v)


def stable_softmax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; rows sum to 1."""
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_attention_relevance(u: np.ndarray, f: FeatureGrid,
                              p: AttentionParams,
                              return_cache: bool = False):
    """Per-channel relevance scores from uncertainty queries and feature keys/values.

    u must have length f.channels; every output is finite. With
    return_cache=True also returns the intermediates needed by the
    hand-written backward pass (model.attention_backward).
    """
    u = np.asarray(u, dtype=np.float64)
    c = f.channels
    if u.shape != (c,):
        raise GridError(f"uncertainty length {u.shape} != channel count {c}")
    planes = f.values.reshape(c, -1)
    if planes.shape[1] != p.plane_dim:
        raise GridError(
            f"feature plane dim {planes.shape[1]} != attention plane dim {p.plane_dim}")

    q = apply_linear(p.query_proj, u[:, None])        # (C, d_k)
    k = apply_linear(p.key_proj, planes)              # (C, d_k)
    v = apply_linear(p.value_proj, planes)            # (C, d_v)
    z = q @ k.T / np.sqrt(p.d_k)                      # (C, C)
    a = stable_softmax_rows(z)
    o = a @ v                                         # (C, d_v)
    r = apply_linear(p.out_proj, o).reshape(-1)       # (C,)
    if not np.all(np.isfinite(r)):
        raise GridError("non-finite relevance output")
    if return_cache:
        return r, {"u": u, "planes": planes, "q": q, "k": k, "v": v,
                   "a": a, "o": o}
    return r


@dataclass
class MaskThreshold:
    """Learnable relevance cutoff; unconstrained, tau() is the identity."""

    raw_tau: float = 0.0

    def tau(self) -> float:
        return float(self.raw_tau)


@dataclass(frozen=True)
class ChannelMask:
    """Boolean per-channel selection decision; the unit of bandwidth."""

    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        b = np.ascontiguousarray(self.bits, dtype=bool).copy()
        if b.ndim != 1 or b.size == 0:
            raise GridError("mask bits must be a non-empty 1-d boolean array")
        b.flags.writeable = False
        object.__setattr__(self, "bits", b)

    @property
    def channels(self) -> int:
        return int(self.bits.size)

    def count(self) -> int:
        return int(self.bits.sum())

    def selected(self) -> np.ndarray:
        """Ascending indices of the selected channels."""
        return np.flatnonzero(self.bits)

    def __eq__(self, other) -> bool:
        return (isinstance(other, ChannelMask)
                and np.array_equal(self.bits, other.bits))

    @staticmethod
    def full(channels: int) -> "ChannelMask":
        return ChannelMask(np.ones(channels, dtype=bool))

    @staticmethod
    def empty(channels: int) -> "ChannelMask":
        return ChannelMask(np.zeros(channels, dtype=bool))


def select_channels(r: np.ndarray, tau: float) -> ChannelMask:
    """bits[c] = (r[c] > tau), strict; ties resolve to not-selected."""
    r = np.asarray(r, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise GridError("relevance scores must be finite")
    return ChannelMask(r > tau)


def soft_mask(r: np.ndarray, tau: float, temperature: float) -> np.ndarray:
    """logistic((r - tau) / temperature); pointwise limit of the hard mask as
    temperature -> 0 everywhere r != tau."""
    if temperature <= 0:
        raise GridError("soft mask temperature must be positive")
    r = np.asarray(r, dtype=np.float64)
    return logistic((r - tau) / temperature)


def selected_fraction(mask: ChannelMask) -> float:
    """count()/C in [0, 1]; multiplied by the link rate it is the bandwidth."""
    return mask.count() / mask.channels
