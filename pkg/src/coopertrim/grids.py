"""Dense feature grids, small linear maps, and seeded random streams.

Everything downstream (uncertainty scoring, attention, the wire protocol,
training) is built on the three types here:

- FeatureGrid: one agent's C x H x W latent scene snapshot, row-major by
  (channel, row, column), f64, finite, immutable after construction.
- LinearMap: a dense affine map y = W x + b.
- Rng: a seeded PCG64 stream with named substreams, so every stochastic
  component of a simulation can be replayed bit-exactly.

All arithmetic is 64-bit float; 32-bit floats appear only at the wire
boundary (see protocol).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GridError(ValueError):
    """Construction or shape violation on a grid/map."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise GridError(f"{what}: non-finite value at flat index {bad}")


@dataclass(frozen=True)
class FeatureGrid:
    """C x H x W grid of finite f64 values, immutable after construction.

    values is stored C-contiguous, so flattening it yields the row-major
    (channel, row, column) order the wire format serializes.
    """

    channels: int
    height: int
    width: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name, n in (("channels", self.channels), ("height", self.height),
                        ("width", self.width)):
            if n <= 0:
                raise GridError(f"{name} must be positive, got {n}")
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        expected = self.channels * self.height * self.width
        if v.size != expected:
            raise GridError(
                f"values length mismatch: expected {expected}, got {v.size}")
        _check_finite(v, "FeatureGrid values")
        v = v.reshape(self.channels, self.height, self.width).copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def same_shape(self, other: "FeatureGrid") -> bool:
        return self.shape == other.shape

    def flat(self) -> np.ndarray:
        """Row-major (channel, row, column) view of the values."""
        return self.values.reshape(-1)

    def channel_flat(self, c: int) -> np.ndarray:
        """Row-major H*W view of one channel."""
        return self.values[c].reshape(-1)

    def __eq__(self, other) -> bool:
        return (isinstance(other, FeatureGrid)
                and self.shape == other.shape
                and np.array_equal(self.values, other.values))


def new_feature_grid(channels: int, height: int, width: int,
                     values) -> FeatureGrid:
    """Build a FeatureGrid from a flat row-major (c, r, col) value array."""
    return FeatureGrid(channels, height, width, np.asarray(values))


def zeros_grid(channels: int, height: int, width: int) -> FeatureGrid:
    return FeatureGrid(channels, height, width,
                       np.zeros(channels * height * width))


def grid_from_array(arr: np.ndarray) -> FeatureGrid:
    """Wrap a (C, H, W) array as a FeatureGrid."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3:
        raise GridError(f"expected a 3-d array, got shape {arr.shape}")
    c, h, w = arr.shape
    return FeatureGrid(c, h, w, arr)


def l1_deviation(current: FeatureGrid, previous_fused: FeatureGrid) -> FeatureGrid:
    """Elementwise absolute deviation between a frame and its temporal reference.

    Both grids must have identical dimensions; the result is non-negative.
    """
    if not current.same_shape(previous_fused):
        raise GridError(
            f"shape mismatch: {current.shape} vs {previous_fused.shape}")
    return grid_from_array(np.abs(current.values - previous_fused.values))


@dataclass(frozen=True)
class LinearMap:
    """Dense affine map: apply(x) = weights @ x + bias."""

    in_dim: int
    out_dim: int
    weights: np.ndarray = field(repr=False)
    bias: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise GridError("LinearMap dims must be positive")
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        b = np.ascontiguousarray(self.bias, dtype=np.float64)
        if w.shape != (self.out_dim, self.in_dim):
            raise GridError(
                f"weights shape {w.shape} != ({self.out_dim}, {self.in_dim})")
        if b.shape != (self.out_dim,):
            raise GridError(f"bias shape {b.shape} != ({self.out_dim},)")
        _check_finite(w, "LinearMap weights")
        _check_finite(b, "LinearMap bias")
        w = w.copy()
        b = b.copy()
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)


def apply_linear(lin: LinearMap, x) -> np.ndarray:
    """weights @ x + bias, for a single vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != lin.in_dim:
        raise GridError(
            f"input dim {x.shape[-1]} != LinearMap in_dim {lin.in_dim}")
    return x @ lin.weights.T + lin.bias


def init_linear(in_dim: int, out_dim: int, rng: "Rng") -> LinearMap:
    """Symmetric-uniform init scaled by 1/sqrt(fan_in), zero bias."""
    bound = 1.0 / np.sqrt(in_dim)
    w = rng.generator.uniform(-bound, bound, size=(out_dim, in_dim))
    return LinearMap(in_dim, out_dim, w, np.zeros(out_dim))


class Rng:
    """Seeded PCG64 stream with named, independent substreams.

    Substreams are derived with numpy's SeedSequence spawn keys, so
    ``Rng(seed).substream(a, b)`` is a fixed function of (seed, a, b):
    the same key path always replays the same bit stream, and disjoint
    key paths are statistically independent. Agents, epochs, and
    experiment legs each get their own key path.
    """

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        if seed < 0 or seed > 0xFFFFFFFFFFFFFFFF:
            raise GridError("seed must fit in 64 unsigned bits")
        self.seed = seed
        self._spawn_key = _spawn_key
        self.generator = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(seed, spawn_key=_spawn_key)))

    def substream(self, *keys: int) -> "Rng":
        return Rng(self.seed, self._spawn_key + tuple(int(k) for k in keys))

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self._spawn_key})"
