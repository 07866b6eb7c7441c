"""Lossy, delayed message channel and bandwidth accounting.

The channel model is deliberately simple: a message is either dropped
outright (probability loss_rate) or delivered whole after a latency that
is rounded up to whole frames. Channel-granular loss, used by episode
robustness sweeps, lives in apply_loss_mask: each selected channel of a
received grid is dropped independently and removed from the effective
mask, so fusion falls back to the ego's own features.

Bandwidth is reported as selected fraction x full link rate (default
40 Mbps for a full 128x32x32 f32 feature volume at 10 Hz), with raw bytes
on the wire logged separately by the harness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import FeatureGrid, Rng
from .relevance import ChannelMask


class NetsimError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    loss_rate: float = 0.0
    latency_ms: float | tuple[float, float] = 0.0
    frame_period_ms: float = 100.0
    full_link_mbps: float = 40.0
    delay_requests: bool = False   # default delays responses only

    def __post_init__(self):
        if not (0.0 <= self.loss_rate <= 1.0):
            raise NetsimError(f"loss_rate must be in [0, 1], got {self.loss_rate}")
        lat = self.latency_ms
        if isinstance(lat, tuple):
            if len(lat) != 2 or lat[0] < 0 or lat[1] < lat[0]:
                raise NetsimError(f"bad latency jitter range {lat}")
        elif lat < 0:
            raise NetsimError("latency must be non-negative")
        if self.frame_period_ms <= 0 or self.full_link_mbps <= 0:
            raise NetsimError("frame period and link rate must be positive")

    def sample_latency_ms(self, rng: Rng) -> float:
        if isinstance(self.latency_ms, tuple):
            lo, hi = self.latency_ms
            return float(rng.generator.uniform(lo, hi))
        return float(self.latency_ms)


@dataclass(frozen=True)
class DeliveryRecord:
    """Outcome of one transmit: delivered_frame is None when dropped."""

    sent_frame: int
    delivered_frame: int | None
    bytes_on_wire: int

    @property
    def dropped(self) -> bool:
        return self.delivered_frame is None


def transmit(msg_bytes: bytes, sent_frame: int, cfg: NetworkConfig,
             rng: Rng) -> DeliveryRecord:
    """Drop with probability loss_rate, else deliver after ceil(latency/period) frames."""
    n = len(msg_bytes)
    if cfg.loss_rate > 0 and rng.generator.random() < cfg.loss_rate:
        return DeliveryRecord(sent_frame, None, n)
    delay = int(np.ceil(cfg.sample_latency_ms(rng) / cfg.frame_period_ms))
    return DeliveryRecord(sent_frame, sent_frame + delay, n)


def bandwidth_mbps(fraction_selected: float, cfg: NetworkConfig) -> float:
    """Selected fraction of the full link rate, exact (no rounding)."""
    if not (0.0 <= fraction_selected <= 1.0):
        raise NetsimError(
            f"fraction must be in [0, 1], got {fraction_selected}")
    return fraction_selected * cfg.full_link_mbps


def budget_fraction(target_mbps: float, cfg: NetworkConfig) -> float:
    """Channel fraction corresponding to a target share of the link."""
    if not (0.0 <= target_mbps <= cfg.full_link_mbps):
        raise NetsimError(
            f"target {target_mbps} Mbps outside [0, {cfg.full_link_mbps}]")
    return target_mbps / cfg.full_link_mbps


def apply_loss_mask(grid: FeatureGrid, mask: ChannelMask, loss_rate: float,
                    rng: Rng) -> tuple[FeatureGrid, ChannelMask]:
    """Drop each selected channel independently with probability loss_rate.

    Dropped channels leave the mask so downstream fusion ignores them; the
    grid itself is returned untouched (masked-out channels are never read).
    """
    if not (0.0 <= loss_rate <= 1.0):
        raise NetsimError(f"loss_rate must be in [0, 1], got {loss_rate}")
    if loss_rate == 0.0:
        return grid, mask
    keep = mask.bits.copy()
    sel = mask.selected()
    if sel.size:
        dropped = rng.generator.random(sel.size) < loss_rate
        keep[sel[dropped]] = False
    return grid, ChannelMask(keep)
