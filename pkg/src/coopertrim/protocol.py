"""Bit-exact wire protocol, spatial alignment, and masked fusion.

Wire layout (all integers little-endian, all floats IEEE-754 little-endian;
mask bytes are LSB-first: bit i of byte j carries channel 8j + i, trailing
bits past the channel count must be zero):

Request  "CTRQ" | u8 version=1 | u32 agent_id | u64 frame_id |
         u16 channel_count | mask bytes (ceil(C/8)) |
         f32 pose.x | f32 pose.y | f32 pose.yaw

Response "CTRS" | u8 version=1 | u32 agent_id | u64 frame_id |
         u16 channel_count | mask bytes (ceil(C/8)) |
         u8 quant_bits in {32, 8, 4, 1} | f32 quant_scale | f32 quant_zero |
         u32 payload_len | payload

The response payload carries the selected channels only, channel-ascending,
row-major within each channel. quant_bits = 32 means raw f32 values;
8/4/1 mean affine uniform quantization (zero = min, scale = span / (2^b - 1))
followed by dense LSB-first bit packing. Either way the byte stream is
wrapped by a 2-byte lossless header: mode 0 = stored raw, mode 1 = RLE
(escape 0x00: "00 00" is a literal zero byte, "00 k v" with 4 <= k <= 255
is v repeated k times). Mode 1 is chosen only when it is strictly smaller,
so the payload never exceeds the packed size plus the 2-byte header.

Spatial alignment is an inverse warp: each target cell center, measured
from the grid center, is rotated by -yaw and translated by -(x, y)/cell_size
into the source grid, then sampled bilinearly. Out-of-bounds samples are 0
and flagged invalid so fusion never averages in padding.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .grids import FeatureGrid, GridError, grid_from_array
from .relevance import ChannelMask


class ProtocolError(ValueError):
    pass


class BadMagicError(ProtocolError):
    pass


class BadVersionError(ProtocolError):
    pass


class TruncatedError(ProtocolError):
    pass


class MaskPaddingError(ProtocolError):
    pass


class MalformedStreamError(ProtocolError):
    pass


WIRE_VERSION = 1
REQUEST_MAGIC = b"CTRQ"
RESPONSE_MAGIC = b"CTRS"
_HEADER = struct.Struct("<4sBIQH")          # magic, version, agent, frame, channels
_POSE = struct.Struct("<fff")
_RESP_QUANT = struct.Struct("<BffI")        # quant_bits, scale, zero, payload_len

QUANT_BITS = (8, 4, 1)
WIRE_BITS = (32, 8, 4, 1)


# ---------------------------------------------------------------------------
# Poses
# ---------------------------------------------------------------------------


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    y = yaw - 2.0 * math.pi * round(yaw / (2.0 * math.pi))
    if y <= -math.pi:
        y += 2.0 * math.pi
    return y


@dataclass(frozen=True)
class Pose:
    """Planar pose: x, y in meters, yaw in radians, normalized to (-pi, pi]."""

    x: float
    y: float
    yaw: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.yaw)):
            raise ProtocolError("pose fields must be finite")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    def as_f32(self) -> "Pose":
        """Round to the 32-bit precision the wire carries."""
        return Pose(float(np.float32(self.x)), float(np.float32(self.y)),
                    float(np.float32(self.yaw)))


def relative_pose(src: Pose, dst: Pose) -> Pose:
    """Pose of src expressed in dst's frame.

    Feeding the result to spatial_transform warps a grid produced at src
    into dst's perspective.
    """
    dx, dy = src.x - dst.x, src.y - dst.y
    c, s = math.cos(src.yaw), math.sin(src.yaw)
    return Pose(c * dx + s * dy, -s * dx + c * dy, src.yaw - dst.yaw)


def inverse_pose(p: Pose) -> Pose:
    """Pose q with transform(transform(g, p), q) == g (up to resampling)."""
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    return Pose(-(c * p.x - s * p.y), -(s * p.x + c * p.y), -p.yaw)


# ---------------------------------------------------------------------------
# Channel-mask bytes
# ---------------------------------------------------------------------------


def mask_to_bytes(mask: ChannelMask) -> bytes:
    """ceil(C/8) bytes, channel 8j+i at bit i of byte j, trailing bits zero."""
    return np.packbits(mask.bits, bitorder="little").tobytes()


def mask_from_bytes(data: bytes, channels: int) -> ChannelMask:
    need = (channels + 7) // 8
    if len(data) != need:
        raise TruncatedError(f"mask needs {need} bytes, got {len(data)}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8),
                         bitorder="little")
    if bits[channels:].any():
        raise MaskPaddingError("nonzero mask bits beyond channel count")
    return ChannelMask(bits[:channels].astype(bool))


# ---------------------------------------------------------------------------
# Request messages
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RequestMessage:
    agent_id: int
    frame_id: int
    mask: ChannelMask
    pose: Pose

    def __post_init__(self):
        if self.mask.channels > 0xFFFF:
            raise ProtocolError("channel count exceeds u16 range")
        object.__setattr__(self, "pose", self.pose.as_f32())


def request_length(channels: int) -> int:
    return _HEADER.size + (channels + 7) // 8 + _POSE.size


def encode_request(agent_id: int, frame_id: int, mask: ChannelMask,
                   pose: Pose) -> bytes:
    msg = RequestMessage(agent_id, frame_id, mask, pose)
    head = _HEADER.pack(REQUEST_MAGIC, WIRE_VERSION, msg.agent_id,
                        msg.frame_id, msg.mask.channels)
    return (head + mask_to_bytes(msg.mask)
            + _POSE.pack(msg.pose.x, msg.pose.y, msg.pose.yaw))


def _decode_header(data: bytes, magic: bytes) -> tuple[int, int, int]:
    if len(data) < _HEADER.size:
        raise TruncatedError(
            f"message truncated at {len(data)} bytes (header needs {_HEADER.size})")
    got, version, agent_id, frame_id, channels = _HEADER.unpack_from(data)
    if got != magic:
        raise BadMagicError(f"bad magic {got!r}, expected {magic!r}")
    if version != WIRE_VERSION:
        raise BadVersionError(f"unknown wire version {version}")
    if channels == 0:
        raise ProtocolError("zero channel count")
    return agent_id, frame_id, channels


def decode_request(data: bytes) -> RequestMessage:
    agent_id, frame_id, channels = _decode_header(data, REQUEST_MAGIC)
    if len(data) != request_length(channels):
        raise TruncatedError(
            f"request for {channels} channels needs {request_length(channels)}"
            f" bytes, got {len(data)}")
    off = _HEADER.size
    nmask = (channels + 7) // 8
    mask = mask_from_bytes(data[off:off + nmask], channels)
    x, y, yaw = _POSE.unpack_from(data, off + nmask)
    return RequestMessage(agent_id, frame_id, mask, Pose(x, y, yaw))


# ---------------------------------------------------------------------------
# Quantization and lossless packing
# ---------------------------------------------------------------------------


def quantize(values, bits: int) -> tuple[np.ndarray, float, float]:
    """Affine uniform quantization to unsigned `bits`-wide codes.

    zero = min(values), scale = span / (2^bits - 1) (scale 1 when the span
    is zero); codes = round((v - zero) / scale) clamped to the code range.
    Dequantized values satisfy |v - v^| <= scale/2 (+ rounding ulp).
    """
    if bits not in QUANT_BITS:
        raise ProtocolError(f"quant bits must be one of {QUANT_BITS}, got {bits}")
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ProtocolError("cannot quantize an empty array")
    if not np.all(np.isfinite(v)):
        raise ProtocolError("cannot quantize non-finite values")
    zero = float(v.min())
    span = float(v.max()) - zero
    levels = (1 << bits) - 1
    scale = span / levels if span > 0 else 1.0
    codes = np.clip(np.rint((v - zero) / scale), 0, levels).astype(np.uint8)
    return codes, scale, zero


def dequantize(codes: np.ndarray, scale: float, zero: float) -> np.ndarray:
    return zero + codes.astype(np.float64) * scale


def pack_bits(codes: np.ndarray, bits: int) -> bytes:
    """Dense `bits`-wide fields, LSB-first within each byte."""
    if bits not in (1, 2, 4, 8):
        raise ProtocolError(f"packable bit widths are 1/2/4/8, got {bits}")
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.size and int(codes.max()) >> bits:
        raise ProtocolError(f"code does not fit in {bits} bits")
    if bits == 8:
        return codes.tobytes()
    per = 8 // bits
    padded = np.zeros((codes.size + per - 1) // per * per, dtype=np.uint16)
    padded[:codes.size] = codes
    groups = padded.reshape(-1, per)
    shifts = np.arange(per, dtype=np.uint16) * bits
    return (groups << shifts).sum(axis=1).astype(np.uint8).tobytes()


def unpack_bits(data: bytes, n: int, bits: int) -> np.ndarray:
    if bits not in (1, 2, 4, 8):
        raise ProtocolError(f"packable bit widths are 1/2/4/8, got {bits}")
    raw = np.frombuffer(data, dtype=np.uint8)
    if bits == 8:
        if raw.size < n:
            raise MalformedStreamError("packed stream shorter than code count")
        return raw[:n].copy()
    per = 8 // bits
    if raw.size * per < n:
        raise MalformedStreamError("packed stream shorter than code count")
    shifts = np.arange(per, dtype=np.uint8) * bits
    mask = (1 << bits) - 1
    codes = ((raw[:, None] >> shifts) & mask).reshape(-1)
    return codes[:n].copy()


_RLE_ESC = 0x00
_RLE_MIN_RUN = 4
_RLE_MAX_RUN = 255


def rle_encode(data: bytes) -> bytes:
    out = bytearray()
    i, n = 0, len(data)
    while i < n:
        b = data[i]
        j = i
        while j < n and data[j] == b and j - i < _RLE_MAX_RUN:
            j += 1
        run = j - i
        if run >= _RLE_MIN_RUN:
            out += bytes((_RLE_ESC, run, b))
        else:
            for _ in range(run):
                if b == _RLE_ESC:
                    out += bytes((_RLE_ESC, 0x00))
                else:
                    out.append(b)
        i = j
    return bytes(out)


def rle_decode(data: bytes) -> bytes:
    out = bytearray()
    i, n = 0, len(data)
    while i < n:
        b = data[i]
        if b != _RLE_ESC:
            out.append(b)
            i += 1
            continue
        if i + 1 >= n:
            raise MalformedStreamError("dangling RLE escape")
        count = data[i + 1]
        if count == 0x00:
            out.append(_RLE_ESC)
            i += 2
        elif count >= _RLE_MIN_RUN:
            if i + 2 >= n:
                raise MalformedStreamError("RLE run missing value byte")
            out += bytes((data[i + 2],)) * count
            i += 3
        else:
            raise MalformedStreamError(f"invalid RLE count {count}")
    return bytes(out)


_LOSSLESS_RAW = 0
_LOSSLESS_RLE = 1


def wrap_lossless(packed: bytes, use_rle: bool = True) -> bytes:
    """Prefix a 2-byte header and RLE the body only when that shrinks it."""
    if use_rle:
        encoded = rle_encode(packed)
        if len(encoded) < len(packed):
            return bytes((_LOSSLESS_RLE, 0)) + encoded
    return bytes((_LOSSLESS_RAW, 0)) + packed


def unwrap_lossless(payload: bytes) -> bytes:
    if len(payload) < 2:
        raise MalformedStreamError("payload shorter than lossless header")
    mode = payload[0]
    if payload[1] != 0:
        raise MalformedStreamError("nonzero reserved lossless header byte")
    body = payload[2:]
    if mode == _LOSSLESS_RAW:
        return body
    if mode == _LOSSLESS_RLE:
        return rle_decode(body)
    raise MalformedStreamError(f"unknown lossless mode {mode}")


def lossless_pack(codes: np.ndarray, bits: int) -> bytes:
    """Bit-pack then RLE (with raw fallback behind the 2-byte header)."""
    return wrap_lossless(pack_bits(codes, bits))


def lossless_unpack(payload: bytes, n: int, bits: int) -> np.ndarray:
    return unpack_bits(unwrap_lossless(payload), n, bits)


# ---------------------------------------------------------------------------
# Response messages
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CompressionConfig:
    """Paper-style rate labels mapped to wire bit widths (vs 32-bit floats)."""

    rate_label: str
    quant_bits: int
    lossless: bool = True

    _LABELS = {"1x": 32, "8x": 4, "32x": 1}

    def __post_init__(self):
        expected = self._LABELS.get(self.rate_label)
        if expected is None:
            raise ProtocolError(f"unknown rate label {self.rate_label!r}")
        if expected != self.quant_bits:
            raise ProtocolError(
                f"rate {self.rate_label} implies {expected}-bit codes,"
                f" got {self.quant_bits}")

    @classmethod
    def from_label(cls, rate_label: str, lossless: bool = True) -> "CompressionConfig":
        if rate_label not in cls._LABELS:
            raise ProtocolError(f"unknown rate label {rate_label!r}")
        return cls(rate_label, cls._LABELS[rate_label], lossless)


@dataclass(frozen=True)
class ResponseMessage:
    agent_id: int
    frame_id: int
    mask: ChannelMask
    quant_bits: int
    quant_scale: float
    quant_zero: float
    payload: bytes

    def __post_init__(self):
        if self.quant_bits not in WIRE_BITS:
            raise ProtocolError(f"quant_bits must be one of {WIRE_BITS}")
        object.__setattr__(self, "quant_scale", float(np.float32(self.quant_scale)))
        object.__setattr__(self, "quant_zero", float(np.float32(self.quant_zero)))


def encode_response(agent_id: int, frame_id: int, mask: ChannelMask, values,
                    quant_bits: int = 32, lossless: bool = True) -> bytes:
    """Encode selected-channel values (channel-ascending, row-major per channel)."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if quant_bits == 32:
        packed = v.astype("<f4").tobytes()
        scale, zero = 1.0, 0.0
    elif quant_bits in QUANT_BITS:
        codes, scale, zero = quantize(v, quant_bits)
        packed = pack_bits(codes, quant_bits)
    else:
        raise ProtocolError(f"quant_bits must be one of {WIRE_BITS}")
    payload = wrap_lossless(packed, use_rle=lossless)
    msg = ResponseMessage(agent_id, frame_id, mask, quant_bits, scale, zero,
                          payload)
    head = _HEADER.pack(RESPONSE_MAGIC, WIRE_VERSION, msg.agent_id,
                        msg.frame_id, mask.channels)
    return (head + mask_to_bytes(mask)
            + _RESP_QUANT.pack(msg.quant_bits, msg.quant_scale,
                               msg.quant_zero, len(payload))
            + payload)


def decode_response(data: bytes) -> ResponseMessage:
    agent_id, frame_id, channels = _decode_header(data, RESPONSE_MAGIC)
    off = _HEADER.size
    nmask = (channels + 7) // 8
    fixed = off + nmask + _RESP_QUANT.size
    if len(data) < fixed:
        raise TruncatedError(
            f"response needs at least {fixed} bytes, got {len(data)}")
    mask = mask_from_bytes(data[off:off + nmask], channels)
    quant_bits, scale, zero, payload_len = _RESP_QUANT.unpack_from(
        data, off + nmask)
    if quant_bits not in WIRE_BITS:
        raise MalformedStreamError(f"invalid quant_bits byte {quant_bits}")
    if len(data) != fixed + payload_len:
        raise TruncatedError(
            f"payload declares {payload_len} bytes, {len(data) - fixed} present")
    return ResponseMessage(agent_id, frame_id, mask, quant_bits, scale, zero,
                           data[fixed:])


def response_values(msg: ResponseMessage, values_per_channel: int) -> np.ndarray:
    """Dequantize a response payload to count(mask) * H*W f64 values."""
    n = msg.mask.count() * values_per_channel
    body = unwrap_lossless(msg.payload)
    if msg.quant_bits == 32:
        vals = np.frombuffer(body, dtype="<f4")
        if vals.size != n:
            raise MalformedStreamError(
                f"payload holds {vals.size} values, mask implies {n}")
        return vals.astype(np.float64)
    codes = unpack_bits(body, n, msg.quant_bits)
    spare = len(body) * 8 - n * msg.quant_bits
    if spare >= 8:
        raise MalformedStreamError("payload longer than mask implies")
    return dequantize(codes, msg.quant_scale, msg.quant_zero)


# ---------------------------------------------------------------------------
# Spatial alignment and fusion
# ---------------------------------------------------------------------------


def warp_source_coords(relative: Pose, height: int, width: int,
                       cell_size: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source-grid sample coordinates of the inverse warp.

    Returns (row_s, col_s, in_bounds): for each target cell, the fractional
    source coordinates after rotating its center offset by -yaw and
    translating by -(x, y)/cell_size.
    """
    if cell_size <= 0:
        raise ProtocolError("cell_size must be positive")
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    xt = cols - cx
    yt = rows - cy
    c, s = math.cos(relative.yaw), math.sin(relative.yaw)
    # Rotation by -yaw, then translation by -(x, y)/cell_size.
    xs = c * xt + s * yt - relative.x / cell_size
    ys = -s * xt + c * yt - relative.y / cell_size
    row_s = ys + cy
    col_s = xs + cx
    valid = ((row_s >= 0) & (row_s <= height - 1)
             & (col_s >= 0) & (col_s <= width - 1))
    return row_s, col_s, valid


def warp_validity(relative: Pose, height: int, width: int,
                  cell_size: float) -> np.ndarray:
    """Validity map of spatial_transform for a pose, without touching values.

    The recipient can rebuild a responder's validity from poses alone,
    which is why the wire format does not carry it.
    """
    return warp_source_coords(relative, height, width, cell_size)[2]


def spatial_transform(src: FeatureGrid, relative: Pose,
                      cell_size: float) -> tuple[FeatureGrid, np.ndarray]:
    """Inverse-warp src into the frame `relative` is expressed against.

    Returns (warped grid, H x W validity). Invalid cells are exactly 0 in
    every channel. Channel-independent: all channels share sample points.
    """
    ch, h, w = src.shape
    row_s, col_s, valid = warp_source_coords(relative, h, w, cell_size)
    out = np.zeros((ch, h, w))
    if valid.any():
        rs = row_s[valid]
        cs = col_s[valid]
        r0 = np.clip(np.floor(rs).astype(int), 0, h - 2)
        c0 = np.clip(np.floor(cs).astype(int), 0, w - 2)
        fr = rs - r0
        fc = cs - c0
        v = src.values
        sample = (v[:, r0, c0] * (1 - fr) * (1 - fc)
                  + v[:, r0, c0 + 1] * (1 - fr) * fc
                  + v[:, r0 + 1, c0] * fr * (1 - fc)
                  + v[:, r0 + 1, c0 + 1] * fr * fc)
        out[:, valid] = sample
    return grid_from_array(out), valid


def fuse(ego: FeatureGrid,
         received: list[tuple[FeatureGrid, np.ndarray, ChannelMask]],
         rule: str = "average") -> FeatureGrid:
    """Blend responder grids into the ego grid.

    A responder contributes to (channel, cell) only where the channel is in
    its mask and the cell is valid. "average" (default) is a uniform mean
    over ego plus contributors, so it is responder-order independent and
    idempotent on agreement; "overwrite" replaces ego by the contributor
    mean where any contribute; "max" is the elementwise maximum.
    """
    ch, h, w = ego.shape
    contribs = []
    for grid, validity, mask in received:
        if grid.shape != ego.shape:
            raise GridError(f"responder shape {grid.shape} != ego {ego.shape}")
        validity = np.asarray(validity, dtype=bool)
        if validity.shape != (h, w):
            raise GridError(f"validity shape {validity.shape} != ({h}, {w})")
        if mask.channels != ch:
            raise GridError(f"mask channels {mask.channels} != {ch}")
        contribs.append((grid.values,
                         mask.bits[:, None, None] & validity[None, :, :]))
    if rule == "average":
        num = ego.values.copy()
        den = np.ones((ch, h, w))
        for values, gate in contribs:
            num += np.where(gate, values, 0.0)
            den += gate
        return grid_from_array(num / den)
    if rule == "overwrite":
        num = np.zeros((ch, h, w))
        den = np.zeros((ch, h, w))
        for values, gate in contribs:
            num += np.where(gate, values, 0.0)
            den += gate
        out = np.where(den > 0, num / np.maximum(den, 1), ego.values)
        return grid_from_array(out)
    if rule == "max":
        out = ego.values.copy()
        for values, gate in contribs:
            out = np.where(gate, np.maximum(out, values), out)
        return grid_from_array(out)
    raise GridError(f"unknown fusion rule {rule!r}")
