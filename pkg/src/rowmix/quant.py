"""Row-wise flexible mixed-precision quantization.

Every output row of a weight matrix carries its own bit-width (4 or 8) and its
own symmetric scale. 8-bit codes are executed on 4-bit hardware by splitting
them into a signed high nibble and an unsigned low nibble.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np


class PrecisionTag(enum.IntEnum):
    W4 = 4
    W8 = 8

    @property
    def qmin(self) -> int:
        return -(1 << (int(self) - 1))

    @property
    def qmax(self) -> int:
        return (1 << (int(self) - 1)) - 1


@dataclass(frozen=True)
class QuantParams:
    weight_bits_low: int = 4
    weight_bits_high: int = 8
    act_bits: int = 6
    symmetric: bool = True

    def __post_init__(self):
        if not 2 <= self.act_bits <= 16:
            raise ValueError(f"act_bits must lie in [2, 16], got {self.act_bits}")
        if self.weight_bits_low >= self.weight_bits_high:
            raise ValueError("weight_bits_low must be below weight_bits_high")
        if (self.weight_bits_low, self.weight_bits_high) != (4, 8):
            raise ValueError("only the 4/8-bit weight pair is supported")
        if not self.symmetric:
            raise ValueError("only symmetric quantization is supported")


def as_bits(tags) -> np.ndarray:
    """Normalise a tag sequence (PrecisionTag, ints or strings) to a uint8 bit array."""
    out = []
    for t in tags:
        if isinstance(t, str):
            t = PrecisionTag[t.upper()]
        t = int(t)
        if t not in (4, 8):
            raise ValueError(f"unknown precision tag {t!r}")
        out.append(t)
    return np.asarray(out, dtype=np.uint8)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _row_qmax(bits: np.ndarray) -> np.ndarray:
    return (np.left_shift(1, bits.astype(np.int64) - 1) - 1).astype(np.float64)


def row_scales(weights: np.ndarray, bits: np.ndarray) -> np.ndarray:
    """Symmetric per-row scale ``max|w| / qmax``; all-zero rows get scale 1.

    So do rows whose scale underflows to zero (all entries subnormal); they
    quantize to zero codes.
    """
    amax = np.max(np.abs(weights), axis=1)
    qmax = _row_qmax(bits)
    scales = amax / qmax
    return np.where(scales > 0, scales, 1.0)


@dataclass(frozen=True, eq=False)
class QuantizedMatrix:
    """Integer weight codes with one precision tag and one scale per row."""

    codes: np.ndarray
    row_bits: np.ndarray
    row_scales: np.ndarray
    act_scale_hint: float | None = None
    rows: int = field(init=False)
    cols: int = field(init=False)

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.ndim != 2:
            raise ValueError("codes must be a 2-D matrix")
        bits = as_bits(self.row_bits)
        scales = np.asarray(self.row_scales, dtype=np.float64)
        if bits.shape != (codes.shape[0],) or scales.shape != (codes.shape[0],):
            raise ValueError("need one tag and one scale per row")
        if not np.all(scales > 0):
            raise ValueError("row scales must be positive")
        lo = -(np.left_shift(1, bits.astype(np.int64) - 1))
        hi = -lo - 1
        c = codes.astype(np.int64)
        if np.any(c < lo[:, None]) or np.any(c > hi[:, None]):
            raise ValueError("code outside the range of its row tag")
        for name, arr in (("codes", codes.astype(np.int8)), ("row_bits", bits), ("row_scales", scales)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "rows", codes.shape[0])
        object.__setattr__(self, "cols", codes.shape[1])

    @property
    def row_tags(self) -> list[PrecisionTag]:
        return [PrecisionTag(int(b)) for b in self.row_bits]

    def mixed_ratio(self) -> float:
        return float(np.count_nonzero(self.row_bits == 8)) / self.rows


def _check_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise ValueError("weights must be a non-empty 2-D matrix")
    if not np.all(np.isfinite(w)):
        raise ValueError("invalid weight: non-finite value")
    return w


def _codes_for(w: np.ndarray, bits: np.ndarray, scales: np.ndarray, amax: np.ndarray | None = None) -> np.ndarray:
    qmax = _row_qmax(bits)
    if amax is None:
        q = w / scales[:, None]
    else:
        # w * qmax / amax keeps exact halves exact (0.5 * 7 / 1.0 == 3.5)
        live = (amax / qmax) > 0
        safe = np.where(live, amax, 1.0)
        q = np.where(live[:, None], w * qmax[:, None] / safe[:, None], 0.0)
    return np.clip(round_half_away(q), -qmax[:, None] - 1, qmax[:, None])


def quantize_rows(weights, tags, params: QuantParams | None = None) -> QuantizedMatrix:
    w = _check_weights(weights)
    bits = as_bits(tags)
    if bits.shape[0] != w.shape[0]:
        raise ValueError(f"got {bits.shape[0]} tags for {w.shape[0]} rows")
    scales = row_scales(w, bits)
    codes = _codes_for(w, bits, scales, np.max(np.abs(w), axis=1))
    return QuantizedMatrix(codes.astype(np.int8), bits, scales)


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    return q.codes.astype(np.float64) * q.row_scales[:, None]


def fake_quantize(weights, tags, params: QuantParams | None = None, scales=None):
    """Quantize-dequantize with a clipped straight-through gradient mask.

    ``scales`` overrides the per-row max-abs scales (e.g. frozen calibration);
    elements beyond ``scale * qmax`` are clamped and get a zero mask.
    """
    w = _check_weights(weights)
    bits = as_bits(tags)
    if bits.shape[0] != w.shape[0]:
        raise ValueError(f"got {bits.shape[0]} tags for {w.shape[0]} rows")
    qmax = _row_qmax(bits)
    if scales is None:
        s = row_scales(w, bits)
        amax = np.max(np.abs(w), axis=1)
        codes = _codes_for(w, bits, s, amax)
        bound = np.where(amax / qmax > 0, amax, qmax)  # exactly s * qmax, without the rounding
    else:
        s = np.asarray(scales, dtype=np.float64)
        if s.shape != bits.shape or not np.all(s > 0):
            raise ValueError("need one positive scale per row")
        codes = _codes_for(w, bits, s)
        bound = s * qmax
    out = codes * s[:, None]
    mask = (np.abs(w) <= bound[:, None]).astype(np.float64)
    return out, mask


def quantize_activations(x, act_bits: int = 6):
    """Per-tensor dynamic symmetric quantization. Returns ``(codes, scale)``."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("invalid activation: non-finite value")
    qmax = (1 << (act_bits - 1)) - 1
    amax = float(np.max(np.abs(x))) if x.size else 0.0
    if amax == 0.0:
        return np.zeros(x.shape, dtype=np.int64), 1.0
    codes = np.clip(round_half_away(x * qmax / amax), -qmax - 1, qmax)
    return codes.astype(np.int64), amax / qmax


class NibblePair(NamedTuple):
    high: int  # signed, [-8, 7]
    low: int  # unsigned, [0, 15]


def decompose_w8(w: int) -> NibblePair:
    w = int(w)
    if not -128 <= w <= 127:
        raise ValueError(f"{w} is not a signed 8-bit value")
    return NibblePair(w >> 4, w & 0xF)


def decompose_w8_array(w) -> tuple[np.ndarray, np.ndarray]:
    w = np.asarray(w, dtype=np.int64)
    if np.any(w < -128) or np.any(w > 127):
        raise ValueError("values outside the signed 8-bit range")
    return w >> 4, w & 0xF


def model_size_bytes(param_count: float, mixed_ratio_8bit: float) -> float:
    """Weight-code storage in bytes; per-row scales are not counted."""
    if not 0.0 <= mixed_ratio_8bit <= 1.0:
        raise ValueError("mixed ratio must lie in [0, 1]")
    bits = mixed_ratio_8bit * 8 + (1.0 - mixed_ratio_8bit) * 4
    return param_count * bits / 8.0


def scale_overhead_bytes(rows: int, bytes_per_scale: int = 4) -> int:
    return rows * bytes_per_scale


def bops(macs: float, mixed_ratio_8bit: float, act_bits: int = 6) -> float:
    if not 0.0 <= mixed_ratio_8bit <= 1.0:
        raise ValueError("mixed ratio must lie in [0, 1]")
    return macs * (mixed_ratio_8bit * 8 + (1.0 - mixed_ratio_8bit) * 4) * act_bits


def leading_tags(rows: int, ratio: float) -> np.ndarray:
    """First ``ratio * rows`` rows W8, the rest W4 (the entangled-window layout)."""
    n8 = ratio * rows
    if abs(n8 - round(n8)) > 1e-9:
        raise ValueError(f"ratio {ratio} does not split {rows} rows evenly")
    bits = np.full(rows, 4, dtype=np.uint8)
    bits[: int(round(n8))] = 8
    return bits


def tags_from_strings(names: Sequence[str]) -> np.ndarray:
    return as_bits(names)
