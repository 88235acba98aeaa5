"""Bit-exact DSP48E2 emulation and the two low-bit packing schemes.

The primitive computes ``P = (A + D) * B`` with 27-bit ``A``/``D``, an 18-bit
``B``, a 27-bit pre-adder and a 45-bit product. Packing places several small
operands in one port at fixed bit offsets; the product then holds every
partial product in its own lane, recovered with a sign-borrow carry chain.

Lane layouts
------------
pack3 (3 weights x 1 activation)
    weights in ``D`` at bits {0, 11, 22}, activation in ``B``;
    product lanes at {0, 11, 22}, 11 bits each.
pack4 (2 weights x 2 activations)
    activations in ``D`` at bits {0, 20}, weights in ``B`` at {0, 10};
    product lanes at {0, 10, 20, 30} holding a0*w0, a0*w1, a1*w0, a1*w1.
    The upper activation cannot sit higher than bit 20: ``-32 << 21`` plus a
    negative low activation already leaves the 27-bit ``D`` range. The lanes
    are therefore 10 bits wide with no guard bit, which still holds any
    4x6-bit product (range [-480, 465] even for unsigned low nibbles).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .quant import QuantizedMatrix, decompose_w8

A_BITS = 27
D_BITS = 27
B_BITS = 18
P_BITS = 45
PRE_BITS = 27

SIGNED = "signed"
UNSIGNED = "unsigned"


def wrap(x: int, bits: int) -> int:
    """Two's-complement wrap of ``x`` to ``bits`` bits."""
    m = 1 << bits
    x &= m - 1
    return x - m if x >= m >> 1 else x


def _in_range(x: int, bits: int) -> bool:
    return -(1 << (bits - 1)) <= x < (1 << (bits - 1))


@dataclass(frozen=True)
class DspOperands:
    a: int
    d: int
    b: int

    def __post_init__(self):
        if not _in_range(self.a, A_BITS) or not _in_range(self.d, D_BITS):
            raise ValueError(f"A/D operands must be signed {A_BITS}-bit: a={self.a}, d={self.d}")
        if not _in_range(self.b, B_BITS):
            raise ValueError(f"B operand must be signed {B_BITS}-bit: b={self.b}")


@dataclass(frozen=True)
class DspProduct:
    p: int

    def __post_init__(self):
        if not _in_range(self.p, P_BITS):
            raise ValueError("product outside 45-bit range")

    def __int__(self):
        return self.p


@dataclass(frozen=True)
class LaneLayout:
    """Product-lane offsets; lane ``k`` spans up to the next offset (last lane: ``top_width``)."""

    lane_offsets: tuple[int, ...]
    top_width: int = 11
    lane_width_bits: int = 11

    def __post_init__(self):
        offs = self.lane_offsets
        if list(offs) != sorted(set(offs)):
            raise ValueError("lane offsets must be strictly increasing")
        if offs[-1] + self.top_width > P_BITS:
            raise ValueError("lanes exceed the 45-bit product")
        if min(self.widths) < 10:
            raise ValueError("a 4x6-bit signed product needs a 10-bit lane")

    @property
    def widths(self) -> tuple[int, ...]:
        offs = self.lane_offsets
        return tuple(b - a for a, b in zip(offs, offs[1:])) + (self.top_width,)

    def arrays(self):
        return np.asarray(self.lane_offsets, np.int64), np.asarray(self.widths, np.int64)


PACK3_D_OFFSETS = (0, 11, 22)
PACK3_LANES = LaneLayout((0, 11, 22))
PACK4_D_OFFSETS = (0, 20)
PACK4_B_OFFSETS = (0, 10)
PACK4_LANES = LaneLayout((0, 10, 20, 30))


def dsp48_mac(ops: DspOperands) -> DspProduct:
    pre = wrap(ops.a + ops.d, PRE_BITS)
    return DspProduct(wrap(pre * ops.b, P_BITS))


def _lane_value(v: int, signedness: str) -> int:
    if signedness == SIGNED:
        if not -8 <= v <= 7:
            raise ValueError(f"signed 4-bit lane value out of range: {v}")
        v &= 0xF
        return v - 16 if v >= 8 else v
    if signedness == UNSIGNED:
        if not 0 <= v <= 15:
            raise ValueError(f"unsigned 4-bit lane value out of range: {v}")
        return v & 0xF
    raise ValueError(f"unknown lane signedness {signedness!r}")


def _per_lane(signedness, n: int) -> tuple[str, ...]:
    if isinstance(signedness, str):
        return (signedness,) * n
    s = tuple(signedness)
    if len(s) != n:
        raise ValueError(f"need {n} lane signedness entries")
    return s


def _check_act(a: int) -> int:
    if not -32 <= a <= 31:
        raise ValueError(f"activation must be signed 6-bit: {a}")
    return int(a)


def _place(values: Sequence[int], offsets: Sequence[int]) -> int:
    return sum(int(v) << o for v, o in zip(values, offsets))


def pack3(weights: Sequence[int], activation: int, signedness=SIGNED,
          d_offsets: Sequence[int] = PACK3_D_OFFSETS) -> DspOperands:
    if len(weights) != 3:
        raise ValueError("pack3 takes exactly three weights")
    lanes = [_lane_value(int(w), s) for w, s in zip(weights, _per_lane(signedness, 3))]
    return DspOperands(a=0, d=_place(lanes, d_offsets), b=_check_act(activation))


def pack4(weights: Sequence[int], activations: Sequence[int], signedness=SIGNED,
          d_offsets: Sequence[int] = PACK4_D_OFFSETS,
          b_offsets: Sequence[int] = PACK4_B_OFFSETS) -> DspOperands:
    if len(weights) != 2 or len(activations) != 2:
        raise ValueError("pack4 takes two weights and two activations")
    w = [_lane_value(int(x), s) for x, s in zip(weights, _per_lane(signedness, 2))]
    a = [_check_act(int(x)) for x in activations]
    return DspOperands(a=0, d=_place(a, d_offsets), b=_place(w, b_offsets))


def unpack_lanes(p: DspProduct | int, layout: LaneLayout) -> list[int]:
    """Extract signed lanes, least significant first, with sign-borrow correction.

    A negative lane means the value above it was built by borrowing one unit,
    so the next lane is incremented before it is interpreted. A lane that
    decodes to zero forwards the incoming borrow unchanged.
    """
    p = int(p)
    out = []
    carry = 0
    for off, w in zip(layout.lane_offsets, layout.widths):
        raw = ((p >> off) + carry) & ((1 << w) - 1)
        val = raw - (1 << w) if raw >= 1 << (w - 1) else raw
        out.append(val)
        if val != 0:
            carry = 1 if val < 0 else 0
    return out


def unpack3(p: DspProduct | int, layout: LaneLayout = PACK3_LANES) -> list[int]:
    return unpack_lanes(p, layout)


def unpack4(p: DspProduct | int, layout: LaneLayout = PACK4_LANES) -> list[list[int]]:
    l0, l1, l2, l3 = unpack_lanes(p, layout)
    return [[l0, l1], [l2, l3]]


def operand_fields(d: int, offsets: Sequence[int] = PACK3_D_OFFSETS, width: int = 11) -> list[int]:
    """Raw (unsigned) bit fields of a packed operand, without any correction."""
    return [(d >> o) & ((1 << width) - 1) for o in offsets]


def packed_dot_w8(act: Sequence[int], wgt: Sequence[int], factor: int = 3) -> int:
    """Dot product of 6-bit activations with 8-bit weights on 4-bit DSP lanes.

    Each weight is split into a signed high nibble and an unsigned low nibble;
    both ride in one DSP call sharing the activation, and the high lane is
    shifted left by 4 on recombination.
    """
    if len(act) != len(wgt):
        raise ValueError(f"length mismatch: {len(act)} activations vs {len(wgt)} weights")
    if factor not in (3, 4):
        raise ValueError("packing factor must be 3 or 4")
    total = 0
    for a, w in zip(act, wgt):
        hi, lo = decompose_w8(w)
        if factor == 3:
            p = dsp48_mac(pack3([hi, lo, 0], a, (SIGNED, UNSIGNED, SIGNED)))
            lanes = unpack3(p)
            total += (lanes[0] << 4) + lanes[1]
        else:
            p = dsp48_mac(pack4([hi, lo], [a, 0], (SIGNED, UNSIGNED)))
            (ph, pl), _ = unpack4(p)
            total += (ph << 4) + pl
    return total


def packed_gemm(q: QuantizedMatrix, act_codes, factor: int = 3, impl: str | None = None) -> np.ndarray:
    """Integer GEMM ``codes @ act`` routed through packed DSP lanes.

    W4 rows are grouped three (pack3) or two (pack4) at a time; W8 rows take
    two DSP passes, high nibbles in signed lanes and low nibbles in unsigned
    lanes. pack4 additionally pairs adjacent activation columns.
    """
    act = np.asarray(act_codes)
    if act.ndim != 2 or act.shape[0] != q.cols:
        raise ValueError(f"shape mismatch: weights {q.rows}x{q.cols}, activations {act.shape}")
    act = act.astype(np.int64)
    if act.size and (act.min() < -32 or act.max() > 31):
        raise ValueError("activation codes must be signed 6-bit for DSP packing")
    codes = q.codes.astype(np.int64)
    bits = q.row_bits.astype(np.int64)
    if factor == 3:
        offs, widths = PACK3_LANES.arrays()
        fn = kernels.pick("gemm_pack3", impl)
        return fn(codes, bits, act, np.asarray(PACK3_D_OFFSETS, np.int64), offs, widths)
    if factor == 4:
        offs, widths = PACK4_LANES.arrays()
        fn = kernels.pick("gemm_pack4", impl)
        return fn(codes, bits, act, np.asarray(PACK4_D_OFFSETS, np.int64),
                  np.asarray(PACK4_B_OFFSETS, np.int64), offs, widths)
    raise ValueError("packing factor must be 3 or 4")


@dataclass
class SweepReport:
    name: str
    cases: int
    failures: int
    first_failure: tuple[int, ...] | None

    @property
    def ok(self) -> bool:
        return self.failures == 0


def _report(name, result) -> SweepReport:
    n, fails, first = result
    return SweepReport(name, int(n), int(fails), tuple(int(x) for x in first) if fails else None)


def sweep_pack3(signed: bool = True, d_offsets=PACK3_D_OFFSETS, lanes: LaneLayout = PACK3_LANES,
                impl: str | None = None) -> SweepReport:
    offs, widths = lanes.arrays()
    fn = kernels.pick("sweep_pack3", impl)
    return _report("pack3", fn(np.asarray(d_offsets, np.int64), offs, widths, signed))


def sweep_pack4(signed: bool = True, d_offsets=PACK4_D_OFFSETS, b_offsets=PACK4_B_OFFSETS,
                lanes: LaneLayout = PACK4_LANES, impl: str | None = None) -> SweepReport:
    offs, widths = lanes.arrays()
    fn = kernels.pick("sweep_pack4", impl)
    return _report("pack4", fn(np.asarray(d_offsets, np.int64), np.asarray(b_offsets, np.int64),
                               offs, widths, signed))


def sweep_w8(d_offsets=PACK3_D_OFFSETS[:2], lanes: LaneLayout = PACK3_LANES,
             impl: str | None = None) -> SweepReport:
    offs, widths = lanes.arrays()
    fn = kernels.pick("sweep_w8", impl)
    return _report("w8", fn(np.asarray(d_offsets, np.int64), offs, widths))
