"""Bulk DSP-packing kernels: exhaustive sweeps and the packed GEMM.

Each kernel exists twice. The ``*_loops`` versions are scalar loops compiled
by numba; the ``*_vec`` versions are vectorised numpy and are used when numba
is disabled. Both receive lane layouts as plain int64 arrays so a corrupted
layout can be injected for failure-path testing.
"""
from __future__ import annotations

import numpy as np

from . import _accel
from ._accel import njit

P_BITS = 45
PRE_BITS = 27


# -- scalar helpers (numba) -------------------------------------------------

@njit(cache=True)
def _wrap(x, bits):
    m = np.int64(1) << bits
    half = np.int64(1) << (bits - 1)
    r = x & (m - 1)
    if r >= half:
        r -= m
    return r


@njit(cache=True)
def _mac(a, d, b):
    return _wrap(_wrap(a + d, PRE_BITS) * b, P_BITS)


@njit(cache=True)
def _unpack(p, offsets, widths, out):
    carry = np.int64(0)
    for k in range(offsets.shape[0]):
        w = widths[k]
        raw = ((p >> offsets[k]) + carry) & ((np.int64(1) << w) - 1)
        if raw >= (np.int64(1) << (w - 1)):
            raw -= np.int64(1) << w
        out[k] = raw
        # a zero lane passes the borrow from below straight through
        if raw != 0:
            carry = 1 if raw < 0 else 0


@njit(cache=True)
def _field(v, signed):
    v = v & 0xF
    if signed and v >= 8:
        v -= 16
    return v


# -- exhaustive sweeps: numba loops ----------------------------------------

@njit(cache=True)
def sweep_pack3_loops(d_offsets, lane_offsets, lane_widths, signed):
    lo = -8 if signed else 0
    hi = 7 if signed else 15
    lanes = np.zeros(3, dtype=np.int64)
    n = 0
    fails = 0
    first = np.zeros(4, dtype=np.int64)
    for w0 in range(lo, hi + 1):
        for w1 in range(lo, hi + 1):
            for w2 in range(lo, hi + 1):
                d = (_field(w0, signed) * (np.int64(1) << d_offsets[0])
                     + _field(w1, signed) * (np.int64(1) << d_offsets[1])
                     + _field(w2, signed) * (np.int64(1) << d_offsets[2]))
                for a in range(-32, 32):
                    p = _mac(0, d, a)
                    _unpack(p, lane_offsets, lane_widths, lanes)
                    n += 1
                    if lanes[0] != w0 * a or lanes[1] != w1 * a or lanes[2] != w2 * a:
                        if fails == 0:
                            first[0] = w0
                            first[1] = w1
                            first[2] = w2
                            first[3] = a
                        fails += 1
    return n, fails, first


@njit(cache=True)
def sweep_pack4_loops(d_offsets, b_offsets, lane_offsets, lane_widths, signed):
    lo = -8 if signed else 0
    hi = 7 if signed else 15
    lanes = np.zeros(4, dtype=np.int64)
    n = 0
    fails = 0
    first = np.zeros(4, dtype=np.int64)
    for w0 in range(lo, hi + 1):
        for w1 in range(lo, hi + 1):
            b = (_field(w0, signed) * (np.int64(1) << b_offsets[0])
                 + _field(w1, signed) * (np.int64(1) << b_offsets[1]))
            for a0 in range(-32, 32):
                for a1 in range(-32, 32):
                    d = a0 * (np.int64(1) << d_offsets[0]) + a1 * (np.int64(1) << d_offsets[1])
                    p = _mac(0, d, b)
                    _unpack(p, lane_offsets, lane_widths, lanes)
                    n += 1
                    if (lanes[0] != a0 * w0 or lanes[1] != a0 * w1
                            or lanes[2] != a1 * w0 or lanes[3] != a1 * w1):
                        if fails == 0:
                            first[0] = w0
                            first[1] = w1
                            first[2] = a0
                            first[3] = a1
                        fails += 1
    return n, fails, first


@njit(cache=True)
def sweep_w8_loops(d_offsets, lane_offsets, lane_widths):
    # high nibble in a signed lane, low nibble in an unsigned lane, same activation
    lanes = np.zeros(3, dtype=np.int64)
    n = 0
    fails = 0
    first = np.zeros(2, dtype=np.int64)
    for w in range(-128, 128):
        h = w >> 4
        l = w & 0xF
        d = h * (np.int64(1) << d_offsets[0]) + l * (np.int64(1) << d_offsets[1])
        for a in range(-32, 32):
            p = _mac(0, d, a)
            _unpack(p, lane_offsets, lane_widths, lanes)
            n += 1
            if lanes[0] * 16 + lanes[1] != a * w:
                if fails == 0:
                    first[0] = w
                    first[1] = a
                fails += 1
    return n, fails, first


# -- exhaustive sweeps: vectorised numpy ------------------------------------

def _wrap_vec(x, bits):
    m = np.int64(1) << bits
    r = x & (m - 1)
    return np.where(r >= (m >> 1), r - m, r)


def _mac_vec(d, b):
    return _wrap_vec(_wrap_vec(d, PRE_BITS) * b, P_BITS)


def _unpack_vec(p, offsets, widths):
    out = []
    carry = np.zeros_like(p)
    for off, w in zip(offsets, widths):
        raw = ((p >> int(off)) + carry) & ((1 << int(w)) - 1)
        raw = np.where(raw >= (1 << (int(w) - 1)), raw - (1 << int(w)), raw)
        out.append(raw)
        carry = np.where(raw == 0, carry, (raw < 0).astype(np.int64))
    return out


def _field_vec(v, signed):
    v = v & 0xF
    return np.where(v >= 8, v - 16, v) if signed else v


def _first(mask, *cols):
    idx = np.flatnonzero(~mask)
    if idx.size == 0:
        return np.zeros(len(cols), dtype=np.int64)
    return np.array([c.ravel()[idx[0]] for c in cols], dtype=np.int64)


def sweep_pack3_vec(d_offsets, lane_offsets, lane_widths, signed):
    rng = np.arange(-8, 8) if signed else np.arange(0, 16)
    w0, w1, w2, a = np.meshgrid(rng, rng, rng, np.arange(-32, 32), indexing="ij")
    w0, w1, w2, a = (x.astype(np.int64).ravel() for x in (w0, w1, w2, a))
    d = sum(_field_vec(w, signed) << int(o) for w, o in zip((w0, w1, w2), d_offsets))
    lanes = _unpack_vec(_mac_vec(d, a), lane_offsets, lane_widths)
    ok = (lanes[0] == w0 * a) & (lanes[1] == w1 * a) & (lanes[2] == w2 * a)
    return ok.size, int(np.count_nonzero(~ok)), _first(ok, w0, w1, w2, a)


def sweep_pack4_vec(d_offsets, b_offsets, lane_offsets, lane_widths, signed):
    rng = np.arange(-8, 8) if signed else np.arange(0, 16)
    w0, w1, a0, a1 = np.meshgrid(rng, rng, np.arange(-32, 32), np.arange(-32, 32), indexing="ij")
    w0, w1, a0, a1 = (x.astype(np.int64).ravel() for x in (w0, w1, a0, a1))
    b = (_field_vec(w0, signed) << int(b_offsets[0])) + (_field_vec(w1, signed) << int(b_offsets[1]))
    d = (a0 << int(d_offsets[0])) + (a1 << int(d_offsets[1]))
    lanes = _unpack_vec(_mac_vec(d, b), lane_offsets, lane_widths)
    ok = ((lanes[0] == a0 * w0) & (lanes[1] == a0 * w1)
          & (lanes[2] == a1 * w0) & (lanes[3] == a1 * w1))
    return ok.size, int(np.count_nonzero(~ok)), _first(ok, w0, w1, a0, a1)


def sweep_w8_vec(d_offsets, lane_offsets, lane_widths):
    w, a = np.meshgrid(np.arange(-128, 128), np.arange(-32, 32), indexing="ij")
    w, a = w.astype(np.int64).ravel(), a.astype(np.int64).ravel()
    d = ((w >> 4) << int(d_offsets[0])) + ((w & 0xF) << int(d_offsets[1]))
    lanes = _unpack_vec(_mac_vec(d, a), lane_offsets, lane_widths)
    ok = lanes[0] * 16 + lanes[1] == a * w
    return ok.size, int(np.count_nonzero(~ok)), _first(ok, w, a)


# -- packed GEMM ------------------------------------------------------------

@njit(cache=True)
def gemm_pack3_loops(codes, bits, act, d_offsets, lane_offsets, lane_widths):
    rows, cols = codes.shape
    nf = act.shape[1]
    out = np.zeros((rows, nf), dtype=np.int64)
    lanes = np.zeros(3, dtype=np.int64)
    for prec in (4, 8):
        group = np.full(3, -1, dtype=np.int64)
        g = 0
        for r in range(rows + 1):
            if r < rows and bits[r] == prec:
                group[g] = r
                g += 1
            if g == 3 or (r == rows and g > 0):
                for j in range(cols):
                    if prec == 4:
                        d = np.int64(0)
                        for k in range(3):
                            if group[k] >= 0:
                                d += codes[group[k], j] * (np.int64(1) << d_offsets[k])
                        for f in range(nf):
                            p = _mac(0, d, act[j, f])
                            _unpack(p, lane_offsets, lane_widths, lanes)
                            for k in range(3):
                                if group[k] >= 0:
                                    out[group[k], f] += lanes[k]
                    else:
                        dh = np.int64(0)
                        dl = np.int64(0)
                        for k in range(3):
                            if group[k] >= 0:
                                w = codes[group[k], j]
                                dh += (w >> 4) * (np.int64(1) << d_offsets[k])
                                dl += (w & 0xF) * (np.int64(1) << d_offsets[k])
                        for f in range(nf):
                            _unpack(_mac(0, dh, act[j, f]), lane_offsets, lane_widths, lanes)
                            hi0, hi1, hi2 = lanes[0], lanes[1], lanes[2]
                            _unpack(_mac(0, dl, act[j, f]), lane_offsets, lane_widths, lanes)
                            if group[0] >= 0:
                                out[group[0], f] += hi0 * 16 + lanes[0]
                            if group[1] >= 0:
                                out[group[1], f] += hi1 * 16 + lanes[1]
                            if group[2] >= 0:
                                out[group[2], f] += hi2 * 16 + lanes[2]
                group[:] = -1
                g = 0
    return out


@njit(cache=True)
def gemm_pack4_loops(codes, bits, act, d_offsets, b_offsets, lane_offsets, lane_widths):
    rows, cols = codes.shape
    nf = act.shape[1]
    out = np.zeros((rows, nf), dtype=np.int64)
    lanes = np.zeros(4, dtype=np.int64)
    hl = np.zeros(4, dtype=np.int64)
    for prec in (4, 8):
        group = np.full(2, -1, dtype=np.int64)
        g = 0
        for r in range(rows + 1):
            if r < rows and bits[r] == prec:
                group[g] = r
                g += 1
            if g == 2 or (r == rows and g > 0):
                r0 = group[0]
                r1 = group[1]
                for j in range(cols):
                    w0 = codes[r0, j]
                    w1 = codes[r1, j] if r1 >= 0 else 0
                    for f in range(0, nf, 2):
                        a0 = act[j, f]
                        a1 = act[j, f + 1] if f + 1 < nf else 0
                        d = a0 * (np.int64(1) << d_offsets[0]) + a1 * (np.int64(1) << d_offsets[1])
                        if prec == 4:
                            b = w0 * (np.int64(1) << b_offsets[0]) + w1 * (np.int64(1) << b_offsets[1])
                            _unpack(_mac(0, d, b), lane_offsets, lane_widths, lanes)
                        else:
                            bh = (w0 >> 4) * (np.int64(1) << b_offsets[0]) + (w1 >> 4) * (np.int64(1) << b_offsets[1])
                            bl = (w0 & 0xF) * (np.int64(1) << b_offsets[0]) + (w1 & 0xF) * (np.int64(1) << b_offsets[1])
                            _unpack(_mac(0, d, bh), lane_offsets, lane_widths, hl)
                            _unpack(_mac(0, d, bl), lane_offsets, lane_widths, lanes)
                            for k in range(4):
                                lanes[k] += hl[k] * 16
                        # lanes: (a0,w0) (a0,w1) (a1,w0) (a1,w1)
                        out[r0, f] += lanes[0]
                        if r1 >= 0:
                            out[r1, f] += lanes[1]
                        if f + 1 < nf:
                            out[r0, f + 1] += lanes[2]
                            if r1 >= 0:
                                out[r1, f + 1] += lanes[3]
                group[:] = -1
                g = 0
    return out


def _groups(idx: np.ndarray, size: int) -> np.ndarray:
    pad = (-len(idx)) % size
    return np.concatenate([idx, np.full(pad, -1, dtype=np.int64)]).reshape(-1, size)


def _gathered(codes, groups):
    # (G, size, cols) with zero rows for padding
    w = codes[np.where(groups < 0, 0, groups)]
    return np.where((groups >= 0)[:, :, None], w, 0)


def _scatter(out, groups, contrib):
    # contrib: (G, size, F)
    valid = groups >= 0
    np.add.at(out, groups[valid], contrib[valid])


def gemm_pack3_vec(codes, bits, act, d_offsets, lane_offsets, lane_widths):
    rows = codes.shape[0]
    out = np.zeros((rows, act.shape[1]), dtype=np.int64)
    shifts = [np.int64(1) << int(o) for o in d_offsets]

    def run(w):
        # w: (G, 3, cols) -> per-lane (G, 3, F) after summing over cols
        d = sum(w[:, k, :] * shifts[k] for k in range(3))  # (G, cols)
        p = _mac_vec(d[:, :, None], act[None, :, :])  # (G, cols, F)
        lanes = _unpack_vec(p, lane_offsets, lane_widths)
        return np.stack([ln.sum(axis=1) for ln in lanes], axis=1)

    for prec in (4, 8):
        idx = np.flatnonzero(bits == prec).astype(np.int64)
        if idx.size == 0:
            continue
        groups = _groups(idx, 3)
        w = _gathered(codes, groups)
        if prec == 4:
            contrib = run(w)
        else:
            contrib = run(w >> 4) * 16 + run(w & 0xF)
        _scatter(out, groups, contrib)
    return out


def gemm_pack4_vec(codes, bits, act, d_offsets, b_offsets, lane_offsets, lane_widths):
    rows, nf = codes.shape[0], act.shape[1]
    out = np.zeros((rows, nf), dtype=np.int64)
    act_p = act if nf % 2 == 0 else np.concatenate([act, np.zeros((act.shape[0], 1), np.int64)], axis=1)
    a0, a1 = act_p[:, 0::2], act_p[:, 1::2]  # (cols, F/2)
    d = (a0 << int(d_offsets[0])) + (a1 << int(d_offsets[1]))

    def run(w):
        # w: (G, 2, cols)
        b = (w[:, 0, :] << int(b_offsets[0])) + (w[:, 1, :] << int(b_offsets[1]))  # (G, cols)
        p = _mac_vec(d[None, :, :], b[:, :, None])  # (G, cols, F/2)
        return [ln.sum(axis=1) for ln in _unpack_vec(p, lane_offsets, lane_widths)]

    for prec in (4, 8):
        idx = np.flatnonzero(bits == prec).astype(np.int64)
        if idx.size == 0:
            continue
        groups = _groups(idx, 2)
        w = _gathered(codes, groups)
        if prec == 4:
            lanes = run(w)
        else:
            hi, lo = run(w >> 4), run(w & 0xF)
            lanes = [h * 16 + l for h, l in zip(hi, lo)]
        g = np.empty((groups.shape[0], 2, act_p.shape[1]), dtype=np.int64)
        g[:, 0, 0::2], g[:, 1, 0::2] = lanes[0], lanes[1]
        g[:, 0, 1::2], g[:, 1, 1::2] = lanes[2], lanes[3]
        _scatter(out, groups, g[:, :, :nf])
    return out


def pick(name: str, impl: str | None = None):
    """Resolve kernel ``name`` to its numba or numpy implementation."""
    impl = impl or _accel.backend()
    suffix = {"numba": "_loops", "numpy": "_vec"}[impl]
    return globals()[name + suffix]
