"""Independent reference implementations used only by the tests."""
from __future__ import annotations

import heapq
from fractions import Fraction

import numpy as np


# -- integer GEMM ------------------------------------------------------------

def naive_int_gemm(codes, act):
    """Triple loop in Python ints, no numpy arithmetic."""
    codes = [[int(v) for v in row] for row in np.asarray(codes)]
    act = [[int(v) for v in row] for row in np.asarray(act)]
    rows, inner = len(codes), len(act)
    cols = len(act[0]) if act else 0
    out = [[0] * cols for _ in range(rows)]
    for i in range(rows):
        for f in range(cols):
            s = 0
            for j in range(inner):
                s += codes[i][j] * act[j][f]
            out[i][f] = s
    return np.array(out, dtype=np.int64).reshape(rows, cols)


# -- tile-level latency simulator ------------------------------------------------

def _transfer_cycles(items: int, beats_per_item: int, ports: int) -> int:
    """Round-robin items over ports; each port streams its items back to back."""
    busy = [0] * ports
    for k in range(items):
        busy[k % ports] += beats_per_item
    return max(busy)


def _compute_cycles(t_n: int, t_m: int, f: int, p_f: int, n_tot: int, ratio: float) -> int:
    """Cycle-by-cycle draining of MAC work with at most p_f tokens started per cycle."""
    work = Fraction(t_n * t_m * f) * (1 + Fraction(ratio).limit_denominator(10 ** 6))
    tokens = f
    cycles = 0
    while work > 0 or tokens > 0:
        work -= n_tot
        tokens -= p_f
        cycles += 1
    return cycles


def simulate_layer(m, n, f, n_h, ratio, t_n, t_m, p_f, profile, n_tot) -> int:
    """Discrete-event schedule of one layer.

    Units: input port, weight port, compute array, output port. Input tiles
    are double-buffered: stage k loads tile k while the array computes tile
    k-1, and stages advance in lockstep on the slowest unit. One output tile
    is written back while the next one is being accumulated (again lockstep,
    slot length = slower of the two). The last output tile of each head is
    written after the loop. Heads run one after another.
    """
    per_head_inputs = n // n_h
    ceil = lambda a, b: -(-a // b)  # noqa: E731
    d_in = _transfer_cycles(f, ceil(t_n, profile.d_act), profile.axi_in)
    d_wgt = _transfer_cycles(t_m, ceil(t_n, profile.d_wgt), profile.axi_wgt)
    d_out = _transfer_cycles(f, ceil(t_m, profile.d_act), profile.axi_out)
    d_cmp = _compute_cycles(t_n, t_m, f, p_f, n_tot, ratio)
    k_tiles = ceil(per_head_inputs, t_n)
    m_tiles = ceil(m, t_m)

    clock = 0
    events: list[tuple[int, str]] = []
    for _ in range(n_h):
        pending_write = None  # duration of the output write owed by the previous slot
        for _ in range(m_tiles):
            slot_start = clock
            # accumulate one output tile: k load stages then one trailing compute
            t = slot_start
            for k in range(k_tiles + 1):
                durations = []
                if k < k_tiles:
                    durations += [d_in, d_wgt]
                if k > 0:
                    durations.append(d_cmp)
                # stage length is fixed by the slowest unit the controller waits on
                stage = max(d_in, d_wgt, d_cmp) if k < k_tiles else d_cmp
                for dur in durations:
                    heapq.heappush(events, (t + dur, "unit-done"))
                t += stage
            accumulate_end = t
            # write-back of the previous output tile overlaps this slot; every slot
            # reserves the output port (its first use writes nothing but the
            # controller still waits on the port's slot)
            write_end = slot_start + d_out
            heapq.heappush(events, (write_end, "write"))
            clock = max(accumulate_end, write_end)
            pending_write = d_out
        clock += pending_write
        heapq.heappush(events, (clock, "final-write"))
    # drain: nothing may finish after the reported clock
    while events:
        end, _ = heapq.heappop(events)
        assert end <= clock
    return clock


# -- finite differences --------------------------------------------------------------

def central_difference(fn, arr: np.ndarray, idx, h: float) -> float:
    flat = arr.reshape(-1)
    old = flat[idx]
    flat[idx] = old + h
    plus = fn()
    flat[idx] = old - h
    minus = fn()
    flat[idx] = old
    return (plus - minus) / (2.0 * h)


def rel_err(a: float, b: float, floor: float = 1e-10) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


# -- brute-force search oracle -------------------------------------------------------

def exhaustive_best(configs, fitness, feasible):
    vals = [fitness(c) for c in configs if feasible(c)]
    return max(vals), sorted(vals)
