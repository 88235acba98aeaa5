"""Time the numba loop kernels against the vectorised numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

The numba column excludes JIT compilation (one warm-up call first). With
ROWMIX_DISABLE_NUMBA=1 the "numba" column runs the same loops as plain Python.
"""
import argparse
import time

import numpy as np

from rowmix import _accel, dsp
from rowmix.quant import QuantizedMatrix


def _best(fn, repeat):
    fn()  # warm-up / compile
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def _gemm_case(rows, cols, nf, seed=0):
    rng = np.random.default_rng(seed)
    bits = rng.choice([4, 8], size=rows)
    codes = np.stack([rng.integers(-(1 << (b - 1)), 1 << (b - 1), size=cols) for b in bits])
    act = rng.integers(-32, 32, size=(cols, nf))
    return QuantizedMatrix(codes.astype(np.int8), bits, np.ones(rows)), act


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    q, act = _gemm_case(192, 192, 197)
    cases = {
        "sweep pack3 (262144)": lambda impl: dsp.sweep_pack3(True, impl=impl),
        "sweep pack4 (1048576)": lambda impl: dsp.sweep_pack4(True, impl=impl),
        "sweep w8 (16384)": lambda impl: dsp.sweep_w8(impl=impl),
        "packed_gemm pack3 192x192x197": lambda impl: dsp.packed_gemm(q, act, 3, impl=impl),
        "packed_gemm pack4 192x192x197": lambda impl: dsp.packed_gemm(q, act, 4, impl=impl),
    }
    print(f"numba available: {_accel.HAVE_NUMBA}")
    print(f"{'kernel':32s} {'numba [s]':>10s} {'numpy [s]':>10s} {'ratio':>7s}")
    for name, fn in cases.items():
        t_nb = _best(lambda: fn("numba"), args.repeat)
        t_np = _best(lambda: fn("numpy"), args.repeat)
        print(f"{name:32s} {t_nb:10.4f} {t_np:10.4f} {t_np / t_nb:7.2f}")


if __name__ == "__main__":
    main()
