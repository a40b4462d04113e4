"""Time the numba and numpy link kernels on the same input.

Usage: python3 benchmarks/bench_kernels.py [n_octets] [repeats]
"""

import sys
import time

import numpy as np

from oausim.jesd.kernels import BACKENDS


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(n=1 << 20, repeats=5):
    octets = np.random.default_rng(0).integers(0, 256, n).astype(np.uint8)
    symbols = BACKENDS["numpy"]["encode"](octets, False, -1)[0]
    scrambled = BACKENDS["numpy"]["scramble"](octets, 0)[0]
    cases = dict(
        encode=lambda k: k["encode"](octets, False, -1),
        decode=lambda k: k["decode"](symbols, -1),
        scramble=lambda k: k["scramble"](octets, 0),
        descramble=lambda k: k["descramble"](scrambled, 0),
    )
    print(f"{n} octets, best of {repeats}")
    print(f"{'kernel':<11}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, call in cases.items():
        nb, npy = BACKENDS["numba"], BACKENDS["numpy"]
        call(nb)  # compile outside the timing
        a = best_of(lambda: call(nb), repeats)
        b = best_of(lambda: call(npy), repeats)
        print(f"{name:<11}{a * 1e3:>10.2f}{b * 1e3:>10.2f}{b / a:>8.1f}x")


if __name__ == "__main__":
    args = [int(a) for a in sys.argv[1:3]]
    main(*args)
