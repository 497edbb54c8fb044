"""Time the compiled DTW kernel against the numpy fallback.

Usage: ``python benchmarks/bench_dtw.py [--refs 260] [--length 128] [--repeat 3]``.
Prints one line per backend plus the speedup, and checks that both agree.
"""

import argparse
import time

import numpy as np

from airglyph import dtw


def _best(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def run(refs=260, length=128, repeat=3, band=None, seed=0):
    rng = np.random.default_rng(seed)
    query = rng.normal(size=(length, 3))
    stack = rng.normal(size=(refs, length, 3))
    rows = {}
    t_np, d_np = _best(lambda: dtw.numpy_one_to_many(query, stack, band), repeat)
    rows["numpy"] = t_np
    if dtw._compiled is not None:
        t_c, d_c = _best(lambda: dtw._compiled.dtw_one_to_many(query, stack, -1 if band is None else band), repeat)
        rows["compiled"] = t_c
        rows["max_abs_diff"] = float(np.max(np.abs(np.asarray(d_c) - d_np)))
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--refs", type=int, default=260)
    p.add_argument("--length", type=int, default=128)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--band", type=int, default=None)
    a = p.parse_args(argv)
    rows = run(a.refs, a.length, a.repeat, a.band)
    print(f"one query vs {a.refs} references of length {a.length}, band={a.band}")
    print(f"numpy    {rows['numpy'] * 1e3:9.2f} ms")
    if "compiled" in rows:
        print(f"compiled {rows['compiled'] * 1e3:9.2f} ms  ({rows['numpy'] / rows['compiled']:.1f}x faster)")
        print(f"max |difference| {rows['max_abs_diff']:.3e}")
    else:
        print("compiled kernel not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
