"""Compare the numba kernels against the pure-numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py``.  Each kernel is warmed up
once (so JIT compilation is excluded) and then timed as the best of a few
repetitions.
"""
import argparse
import time

import numpy as np

from polyloop.datagen import GenConfig, gen_program
from polyloop.executor import ExecConfig, run
from polyloop.ir import program_from_dict
from polyloop.poly import AffineSet, enumerate_array
from polyloop.transform import ScheduleState

def matmul(n, m, k):
    box = [[1, 0, 0, 0], [-1, 0, 0, n - 1], [0, 1, 0, 0], [0, -1, 0, m - 1], [0, 0, 1, 0], [0, 0, -1, k - 1]]
    c = {"buffer": "C", "map": [[1, 0, 0, 0], [0, 1, 0, 0]]}
    return program_from_dict({
        "buffers": [{"name": "A", "dims": [n, k]}, {"name": "B", "dims": [k, m]}, {"name": "C", "dims": [n, m]}],
        "computations": [{"name": "S0", "iterators": ["i", "j", "k"], "domain": box, "write": c,
                          "expr": {"op": "add", "args": [{"op": "load", **c}, {"op": "mul", "args": [
                              {"op": "load", "buffer": "A", "map": [[1, 0, 0, 0], [0, 0, 1, 0]]},
                              {"op": "load", "buffer": "B", "map": [[0, 0, 1, 0], [0, 1, 0, 0]]}]}]}}]})


def best_of(fn, reps):
    fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases():
    tri = AffineSet(3, 0, ((1, 0, 0, 0), (-1, 0, 0, 199), (0, 1, 0, 0), (1, -1, 0, 0), (0, 0, 1, 0), (0, 0, -1, 63)))
    yield "enumerate box 200x200x64", lambda be: enumerate_array(AffineSet.box([200, 200, 64]), backend=be)
    yield "enumerate triangle 200x200x64", lambda be: enumerate_array(tri, backend=be)
    mm = matmul(64, 64, 32)
    yield "execute matmul 64x64x32", lambda be: run(mm, ScheduleState(), cfg=ExecConfig(threads=1, backend=be))
    gen = gen_program(GenConfig(program_count=1, seed=3), 0)
    yield f"execute generated {gen.name}", lambda be: run(gen, ScheduleState(), cfg=ExecConfig(threads=1, backend=be))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repetitions", type=int, default=3)
    args = ap.parse_args()
    print(f"{'case':<40}{'numpy s':>10}{'numba s':>10}{'speedup':>10}")
    for name, fn in cases():
        t_np = best_of(lambda: fn("numpy"), args.repetitions)
        t_nb = best_of(lambda: fn("numba"), args.repetitions)
        print(f"{name:<40}{t_np:>10.4f}{t_nb:>10.4f}{t_np / t_nb:>10.1f}")
    return 0


if __name__ == "__main__":
    np.seterr(all="ignore")
    raise SystemExit(main())
