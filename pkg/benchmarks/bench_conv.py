"""Time the compiled and pure-Python conv3d backends on model-sized shapes.

Usage: python benchmarks/bench_conv.py [--repeat N] [--threads N]
"""

import argparse
import time

import numpy as np
from threadpoolctl import threadpool_limits

from windcast.tensor import kernels

# (x shape, w shape, stride, padding)
CASES = {
    "stem 14->16, 3x3x3, t=32, 34x34": ((4, 14, 32, 34, 34), (16, 14, 3, 3, 3), 1, 1),
    "down 16->16, stride (1,2,2)": ((4, 16, 32, 34, 34), (16, 16, 3, 3, 3), (1, 2, 2), 1),
    "rssab 16->16, t=32, 9x9": ((4, 16, 32, 9, 9), (16, 16, 3, 3, 3), 1, 1),
    "pointwise 16->2, 1x1x1": ((4, 16, 32, 34, 34), (2, 16, 1, 1, 1), 1, 0),
}


def _time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run(repeat=3):
    rng = np.random.default_rng(0)
    backends = kernels.available_backends()
    rows = []
    for name, (xs, ws, stride, pad) in CASES.items():
        x = rng.normal(size=xs).astype(np.float32)
        w = rng.normal(size=ws).astype(np.float32)
        out, cols = kernels.conv3d_forward(x, w, None, stride, pad, backend="python")
        g = rng.normal(size=out.shape).astype(np.float32)
        times = {}
        for b in backends:
            fwd = _time(lambda: kernels.conv3d_forward(x, w, None, stride, pad, backend=b), repeat)
            bwd = _time(lambda: kernels.conv3d_backward(g, x.shape, w, cols, stride, pad, backend=b), repeat)
            times[b] = (fwd, bwd)
        rows.append((name, times))
    return backends, rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    with threadpool_limits(limits=args.threads):
        backends, rows = run(args.repeat)
    print(f"backends: {', '.join(backends)} (best of {args.repeat}, {args.threads} thread(s))")
    for name, times in rows:
        parts = [f"{b} fwd {f * 1e3:8.1f} ms bwd {bw * 1e3:8.1f} ms" for b, (f, bw) in times.items()]
        line = f"{name:34s} " + " | ".join(parts)
        if "compiled" in times:
            ref, fast = sum(times["python"]), sum(times["compiled"])
            line += f" | speedup {ref / fast:5.2f}x"
        print(line)


if __name__ == "__main__":
    main()
