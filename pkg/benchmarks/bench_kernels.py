"""Benchmark the numba kernel backend against the pure-numpy fallback.

Runs each hot kernel on representative workloads with both backends and
prints a timing table. Invoke from the repository root:

    python3 benchmarks/bench_kernels.py [--repeats 5]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from o2rnet.kernels import _numpy

try:
    from o2rnet.kernels import _numba
except ImportError:
    _numba = None


def _time(fn, *args, repeats: int) -> float:
    fn(*args)  # warm-up (includes JIT compilation for the numba backend)
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def _boxes(rng, n, size=256.0):
    x1 = rng.uniform(0, size - 16, n)
    y1 = rng.uniform(0, size - 16, n)
    w = rng.uniform(8, 64, n)
    h = rng.uniform(8, 64, n)
    return np.stack([x1, y1, np.minimum(x1 + w, size),
                     np.minimum(y1 + h, size)], axis=1)


def workloads(rng):
    a, b = _boxes(rng, 600), _boxes(rng, 400)
    yield "iou_matrix 600x400", "iou_matrix", (a, b)
    nb = _boxes(rng, 800)
    yield "nms 800 boxes", "nms_indices", (nb, rng.uniform(0, 1, 800), 0.5)
    feat = rng.standard_normal((32, 32, 32))
    rois = _boxes(rng, 200)
    yield "roi_align fwd 200x7x7", "roi_align_forward", (feat, rois, 7, 8.0)
    grad = rng.standard_normal((200, 7, 7, 32))
    yield "roi_align bwd 200x7x7", "roi_align_backward", (grad, rois, 32, 32, 8.0)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5,
                        help="timed repetitions per kernel (best is reported)")
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'workload':<26} {'numpy':>10} {'numba':>10} {'speedup':>9}")
    for label, name, payload in workloads(rng):
        t_np = _time(getattr(_numpy, name), *payload, repeats=args.repeats)
        if _numba is None:
            print(f"{label:<26} {t_np * 1e3:9.2f}ms {'n/a':>10} {'n/a':>9}")
            continue
        t_nb = _time(getattr(_numba, name), *payload, repeats=args.repeats)
        out_np = getattr(_numpy, name)(*payload)
        out_nb = getattr(_numba, name)(*payload)
        assert np.array_equal(np.asarray(out_np, dtype=np.float64),
                              np.asarray(out_nb, dtype=np.float64)), label
        print(f"{label:<26} {t_np * 1e3:9.2f}ms {t_nb * 1e3:9.2f}ms "
              f"{t_np / t_nb:8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
