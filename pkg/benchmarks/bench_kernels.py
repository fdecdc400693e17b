"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Each row reports the median wall time per call and the speedup of the
compiled backend. Results are also checked for agreement.
"""

import argparse
import statistics
import time

import numpy as np

from selfvos import kernels


def _time(fn, repeat):
    fn()
    runs = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        runs.append(time.perf_counter() - t)
    return statistics.median(runs)


def cases(rng):
    # shapes seen in training: a 3x3 conv on a 32x32 map, a strided stem, k-means on a video
    x = rng.standard_normal((4, 16, 34, 34))
    yield "im2col 3x3 (4,16,32,32)", "im2col", (x, 3, 3, 1)
    x = rng.standard_normal((4, 3, 66, 66))
    yield "im2col 3x3/2 (4,3,64,64)", "im2col", (x, 3, 3, 2)
    cols = rng.standard_normal((4 * 32 * 32, 16 * 9))
    yield "col2im 3x3 (4,16,32,32)", "col2im", (cols, 4, 16, 34, 34, 3, 3, 1)
    pts = rng.standard_normal((24 * 256, 152))
    cen = rng.standard_normal((5, 152))
    yield "kmeans_assign 6144x152, M=5", "kmeans_assign", (pts, cen)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    py = kernels.get_backend("python")
    try:
        c = kernels.get_backend("c")
    except ImportError:
        c = None
        print("compiled backend not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'python ms':>10s} {'c ms':>10s} {'speedup':>8s}")
    for name, fn, a in cases(rng):
        t_py = _time(lambda: getattr(py, fn)(*a), args.repeat)
        if c is None:
            print(f"{name:34s} {t_py * 1e3:10.3f}")
            continue
        t_c = _time(lambda: getattr(c, fn)(*a), args.repeat)
        ref, got = getattr(py, fn)(*a), getattr(c, fn)(*a)
        for r, g in zip(ref if isinstance(ref, tuple) else (ref,), got if isinstance(got, tuple) else (got,)):
            np.testing.assert_allclose(g, r, rtol=1e-10, atol=1e-10)
        print(f"{name:34s} {t_py * 1e3:10.3f} {t_c * 1e3:10.3f} {t_py / t_c:7.2f}x")


if __name__ == "__main__":
    main()
