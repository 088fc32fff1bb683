"""Compare the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each row reports the best-of-N wall time for both backends and checks the
outputs agree. The numba timings exclude the first (compiling) call.
"""

import argparse
import time

import numpy as np

from fragmix import _accel
from fragmix import preprocessing as pp
from fragmix import retrieval as rv
from fragmix.numerics import kernels


def best_of(fn, repeat):
    fn()  # warm-up, triggers JIT compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    x = rng.standard_normal((32, 64, 32, 32))
    cols = kernels.im2col_numpy(x, 3, 3, 1, 1)
    yield "im2col 32x64x32x32 k3", lambda k: k(x, 3, 3, 1, 1), kernels.im2col_numpy, kernels.im2col_numba
    yield ("col2im 32x64x32x32 k3", lambda k: k(cols, x.shape, 3, 3, 1, 1),
           kernels.col2im_numpy, kernels.col2im_numba)

    page = rng.integers(0, 256, size=(1024, 768), dtype=np.uint8)
    yield "sauvola 1024x768 w31", lambda k: k(page, 31, 0.2, 128.0), pp._sauvola_numpy, pp._sauvola_numba

    d = rng.standard_normal((2000, 64))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    sim = d @ d.T
    labels = rng.integers(0, 40, size=2000)
    yield "average precision N=2000", lambda k: k(sim, labels), rv._ap_numpy, rv._ap_numba


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is unavailable or disabled (FRAGMIX_NO_NUMBA); nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  agree")
    for name, call, np_impl, nb_impl in cases(rng):
        a, b = call(np_impl), call(nb_impl)
        if isinstance(a, tuple):
            agree = all(np.allclose(u, v, rtol=0, atol=1e-12) for u, v in zip(a, b))
        else:
            agree = np.allclose(a, b, rtol=0, atol=1e-12)
        t_np = best_of(lambda: call(np_impl), args.repeat)
        t_nb = best_of(lambda: call(nb_impl), args.repeat)
        print(f"{name:<28}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.1f}x  {agree}")


if __name__ == "__main__":
    main()
