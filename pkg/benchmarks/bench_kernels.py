"""Time the numba and pure-numpy kernel paths side by side.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Covers the conv unfold/fold pair at generator and critic shapes, a full
conv forward+backward through the autodiff engine under each backend, and
the field-level kernels used in data preparation and evaluation.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from precipgan import _accel
from precipgan import autodiff as ad

# the (im2col, col2im) pair each backend dispatches to; numba keeps numpy's im2col
CONV_PAIRS = {
    "numpy": (_accel.im2col_numpy, _accel.col2im_numpy),
    "numba": (_accel.im2col_numpy, _accel.col2im_numba),
}


def best_of(fn, repeat: int) -> float:
    fn()  # warm-up (numba compilation, caches)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def conv_pass(x, k):
    xt = ad.Tensor(x, requires_grad=True)
    kt = ad.Tensor(k, requires_grad=True)
    loss = ad.sum(ad.square(ad.conv2d(xt, kt, stride=1, padding=k.shape[-1] // 2)))
    ad.grad(loss, [xt, kt])


def with_backend(name: str, fn):
    saved = (_accel.im2col, _accel.col2im)
    _accel.im2col, _accel.col2im = CONV_PAIRS[name]
    try:
        return fn()
    finally:
        _accel.im2col, _accel.col2im = saved


def kernel(name: str, *args):
    """Case runner calling ``_accel.<name>_<backend>(*args)``."""
    return lambda b: getattr(_accel, f"{name}_{b}")(*args)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _accel.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    cases = []

    # generator layer 2 input (16 ch) and critic layer 1 (stride 2, k4) at batch 32, 64x64
    for tag, shape, k, s in [
        ("gen 32x16x64x64 k5", (32, 16, 68, 68), 5, 1),
        ("critic 32x1x66x66 k4 s2", (32, 1, 66, 66), 4, 2),
    ]:
        xp = rng.normal(size=shape)
        ho = (shape[2] - k) // s + 1
        cols = _accel.im2col_numpy(xp, k, k, s, ho, ho)
        cases.append((f"im2col {tag}", kernel("im2col", xp, k, k, s, ho, ho)))
        cases.append((f"col2im {tag}", kernel("col2im", cols, xp.shape, k, k, s, ho, ho)))

    x = rng.normal(size=(32, 16, 64, 64))
    w = rng.normal(size=(8, 16, 5, 5))
    cases.append(("conv2d fwd+bwd 32x16x64x64 -> 8 *", lambda b: with_backend(b, lambda: conv_pass(x, w))))

    g = rng.gamma(0.5, 5.0, size=(512, 512))
    p = rng.gamma(0.5, 5.0, size=(512, 512))
    r = rng.integers(0, 300, size=(512, 512))
    cases.append(("block_mean 512x512 f4", kernel("block_mean", g, 4)))
    cases.append(("contingency 512x512", kernel("contingency", p, g, 10.0)))
    cases.append(("radial_bin 512x512", kernel("radial_bin", p, r, 300)))

    print(f"{'kernel':40s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for label, run in cases:
        tn = best_of(lambda: run("numpy"), args.repeat) * 1e3
        tb = best_of(lambda: run("numba"), args.repeat) * 1e3
        print(f"{label:40s} {tn:10.2f} {tb:10.2f} {tn / tb:7.2f}x")
    print("* as dispatched: the numba backend uses numpy's im2col and numba's col2im")


if __name__ == "__main__":
    main()
