"""Hot numeric kernels with numba and pure-numpy implementations.

Every public kernel exists twice (``*_numba`` / ``*_numpy``) and the plain
name dispatches to one of them. numba is used when it imports cleanly and the
environment variable ``PRECIPGAN_DISABLE_NUMBA`` is unset (or ``0``).
Both paths produce identical results up to floating-point summation order.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_flag = os.environ.get("PRECIPGAN_DISABLE_NUMBA", "").strip().lower()
_disabled = _flag not in ("", "0", "false", "no")

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not _disabled


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# im2col / col2im
# ---------------------------------------------------------------------------


def im2col_numpy(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Unfold padded input ``xp[B, C, Hp, Wp]`` into ``(C*kh*kw, B*ho*wo)``.

    Row ``(c, p, q)`` holds the input pixel under kernel tap ``(p, q)`` of
    channel ``c`` for every output position ``(b, i, j)``.
    """
    b, c = xp.shape[:2]
    out = np.empty((c, kh, kw, b, ho, wo))
    hs = (ho - 1) * stride + 1
    ws = (wo - 1) * stride + 1
    xt = xp.transpose(1, 0, 2, 3)
    for p in range(kh):
        for q in range(kw):
            out[:, p, q] = xt[:, :, p : p + hs : stride, q : q + ws : stride]
    return out.reshape(c * kh * kw, b * ho * wo)


def col2im_numpy(
    cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int
) -> np.ndarray:
    """Adjoint of :func:`im2col_numpy`: scatter-add columns into a padded image."""
    b, c, hp, wp = shape
    out = np.zeros((c, b, hp, wp))
    blocks = cols.reshape(c, kh, kw, b, ho, wo)
    hs = (ho - 1) * stride + 1
    ws = (wo - 1) * stride + 1
    for p in range(kh):
        for q in range(kw):
            out[:, :, p : p + hs : stride, q : q + ws : stride] += blocks[:, p, q]
    return out.transpose(1, 0, 2, 3)


if HAS_NUMBA:

    @numba.njit(cache=True)
    def _im2col_nb(xp, kh, kw, stride, ho, wo):
        b, c = xp.shape[0], xp.shape[1]
        out = np.empty((c, kh, kw, b, ho, wo))
        for ch in range(c):
            for p in range(kh):
                for q in range(kw):
                    for n in range(b):
                        for i in range(ho):
                            for j in range(wo):
                                out[ch, p, q, n, i, j] = xp[n, ch, i * stride + p, j * stride + q]
        return out.reshape(c * kh * kw, b * ho * wo)

    @numba.njit(cache=True)
    def _col2im_nb(cols, b, c, hp, wp, kh, kw, stride, ho, wo):
        out = np.zeros((b, c, hp, wp))
        for ch in range(c):
            for p in range(kh):
                for q in range(kw):
                    r = (ch * kh + p) * kw + q
                    col = 0
                    for n in range(b):
                        for i in range(ho):
                            dst = out[n, ch, i * stride + p]
                            for j in range(wo):
                                dst[j * stride + q] += cols[r, col]
                                col += 1
        return out

    @numba.njit(cache=True)
    def _block_mean_nb(grid, f):
        h, w = grid.shape
        out = np.zeros((h // f, w // f))
        for i in range(h):
            for j in range(w):
                out[i // f, j // f] += grid[i, j]
        return out / (f * f)

    @numba.njit(cache=True)
    def _contingency_nb(pred, truth, thr):
        tp = 0
        fp = 0
        fn = 0
        for i in range(pred.size):
            p = pred.flat[i] >= thr
            t = truth.flat[i] >= thr
            if p and t:
                tp += 1
            elif p:
                fp += 1
            elif t:
                fn += 1
        return tp, fp, fn

    @numba.njit(cache=True)
    def _radial_bin_nb(power, radius, nbins):
        sums = np.zeros(nbins)
        counts = np.zeros(nbins, dtype=np.int64)
        for i in range(power.size):
            r = radius.flat[i]
            if r < nbins:
                sums[r] += power.flat[i]
                counts[r] += 1
        return sums, counts


def im2col_numba(xp, kh, kw, stride, ho, wo):
    return _im2col_nb(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)


def col2im_numba(cols, shape, kh, kw, stride, ho, wo):
    b, c, hp, wp = shape
    return _col2im_nb(np.ascontiguousarray(cols), b, c, hp, wp, kh, kw, stride, ho, wo)


# ---------------------------------------------------------------------------
# field-level kernels
# ---------------------------------------------------------------------------


def block_mean_numpy(grid: np.ndarray, f: int) -> np.ndarray:
    h, w = grid.shape
    return grid.reshape(h // f, f, w // f, f).mean(axis=(1, 3))


def block_mean_numba(grid, f):
    return _block_mean_nb(np.ascontiguousarray(grid, dtype=np.float64), f)


def contingency_numpy(pred: np.ndarray, truth: np.ndarray, thr: float) -> tuple[int, int, int]:
    p = pred >= thr
    t = truth >= thr
    return int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & t))


def contingency_numba(pred, truth, thr):
    tp, fp, fn = _contingency_nb(
        np.ascontiguousarray(pred, dtype=np.float64),
        np.ascontiguousarray(truth, dtype=np.float64),
        float(thr),
    )
    return int(tp), int(fp), int(fn)


def radial_bin_numpy(power: np.ndarray, radius: np.ndarray, nbins: int):
    r = radius.ravel()
    keep = r < nbins
    sums = np.bincount(r[keep], weights=power.ravel()[keep], minlength=nbins)
    counts = np.bincount(r[keep], minlength=nbins)
    return sums, counts


def radial_bin_numba(power, radius, nbins):
    return _radial_bin_nb(
        np.ascontiguousarray(power, dtype=np.float64),
        np.ascontiguousarray(radius, dtype=np.int64),
        nbins,
    )


if USE_NUMBA:
    # im2col is a pure strided copy; numpy's copy loops beat the jitted loop on it
    im2col = im2col_numpy
    col2im = col2im_numba
    block_mean = block_mean_numba
    contingency = contingency_numba
    radial_bin = radial_bin_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    block_mean = block_mean_numpy
    contingency = contingency_numpy
    radial_bin = radial_bin_numpy
