"""Hot numeric kernels: 2-D convolution, pooling and nearest upsampling.

Two interchangeable implementations live here:

* a numba ``@njit`` path (default when numba imports cleanly), and
* a pure-numpy path built on im2col + BLAS matmul.

Selection is driven by the ``CTXSEG_BACKEND`` environment variable
(``auto`` | ``numba`` | ``numpy``), read once at import. Both paths share
the same layouts (NCHW activations, OIHW weights) and are exercised
against each other in the test suite and in ``benchmarks/bench_kernels.py``.

Kernels never reduce across parallel workers, so results are bitwise
reproducible for any thread count within one backend.
"""

from __future__ import annotations

import os

import numpy as np

_env = os.environ.get("CTXSEG_BACKEND", "auto").strip().lower()
if _env not in ("auto", "numba", "numpy"):
    raise ValueError(f"CTXSEG_BACKEND must be auto|numba|numpy, got {_env!r}")

# "auto" resolves to the numpy path: the im2col + BLAS route measures several
# times faster than the jitted loops on typical desktops (see
# benchmarks/bench_kernels.py) and pays no JIT warm-up.
_HAS_NUMBA = False
if _env == "numba":
    from numba import njit, prange

    _HAS_NUMBA = True

USE_NUMBA = _HAS_NUMBA
BACKEND = "numba" if USE_NUMBA else "numpy"


def set_num_threads(n: int) -> None:
    """Pin the numba thread pool; no-op on the numpy path."""
    if USE_NUMBA:
        import numba

        numba.set_num_threads(max(1, n))


# ---------------------------------------------------------------------------
# numpy path: im2col + BLAS
# ---------------------------------------------------------------------------

def _out_hw(H, W, kh, kw, stride, pad):
    return (H + 2 * pad - kh) // stride + 1, (W + 2 * pad - kw) // stride + 1


def _pad2d(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp, kh, kw, stride, Ho, Wo):
    """(N,C,Hp,Wp) -> (N, C*kh*kw, Ho*Wo) patch matrix (copies)."""
    N, C, Hp, Wp = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(N, C, kh, kw, Ho, Wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(N, C * kh * kw, Ho * Wo)


def _conv2d_forward_np(x, w, b, stride, pad, cache=None):
    N, C, H, W = x.shape
    Co, _, kh, kw = w.shape
    Ho, Wo = _out_hw(H, W, kh, kw, stride, pad)
    if kh == kw == 1 and stride == 1 and pad == 0:
        y = np.matmul(w.reshape(Co, C), x.reshape(N, C, H * W))
        y += b.reshape(1, Co, 1)
        return y.reshape(N, Co, Ho, Wo)
    cols = _im2col(_pad2d(x, pad), kh, kw, stride, Ho, Wo)
    if cache is not None:
        cache["cols"] = cols  # reused by the matching backward
    y = np.matmul(w.reshape(Co, -1), cols)  # (N, Co, Ho*Wo)
    y += b.reshape(1, Co, 1)
    return y.reshape(N, Co, Ho, Wo)


def _conv2d_backward_np(x, w, stride, pad, gy, cache=None):
    N, C, H, W = x.shape
    Co, _, kh, kw = w.shape
    _, _, Ho, Wo = gy.shape
    gy2 = gy.reshape(N, Co, Ho * Wo)
    gb = gy2.sum(axis=(0, 2))
    if kh == kw == 1 and stride == 1 and pad == 0:
        x2 = x.reshape(N, C, H * W)
        gw = np.matmul(gy2, x2.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gx = np.matmul(w.reshape(Co, C).T, gy2).reshape(x.shape)
        return gx, gw, gb
    cols = cache.pop("cols", None) if cache else None
    if cols is None:
        cols = _im2col(_pad2d(x, pad), kh, kw, stride, Ho, Wo)
    gw = np.matmul(gy2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    gcols = np.matmul(w.reshape(Co, -1).T, gy2)  # (N, C*kh*kw, Ho*Wo)
    gcols = gcols.reshape(N, C, kh, kw, Ho, Wo)
    gxp = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, :, i, j]
    if pad:
        gxp = np.ascontiguousarray(gxp[:, :, pad : pad + H, pad : pad + W])
    return gxp, gw, gb


def _maxpool2d_forward_np(x):
    N, C, H, W = x.shape
    xr = x.reshape(N, C, H // 2, 2, W // 2, 2)
    flat = xr.transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H // 2, W // 2, 4)
    idx = flat.argmax(axis=-1).astype(np.int8)
    y = np.take_along_axis(flat, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def _maxpool2d_backward_np(x_shape, idx, gy):
    N, C, H, W = x_shape
    gflat = np.zeros((N, C, H // 2, W // 2, 4), dtype=gy.dtype)
    np.put_along_axis(gflat, idx[..., None].astype(np.intp), gy[..., None], axis=-1)
    gx = gflat.reshape(N, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(gx.reshape(N, C, H, W))


def _avgpool_forward_np(x, oh, ow):
    N, C, H, W = x.shape
    fh, fw = H // oh, W // ow
    return x.reshape(N, C, oh, fh, ow, fw).mean(axis=(3, 5))


def _avgpool_backward_np(x_shape, oh, ow, gy):
    N, C, H, W = x_shape
    fh, fw = H // oh, W // ow
    g = gy / np.asarray(fh * fw, dtype=gy.dtype)
    g = np.broadcast_to(g[:, :, :, None, :, None], (N, C, oh, fh, ow, fw))
    return np.ascontiguousarray(g.reshape(N, C, H, W))


def _upsample_forward_np(x, f):
    return np.ascontiguousarray(np.repeat(np.repeat(x, f, axis=2), f, axis=3))


def _upsample_backward_np(x_shape, f, gy):
    N, C, H, W = x_shape
    return np.ascontiguousarray(gy.reshape(N, C, H, f, W, f).sum(axis=(3, 5)))


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if USE_NUMBA:

    @njit(parallel=True, fastmath=True, cache=True)
    def _conv2d_fwd_nb(xp, w, b, stride, y):
        N, C, Hp, Wp = xp.shape
        Co = w.shape[0]
        kh = w.shape[2]
        kw = w.shape[3]
        Ho = y.shape[2]
        Wo = y.shape[3]
        for nco in prange(N * Co):
            n = nco // Co
            co = nco % Co
            for ho in range(Ho):
                hi = ho * stride
                row = y[n, co, ho]
                row[:] = b[co]
                for c in range(C):
                    for i in range(kh):
                        xr = xp[n, c, hi + i]
                        for j in range(kw):
                            wv = w[co, c, i, j]
                            # contiguous for stride 1 -> SIMD
                            for wo in range(Wo):
                                row[wo] += wv * xr[j + wo * stride]

    @njit(parallel=True, fastmath=True, cache=True)
    def _conv2d_bwd_input_nb(w, gy, stride, gxp):
        N = gy.shape[0]
        Co = gy.shape[1]
        Ho = gy.shape[2]
        Wo = gy.shape[3]
        C = w.shape[1]
        kh = w.shape[2]
        kw = w.shape[3]
        for nc in prange(N * C):
            n = nc // C
            c = nc % C
            for co in range(Co):
                for ho in range(Ho):
                    hi = ho * stride
                    grow = gy[n, co, ho]
                    for i in range(kh):
                        gxr = gxp[n, c, hi + i]
                        for j in range(kw):
                            wv = w[co, c, i, j]
                            for wo in range(Wo):
                                gxr[j + wo * stride] += wv * grow[wo]

    @njit(parallel=True, fastmath=True, cache=True)
    def _conv2d_bwd_weight_nb(xp, gy, stride, gw, gb):
        N = gy.shape[0]
        Co = gy.shape[1]
        Ho = gy.shape[2]
        Wo = gy.shape[3]
        C = xp.shape[1]
        kh = gw.shape[2]
        kw = gw.shape[3]
        for co in prange(Co):
            for n in range(N):
                for ho in range(Ho):
                    hi = ho * stride
                    grow = gy[n, co, ho]
                    s = 0.0
                    for wo in range(Wo):
                        s += grow[wo]
                    gb[co] += s
                    for c in range(C):
                        for i in range(kh):
                            xr = xp[n, c, hi + i]
                            for j in range(kw):
                                acc = 0.0
                                for wo in range(Wo):
                                    acc += grow[wo] * xr[j + wo * stride]
                                gw[co, c, i, j] += acc

    @njit(parallel=True, fastmath=True, cache=True)
    def _maxpool2d_fwd_nb(x, y, idx):
        N, C, H, W = x.shape
        Ho = H // 2
        Wo = W // 2
        for nc in prange(N * C):
            n = nc // C
            c = nc % C
            for ho in range(Ho):
                for wo in range(Wo):
                    best = x[n, c, 2 * ho, 2 * wo]
                    arg = 0
                    for t in range(1, 4):
                        v = x[n, c, 2 * ho + t // 2, 2 * wo + t % 2]
                        if v > best:
                            best = v
                            arg = t
                    y[n, c, ho, wo] = best
                    idx[n, c, ho, wo] = arg

    @njit(parallel=True, fastmath=True, cache=True)
    def _maxpool2d_bwd_nb(idx, gy, gx):
        N, C, Ho, Wo = gy.shape
        for nc in prange(N * C):
            n = nc // C
            c = nc % C
            for ho in range(Ho):
                for wo in range(Wo):
                    t = idx[n, c, ho, wo]
                    gx[n, c, 2 * ho + t // 2, 2 * wo + t % 2] = gy[n, c, ho, wo]

    def _conv2d_forward_nb(x, w, b, stride, pad, cache=None):
        N, C, H, W = x.shape
        Co, _, kh, kw = w.shape
        Ho, Wo = _out_hw(H, W, kh, kw, stride, pad)
        y = np.empty((N, Co, Ho, Wo), dtype=x.dtype)
        _conv2d_fwd_nb(_pad2d(x, pad), w, b, stride, y)
        return y

    def _conv2d_backward_nb(x, w, stride, pad, gy, cache=None):
        N, C, H, W = x.shape
        xp = _pad2d(x, pad)
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        gb = np.zeros(w.shape[0], dtype=w.dtype)
        _conv2d_bwd_input_nb(w, gy, stride, gxp)
        _conv2d_bwd_weight_nb(xp, gy, stride, gw, gb)
        gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
        return np.ascontiguousarray(gx), gw, gb

    def _maxpool2d_forward_nb(x):
        N, C, H, W = x.shape
        y = np.empty((N, C, H // 2, W // 2), dtype=x.dtype)
        idx = np.empty((N, C, H // 2, W // 2), dtype=np.int8)
        _maxpool2d_fwd_nb(x, y, idx)
        return y, idx

    def _maxpool2d_backward_nb(x_shape, idx, gy):
        gx = np.zeros(x_shape, dtype=gy.dtype)
        _maxpool2d_bwd_nb(idx, gy, gx)
        return gx


# ---------------------------------------------------------------------------
# public dispatch
# ---------------------------------------------------------------------------

if USE_NUMBA:
    conv2d_forward = _conv2d_forward_nb
    conv2d_backward = _conv2d_backward_nb
    maxpool2d_forward = _maxpool2d_forward_nb
    maxpool2d_backward = _maxpool2d_backward_nb
else:
    conv2d_forward = _conv2d_forward_np
    conv2d_backward = _conv2d_backward_np
    maxpool2d_forward = _maxpool2d_forward_np
    maxpool2d_backward = _maxpool2d_backward_np

# Pooling to a fixed output grid and nearest upsampling are memory-bound;
# the vectorized numpy forms are already optimal on both backends.
avgpool_forward = _avgpool_forward_np
avgpool_backward = _avgpool_backward_np
upsample_forward = _upsample_forward_np
upsample_backward = _upsample_backward_np
