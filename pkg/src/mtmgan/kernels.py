"""Compiled inner loops for convolution, deformable sampling, and matmul.

The forward kernels fix the per-output-element accumulation order
(input channel, then kernel tap row-major, innermost index fastest) so
they match naive loop oracles bit-for-bit and runs are reproducible.
Gradient contractions carry no ordering contract and use BLAS matmuls,
which are deterministic run-to-run on a fixed build.

All kernels are single-threaded; parallelism across batch/channels is
deliberately left out to keep one core's output byte-stable.
"""

from __future__ import annotations

import numpy as np
from numba import njit

F = np.float64


@njit(cache=True)
def _matmul(a, b, out):
    m, kk = a.shape
    n = b.shape[1]
    for i in range(m):
        orow = out[i]
        for j in range(n):
            orow[j] = 0.0
        for k in range(kk):
            av = a[i, k]
            brow = b[k]
            for j in range(n):
                orow[j] += av * brow[j]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty((a.shape[0], b.shape[1]), dtype=F)
    _matmul(a, b, out)
    return out


def pad2d(x: np.ndarray, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=F)
    out[:, :, pad:pad + h, pad:pad + w] = x
    return out


@njit(cache=True)
def _conv2d(xpad, w, out):
    # w has a leading batch dim of size 1 (shared) or n (per-sample).
    # Accumulation per output element runs tap row-major, then input
    # channel (innermost index fastest).
    n, ci, hp, wp = xpad.shape
    nw, co, _, k, _ = w.shape
    h = hp - (k - 1)
    wd = wp - (k - 1)
    acc = np.empty(wd, dtype=F)
    for b in range(n):
        bw = b if nw > 1 else 0
        for o in range(co):
            wk = w[bw, o]
            for i in range(h):
                for j in range(wd):
                    acc[j] = 0.0
                for ky in range(k):
                    for kx in range(k):
                        for c in range(ci):
                            wv = wk[c, ky, kx]
                            xrow = xpad[b, c, i + ky]
                            for j in range(wd):
                                acc[j] += wv * xrow[j + kx]
                orow = out[b, o, i]
                for j in range(wd):
                    orow[j] = acc[j]


def conv2d_raw(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Stride-1, zero-padded 'same' convolution; w is rank 4 (shared) or
    rank 5 (per-sample kernels)."""
    if w.ndim == 4:
        w5 = np.ascontiguousarray(w)[None]
    else:
        w5 = np.ascontiguousarray(w)
    k = w5.shape[3]
    xpad = pad2d(x, (k - 1) // 2)
    out = np.empty((x.shape[0], w5.shape[1], x.shape[2], x.shape[3]), dtype=F)
    _conv2d(xpad, w5, out)
    return out


def kernel_swap_flip(w: np.ndarray) -> np.ndarray:
    """Adjoint kernel: transpose in/out channels and flip both spatial axes."""
    if w.ndim == 4:
        return np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return np.ascontiguousarray(w[:, :, :, ::-1, ::-1].transpose(0, 2, 1, 3, 4))


def conv2d_grad_w(x: np.ndarray, g: np.ndarray, k: int, per_sample: bool) -> np.ndarray:
    """d(conv)/d(w): correlation of the padded input with the upstream grad."""
    n, ci, h, wd = x.shape
    co = g.shape[1]
    pad = (k - 1) // 2
    xpad = pad2d(x, pad)
    gmat = np.ascontiguousarray(g.reshape(n, co, h * wd))
    if per_sample:
        gw = np.empty((n, co, ci, k, k), dtype=F)
    else:
        gw = np.empty((co, ci, k, k), dtype=F)
    for ky in range(k):
        for kx in range(k):
            xs = xpad[:, :, ky:ky + h, kx:kx + wd].reshape(n, ci, h * wd)
            xs = np.ascontiguousarray(xs.transpose(0, 2, 1))
            if per_sample:
                gw[:, :, :, ky, kx] = np.matmul(gmat, xs)
            else:
                acc = np.matmul(gmat, xs)  # (n, co, ci)
                gw[:, :, ky, kx] = acc.sum(axis=0)
    return gw


# ---------------------------------------------------------------------------
# deformable convolution


@njit(cache=True)
def _deform_conv(x, wt, off, k, out_t):
    """Fused deformable conv. wt is (n, ci, k*k, co); out_t is (n, h, w, co).

    Per output element the accumulation runs tap row-major, then input
    channel, matching _conv2d's order bit-for-bit when all offsets are
    zero. Sampling is fused into the accumulation (no warped tensor).
    """
    n, ci, h, wd = x.shape
    k2 = k * k
    co = wt.shape[3]
    pad = (k - 1) // 2
    acc = np.empty(co, dtype=F)
    for b in range(n):
        xb = x[b]
        for i in range(h):
            for j in range(wd):
                for o in range(co):
                    acc[o] = 0.0
                for t in range(k2):
                    qy = i + (t // k - pad) + off[b, 2 * t, i, j]
                    qx = j + (t % k - pad) + off[b, 2 * t + 1, i, j]
                    iy = int(np.floor(qy))
                    ix = int(np.floor(qx))
                    fy = qy - iy
                    fx = qx - ix
                    in00 = 0 <= iy < h and 0 <= ix < wd
                    in01 = 0 <= iy < h and 0 <= ix + 1 < wd
                    in10 = 0 <= iy + 1 < h and 0 <= ix < wd
                    in11 = 0 <= iy + 1 < h and 0 <= ix + 1 < wd
                    w00 = (1.0 - fy) * (1.0 - fx)
                    w01 = (1.0 - fy) * fx
                    w10 = fy * (1.0 - fx)
                    w11 = fy * fx
                    for c in range(ci):
                        xc = xb[c]
                        v00 = xc[iy, ix] if in00 else 0.0
                        v01 = xc[iy, ix + 1] if in01 else 0.0
                        v10 = xc[iy + 1, ix] if in10 else 0.0
                        v11 = xc[iy + 1, ix + 1] if in11 else 0.0
                        v = ((w00 * v00 + w01 * v01) + w10 * v10) + w11 * v11
                        wrow = wt[b, c, t]
                        for o in range(co):
                            acc[o] += wrow[o] * v
                orow = out_t[b, i, j]
                for o in range(co):
                    orow[o] = acc[o]


def deform_conv2d_raw(x: np.ndarray, w: np.ndarray, off: np.ndarray) -> np.ndarray:
    """Deformable conv forward; w rank 4 (shared) or rank 5 (per-sample)."""
    n, ci, h, wd = x.shape
    if w.ndim == 4:
        w = np.broadcast_to(w[None], (n,) + w.shape)
    co = w.shape[1]
    k = w.shape[3]
    # (n, ci, k*k, co) so the inner accumulator runs over contiguous co
    wt = np.ascontiguousarray(
        w.reshape(n, co, ci, k * k).transpose(0, 2, 3, 1))
    out_t = np.empty((n, h, wd, co), dtype=F)
    _deform_conv(x, wt, off, k, out_t)
    return np.ascontiguousarray(out_t.transpose(0, 3, 1, 2))


@njit(cache=True)
def _deform_sample(x, off, k, V, dVy, dVx):
    """Bilinear samples per (batch, channel, tap, pixel) plus coordinate
    derivatives; used by the backward pass only."""
    n, ci, h, wd = x.shape
    k2 = k * k
    pad = (k - 1) // 2
    for b in range(n):
        for c in range(ci):
            xc = x[b, c]
            for t in range(k2):
                ky = t // k
                kx = t % k
                for i in range(h):
                    for j in range(wd):
                        qy = i + (ky - pad) + off[b, 2 * t, i, j]
                        qx = j + (kx - pad) + off[b, 2 * t + 1, i, j]
                        iy = int(np.floor(qy))
                        ix = int(np.floor(qx))
                        fy = qy - iy
                        fx = qx - ix
                        v00 = xc[iy, ix] if 0 <= iy < h and 0 <= ix < wd else 0.0
                        v01 = xc[iy, ix + 1] if 0 <= iy < h and 0 <= ix + 1 < wd else 0.0
                        v10 = xc[iy + 1, ix] if 0 <= iy + 1 < h and 0 <= ix < wd else 0.0
                        v11 = xc[iy + 1, ix + 1] if 0 <= iy + 1 < h and 0 <= ix + 1 < wd else 0.0
                        V[b, c, t, i, j] = (((1.0 - fy) * (1.0 - fx) * v00
                                             + (1.0 - fy) * fx * v01)
                                            + fy * (1.0 - fx) * v10) + fy * fx * v11
                        dVy[b, c, t, i, j] = ((v10 - v00) * (1.0 - fx)
                                              + (v11 - v01) * fx)
                        dVx[b, c, t, i, j] = ((v01 - v00) * (1.0 - fy)
                                              + (v11 - v10) * fy)


@njit(cache=True)
def _deform_scatter_x(gv, off, k, gx):
    """Adjoint of bilinear sampling: accumulate gv back onto the input grid."""
    n, ci, h, wd = gx.shape
    k2 = k * k
    pad = (k - 1) // 2
    for b in range(n):
        for c in range(ci):
            gc = gx[b, c]
            for t in range(k2):
                ky = t // k
                kx = t % k
                for i in range(h):
                    for j in range(wd):
                        a = gv[b, c, t, i, j]
                        if a == 0.0:
                            continue
                        qy = i + (ky - pad) + off[b, 2 * t, i, j]
                        qx = j + (kx - pad) + off[b, 2 * t + 1, i, j]
                        iy = int(np.floor(qy))
                        ix = int(np.floor(qx))
                        fy = qy - iy
                        fx = qx - ix
                        if 0 <= iy < h and 0 <= ix < wd:
                            gc[iy, ix] += a * (1.0 - fy) * (1.0 - fx)
                        if 0 <= iy < h and 0 <= ix + 1 < wd:
                            gc[iy, ix + 1] += a * (1.0 - fy) * fx
                        if 0 <= iy + 1 < h and 0 <= ix < wd:
                            gc[iy + 1, ix] += a * fy * (1.0 - fx)
                        if 0 <= iy + 1 < h and 0 <= ix + 1 < wd:
                            gc[iy + 1, ix + 1] += a * fy * fx


def deform_conv2d_grads(x: np.ndarray, w: np.ndarray, off: np.ndarray,
                        g: np.ndarray):
    """Gradients of deform_conv2d wrt (x, w, offsets) given upstream g.

    Returns (gx, gw, goff); gw is per-sample iff w is rank 5.
    """
    n, ci, h, wd = x.shape
    per_sample = w.ndim == 5
    w5 = w if per_sample else np.broadcast_to(w[None], (n,) + w.shape)
    co = w5.shape[1]
    k = w5.shape[3]
    k2 = k * k
    V = np.empty((n, ci, k2, h, wd), dtype=F)
    dVy = np.empty_like(V)
    dVx = np.empty_like(V)
    _deform_sample(x, off, k, V, dVy, dVx)

    gmat = np.ascontiguousarray(g.reshape(n, co, h * wd))
    vmat = V.reshape(n, ci * k2, h * wd)

    # d/d(w): per-sample correlation of upstream with sampled values
    gw5 = np.matmul(gmat, np.ascontiguousarray(
        vmat.transpose(0, 2, 1))).reshape(n, co, ci, k, k)
    gw = gw5 if per_sample else gw5.sum(axis=0)

    # gv[b, c*t, p] = sum_o w[b,o,c,t] * g[b,o,p]
    wmat = np.ascontiguousarray(w5.reshape(n, co, ci * k2).transpose(0, 2, 1))
    gv = np.matmul(wmat, gmat).reshape(n, ci, k2, h, wd)

    gx = np.zeros_like(x)
    _deform_scatter_x(gv, off, k, gx)

    goff = np.empty_like(off)
    goff[:, 0::2] = (gv * dVy).sum(axis=1)
    goff[:, 1::2] = (gv * dVx).sum(axis=1)
    return gx, gw, goff


def bilinear_sample_point(xmap: np.ndarray, qy: float, qx: float) -> float:
    """Reference scalar bilinear probe with zero padding outside the map."""
    h, w = xmap.shape
    iy = int(np.floor(qy))
    ix = int(np.floor(qx))
    fy = qy - iy
    fx = qx - ix
    def at(r, c):
        return float(xmap[r, c]) if 0 <= r < h and 0 <= c < w else 0.0
    return (((1.0 - fy) * (1.0 - fx) * at(iy, ix)
             + (1.0 - fy) * fx * at(iy, ix + 1))
            + fy * (1.0 - fx) * at(iy + 1, ix)) + fy * fx * at(iy + 1, ix + 1)


def warm_up() -> None:
    """Trigger JIT compilation of all kernels on tiny inputs."""
    x = np.zeros((1, 1, 4, 4), dtype=F)
    w = np.zeros((1, 1, 1, 3, 3), dtype=F)
    off = np.zeros((1, 18, 4, 4), dtype=F)
    _conv2d(pad2d(x, 1), w, np.empty((1, 1, 4, 4), dtype=F))
    deform_conv2d_raw(x, w[0], off)
    deform_conv2d_grads(x, w[0], off, x)
    matmul(np.zeros((2, 2)), np.zeros((2, 2)))
