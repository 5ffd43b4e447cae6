"""Numba-jitted implementations of the hot kernels.

Loop bodies mirror the numpy fallbacks in ``numpy_impl``; per-element
accumulation order matches the numpy slice versions so both backends
agree to floating-point roundoff.
"""

import numpy as np
from numba import njit

from .numpy_impl import conv_out_size, _pad  # noqa: F401  (re-exported)


@njit(cache=True)
def _im2col_jit(xp, kh, kw, stride, oh, ow, out):
    n, c = xp.shape[0], xp.shape[1]
    for i in range(n):
        col = 0
        for ch in range(c):
            for ky in range(kh):
                for kx in range(kw):
                    for oy in range(oh):
                        src_y = oy * stride + ky
                        dst = oy * ow
                        for ox in range(ow):
                            out[i, col, dst + ox] = xp[i, ch, src_y, ox * stride + kx]
                    col += 1
    return out


def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    xp = _pad(x, pad)
    out = np.empty((n, c * kh * kw, oh * ow), dtype=x.dtype)
    return _im2col_jit(xp, kh, kw, stride, oh, ow, out)


@njit(cache=True)
def _col2im_jit(cols, gp, kh, kw, stride, oh, ow):
    n, c = gp.shape[0], gp.shape[1]
    for i in range(n):
        col = 0
        for ch in range(c):
            for ky in range(kh):
                for kx in range(kw):
                    for oy in range(oh):
                        dst_y = oy * stride + ky
                        src = oy * ow
                        for ox in range(ow):
                            gp[i, ch, dst_y, ox * stride + kx] += cols[i, col, src + ox]
                    col += 1
    return gp


def col2im(cols, n, c, h, w, kh, kw, stride, pad):
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    colsr = np.ascontiguousarray(cols).reshape(n, c * kh * kw, oh * ow)
    gp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    gp = _col2im_jit(colsr, gp, kh, kw, stride, oh, ow)
    if pad > 0:
        return np.ascontiguousarray(gp[:, :, pad:pad + h, pad:pad + w])
    return gp


@njit(cache=True)
def _propagate_jit(labels, nbr_idx, nbr_w, steps, clamp_mask, clamp_values, do_clamp):
    p, k = nbr_idx.shape
    cur = labels.copy()
    nxt = np.empty_like(cur)
    for _ in range(steps):
        for i in range(p):
            acc = 0.0
            for j in range(k):
                acc += nbr_w[i, j] * cur[nbr_idx[i, j]]
            nxt[i] = acc
        if do_clamp:
            for i in range(p):
                if clamp_mask[i]:
                    nxt[i] = clamp_values[i]
        cur, nxt = nxt, cur
    return cur


def propagate_steps(labels, nbr_idx, nbr_w, steps, clamp_mask, clamp_values):
    do_clamp = clamp_mask is not None
    if not do_clamp:
        clamp_mask = np.zeros(labels.shape[0], dtype=np.bool_)
        clamp_values = np.zeros(labels.shape[0], dtype=np.float64)
    return _propagate_jit(
        labels, nbr_idx, nbr_w, int(steps), clamp_mask, clamp_values, do_clamp
    )


@njit(cache=True)
def _staple_estep_jit(d, p, q, prior):
    jn, pix = d.shape
    w = np.empty(pix, dtype=np.float64)
    ll = 0.0
    for i in range(pix):
        a = prior
        b = 1.0 - prior
        for j in range(jn):
            if d[j, i] == 1.0:
                a *= p[j]
                b *= 1.0 - q[j]
            else:
                a *= 1.0 - p[j]
                b *= q[j]
        denom = a + b
        w[i] = a / denom
        ll += np.log(denom)
    return w, ll


def staple_estep(d, p, q, prior):
    w, ll = _staple_estep_jit(d, p, q, float(prior))
    return w, float(ll)


@njit(cache=True)
def _stamp_disks_jit(mask, ys, xs, radius):
    h, w = mask.shape
    r = int(np.ceil(radius))
    r2 = radius * radius
    for n in range(ys.shape[0]):
        py = ys[n]
        px = xs[n]
        y0 = max(0, int(np.floor(py)) - r - 1)
        y1 = min(h, int(np.ceil(py)) + r + 2)
        x0 = max(0, int(np.floor(px)) - r - 1)
        x1 = min(w, int(np.ceil(px)) + r + 2)
        for y in range(y0, y1):
            for x in range(x0, x1):
                dy = y - py
                dx = x - px
                if dy * dy + dx * dx <= r2:
                    mask[y, x] = True
    return mask


def stamp_disks(mask, ys, xs, radius):
    return _stamp_disks_jit(mask, ys, xs, float(radius))
