"""Pure-numpy implementations of the hot kernels.

These are the fallback path used when numba is disabled or unavailable
(see ``crossdiff.kernels``). Signatures and results match the numba
implementations; only the execution strategy differs.
"""

import numpy as np


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _pad(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    return xp


def im2col(x, kh, kw, stride, pad):
    """Extract sliding conv patches.

    x: (N, C, H, W) -> cols (N, C*kh*kw, OH*OW); the patch axis is
    channel-major in (c, ky, kx) order so a C-order reshape of an
    (O, C, kh, kw) weight matches it directly.
    """
    n, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    xp = _pad(x, pad)
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return windows.reshape(n, c * kh * kw, oh * ow)


def col2im(cols, n, c, h, w, kh, kw, stride, pad):
    """Adjoint of im2col: scatter-add (N, C*kh*kw, OH*OW) patches back
    onto an (N, C, H, W) grid."""
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    colsr = cols.reshape(n, c, kh, kw, oh, ow)
    gp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ky in range(kh):
        for kx in range(kw):
            gp[:, :, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride] += \
                colsr[:, :, ky, kx]
    if pad > 0:
        return np.ascontiguousarray(gp[:, :, pad:pad + h, pad:pad + w])
    return gp


def propagate_steps(labels, nbr_idx, nbr_w, steps, clamp_mask, clamp_values):
    """Run `steps` synchronous label-propagation updates.

    labels: (P,) float64; nbr_idx/nbr_w: (P, K) padded neighbor tables
    (padding entries carry weight 0). Seed pixels given by clamp_mask are
    reset to clamp_values after every step.
    """
    cur = labels.copy()
    for _ in range(steps):
        cur = (nbr_w * cur[nbr_idx]).sum(axis=1)
        if clamp_mask is not None:
            cur[clamp_mask] = clamp_values[clamp_mask]
    return cur


def staple_estep(d, p, q, prior):
    """STAPLE E-step over binary rater decisions.

    d: (J, P) in {0,1}. Returns (consensus weights W (P,), observed-data
    log-likelihood sum log(a_i + b_i)).
    """
    pj = p[:, None]
    qj = q[:, None]
    a = prior * np.where(d == 1.0, pj, 1.0 - pj).prod(axis=0)
    b = (1.0 - prior) * np.where(d == 1.0, 1.0 - qj, qj).prod(axis=0)
    denom = a + b
    ll = float(np.log(denom).sum())
    return a / denom, ll


def stamp_disks(mask, ys, xs, radius):
    """Set mask pixels within `radius` of each (y, x) point to True (in place)."""
    h, w = mask.shape
    r = int(np.ceil(radius))
    r2 = radius * radius
    for py, px in zip(ys, xs):
        y0 = max(0, int(np.floor(py)) - r - 1)
        y1 = min(h, int(np.ceil(py)) + r + 2)
        x0 = max(0, int(np.floor(px)) - r - 1)
        x1 = min(w, int(np.ceil(px)) + r + 2)
        yy = np.arange(y0, y1, dtype=np.float64)[:, None] - py
        xx = np.arange(x0, x1, dtype=np.float64)[None, :] - px
        mask[y0:y1, x0:x1] |= (yy * yy + xx * xx <= r2)
    return mask
