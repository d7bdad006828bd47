"""Fused channels-last kernels for the conv-block hot path.

Each kernel reproduces a composition of the reference ops in
:mod:`astain.tensor` (conv -> batch-norm -> 2x2 max-pool -> ReLU) in a single
pass over memory. Activations are ``[B, H, W, C]``; flattened conv outputs are
``[B*H*W, C]``.
"""
import numba
import numpy as np


@numba.njit(cache=True)
def im2col(x, kh, kw):
    """Rows are output positions, columns are ordered (row offset, col offset, channel)."""
    b, h, w, c = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    cols = np.empty((b * ho * wo, c * kh * kw))
    r = 0
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                q = 0
                for u in range(kh):
                    for v in range(kw):
                        for ch in range(c):
                            cols[r, q] = x[n, i + u, j + v, ch]
                            q += 1
                r += 1
    return cols


@numba.njit(cache=True)
def col2im(dcols, b, h, w, c, kh, kw):
    ho, wo = h - kh + 1, w - kw + 1
    dx = np.zeros((b, h, w, c))
    r = 0
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                q = 0
                for u in range(kh):
                    for v in range(kw):
                        for ch in range(c):
                            dx[n, i + u, j + v, ch] += dcols[r, q]
                            q += 1
                r += 1
    return dx


@numba.njit(cache=True)
def batch_moments(z):
    n, c = z.shape
    mean = np.zeros(c)
    for i in range(n):
        for k in range(c):
            mean[k] += z[i, k]
    mean /= n
    var = np.zeros(c)
    for i in range(n):
        for k in range(c):
            d = z[i, k] - mean[k]
            var[k] += d * d
    var /= n
    return mean, var


@numba.njit(cache=True)
def bn_pool_relu(z, b, h, w, mean, inv_std, gamma, beta):
    """Normalize, affine, 2x2 max-pool (first position wins ties), ReLU.

    Odd trailing rows/columns are dropped before pooling.
    """
    c = z.shape[1]
    ho, wo = h // 2, w // 2
    zz = z.reshape(b, h, w, c)
    out = np.empty((b, ho, wo, c))
    arg = np.empty((b, ho, wo, c), np.int8)
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                for k in range(c):
                    s = inv_std[k] * gamma[k]
                    best = (zz[n, 2 * i, 2 * j, k] - mean[k]) * s
                    a = 0
                    y = (zz[n, 2 * i, 2 * j + 1, k] - mean[k]) * s
                    if y > best:
                        best = y
                        a = 1
                    y = (zz[n, 2 * i + 1, 2 * j, k] - mean[k]) * s
                    if y > best:
                        best = y
                        a = 2
                    y = (zz[n, 2 * i + 1, 2 * j + 1, k] - mean[k]) * s
                    if y > best:
                        best = y
                        a = 3
                    best += beta[k]
                    out[n, i, j, k] = best if best > 0.0 else 0.0
                    arg[n, i, j, k] = a
    return out, arg


@numba.njit(cache=True)
def bn_pool_relu_backward(grad, out, arg, z, h, w, mean, inv_std, gamma, batch_stats):
    """Gradient of :func:`bn_pool_relu` w.r.t. ``z``, ``gamma`` and ``beta``.

    With ``batch_stats`` the gradient also flows through the batch mean and
    variance (train mode); otherwise the statistics are constants.
    """
    b, ho, wo, c = grad.shape
    n_total, _ = z.shape
    zz = z.reshape(b, h, w, c)
    dgamma = np.zeros(c)
    dbeta = np.zeros(c)
    dz = np.zeros((b, h, w, c))
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                for k in range(c):
                    if out[n, i, j, k] > 0.0:
                        g = grad[n, i, j, k]
                        a = arg[n, i, j, k]
                        r = 2 * i + a // 2
                        s = 2 * j + a % 2
                        xhat = (zz[n, r, s, k] - mean[k]) * inv_std[k]
                        dbeta[k] += g
                        dgamma[k] += g * xhat
                        dz[n, r, s, k] = g * gamma[k] * inv_std[k]
    if batch_stats:
        mb = dbeta / n_total
        mg = dgamma / n_total
        sc = gamma * inv_std
        for n in range(b):
            for r in range(h):
                for s in range(w):
                    for k in range(c):
                        xhat = (zz[n, r, s, k] - mean[k]) * inv_std[k]
                        dz[n, r, s, k] -= sc[k] * (mb[k] + xhat * mg[k])
    return dz.reshape(n_total, c), dgamma, dbeta
