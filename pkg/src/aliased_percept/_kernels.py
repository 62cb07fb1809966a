"""Fused loops for the training hot path.

Each kernel replaces several small numpy passes over a (batch, width)
array with one compiled loop. Transcendental functions stay in numpy,
whose SIMD ufuncs beat scalar libm calls by an order of magnitude on
(batch, width) arrays; the loops here only do arithmetic, selects and
column reductions. The MDN head is the exception (see ``mdn_nll``). Constants are
cast to the array dtype so float32 loops vectorise.
"""

from __future__ import annotations

import numpy as np
from numba import njit

FUSED = ("elu", "softplus", "linear")


@njit(cache=True, fastmath=True)
def bn_normalise(z, b, gamma, beta, eps, zhat, u):
    """Batch statistics of ``z + b``; fills ``zhat`` and ``u = gamma*zhat + beta``.

    Returns the batch mean (bias included), biased variance and
    ``1/sqrt(var + eps)``.
    """
    m, w = z.shape
    t = z.dtype.type
    mean = np.zeros(w, z.dtype)
    var = np.zeros(w, z.dtype)
    for i in range(m):
        for j in range(w):
            mean[j] += z[i, j]
    inv_m = t(1.0) / t(m)
    for j in range(w):
        mean[j] *= inv_m
    for i in range(m):
        for j in range(w):
            d = z[i, j] - mean[j]
            var[j] += d * d
    inv_std = np.empty(w, z.dtype)
    for j in range(w):
        var[j] *= inv_m
        inv_std[j] = t(1.0) / np.sqrt(var[j] + t(eps))
    for i in range(m):
        for j in range(w):
            zh = (z[i, j] - mean[j]) * inv_std[j]
            zhat[i, j] = zh
            u[i, j] = gamma[j] * zh + beta[j]
    for j in range(w):
        mean[j] += b[j]
    return mean, var, inv_std


@njit(cache=True, fastmath=True)
def bn_backward(da, act, elu, zhat, gamma, inv_std, dz):
    """Backward through the activation (ELU when ``elu``, else already
    folded into ``da``) and batch-norm with batch statistics.

    Fills ``dz`` and returns ``(g_gamma, g_beta, g_bias)``. Entries of
    ``dz`` below the smallest normal number are flushed to zero (units with a
    vanishing gain would otherwise feed subnormals into the next matmuls).
    """
    m, w = da.shape
    t = da.dtype.type
    one = t(1.0)
    zero = t(0.0)
    tiny = np.finfo(da.dtype).tiny
    g_gamma = np.zeros(w, da.dtype)
    g_beta = np.zeros(w, da.dtype)
    for i in range(m):
        for j in range(w):
            du = da[i, j]
            if elu:
                a = act[i, j]
                du = du * (one if a > 0 else a + one)
            dz[i, j] = du
            g_beta[j] += du
            g_gamma[j] += du * zhat[i, j]
    s = np.empty(w, da.dtype)
    cb = np.empty(w, da.dtype)
    cg = np.empty(w, da.dtype)
    inv_m = one / t(m)
    for j in range(w):
        s[j] = inv_std[j] * gamma[j]
        cb[j] = s[j] * g_beta[j] * inv_m
        cg[j] = s[j] * g_gamma[j] * inv_m
    g_bias = np.zeros(w, da.dtype)
    for i in range(m):
        for j in range(w):
            v = s[j] * dz[i, j] - cb[j] - zhat[i, j] * cg[j]
            v = v if abs(v) >= tiny else zero
            dz[i, j] = v
            g_bias[j] += v
    return g_gamma, g_beta, g_bias


@njit(cache=True, fastmath=True)
def mdn_nll(out, y, k, floor, need_grad, d_out):
    """Mean negative log-likelihood of ``y`` under per-row mixtures.

    ``out`` rows are ``[logits | means | pre-softplus stds]``. When
    ``need_grad`` is set, ``d_out`` receives d(mean NLL)/d(out). Row-wise
    work is tiny (K components), so scalar math in double precision wins
    over a dozen numpy calls on (batch, K) arrays.
    """
    n = out.shape[0]
    half_log_2pi = 0.5 * np.log(2.0 * np.pi)
    w = np.empty(k)
    lp = np.empty(k)
    sg = np.empty(k)
    rs = np.empty(k)
    ez = np.empty(k)
    inv_n = 1.0 / n
    total = 0.0
    for i in range(n):
        top_logit = out[i, 0]
        for c in range(1, k):
            top_logit = max(top_logit, out[i, c])
        tot = 0.0
        for c in range(k):
            w[c] = np.exp(out[i, c] - top_logit)
            tot += w[c]
        log_tot = np.log(tot)
        top = -np.inf
        for c in range(k):
            zs = out[i, 2 * k + c]
            ez[c] = np.exp(-abs(zs))
            s = max(zs, 0.0) + np.log1p(ez[c]) + floor
            sg[c] = s
            r = (y[i] - out[i, k + c]) / s
            rs[c] = r
            lp[c] = out[i, c] - top_logit - log_tot - 0.5 * r * r - np.log(s) - half_log_2pi
            top = max(top, lp[c])
        qs = 0.0
        for c in range(k):
            lp[c] = np.exp(lp[c] - top)
            qs += lp[c]
        total -= top + np.log(qs)
        if need_grad:
            inv_qs = 1.0 / qs
            inv_tot = 1.0 / tot
            for c in range(k):
                p = lp[c] * inv_qs * inv_n
                r = rs[c]
                s = sg[c]
                # softplus slope expit(zs), written via exp(-|zs|) already at hand
                slope = 1.0 / (1.0 + ez[c]) if out[i, 2 * k + c] >= 0 else ez[c] / (1.0 + ez[c])
                d_out[i, c] = w[c] * inv_tot * inv_n - p
                d_out[i, k + c] = -p * r / s
                d_out[i, 2 * k + c] = p * (1.0 - r * r) / s * slope
    return total * inv_n


@njit(cache=True, fastmath=True)
def adam_l2_step(p, g, m, v, mask, lam, lr, b1, b2, c1, c2, eps):
    """Add the L2 gradient, take one Adam step in place, return the penalty.

    Parameters and moments below sqrt(smallest normal) are flushed to zero.
    Under the penalty, weights of units whose gain has collapsed decay
    geometrically; left alone they end up subnormal, or produce subnormal
    products, and every later matmul slows severalfold.
    """
    t = p.dtype.type
    tiny_v = np.finfo(p.dtype).tiny  # v holds squares; flush only true subnormals
    tiny = t(np.sqrt(tiny_v))
    two_lam, lr_, b1_, b2_ = t(2.0 * lam), t(lr), t(b1), t(b2)
    ob1, ob2 = t(1.0 - b1), t(1.0 - b2)
    ic1, ic2, eps_ = t(1.0 / c1), t(1.0 / c2), t(eps)
    zero = t(0.0)
    pen = zero
    for i in range(p.size):
        pi = p[i]
        mk = mask[i]
        pen += mk * pi * pi
        gi = g[i] + two_lam * mk * pi
        mi = b1_ * m[i] + ob1 * gi
        vi = b2_ * v[i] + ob2 * gi * gi
        pn = pi - lr_ * (mi * ic1) / (np.sqrt(vi * ic2) + eps_)
        m[i] = mi if abs(mi) >= tiny else zero
        v[i] = vi if vi >= tiny_v else zero
        p[i] = pn if abs(pn) >= tiny else zero
    return pen
