"""Compiled inner loops of the refinement tracker (forward and reverse mode).

Layout conventions: channel stacks are ``(L, 3, H, W)`` (intensity, x- and
y-gradient); offsets are flattened row-major with the vertical offset outer.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

PATCH = 7
HALF = PATCH // 2
RADIUS = 4
GRID = PATCH + 2 * RADIUS
SPAN = 2 * RADIUS + 1
NOFF = SPAN * SPAN
NCH = 3
NPIX = PATCH * PATCH
NIN = NOFF + 3
EPS = 1e-6
# grids are stored flat in rows of ROW doubles so that each template tap is a
# single contiguous multiply-add over OUTLEN entries
ROW = 16
GSIZE = ROW * ROW
OUTLEN = SPAN * ROW


@njit(cache=True, error_model="numpy")
def sample_grad(img, x, y):
    h, w = img.shape
    in_x = 0.0 <= x <= w - 1
    in_y = 0.0 <= y <= h - 1
    xc = min(max(x, 0.0), w - 1.0)
    yc = min(max(y, 0.0), h - 1.0)
    x0 = int(math.floor(xc))
    y0 = int(math.floor(yc))
    if w >= 2 and x0 > w - 2:
        x0 = w - 2
    if h >= 2 and y0 > h - 2:
        y0 = h - 2
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    a = img[y0, x0]
    b = img[y0, x1]
    c = img[y1, x0]
    d = img[y1, x1]
    top = a + (b - a) * fx
    bot = c + (d - c) * fx
    val = top + (bot - top) * fy
    dx = 0.0
    dy = 0.0
    if in_x and x1 != x0:
        dx = (b - a) * (1.0 - fy) + (d - c) * fy
    if in_y and y1 != y0:
        dy = bot - top
    return val, dx, dy


@njit(cache=True, error_model="numpy")
def make_template(chan, qx, qy, tmpl):
    """Zero-mean, unit-norm patches around (qx, qy), one per channel."""
    for c in range(NCH):
        s = 0.0
        for i in range(PATCH):
            for j in range(PATCH):
                v, _, _ = sample_grad(chan[c], qx + j - HALF, qy + i - HALF)
                tmpl[c, i, j] = v
                s += v
        m = s / NPIX
        ss = 0.0
        for i in range(PATCH):
            for j in range(PATCH):
                tmpl[c, i, j] -= m
                ss += tmpl[c, i, j] * tmpl[c, i, j]
        if ss < 1e-20:
            for i in range(PATCH):
                for j in range(PATCH):
                    tmpl[c, i, j] = 0.0
        else:
            inv = 1.0 / math.sqrt(ss)
            for i in range(PATCH):
                for j in range(PATCH):
                    tmpl[c, i, j] *= inv


@njit(cache=True, error_model="numpy")
def fill_grid(chan, px, py, G, Gx, Gy, with_grad):
    """Sample the 15x15 search grid around (px, py) into 16-wide padded rows."""
    off = HALF + RADIUS
    h = chan.shape[1]
    w = chan.shape[2]
    x0f = math.floor(px)
    y0f = math.floor(py)
    if x0f - off >= 0 and x0f + off + 1 <= w - 1 and y0f - off >= 0 and y0f + off + 1 <= h - 1:
        # interior: every sample shares one set of bilinear weights
        fx = px - x0f
        fy = py - y0f
        bx = int(x0f) - off
        by = int(y0f) - off
        w00 = (1.0 - fx) * (1.0 - fy)
        w01 = fx * (1.0 - fy)
        w10 = (1.0 - fx) * fy
        w11 = fx * fy
        for c in range(NCH):
            img = chan[c]
            for a in range(GRID):
                r0 = img[by + a]
                r1 = img[by + a + 1]
                row = a * ROW
                for b in range(GRID):
                    i = bx + b
                    p00 = r0[i]
                    p01 = r0[i + 1]
                    p10 = r1[i]
                    p11 = r1[i + 1]
                    G[c, row + b] = w00 * p00 + w01 * p01 + w10 * p10 + w11 * p11
                    if with_grad:
                        Gx[c, row + b] = (p01 - p00) * (1.0 - fy) + (p11 - p10) * fy
                        Gy[c, row + b] = (p10 - p00) * (1.0 - fx) + (p11 - p01) * fx
        return
    for c in range(NCH):
        img = chan[c]
        for a in range(GRID):
            y = py + a - off
            for b in range(GRID):
                v, dx, dy = sample_grad(img, px + b - off, y)
                G[c, a * ROW + b] = v
                if with_grad:
                    Gx[c, a * ROW + b] = dx
                    Gy[c, a * ROW + b] = dy


@njit(cache=True, error_model="numpy")
def corr_forward(G, tmpl, corr, den, ncc, mean):
    """Channel-averaged normalised cross-correlation for all 81 offsets.

    ``den``, ``ncc`` and ``mean`` are cached per channel in the padded
    offset layout (index ``ov * ROW + ou``) for :func:`corr_backward`.
    """
    I1 = np.zeros((GRID + 1, GRID + 1))
    I2 = np.zeros((GRID + 1, GRID + 1))
    nums = np.empty(OUTLEN)
    for o in range(NOFF):
        corr[o] = 0.0
    for c in range(NCH):
        g = G[c]
        for a in range(GRID):
            r1 = 0.0
            r2 = 0.0
            for b in range(GRID):
                v = g[a * ROW + b]
                r1 += v
                r2 += v * v
                I1[a + 1, b + 1] = I1[a, b + 1] + r1
                I2[a + 1, b + 1] = I2[a, b + 1] + r2
        for idx in range(OUTLEN):
            nums[idx] = 0.0
        for i in range(PATCH):
            for j in range(PATCH):
                tv = tmpl[c, i, j]
                base = i * ROW + j
                for idx in range(OUTLEN):
                    nums[idx] += tv * g[base + idx]
        for ov in range(SPAN):
            for ou in range(SPAN):
                q = ov * ROW + ou
                s1 = I1[ov + PATCH, ou + PATCH] - I1[ov, ou + PATCH] - I1[ov + PATCH, ou] + I1[ov, ou]
                s2 = I2[ov + PATCH, ou + PATCH] - I2[ov, ou + PATCH] - I2[ov + PATCH, ou] + I2[ov, ou]
                var = s2 - s1 * s1 / NPIX
                if var < 0.0:
                    var = 0.0
                d = math.sqrt(var + EPS)
                den[c, q] = d
                mean[c, q] = s1 / NPIX
                r = nums[q] / d
                ncc[c, q] = r
                corr[ov * SPAN + ou] += r / NCH


@njit(cache=True, error_model="numpy")
def corr_backward(gcorr, G, Gx, Gy, tmpl, den, ncc, mean, gG):
    """Vector-Jacobian product of :func:`corr_forward` w.r.t. the sample position."""
    alpha = np.zeros(OUTLEN)
    beta = np.empty((SPAN, SPAN))
    betam = np.empty((SPAN, SPAN))
    B1 = np.zeros((SPAN + 1, SPAN + 1))
    B2 = np.zeros((SPAN + 1, SPAN + 1))
    cover = np.empty((GRID, GRID))
    coverm = np.empty((GRID, GRID))
    gpx = 0.0
    gpy = 0.0
    for c in range(NCH):
        for idx in range(GSIZE):
            gG[idx] = 0.0
        for ov in range(SPAN):
            for ou in range(SPAN):
                q = ov * ROW + ou
                gn = gcorr[ov * SPAN + ou] / NCH
                d = den[c, q]
                alpha[q] = gn / d
                bq = gn * ncc[c, q] / (d * d)
                beta[ov, ou] = bq
                betam[ov, ou] = bq * mean[c, q]
        # template term: full correlation of alpha with the template
        for i in range(PATCH):
            for j in range(PATCH):
                tv = tmpl[c, i, j]
                base = i * ROW + j
                for idx in range(OUTLEN):
                    gG[base + idx] += tv * alpha[idx]
        # variance term: sum of beta over the offsets whose patch covers each cell
        for ov in range(SPAN):
            r = 0.0
            rm = 0.0
            for ou in range(SPAN):
                r += beta[ov, ou]
                rm += betam[ov, ou]
                B1[ov + 1, ou + 1] = B1[ov, ou + 1] + r
                B2[ov + 1, ou + 1] = B2[ov, ou + 1] + rm
        for a in range(GRID):
            lo_v = max(a - PATCH + 1, 0)
            hi_v = min(a, SPAN - 1) + 1
            for b in range(GRID):
                lo_u = max(b - PATCH + 1, 0)
                hi_u = min(b, SPAN - 1) + 1
                cover[a, b] = B1[hi_v, hi_u] - B1[lo_v, hi_u] - B1[hi_v, lo_u] + B1[lo_v, lo_u]
                coverm[a, b] = B2[hi_v, hi_u] - B2[lo_v, hi_u] - B2[hi_v, lo_u] + B2[lo_v, lo_u]
        g = G[c]
        gx = Gx[c]
        gy = Gy[c]
        for a in range(GRID):
            for b in range(GRID):
                idx = a * ROW + b
                v = gG[idx] - cover[a, b] * g[idx] + coverm[a, b]
                gpx += v * gx[idx]
                gpy += v * gy[idx]
    return gpx, gpy


@njit(cache=True, error_model="numpy")
def peak_correlation(chan, px, py, tmpl, G, corr, den, ncc, mean):
    fill_grid(chan, px, py, G, G, G, False)
    corr_forward(G, tmpl, corr, den, ncc, mean)
    best = -2.0
    for o in range(NOFF):
        if corr[o] > best:
            best = corr[o]
    return best


@njit(cache=True, error_model="numpy")
def track(chans, queries, W1, b1, W2, b2, K, clampv, want_vis,
          labels, weights, gammas, delta, scale, train, inits, use_inits,
          out_points, out_stack, out_conf, gW1, gb1, gW2, gb2):
    """Run the refinement tracker over a window for every query.

    Frames are chained: frame t starts from the final estimate of frame t-1.
    With ``train`` set, the discounted Huber loss against ``labels`` is
    accumulated and its gradient added into ``gW1``..``gb2``; gradients do
    not flow across frames. With ``use_inits`` frame t starts from
    ``inits[n, t]`` instead, which makes that frame hand-off explicit for
    finite-difference checks. Returns the loss (0 when not training).
    """
    L = chans.shape[0]
    N = queries.shape[0]
    hid = b1.shape[0]
    tmpl = np.empty((NCH, PATCH, PATCH))
    Gk = np.zeros((K, NCH, GSIZE))
    Gxk = np.zeros((K, NCH, GSIZE))
    Gyk = np.zeros((K, NCH, GSIZE))
    denk = np.ones((K, NCH, OUTLEN))
    ncck = np.zeros((K, NCH, OUTLEN))
    meank = np.zeros((K, NCH, OUTLEN))
    zk = np.empty((K, NIN))
    hk = np.empty((K, hid))
    live = np.empty((K, 2), dtype=np.bool_)
    pk = np.empty((K + 1, 2))
    corr = np.empty(NOFF)
    gP = np.empty((K + 1, 2))
    gDz = np.empty((K, 2))
    gG = np.empty(GSIZE)
    gz = np.empty(NIN)
    gpre = np.empty(hid)
    pre = np.empty(hid)
    loss = 0.0

    for n in range(N):
        qx = queries[n, 0]
        qy = queries[n, 1]
        make_template(chans[0], qx, qy, tmpl)
        out_points[n, 0, 0] = qx
        out_points[n, 0, 1] = qy
        out_conf[n, 0] = 1.0
        px = qx
        py = qy
        for t in range(1, L):
            ch = chans[t]
            if use_inits:
                px = inits[n, t, 0]
                py = inits[n, t, 1]
            pk[0, 0] = px
            pk[0, 1] = py
            dlx = 0.0
            dly = 0.0
            for k in range(K):
                fill_grid(ch, pk[k, 0], pk[k, 1], Gk[k], Gxk[k], Gyk[k], train and k > 0)
                corr_forward(Gk[k], tmpl, corr, denk[k], ncck[k], meank[k])
                for o in range(NOFF):
                    zk[k, o] = corr[o]
                zk[k, NOFF] = dlx
                zk[k, NOFF + 1] = dly
                zk[k, NOFF + 2] = (k + 1.0) / K
                for u in range(hid):
                    pre[u] = b1[u]
                for i in range(NIN):
                    zi = zk[k, i]
                    for u in range(hid):
                        pre[u] += zi * W1[i, u]
                for u in range(hid):
                    hk[k, u] = math.tanh(pre[u])
                for d in range(2):
                    acc = b2[d]
                    for u in range(hid):
                        acc += hk[k, u] * W2[u, d]
                    live[k, d] = -clampv < acc < clampv
                    if acc > clampv:
                        acc = clampv
                    elif acc < -clampv:
                        acc = -clampv
                    pk[k + 1, d] = pk[k, d] + acc
                    out_stack[n, t, k, d] = pk[k + 1, d]
                dlx = pk[k + 1, 0] - pk[k, 0]
                dly = pk[k + 1, 1] - pk[k, 1]
            px = pk[K, 0]
            py = pk[K, 1]
            out_points[n, t, 0] = px
            out_points[n, t, 1] = py
            if want_vis:
                out_conf[n, t] = peak_correlation(ch, px, py, tmpl, Gk[0], corr,
                                                  denk[0], ncck[0], meank[0])
            if not train:
                continue

            w = weights[n, t]
            for k in range(K + 1):
                gP[k, 0] = 0.0
                gP[k, 1] = 0.0
            for k in range(K):
                gDz[k, 0] = 0.0
                gDz[k, 1] = 0.0
                rx = pk[k + 1, 0] - labels[n, t, 0]
                ry = pk[k + 1, 1] - labels[n, t, 1]
                a = math.sqrt(rx * rx + ry * ry)
                coef = scale * gammas[k] * w
                if a <= delta:
                    loss += coef * 0.5 * a * a
                    gP[k + 1, 0] += coef * rx
                    gP[k + 1, 1] += coef * ry
                else:
                    loss += coef * delta * (a - 0.5 * delta)
                    gP[k + 1, 0] += coef * delta * rx / a
                    gP[k + 1, 1] += coef * delta * ry / a
            for k in range(K - 1, -1, -1):
                g0 = (gP[k + 1, 0] + gDz[k, 0]) if live[k, 0] else 0.0
                g1 = (gP[k + 1, 1] + gDz[k, 1]) if live[k, 1] else 0.0
                gb2[0] += g0
                gb2[1] += g1
                for u in range(hid):
                    hu = hk[k, u]
                    gW2[u, 0] += hu * g0
                    gW2[u, 1] += hu * g1
                    gpre[u] = (W2[u, 0] * g0 + W2[u, 1] * g1) * (1.0 - hu * hu)
                    gb1[u] += gpre[u]
                for i in range(NIN):
                    zi = zk[k, i]
                    acc = 0.0
                    for u in range(hid):
                        gW1[i, u] += zi * gpre[u]
                        acc += W1[i, u] * gpre[u]
                    gz[i] = acc
                if k > 0:
                    gDz[k - 1, 0] = gz[NOFF]
                    gDz[k - 1, 1] = gz[NOFF + 1]
                gP[k, 0] += gP[k + 1, 0]
                gP[k, 1] += gP[k + 1, 1]
                if k > 0:
                    gx, gy = corr_backward(gz, Gk[k], Gxk[k], Gyk[k], tmpl,
                                           denk[k], ncck[k], meank[k], gG)
                    gP[k, 0] += gx
                    gP[k, 1] += gy
    return loss
