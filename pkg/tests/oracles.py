"""Slow, obviously-correct reference implementations.

Plain Python loops over numpy scalars only; nothing here imports the code
under test.
"""
import math

import numpy as np


def linear_loop(x, w, b):
    lead = x.shape[:-1]
    cout, cin = w.shape
    out = np.zeros(lead + (cout,))
    for idx in np.ndindex(lead):
        for o in range(cout):
            acc = b[o]
            for i in range(cin):
                acc += x[idx + (i,)] * w[o, i]
            out[idx + (o,)] = acc
    return out


def conv2d_loop(x, k, b, stride, padding):
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for bi in range(n):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                sy = y * stride + i - padding
                                sx = xx * stride + j - padding
                                if 0 <= sy < h and 0 <= sx < w:
                                    acc += x[bi, c, sy, sx] * k[o, c, i, j]
                    out[bi, o, y, xx] = acc
    return out


def dwconv2d_loop(x, k, b):
    n, c, h, w = x.shape
    ks = k.shape[1]
    p = (ks - 1) // 2
    out = np.zeros_like(x, dtype=np.float64)
    for bi in range(n):
        for ch in range(c):
            for y in range(h):
                for xx in range(w):
                    acc = b[ch]
                    for i in range(ks):
                        for j in range(ks):
                            sy, sx = y + i - p, xx + j - p
                            if 0 <= sy < h and 0 <= sx < w:
                                acc += x[bi, ch, sy, sx] * k[ch, i, j]
                    out[bi, ch, y, xx] = acc
    return out


def dense_attention(x, wqkv, bqkv, wproj, bproj, heads):
    """Global multi-head self-attention over all H*W positions of a (C, H, W) map, by loops."""
    c, h, w = x.shape
    n = h * w
    d = c // heads
    tokens = x.reshape(c, n).T  # (n, c)
    qkv = np.array([[sum(tokens[t, i] * wqkv[o, i] for i in range(c)) + bqkv[o] for o in range(3 * c)]
                    for t in range(n)])
    q, k, v = qkv[:, :c], qkv[:, c:2 * c], qkv[:, 2 * c:]
    out = np.zeros((n, c))
    for hd in range(heads):
        sl = slice(hd * d, (hd + 1) * d)
        for t in range(n):
            scores = [sum(q[t, sl][e] * k[s, sl][e] for e in range(d)) / math.sqrt(d) for s in range(n)]
            m = max(scores)
            ex = [math.exp(sc - m) for sc in scores]
            z = sum(ex)
            for e in range(d):
                out[t, hd * d + e] = sum(ex[s] / z * v[s, hd * d + e] for s in range(n))
    proj = np.array([[sum(out[t, i] * wproj[o, i] for i in range(c)) + bproj[o] for o in range(c)]
                     for t in range(n)])
    return proj.T.reshape(c, h, w)


def boundary_loop(mask):
    h, w = mask.shape
    pts = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            nbrs = [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)]
            if any(not (0 <= a < h and 0 <= b < w) or not mask[a, b] for a, b in nbrs):
                pts.append((y, x))
    return pts


def hd95_all_pairs(a, b):
    pa, pb = boundary_loop(a), boundary_loop(b)
    d_ab = [min(math.sqrt((y1 - y2) ** 2 + (x1 - x2) ** 2) for y2, x2 in pb) for y1, x1 in pa]
    d_ba = [min(math.sqrt((y1 - y2) ** 2 + (x1 - x2) ** 2) for y2, x2 in pa) for y1, x1 in pb]
    pooled = sorted(d_ab + d_ba)
    # linear-interpolated 95th percentile; the upper half interpolates down from
    # the right neighbour, which is the rounding numpy uses for "linear"
    pos = (len(pooled) - 1) * 0.95
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(pooled) - 1)
    t = pos - lo
    a, b = pooled[lo], pooled[hi]
    if t >= 0.5:
        return b - (b - a) * (1 - t)
    return a + (b - a) * t


def sliding_accumulate(image, model, crop, origins, sigma):
    """Per-pixel weighted vote written pixel by pixel."""
    cin, h, w = image.shape
    centre = (crop - 1) / 2
    gw = [[math.exp(-0.5 * ((i - centre) / sigma) ** 2) * math.exp(-0.5 * ((j - centre) / sigma) ** 2)
           for j in range(crop)] for i in range(crop)]
    peak = max(max(r) for r in gw)
    gw = [[max(v / peak, 1e-8) for v in r] for r in gw]
    num = None
    den = np.zeros((h, w))
    for y0, x0 in origins:
        logits = model(image[None, :, y0:y0 + crop, x0:x0 + crop])[0]
        k = logits.shape[0]
        if num is None:
            num = np.zeros((k, h, w))
        for i in range(crop):
            for j in range(crop):
                col = logits[:, i, j]
                e = [math.exp(v - max(col)) for v in col]
                z = sum(e)
                for c in range(k):
                    num[c, y0 + i, x0 + j] += e[c] / z * gw[i][j]
                den[y0 + i, x0 + j] += gw[i][j]
    return num / den


def adam_scalar(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        p = p - lr * mh / (math.sqrt(vh) + eps)
    return p, m, v


def rasterize_loop(shape, size):
    out = np.zeros((size, size), dtype=bool)
    for y in range(size):
        for x in range(size):
            kind = shape["type"]
            if kind == "ellipse":
                inside = ((y - shape["cy"]) / shape["ry"]) ** 2 + ((x - shape["cx"]) / shape["rx"]) ** 2 <= 1.0
            elif kind == "rectangle":
                inside = shape["y0"] <= y <= shape["y1"] and shape["x0"] <= x <= shape["x1"]
            else:
                d2 = (y - shape["cy"]) ** 2 + (x - shape["cx"]) ** 2
                inside = shape["r_in"] ** 2 <= d2 <= shape["r_out"] ** 2
            out[y, x] = inside
    return out


def rotate_mask_loop(mask, theta_deg):
    """Nearest-neighbour inverse mapping about the centre, clamped at the border."""
    h, w = mask.shape
    t = math.radians(theta_deg)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            dy, dx = y - cy, x - cx
            sy = math.cos(t) * dy - math.sin(t) * dx + cy
            sx = math.sin(t) * dy + math.cos(t) * dx + cx
            iy = min(max(int(math.floor(sy + 0.5)), 0), h - 1)
            ix = min(max(int(math.floor(sx + 0.5)), 0), w - 1)
            out[y, x] = mask[iy, ix]
    return out
