"""Brute-force reference implementations: explicit loops, no vectorization."""

import math

import numpy as np


def matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def softmax_rows(x):
    out = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape[:-1]):
        row = x[idx]
        mx = max(row)
        ex = [math.exp(v - mx) for v in row]
        tot = sum(ex)
        out[idx] = [e / tot for e in ex]
    return out


def conv2d(x, w, b):
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    r = k // 2
    out = np.zeros((cout, h, wd))
    for o in range(cout):
        for y in range(h):
            for xx in range(wd):
                s = b[o]
                for c in range(cin):
                    for dy in range(k):
                        for dx in range(k):
                            yy, xs = y + dy - r, xx + dx - r
                            if 0 <= yy < h and 0 <= xs < wd:
                                s += w[o, c, dy, dx] * x[c, yy, xs]
                out[o, y, xx] = s
    return out


def depthwise_conv2d(x, w, b):
    c, h, wd = x.shape
    k = w.shape[-1]
    r = k // 2
    out = np.zeros((c, h, wd))
    for ch in range(c):
        for y in range(h):
            for xx in range(wd):
                s = b[ch]
                for dy in range(k):
                    for dx in range(k):
                        yy, xs = y + dy - r, xx + dx - r
                        if 0 <= yy < h and 0 <= xs < wd:
                            s += w[ch, dy, dx] * x[ch, yy, xs]
                out[ch, y, xx] = s
    return out


def dft_magnitude(x):
    """Centred |DFT| by the O(N^4) definition."""
    h, w = x.shape
    f = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            s = 0j
            for y in range(h):
                for xx in range(w):
                    s += x[y, xx] * complex(math.cos(-2 * math.pi * (u * y / h + v * xx / w)),
                                            math.sin(-2 * math.pi * (u * y / h + v * xx / w)))
            f[u, v] = s
    out = np.zeros((h, w))
    for u in range(h):
        for v in range(w):
            out[(u + h // 2) % h, (v + w // 2) % w] = abs(f[u, v])
    return out


def _keys(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    if t < 2:
        return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    return 0.0


def _resample_1d(signal, n_out):
    n_in = len(signal)
    scale = n_out / n_in
    stretch = min(1.0, scale)
    support = 2.0 / stretch
    out = []
    for i in range(n_out):
        centre = (i + 0.5) / scale - 0.5
        num = den = 0.0
        for j in range(int(math.floor(centre - support)) - 1, int(math.ceil(centre + support)) + 2):
            wt = _keys((j - centre) * stretch)
            if wt == 0.0:
                continue
            num += wt * signal[min(max(j, 0), n_in - 1)]
            den += wt
        out.append(num / den)
    return out


def bicubic_resize(img, out_h, out_w):
    c, h, w = img.shape
    tmp = np.zeros((c, out_h, w))
    for ch in range(c):
        for x in range(w):
            tmp[ch, :, x] = _resample_1d(list(img[ch, :, x]), out_h)
    out = np.zeros((c, out_h, out_w))
    for ch in range(c):
        for y in range(out_h):
            out[ch, y, :] = _resample_1d(list(tmp[ch, y, :]), out_w)
    return out


def window_attention_core(q, k, v, bias_table, heads, m, mask=None):
    """Per-pair attention inside each window; ``q, k, v`` are ``(nW, N, C)``."""
    nw, n, c = q.shape
    d = c // heads
    coords = [(i // m, i % m) for i in range(n)]
    out = np.zeros((nw, n, c))
    for wi in range(nw):
        for h in range(heads):
            sl = slice(h * d, (h + 1) * d)
            for i in range(n):
                scores = []
                for j in range(n):
                    s = float(np.dot(q[wi, i, sl], k[wi, j, sl])) / math.sqrt(d)
                    dy = coords[i][0] - coords[j][0] + m - 1
                    dx = coords[i][1] - coords[j][1] + m - 1
                    s += bias_table[dy * (2 * m - 1) + dx, h]
                    if mask is not None:
                        s += mask[wi, 0, i, j]
                    scores.append(s)
                mx = max(scores)
                ex = [math.exp(s - mx) for s in scores]
                tot = sum(ex)
                acc = np.zeros(d)
                for j in range(n):
                    acc += ex[j] / tot * v[wi, j, sl]
                out[wi, i, sl] = acc
    return out


def ssim(a, b, win=11, sigma=1.5, k1=0.01, k2=0.03):
    """Per-pixel sliding-window SSIM with an explicit 2-D Gaussian."""
    g1 = [math.exp(-((i - (win - 1) / 2) ** 2) / (2 * sigma * sigma)) for i in range(win)]
    tot = sum(g1)
    g = np.array([[g1[i] * g1[j] / (tot * tot) for j in range(win)] for i in range(win)])
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for x, y in zip(a, b):
        h, w = x.shape
        total = 0.0
        count = 0
        for i in range(h - win + 1):
            for j in range(w - win + 1):
                px, py = x[i:i + win, j:j + win], y[i:i + win, j:j + win]
                mx, my = float((g * px).sum()), float((g * py).sum())
                vx = float((g * (px - mx) ** 2).sum())
                vy = float((g * (py - my) ** 2).sum())
                cxy = float((g * (px - mx) * (py - my)).sum())
                total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
                count += 1
        vals.append(total / count)
    return sum(vals) / len(vals)


def modulate_sin(q, k, v, cell, ws_w, ws_b):
    """Scalar-at-a-time ``sin(k*q + W_s s + b) * v``."""
    n, c = q.shape
    out = np.zeros((n, c))
    for i in range(n):
        for ch in range(c):
            pre = k[i, ch] * q[i, ch] + ws_w[ch, 0] * cell[0] + ws_w[ch, 1] * cell[1] + ws_b[ch]
            out[i, ch] = math.sin(pre) * v[i, ch]
    return out


def mlp_relu(x, layers):
    """Fully-connected stack with ReLU between layers; ``layers`` is ``[(w, b), ...]``."""
    out = []
    for row in x:
        h = list(row)
        for li, (w, b) in enumerate(layers):
            nxt = []
            for o in range(w.shape[0]):
                s = b[o]
                for i in range(w.shape[1]):
                    s += w[o, i] * h[i]
                nxt.append(max(s, 0.0) if li < len(layers) - 1 else s)
            h = nxt
        out.append(h)
    return np.array(out)
