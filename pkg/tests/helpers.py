"""Independent brute-force oracles shared by the tests."""
import math

import numpy as np


def random_probs(rng, C, H, W, temperature=1.0):
    z = rng.normal(size=(C, H, W)) * temperature
    e = np.exp(z - z.max(axis=0))
    return e / e.sum(axis=0)


def sort_quantile(values, fraction):
    v = sorted(float(x) for x in np.ravel(values))
    # ceil(f * n) with a guard against binary rounding of f * n
    k = math.ceil(round(fraction * len(v), 9))
    return v[max(k, 1) - 1]


def dilate_oracle(mask, radius, cross=False):
    H, W = mask.shape
    out = np.zeros((H, W), dtype=np.uint8)
    for i in range(H):
        for j in range(W):
            hit = 0
            for y in range(max(0, i - radius), min(H, i + radius + 1)):
                for x in range(max(0, j - radius), min(W, j + radius + 1)):
                    if cross and abs(y - i) + abs(x - j) > radius:
                        continue
                    if mask[y, x]:
                        hit = 1
            out[i, j] = hit
    return out


def boundary_oracle(labels, C, radius, cross=False):
    H, W = labels.shape
    out = np.zeros((H, W), dtype=np.uint8)
    for c in range(C):
        not_c = (labels != c).astype(np.uint8)
        grown = dilate_oracle(not_c, radius, cross)
        for i in range(H):
            for j in range(W):
                if labels[i, j] == c and grown[i, j]:
                    out[i, j] = 1
    return out


def surface_oracle(mask):
    H, W = mask.shape
    pts = []
    for i in range(H):
        for j in range(W):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                y, x = i + di, j + dj
                if not (0 <= y < H and 0 <= x < W) or not mask[y, x]:
                    pts.append((i, j))
                    break
    return pts


def hd95_oracle(pred, gt):
    sp, sg = surface_oracle(pred), surface_oracle(gt)
    d = []
    for a, b in ((sp, sg), (sg, sp)):
        for p in a:
            d.append(min(math.hypot(p[0] - q[0], p[1] - q[1]) for q in b))
    d.sort()
    k = math.ceil(round(0.95 * len(d), 9))
    return d[k - 1]


def ece_oracle(probs, labels, M, mask=None):
    C, H, W = probs.shape
    counts = [0] * M
    conf_sums = [0.0] * M
    acc_sums = [0.0] * M
    n = 0
    for i in range(H):
        for j in range(W):
            if mask is not None and not mask[i, j]:
                continue
            col = [float(probs[c, i, j]) for c in range(C)]
            conf = max(col)
            pred = col.index(conf)
            # bin m (1-based) holds ((m-1)/M, m/M]; confidence 0 joins bin 1
            m = 1
            while m < M and conf > m / M:
                m += 1
            counts[m - 1] += 1
            conf_sums[m - 1] += conf
            acc_sums[m - 1] += float(pred == labels[i, j])
            n += 1
    if n == 0:
        return 0.0, counts
    score = 0.0
    for m in range(M):
        if counts[m]:
            score += counts[m] / n * abs(acc_sums[m] / counts[m] - conf_sums[m] / counts[m])
    return score, counts


def conv_oracle(x, w, b):
    cin, H, W = x.shape
    cout, _, k, _ = w.shape
    p = k // 2
    y = np.zeros((cout, H, W))
    for o in range(cout):
        for i in range(H):
            for j in range(W):
                s = b[o]
                for c in range(cin):
                    for dy in range(k):
                        for dx in range(k):
                            yy, xx = i + dy - p, j + dx - p
                            if 0 <= yy < H and 0 <= xx < W:
                                s += w[o, c, dy, dx] * x[c, yy, xx]
                y[o, i, j] = s
    return y
