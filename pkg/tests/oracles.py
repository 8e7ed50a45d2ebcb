"""Independent reference implementations used as test oracles."""

import numpy as np


def conv2d_loops(x, kernel, bias=None, stride=1, padding=0, groups=1):
    """Direct nested-loop cross-correlation."""
    n, c, h, w = x.shape
    c_out, c_per, k, _ = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    out_per_group = c_out // groups
    for b in range(n):
        for o in range(c_out):
            g = o // out_per_group
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, g * c_per:(g + 1) * c_per, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b, o, i, j] = np.sum(patch * kernel[o])
            if bias is not None:
                out[b, o] += bias[o]
    return out


def maxpool_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for i in range(h // 2):
        for j in range(w // 2):
            out[:, :, i, j] = x[:, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(2, 3))
    return out


def numeric_grad(f, x, step=1e-6):
    """Central differences of scalar ``f()`` with respect to every entry of `x` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * step)
    return g


def ap_bruteforce(oks_scores, confidences, t):
    """Area under the interpolated PR curve, built point by point in rank order."""
    order = sorted(range(len(oks_scores)), key=lambda i: (-confidences[i], i))
    n = len(order)
    tp = 0
    points = []
    for rank, i in enumerate(order, 1):
        tp += oks_scores[i] >= t
        points.append((tp / n, tp / rank))
    area, prev_recall = 0.0, 0.0
    for idx, (r, _) in enumerate(points):
        best_p = max(p for _, p in points[idx:])
        area += (r - prev_recall) * best_p
        prev_recall = r
    return area
