"""Independent brute-force oracles shared by the test suite.

Everything here is deliberately naive (explicit loops, direct formulas) so
the checks stay independent of the library's vectorized paths.
"""

import numpy as np


def matmul_loops(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def conv2d_loops(x, kernels, stride, padding):
    c_in, h, w = x.shape
    c_out, _, kh, kw = kernels.shape
    xp = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
    xp[:, padding : padding + h, padding : padding + w] = x
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, h_out, w_out))
    for o in range(c_out):
        for y in range(h_out):
            for xx in range(w_out):
                acc = 0.0
                for c in range(c_in):
                    for i in range(kh):
                        for j in range(kw):
                            acc += kernels[o, c, i, j] * xp[c, y * stride + i, xx * stride + j]
                out[o, y, xx] = acc
    return out


def gap_loops(x):
    c, h, w = x.shape
    out = np.zeros(c)
    for ch in range(c):
        acc = 0.0
        for i in range(h):
            for j in range(w):
                acc += x[ch, i, j]
        out[ch] = acc / (h * w)
    return out


def central_diff(f, x, step=1e-5):
    """Central finite differences of scalar f at array x, coordinatewise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def max_rel_err(a, b, floor=1e-6):
    """Max over coordinates of |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def ap_from_pr_curve(hit_flags):
    """Area under the precision-recall step curve of a ranked hit list.

    Walks the ranking position by position; whenever recall increases the
    area grows by precision-at-that-rank times the recall step.
    """
    hits = [bool(h) for h in hit_flags]
    total = sum(hits)
    assert total > 0
    area = 0.0
    tp = 0
    for pos, hit in enumerate(hits, start=1):
        if hit:
            tp += 1
            precision = tp / pos
            recall_step = 1.0 / total
            area += precision * recall_step
    return area


def cmc_by_hand(ranked_id_lists, probe_ids, max_rank):
    """CMC by direct counting of first-match positions."""
    n = len(probe_ids)
    curve = np.zeros(max_rank)
    for ranked, pid in zip(ranked_id_lists, probe_ids):
        first = None
        for pos, gid in enumerate(ranked, start=1):
            if gid == pid:
                first = pos
                break
        assert first is not None
        for k in range(max_rank):
            if first <= k + 1:
                curve[k] += 1.0
    return curve / n
