"""Independent oracles used by the test-suite.

Nothing here imports the selection or training code paths it checks.
"""

import math
from fractions import Fraction

import numpy as np


def central_difference(f, w, h=1e-3, pattern=None):
    """Central differences of ``f`` at ``w``.

    When ``pattern`` is given, coordinates whose +/-h stencil changes the
    returned piecewise-linear pattern (ReLU masks, max-pool winners) straddle
    a kink; they come back as NaN and should be excluded from comparisons.
    """
    g = np.zeros_like(w)
    for i in range(len(w)):
        wp = w.copy()
        wm = w.copy()
        wp[i] += h
        wm[i] -= h
        if pattern is not None and not np.array_equal(pattern(wp), pattern(wm)):
            g[i] = np.nan
            continue
        g[i] = (f(wp) - f(wm)) / (2 * h)
    return g


def rel_error(a, b):
    keep = ~np.isnan(b)
    a, b = a[keep], b[keep]
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def softmax_rows(logits):
    out = []
    for row in np.asarray(logits, dtype=np.float64):
        m = max(row)
        e = [math.exp(v - m) for v in row]
        s = sum(e)
        out.append([v / s for v in e])
    return np.array(out)


def brute_balance(labels, dist, s, factor, heuristic):
    """Plain-Python quota fill: per-class lower bound, then global fill."""
    labels = [int(v) for v in labels]
    dist = [float(v) for v in dist]
    classes = sorted(set(labels))
    lb = math.floor(Fraction(s) / len(classes) * Fraction(repr(factor)))
    pool = set(range(len(labels)))

    def easy_key(i):
        return (dist[i], i)

    def hard_key(i):
        return (-dist[i], i)

    def take(cands, n):
        if heuristic == "easy":
            return sorted(cands, key=easy_key)[:n]
        if heuristic == "hard":
            return sorted(cands, key=hard_key)[:n]
        n_easy = n - n // 2
        first = sorted(cands, key=easy_key)[:n_easy]
        rest = [i for i in cands if i not in first]
        return first + sorted(rest, key=hard_key)[: n // 2]

    chosen = []
    for c in classes:
        members = [i for i in pool if labels[i] == c]
        picked = take(members, min(lb, len(members)))
        chosen += picked
        pool -= set(picked)
    chosen += take(list(pool), s - len(chosen))
    return sorted(chosen)


def brute_entropy_keep(indices, scores, e, heuristic):
    n = len(indices)
    r = math.floor(Fraction(repr(e)) * n / 100)
    order = list(range(n))
    if heuristic == "top":
        order.sort(key=lambda i: (-scores[i], i))
    else:
        order.sort(key=lambda i: (scores[i], i))
    removed = set(order[:r])
    return [indices[i] for i in range(n) if i not in removed]


def label_entropy(counts):
    counts = np.asarray(counts, dtype=np.float64)
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def kink_pattern(model, x):
    """Concatenated ReLU masks and max-pool winners of one forward pass."""
    from sifl.nn.model import forward_with_cache

    _, cache = forward_with_cache(model, x)
    parts = []
    for layer, saved in zip(model.arch.layers, cache):
        if layer.kind == "activation" and layer.activation == "relu":
            parts.append((saved[0] > 0).ravel())
        elif layer.kind == "pool":
            parts.append(saved[1].ravel())
    return np.concatenate(parts).astype(np.int64) if parts else np.zeros(0, np.int64)
