"""Independent reference implementations used as test oracles.

These are deliberately naive (loops, full recomputation) and share no code
with the package beyond plain numpy.
"""
import math

import numpy as np


def ceil_div_lengths(n, stride, n_layers):
    out = [n]
    for _ in range(n_layers):
        out.append(math.ceil(out[-1] / stride))
    return out


def count_mismatches(a, b):
    total = 0
    for x, y in zip(np.asarray(a).ravel().tolist(), np.asarray(b).ravel().tolist()):
        total += int(x != y)
    return total


def two_pass_variance(values):
    vals = [float(v) for v in values]
    mean = sum(vals) / len(vals)
    return sum((v - mean) ** 2 for v in vals) / len(vals)


def knn_reconstruct(N, rows, cols, labels, K, n_labels):
    """Weighted-mode K-NN labels with (distance, acquisition order) ranking."""
    measured = {(int(r), int(c)): int(l) for r, c, l in zip(rows, cols, labels)}
    out = np.zeros((N, N), dtype=np.int64)
    pts = list(zip(rows, cols, labels))
    for r in range(N):
        for c in range(N):
            if (r, c) in measured:
                out[r, c] = measured[(r, c)]
                continue
            ranked = sorted(
                ((int(pr) - r) ** 2 + (int(pc) - c) ** 2, i, int(pl))
                for i, (pr, pc, pl) in enumerate(pts)
            )[:K]
            votes = [0.0] * (n_labels + 1)
            for d2, _, lab in ranked:
                votes[lab] += 1.0 / d2
            best = max(votes)
            out[r, c] = votes.index(best)
    return out


def brute_argmax(values, allowed):
    """Row-major first index of the maximum over ``allowed`` positions."""
    best, where = -math.inf, None
    for i, (v, ok) in enumerate(zip(values, allowed)):
        if ok and v > best:
            best, where = v, i
    return where
