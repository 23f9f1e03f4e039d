"""Independent oracles shared by the test modules."""

import itertools

import numpy as np


def central_diff(f, x, idx, h=1e-5):
    """d f / d x[idx] by central differences; ``x`` is perturbed in place and restored."""
    old = x[idx]
    x[idx] = old + h
    fp = f()
    x[idx] = old - h
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * h)


def rel_err(a, b):
    return abs(a - b) / max(1e-8, abs(a) + abs(b))


def probe_indices(shape, n, rng):
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(n, size), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def best_support_error(v, k):
    """min over |S| = k of ||v - v_S||^2 by enumerating all supports."""
    v = np.asarray(v, dtype=float)
    n = len(v)
    if k >= n:
        return 0.0
    best = np.inf
    for s in itertools.combinations(range(n), k):
        keep = np.zeros(n, bool)
        keep[list(s)] = True
        best = min(best, float(np.sum(v[~keep] ** 2)))
    return best


def brute_zero_kmeans(x, B):
    """Optimal objective of clustering ``x`` into {0} plus at most B free centers.

    Enumerates every assignment of the nonzero entries to B + 1 labels; free
    centers take the mean of their members.
    """
    x = np.asarray(x, dtype=float)
    nz = x[x != 0]
    best = np.inf
    for labels in itertools.product(range(B + 1), repeat=len(nz)):
        labels = np.array(labels, dtype=int)
        obj = float(np.sum(nz[labels == 0] ** 2))
        for j in range(1, B + 1):
            members = nz[labels == j]
            if members.size:
                obj += float(np.sum((members - members.mean()) ** 2))
        best = min(best, obj)
    return best if nz.size else 0.0
