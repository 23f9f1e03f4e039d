"""Projections onto the sparsity and quantization constraint sets.

``project_topk_global`` keeps the k largest-magnitude entries across every
compressible matrix of a model.  ``zero_kmeans`` is a 1-D Lloyd clustering
with one centroid pinned at zero, used to project a matrix onto the set of
matrices with at most B distinct nonzero values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams, count_distinct_nonzero


@dataclass
class CompressionConfig:
    k: int | None = None  # None means no sparsity budget
    b: int = 32
    rho: float = 1e-2
    zk_max_iters: int = 100
    zk_tol: float = 0.0
    zk_n_init: int = 10

    def __post_init__(self):
        if self.k is not None and self.k < 0:
            raise ValueError("k must be >= 0")
        if not 1 <= self.b <= 32:
            raise ValueError("b must be in [1, 32]")
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if self.zk_n_init < 1:
            raise ValueError("zk_n_init must be >= 1")

    @property
    def n_clusters(self):
        return 2 ** self.b


# -- sparsity ------------------------------------------------------------------


def topk_mask(values, k):
    """Boolean mask of the k largest |values|.

    Ties at the threshold go to the earliest positions, so the result is a
    deterministic function of the input order.
    """
    a = np.abs(np.ravel(values))
    n = a.size
    if k >= n:
        return np.ones(n, dtype=bool)
    if k <= 0:
        return np.zeros(n, dtype=bool)
    thresh = np.partition(a, n - k)[n - k]
    mask = a > thresh
    need = k - int(mask.sum())
    if need > 0:
        ties = np.flatnonzero(a == thresh)[:need]
        mask[ties] = True
    return mask


def project_topk_global(theta: ModelParams, k, inplace=False) -> ModelParams:
    """Zero all but the k largest-magnitude entries over all U, V, C matrices.

    Traversal order (layer, then U < V < C, then row-major) breaks ties.
    """
    out = theta if inplace else theta.copy()
    if k is None:
        return out
    mats = [m for _, _, m in out.matrices()]
    if k >= sum(m.size for m in mats):
        return out
    mask = topk_mask(np.concatenate([m.data.ravel() for m in mats]), k)
    start = 0
    for m in mats:
        sub = mask[start:start + m.size].reshape(m.shape)
        m.data[~sub] = 0
        start += m.size
    return out


def support_masks(theta: ModelParams):
    """Nonzero pattern of every matrix, keyed by (layer, name)."""
    return {(i, name): m.data != 0 for i, name, m in theta.matrices()}


# -- quantization ---------------------------------------------------------------


@dataclass
class Codebook:
    """Nonzero levels plus, per entry, an index into ``[0, *values]``."""

    values: np.ndarray
    assignment: np.ndarray

    def reconstruct(self):
        levels = np.concatenate([[0], self.values]).astype(self.values.dtype)
        return levels[self.assignment]


def nearest_center(x, centers):
    """``argmin_j (x - centers[j])**2`` per element, ties to the lowest j."""
    centers = np.asarray(centers)
    order = np.lexsort((np.arange(centers.size), centers))
    cs = centers[order]
    first = np.ones(cs.size, dtype=bool)
    first[1:] = cs[1:] != cs[:-1]
    cs, idx = cs[first], order[first]
    p = np.searchsorted(cs, x)
    lo = np.clip(p - 1, 0, cs.size - 1)
    hi = np.clip(p, 0, cs.size - 1)
    dlo = (x - cs[lo]) ** 2
    dhi = (x - cs[hi]) ** 2
    pick_hi = (dhi < dlo) | ((dhi == dlo) & (idx[hi] < idx[lo]))
    return np.where(pick_hi, idx[hi], idx[lo])


def _intervals(xs, centers):
    """Nearest-center cells of the sorted data ``xs`` as contiguous runs.

    Returns ``(ids, ends)``: run ``r`` covers ``xs[ends[r-1]:ends[r]]`` and
    belongs to center ``ids[r]``.  Empty runs are dropped.  A point on a
    midpoint goes to the lower center index, as in ``nearest_center``.
    """
    order = np.lexsort((np.arange(centers.size), centers))
    cs = centers[order].astype(np.float64)
    first = np.ones(cs.size, dtype=bool)
    first[1:] = cs[1:] != cs[:-1]
    cs, ids = cs[first], order[first]
    mids = (cs[:-1] + cs[1:]) / 2
    cuts = np.where(ids[:-1] < ids[1:], np.searchsorted(xs, mids, "right"), np.searchsorted(xs, mids, "left"))
    bounds = np.concatenate([[0], cuts, [xs.size]])
    keep = np.diff(bounds) > 0
    return ids[keep], bounds[1:][keep]


def _lloyd(x, xs, prefix, centers, max_iters, tol, history):
    """Lloyd iterations from ``centers`` (index 0 frozen at zero).

    Works on the sorted entries ``xs`` (with running sums ``prefix``), where
    every cell is an interval, so an iteration costs O(B log n).  Returns
    ``(centers, objective)``.
    """
    B = centers.size - 1
    prev = None
    prev_obj = np.inf
    for _ in range(max_iters):
        ids, ends = _intervals(xs, centers)
        if prev is not None and np.array_equal(ids, prev[0]) and np.array_equal(ends, prev[1]):
            break
        prev = (ids, ends)
        starts = np.concatenate([[0], ends[:-1]])
        counts = np.zeros(B + 1, dtype=np.int64)
        sums = np.zeros(B + 1)
        counts[ids] = ends - starts
        sums[ids] = prefix[ends] - prefix[starts]
        filled = counts[1:] > 0
        centers[1:][filled] = (sums[1:][filled] / counts[1:][filled]).astype(x.dtype)
        labels = None
        if not filled.all():
            labels = np.repeat(ids, ends - starts)
            err = (xs - centers[labels]) ** 2
            for j in np.flatnonzero(~filled) + 1:
                far = int(np.argmax(err))
                if err[far] == 0:
                    break
                centers[j] = xs[far]
                err[far] = 0
        if history is not None or tol > 0:
            labels = np.repeat(ids, ends - starts) if labels is None else labels
            obj = float(np.sum((xs - centers[labels]) ** 2))
            if history is not None:
                history.append(obj)
            if tol > 0 and prev_obj < np.inf and prev_obj - obj <= tol * prev_obj:
                break
            prev_obj = obj
    ids, ends = _intervals(xs, centers)
    labels = np.repeat(ids, np.diff(np.concatenate([[0], ends])))
    return centers, float(np.sum((xs - centers[labels]) ** 2))


SEED_POOL = 8192


def _seed_centers(x, distinct, B, rng, init):
    """Initial free centers: distinct nonzero values of ``x`` picked at random.

    ``uniform`` picks uniformly among distinct values.  ``dsquared`` picks
    entries with probability proportional to the squared distance to the
    nearest center chosen so far, the frozen zero included, over a random
    pool of at most ``SEED_POOL`` entries.
    """
    if init == "uniform":
        return rng.choice(distinct, size=B, replace=False)
    pool = x if x.size <= SEED_POOL else rng.choice(x, size=SEED_POOL, replace=False)
    pool = pool.astype(np.float64)
    d2 = pool ** 2
    picked = []
    for _ in range(B):
        total = d2.sum()
        if total <= 0:
            break
        c = pool[rng.choice(pool.size, p=d2 / total)]
        picked.append(c)
        d2 = np.minimum(d2, (pool - c) ** 2)
    if len(picked) < B:
        # the pool ran out of new values; top up from the remaining distinct ones
        rest = np.setdiff1d(distinct, np.asarray(picked, dtype=distinct.dtype))
        picked.extend(rng.choice(rest, size=B - len(picked), replace=False))
    return np.asarray(picked)


def zero_kmeans(M, B, max_iters=100, tol=0.0, seed=0, history=None, n_init=10, init="dsquared"):
    """Quantize ``M`` to at most ``B`` distinct nonzero values.

    Lloyd iterations over the centers ``[0, a_1, ..., a_B]`` where the zero
    center never moves.  Entries equal to zero stay zero; nonzero entries may
    fall into the zero cluster.  The free centers start at distinct nonzero
    values of ``M`` drawn at random; ``n_init`` seeded starts are run and the
    lowest objective kept (the first on ties).  ``init`` picks the seeding rule,
    see ``_seed_centers``.  Returns ``(Codebook, M_quantized)``.

    If ``history`` is a list, the per-iteration objectives of the kept run are
    appended.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    if init not in ("dsquared", "uniform"):
        raise ValueError(f"unknown init {init!r}")
    M = np.asarray(M)
    flat = M.ravel()
    nzpos = np.flatnonzero(flat)
    assignment = np.zeros(flat.shape, dtype=np.int64)
    if nzpos.size == 0:
        return Codebook(np.zeros(0, dtype=M.dtype), assignment.reshape(M.shape)), np.zeros_like(M)

    x = flat[nzpos]
    distinct = np.unique(x)
    if distinct.size <= B:
        # every value gets its own level; Lloyd would converge here immediately
        assignment[nzpos] = np.searchsorted(distinct, x) + 1
        if history is not None:
            history.append(0.0)
        return Codebook(distinct, assignment.reshape(M.shape)), M.copy()

    rng = np.random.default_rng(seed)
    xs = np.sort(x.astype(np.float64))
    prefix = np.concatenate([[0.0], np.cumsum(xs, dtype=np.float64)])
    best = None
    for _ in range(n_init):
        a = _seed_centers(x, distinct, B, rng, init)
        trace = [] if history is not None else None
        run = _lloyd(x, xs, prefix, np.concatenate([[0], a]).astype(x.dtype), max_iters, tol, trace)
        if best is None or run[1] < best[0][1]:
            best = (run, trace)
    (centers, _), trace = best
    delta = nearest_center(x, centers)
    if history is not None:
        history.extend(trace)

    used = np.unique(delta[delta > 0])
    values = centers[used]
    # two clusters can land on the same value; merge them
    values, remap = np.unique(values, return_inverse=True)
    lookup = np.zeros(B + 1, dtype=np.int64)
    lookup[used] = remap + 1
    # a center that collapsed onto zero joins the zero cluster
    if values.size and np.any(values == 0):
        zero_slot = int(np.flatnonzero(values == 0)[0]) + 1
        keep = values != 0
        new_index = np.zeros(values.size + 1, dtype=np.int64)
        new_index[1:][keep] = np.arange(1, keep.sum() + 1)
        new_index[zero_slot] = 0
        lookup = new_index[lookup]
        values = values[keep]
    assignment[nzpos] = lookup[delta]
    book = Codebook(values.astype(M.dtype), assignment.reshape(M.shape))
    return book, book.reconstruct()


def zero_kmeans_model(theta: ModelParams, b, max_iters=100, tol=0.0, seed=0, n_init=10) -> ModelParams:
    """Apply ``zero_kmeans`` with ``2**b`` levels to every matrix of a model."""
    out = theta.copy()
    for j, (_, _, m) in enumerate(out.matrices()):
        _, q = zero_kmeans(m.data, 2 ** b, max_iters, tol, seed=seed * 1_000_003 + j, n_init=n_init)
        m.data[...] = q
    return out


def uniform_quantize(M, b):
    """Snap nonzeros to ``2**b`` evenly spaced levels over [min nonzero, max nonzero]."""
    if b < 1:
        raise ValueError("b must be >= 1")
    M = np.asarray(M)
    out = M.copy()
    nz = M != 0
    if not nz.any():
        return out
    x = M[nz]
    lo, hi = x.min(), x.max()
    if lo == hi:
        return out
    steps = 2.0 ** b - 1
    width = (float(hi) - float(lo)) / steps
    idx = np.clip(np.rint((x.astype(np.float64) - float(lo)) / width), 0, steps)
    out[nz] = (float(lo) + idx * width).astype(M.dtype)
    return out


def uniform_quantize_model(theta: ModelParams, b) -> ModelParams:
    out = theta.copy()
    for _, _, m in out.matrices():
        m.data[...] = uniform_quantize(m.data, b)
    return out


# -- feasibility ---------------------------------------------------------------------


def is_feasible_sparsity(theta: ModelParams, k) -> bool:
    return k is None or theta.total_nnz() <= k


def is_feasible_quant(theta: ModelParams, b) -> bool:
    limit = 2 ** b
    return all(count_distinct_nonzero(m) <= limit for _, _, m in theta.matrices())
