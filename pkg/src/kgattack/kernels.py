"""Hot graph and scatter kernels over CSR adjacency.

Every kernel has a ``_numba`` and a ``_numpy`` variant with identical
semantics; the public name is bound to one of them by :mod:`kgattack._accel`.
Graphs are given as ``(indptr, indices)`` int64 arrays. Undirected graphs
store each edge in both directions.
"""
import numpy as np

from ._accel import njit, pick


# --------------------------------------------------------------------------
# breadth-first search


@njit
def _bfs_numba(indptr, indices, sources, max_depth):
    n = indptr.shape[0] - 1
    dist = np.full(n, -1, dtype=np.int64)
    queue = np.empty(n, dtype=np.int64)
    head = 0
    tail = 0
    for s in sources:
        if dist[s] < 0:
            dist[s] = 0
            queue[tail] = s
            tail += 1
    while head < tail:
        v = queue[head]
        head += 1
        if max_depth >= 0 and dist[v] >= max_depth:
            continue
        for p in range(indptr[v], indptr[v + 1]):
            w = indices[p]
            if dist[w] < 0:
                dist[w] = dist[v] + 1
                queue[tail] = w
                tail += 1
    return dist


def _gather(indptr, indices, nodes):
    """Return (src, dst) for all out-edges of ``nodes``."""
    starts = indptr[nodes]
    counts = indptr[nodes + 1] - starts
    total = int(counts.sum())
    if total == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    src = np.repeat(nodes, counts)
    offsets = np.repeat(starts - np.cumsum(counts) + counts, counts)
    dst = indices[offsets + np.arange(total)]
    return src, dst


def _bfs_numpy(indptr, indices, sources, max_depth):
    n = indptr.shape[0] - 1
    dist = np.full(n, -1, dtype=np.int64)
    frontier = np.unique(np.asarray(sources, dtype=np.int64))
    dist[frontier] = 0
    depth = 0
    while frontier.size and (max_depth < 0 or depth < max_depth):
        _, nbrs = _gather(indptr, indices, frontier)
        nbrs = np.unique(nbrs)
        nbrs = nbrs[dist[nbrs] < 0]
        depth += 1
        dist[nbrs] = depth
        frontier = nbrs
    return dist


# --------------------------------------------------------------------------
# Brandes betweenness (unweighted)


@njit
def _brandes_numba(indptr, indices, sources):
    n = indptr.shape[0] - 1
    bc = np.zeros(n)
    dist = np.empty(n, dtype=np.int64)
    sigma = np.empty(n)
    delta = np.empty(n)
    order = np.empty(n, dtype=np.int64)
    for s in sources:
        dist[:] = -1
        sigma[:] = 0.0
        delta[:] = 0.0
        dist[s] = 0
        sigma[s] = 1.0
        order[0] = s
        head = 0
        tail = 1
        while head < tail:
            v = order[head]
            head += 1
            for p in range(indptr[v], indptr[v + 1]):
                w = indices[p]
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    order[tail] = w
                    tail += 1
                if dist[w] == dist[v] + 1:
                    sigma[w] += sigma[v]
        # pop in non-increasing distance order
        for i in range(tail - 1, 0, -1):
            w = order[i]
            for p in range(indptr[w], indptr[w + 1]):
                v = indices[p]
                if dist[v] == dist[w] - 1:
                    delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w])
            bc[w] += delta[w]
    return bc


def _brandes_numpy(indptr, indices, sources):
    n = indptr.shape[0] - 1
    bc = np.zeros(n)
    for s in sources:
        dist = np.full(n, -1, dtype=np.int64)
        sigma = np.zeros(n)
        dist[s] = 0
        sigma[s] = 1.0
        levels = [np.array([s], dtype=np.int64)]
        d = 0
        while True:
            src, dst = _gather(indptr, indices, levels[-1])
            new = np.unique(dst[dist[dst] < 0])
            if new.size == 0:
                break
            dist[new] = d + 1
            mask = dist[dst] == d + 1
            np.add.at(sigma, dst[mask], sigma[src[mask]])
            levels.append(new)
            d += 1
        delta = np.zeros(n)
        for level in reversed(levels[1:]):
            w, v = _gather(indptr, indices, level)
            mask = dist[v] == dist[w] - 1
            w, v = w[mask], v[mask]
            np.add.at(delta, v, sigma[v] / sigma[w] * (1.0 + delta[w]))
        delta[s] = 0.0
        bc += delta
    return bc


# --------------------------------------------------------------------------
# closeness (Wasserman-Faust for disconnected graphs)


@njit
def _closeness_numba(indptr, indices):
    n = indptr.shape[0] - 1
    out = np.zeros(n)
    if n <= 1:
        return out
    src = np.empty(1, dtype=np.int64)
    for u in range(n):
        src[0] = u
        dist = _bfs_numba(indptr, indices, src, -1)
        total = 0
        reach = 0
        for v in range(n):
            if dist[v] > 0:
                total += dist[v]
                reach += 1
        if total > 0:
            # one rounding: reach^2 / ((n-1) * total) in integers first
            out[u] = (reach * reach) / ((n - 1) * total)
    return out


def _closeness_numpy(indptr, indices):
    n = indptr.shape[0] - 1
    out = np.zeros(n)
    if n <= 1:
        return out
    for u in range(n):
        dist = _bfs_numpy(indptr, indices, np.array([u]), -1)
        pos = dist[dist > 0]
        if pos.size:
            r = int(pos.size)
            out[u] = (r * r) / ((n - 1) * int(pos.sum()))
    return out


# --------------------------------------------------------------------------
# PageRank power iteration on a directed CSR (row = source)


@njit
def _pagerank_numba(indptr, indices, damping, tol, max_iter):
    n = indptr.shape[0] - 1
    outdeg = np.empty(n)
    for v in range(n):
        outdeg[v] = indptr[v + 1] - indptr[v]
    x = np.full(n, 1.0 / n)
    nxt = np.empty(n)
    residual = np.inf
    for it in range(max_iter):
        dangling = 0.0
        for v in range(n):
            if outdeg[v] == 0:
                dangling += x[v]
        base = (1.0 - damping) / n + damping * dangling / n
        nxt[:] = base
        for v in range(n):
            if outdeg[v] > 0:
                share = damping * x[v] / outdeg[v]
                for p in range(indptr[v], indptr[v + 1]):
                    nxt[indices[p]] += share
        residual = 0.0
        for v in range(n):
            residual += abs(nxt[v] - x[v])
        x[:] = nxt
        if residual < tol:
            return x, it + 1, residual
    return x, max_iter, residual


def _pagerank_numpy(indptr, indices, damping, tol, max_iter):
    n = indptr.shape[0] - 1
    outdeg = np.diff(indptr).astype(np.float64)
    src = np.repeat(np.arange(n), np.diff(indptr))
    dangling_mask = outdeg == 0
    safe = np.where(dangling_mask, 1.0, outdeg)
    x = np.full(n, 1.0 / n)
    residual = np.inf
    for it in range(max_iter):
        base = (1.0 - damping) / n + damping * x[dangling_mask].sum() / n
        pushed = np.bincount(indices, weights=(damping * x / safe)[src], minlength=n)
        nxt = base + pushed
        residual = float(np.abs(nxt - x).sum())
        x = nxt
        if residual < tol:
            return x, it + 1, residual
    return x, max_iter, residual


# --------------------------------------------------------------------------
# row scatter-add used by the sparse optimisers


@njit
def _scatter_add_rows_numba(target, rows, values):
    for i in range(rows.shape[0]):
        r = rows[i]
        for j in range(values.shape[1]):
            target[r, j] += values[i, j]


def _scatter_add_rows_numpy(target, rows, values):
    np.add.at(target, rows, values)


bfs = pick(_bfs_numba, _bfs_numpy)
brandes = pick(_brandes_numba, _brandes_numpy)
closeness = pick(_closeness_numba, _closeness_numpy)
pagerank_power = pick(_pagerank_numba, _pagerank_numpy)
scatter_add_rows = pick(_scatter_add_rows_numba, _scatter_add_rows_numpy)


def csr_from_edges(n, src, dst, symmetric=True):
    """Build a deduplicated CSR adjacency without self-loops."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if symmetric:
        src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
    keep = src != dst
    src, dst = src[keep], dst[keep]
    if src.size:
        key = np.unique(src * n + dst)
        src, dst = key // n, key % n
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n), out=indptr[1:])
    return indptr, dst.astype(np.int64)
