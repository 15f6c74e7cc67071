"""Shared helpers for the test-suite (small graphs, KGs and independent oracles)."""
from collections import deque
from fractions import Fraction

import numpy as np

from kgattack.kg import from_labelled_triples


def make_kg(train, valid=(), test=(), descriptions=None):
    return from_labelled_triples({"train": train, "valid": valid, "test": test}, descriptions)


def random_edges(n, p, rng):
    """Erdos-Renyi style undirected edge list without self-loops."""
    iu = np.triu_indices(n, 1)
    keep = rng.random(len(iu[0])) < p
    return list(zip(iu[0][keep].tolist(), iu[1][keep].tolist()))


def adjacency_lists(n, edges, directed=False):
    adj = [set() for _ in range(n)]
    for a, b in edges:
        if a == b:
            continue
        adj[a].add(b)
        if not directed:
            adj[b].add(a)
    return [sorted(x) for x in adj]


def bfs_counts(adj, s):
    """Distances and shortest-path counts from ``s`` (plain python BFS)."""
    n = len(adj)
    dist = [-1] * n
    sigma = [0] * n
    dist[s], sigma[s] = 0, 1
    q = deque([s])
    while q:
        v = q.popleft()
        for w in adj[v]:
            if dist[w] < 0:
                dist[w] = dist[v] + 1
                q.append(w)
            if dist[w] == dist[v] + 1:
                sigma[w] += sigma[v]
    return dist, sigma


def betweenness_oracle(adj):
    """Pair-counting betweenness: sum over unordered pairs s<t of sigma_sv*sigma_vt/sigma_st."""
    n = len(adj)
    info = [bfs_counts(adj, s) for s in range(n)]
    bc = [Fraction(0)] * n
    for s in range(n):
        ds, ss = info[s]
        for t in range(s + 1, n):
            if ds[t] <= 0:
                continue
            dt, st = info[t]
            for v in range(n):
                if v in (s, t) or ds[v] < 0 or dt[v] < 0:
                    continue
                if ds[v] + dt[v] == ds[t]:
                    bc[v] += Fraction(ss[v] * st[v], ss[t])
    return bc


def closeness_oracle(adj):
    """Wasserman-Faust closeness from plain BFS distances."""
    n = len(adj)
    out = []
    for v in range(n):
        dist, _ = bfs_counts(adj, v)
        reach = [d for d in dist if d > 0]
        if not reach or n == 1:
            out.append(Fraction(0))
            continue
        r = len(reach)
        out.append(Fraction(r, n - 1) * Fraction(r, sum(reach)))
    return out


def pagerank_oracle(n, edges, damping=0.85, directed=True):
    """Dense Google-matrix iteration to machine precision (dangling mass uniform)."""
    adj = adjacency_lists(n, edges, directed)
    M = np.zeros((n, n))
    for v, outs in enumerate(adj):
        if outs:
            M[outs, v] = 1.0 / len(outs)
        else:
            M[:, v] = 1.0 / n
    G = damping * M + (1.0 - damping) / n
    x = np.full(n, 1.0 / n)
    for _ in range(10_000):
        nxt = G @ x
        if np.abs(nxt - x).sum() < 1e-15:
            x = nxt
            break
        x = nxt
    return x / x.sum()


# ---------------------------------------------------------------------------
# finite differences and brute-force ranking

STEP = 1e-5
TOL = 1e-4


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def numeric_grad(fn, params):
    """Central differences of scalar ``fn()`` w.r.t. every entry of every parameter."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + STEP
            up = fn()
            flat[i] = old - STEP
            down = fn()
            flat[i] = old
            gflat[i] = (up - down) / (2 * STEP)
        out[name] = g
    return out


def small_model(arch, seed, n_ent=7, n_rel=3):
    """A tiny KGE model with parameters pushed off their initial values."""
    from kgattack.kge import build_model

    rng = np.random.default_rng(seed)
    model = build_model(arch, n_ent, n_rel, 8, rng, channels=2, kernel=3)
    # move away from the init so bias and ReLU units are not all in one regime
    for p in model.params.values():
        p += 0.3 * rng.normal(size=p.shape)
    return model, rng


def brute_force_ranks(model, kg, target):
    """Score every corruption one triple at a time and count, with no vectorised shortcut."""
    known = {tuple(t) for t in kg.known}
    s, r, o = target
    true = model.score_triple(target)
    out = []
    for side in ("s", "o"):
        higher = ties = 0
        for e in range(kg.num_entities):
            cand = (e, r, o) if side == "s" else (s, r, e)
            if cand == tuple(target) or cand in known:
                continue
            sc = model.score_triple(cand)
            higher += sc > true
            ties += sc == true
        out.append(1 + higher + 0.5 * ties)
    return out


def random_kg(n_ent, n_rel, n_train, n_test, seed):
    rng = np.random.default_rng(seed)
    triples = set()
    while len(triples) < n_train + n_test:
        triples.add((f"e{rng.integers(n_ent)}", f"r{rng.integers(n_rel)}", f"e{rng.integers(n_ent)}"))
    triples = sorted(triples)
    rng.shuffle(triples)
    return make_kg(triples[:n_train], test=triples[n_train:])
