"""PageRank, betweenness and closeness on entity subgraphs, and the centrality filter."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .candidates import Candidate, CandidateSet
from .kg import KnowledgeGraph, Triple, khop_distances

log = logging.getLogger(__name__)

MEASURES = ("PR", "BC", "CC")
EXACT_BC_LIMIT = 20_000
BC_PIVOTS = 256


class ConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"PageRank did not converge in {iterations} iterations (L1 residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


class NoCandidatesError(ValueError):
    pass


@dataclass(frozen=True)
class Subgraph:
    """Entity subgraph with local CSR adjacency; ``nodes[i]`` is the entity id of row ``i``."""

    nodes: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    directed: bool = False

    @classmethod
    def from_edges(cls, nodes, edges, directed=False) -> "Subgraph":
        nodes = np.asarray(sorted(set(int(v) for v in nodes)), dtype=np.int64)
        local = {int(v): i for i, v in enumerate(nodes)}
        edges = [(local[int(a)], local[int(b)]) for a, b in edges]
        src = np.array([a for a, _ in edges], dtype=np.int64)
        dst = np.array([b for _, b in edges], dtype=np.int64)
        indptr, indices = kernels.csr_from_edges(len(nodes), src, dst, symmetric=not directed)
        return cls(nodes, indptr, indices, directed)

    @classmethod
    def induced(cls, kg: KnowledgeGraph, nodes) -> "Subgraph":
        """Undirected, unweighted subgraph of the train entity graph induced by ``nodes``."""
        nodes = np.asarray(sorted(set(int(v) for v in nodes)), dtype=np.int64)
        member = np.full(kg.num_entities, -1, dtype=np.int64)
        member[nodes] = np.arange(len(nodes))
        s, o = kg.train[:, 0], kg.train[:, 2]
        keep = (member[s] >= 0) & (member[o] >= 0)
        indptr, indices = kernels.csr_from_edges(len(nodes), member[s[keep]], member[o[keep]])
        return cls(nodes, indptr, indices, False)

    def __len__(self):
        return len(self.nodes)


@dataclass(frozen=True)
class CentralityScores:
    measure: str
    scores: dict
    subgraph: frozenset
    approximate: bool = False

    def ranked(self, pool=None) -> list[int]:
        """Entity ids by score descending, ties by id ascending."""
        ids = self.scores if pool is None else [e for e in pool if e in self.scores]
        return sorted(ids, key=lambda e: (-self.scores[e], e))


def _wrap(measure, sub: Subgraph, values, approximate=False) -> CentralityScores:
    return CentralityScores(
        measure,
        {int(e): float(v) for e, v in zip(sub.nodes, values)},
        frozenset(sub.nodes.tolist()),
        approximate,
    )


def pagerank(sub: Subgraph, damping: float = 0.85, tol: float = 1e-10, max_iter: int = 200) -> CentralityScores:
    if len(sub) == 0:
        raise ValueError("empty subgraph")
    if not 0 < damping < 1:
        raise ValueError("damping must lie in (0, 1)")
    x, iters, residual = kernels.pagerank_power(sub.indptr, sub.indices, float(damping), float(tol), int(max_iter))
    if residual >= tol:
        raise ConvergenceError(residual, iters)
    return _wrap("PR", sub, x / x.sum())


def betweenness(sub: Subgraph, exact_limit: int = EXACT_BC_LIMIT, pivots: int = BC_PIVOTS,
                seed: int = 0) -> CentralityScores:
    """Unnormalised pair-count betweenness on the undirected view.

    Above ``exact_limit`` nodes only ``pivots`` sampled sources are used and
    the result is rescaled and flagged approximate.
    """
    n = len(sub)
    if n == 0:
        raise ValueError("empty subgraph")
    indptr, indices = sub.indptr, sub.indices
    if sub.directed:
        sym = Subgraph.from_edges(sub.nodes, _edge_list(sub), directed=False)
        indptr, indices = sym.indptr, sym.indices
    approximate = n > exact_limit
    if approximate:
        sources = np.sort(np.random.default_rng(seed).choice(n, size=pivots, replace=False))
        scale = n / pivots
        log.info("betweenness: %d nodes > %d, sampling %d pivots", n, exact_limit, pivots)
    else:
        sources = np.arange(n, dtype=np.int64)
        scale = 1.0
    bc = kernels.brandes(indptr, indices, sources.astype(np.int64)) * (scale / 2.0)
    return _wrap("BC", sub, bc, approximate)


def closeness(sub: Subgraph) -> CentralityScores:
    """Closeness with the Wasserman-Faust correction for disconnected graphs."""
    if len(sub) == 0:
        raise ValueError("empty subgraph")
    indptr, indices = sub.indptr, sub.indices
    if sub.directed:
        sym = Subgraph.from_edges(sub.nodes, _edge_list(sub), directed=False)
        indptr, indices = sym.indptr, sym.indices
    return _wrap("CC", sub, kernels.closeness(indptr, indices))


def _edge_list(sub: Subgraph):
    src = np.repeat(np.arange(len(sub)), np.diff(sub.indptr))
    return list(zip(sub.nodes[src].tolist(), sub.nodes[sub.indices].tolist()))


_MEASURE_FNS = {"PR": pagerank, "BC": betweenness, "CC": closeness}


def centrality_filter(kg: KnowledgeGraph, tgt: Triple, h: int = 3, k: int = 30,
                      measures=MEASURES) -> CandidateSet:
    """Union of per-measure Top-k entities in the ``h``-hop ball minus the 1-hop ball.

    Candidates are ordered by number of selecting measures (desc), best
    per-measure rank (asc), then entity id.
    """
    if h < 2:
        raise ValueError("h must be >= 2")
    if k < 1:
        raise ValueError("k must be >= 1")
    s, _, o = tgt
    dist = khop_distances(kg, [s, o], h)
    ball = np.flatnonzero(dist >= 0)
    pool = sorted(np.flatnonzero(dist >= 2).tolist())
    if not pool:
        raise NoCandidatesError(f"no candidates beyond 1-hop for {tuple(tgt)}")
    sub = Subgraph.induced(kg, ball)

    picks: dict[int, dict[str, int]] = {}
    raw: dict[int, dict[str, float]] = {}
    for name in measures:
        cs = _MEASURE_FNS[name](sub)
        for rank, e in enumerate(cs.ranked(pool)[:k]):
            picks.setdefault(e, {})[name] = rank
            raw.setdefault(e, {})[name] = cs.scores[e]

    def key(e):
        return (-len(picks[e]), min(picks[e].values()), e)

    items = []
    for e in sorted(picks, key=key):
        chosen = picks[e]
        score = len(chosen) + 1.0 / (1.0 + min(chosen.values()))
        tag = "+".join(m for m in measures if m in chosen)
        items.append(Candidate(e, score, f"centrality:{tag}", {"ranks": chosen, "scores": raw[e]}))
    return CandidateSet(Triple(*tgt), items, bound=len(measures) * k)
