"""Filtered link-prediction ranking and attack-target selection."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..kg import KnowledgeGraph, Triple
from .models import KgeModel

log = logging.getLogger(__name__)

HITS_AT = (1, 3, 10)
_BATCH = 256


@dataclass(frozen=True)
class RankResult:
    """Filtered ranks of one target; ties count half, so ranks may be x.5."""

    target: Triple
    rank_s: float
    rank_o: float

    @property
    def rr_s(self) -> float:
        return 1.0 / self.rank_s

    @property
    def rr_o(self) -> float:
        return 1.0 / self.rank_o

    @property
    def mrr(self) -> float:
        return 0.5 * (self.rr_s + self.rr_o)

    def hits(self, k: int) -> float:
        return 0.5 * ((self.rank_s <= k) + (self.rank_o <= k))


@dataclass
class EvalResult:
    mrr: float
    hits: dict[int, float]
    per_target: list[RankResult] = field(default_factory=list)

    @property
    def hits1(self) -> float:
        return self.hits[1]

    @property
    def hits10(self) -> float:
        return self.hits[10]

    def summary(self) -> dict:
        return {"MRR": self.mrr, **{f"Hits@{k}": v for k, v in sorted(self.hits.items())}}


def _filter_index(kg: KnowledgeGraph):
    objs: dict = {}
    subs: dict = {}
    for s, r, o in kg.known:
        objs.setdefault((s, r), []).append(o)
        subs.setdefault((r, o), []).append(s)
    return objs, subs


def filtered_rank(scores: np.ndarray, true: int, exclude) -> float:
    """Rank of ``scores[true]`` among entities not in ``exclude`` (ties averaged)."""
    keep = np.ones(scores.shape[0], dtype=bool)
    keep[list(exclude)] = False
    keep[true] = True
    pool = scores[keep]
    ref = scores[true]
    higher = int(np.count_nonzero(pool > ref))
    ties = int(np.count_nonzero(pool == ref)) - 1
    return 1.0 + higher + 0.5 * ties


def rank_targets(model: KgeModel, kg: KnowledgeGraph, targets) -> list[RankResult]:
    targets = np.asarray([tuple(t) for t in targets], dtype=np.int64).reshape(-1, 3)
    objs, subs = _filter_index(kg)
    out = []
    for lo in range(0, len(targets), _BATCH):
        chunk = targets[lo:lo + _BATCH]
        so = model.score_objects(chunk[:, 0], chunk[:, 1])
        ss = model.score_subjects(chunk[:, 1], chunk[:, 2])
        for i, (s, r, o) in enumerate(chunk.tolist()):
            out.append(RankResult(
                Triple(s, r, o),
                rank_s=filtered_rank(ss[i], s, subs.get((r, o), ())),
                rank_o=filtered_rank(so[i], o, objs.get((s, r), ())),
            ))
    return out


def summarize(per_target: list[RankResult], hits_at=HITS_AT) -> EvalResult:
    if not per_target:
        return EvalResult(mrr=float("nan"), hits={k: float("nan") for k in hits_at}, per_target=[])
    rr = [x for p in per_target for x in (p.rr_s, p.rr_o)]
    ranks = np.array([x for p in per_target for x in (p.rank_s, p.rank_o)])
    return EvalResult(
        mrr=float(np.mean(rr)),
        hits={k: float(np.mean(ranks <= k)) for k in hits_at},
        per_target=list(per_target),
    )


def evaluate(model: KgeModel, kg: KnowledgeGraph, targets) -> EvalResult:
    """Filtered MRR / Hits@k over both corruption sides of every target."""
    targets = list(targets)
    if not targets:
        raise ValueError("targets must be non-empty")
    return summarize(rank_targets(model, kg, targets))


def select_attack_targets(models: list[KgeModel], kg: KnowledgeGraph, split: str = "test") -> list[Triple]:
    """Test triples ranked first on both sides by every model."""
    candidates = kg.triples(split)
    if not candidates:
        return []
    keep = np.ones(len(candidates), dtype=bool)
    for model in models:
        ranks = rank_targets(model, kg, candidates)
        keep &= np.array([p.rank_s == 1.0 and p.rank_o == 1.0 for p in ranks])
    selected = [t for t, k in zip(candidates, keep) if k]
    if not selected:
        log.warning("no %s triple reaches Hits@1 under all %d models", split, len(models))
    return selected
