"""Knowledge graph store, dataset ingestion and neighbourhood queries."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")

_SPLIT_FILES = {
    "train": ("train.txt", "train.tsv"),
    "valid": ("valid.txt", "valid.tsv", "dev.txt", "dev.tsv"),
    "test": ("test.txt", "test.tsv"),
}
_DESC_FILES = ("entity2text.txt", "entity2description.txt", "descriptions.txt")
_ENTITY_LABEL_FILES = ("entity2label.txt",)
_RELATION_LABEL_FILES = ("relation2label.txt",)


class DatasetError(ValueError):
    pass


class Triple(NamedTuple):
    s: int
    r: int
    o: int


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    """Interned (E, R, T) store.

    ``entity_keys``/``relation_keys`` are the raw identifiers from the files
    and define the bijection with dense ids. ``entity_labels`` are display
    strings (defaulting to the keys), ``descriptions`` may be empty strings.
    Splits are ``(n, 3)`` int64 arrays in file order.
    """

    entity_keys: tuple[str, ...]
    relation_keys: tuple[str, ...]
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    entity_labels: tuple[str, ...] = ()
    relation_labels: tuple[str, ...] = ()
    descriptions: tuple[str, ...] = ()
    name: str = ""
    _entity_index: dict = field(default_factory=dict, repr=False)
    _relation_index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.entity_labels:
            object.__setattr__(self, "entity_labels", self.entity_keys)
        if not self.relation_labels:
            object.__setattr__(self, "relation_labels", self.relation_keys)
        if not self.descriptions:
            object.__setattr__(self, "descriptions", ("",) * len(self.entity_keys))
        if not self._entity_index:
            object.__setattr__(self, "_entity_index", {k: i for i, k in enumerate(self.entity_keys)})
        if not self._relation_index:
            object.__setattr__(self, "_relation_index", {k: i for i, k in enumerate(self.relation_keys)})
        for split in SPLITS:
            arr = np.asarray(getattr(self, split), dtype=np.int64).reshape(-1, 3)
            arr.setflags(write=False)
            object.__setattr__(self, split, arr)

    # -- sizes and lookups ---------------------------------------------------

    @property
    def num_entities(self) -> int:
        return len(self.entity_keys)

    @property
    def num_relations(self) -> int:
        return len(self.relation_keys)

    def entity_id(self, key: str) -> int:
        return self._entity_index[key]

    def relation_id(self, key: str) -> int:
        return self._relation_index[key]

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def triples(self, name: str) -> list[Triple]:
        return [Triple(*map(int, row)) for row in self.split(name)]

    def check_triple(self, t: Triple) -> None:
        s, r, o = t
        if not (0 <= s < self.num_entities and 0 <= o < self.num_entities):
            raise IndexError(f"entity id out of range in {tuple(t)}")
        if not 0 <= r < self.num_relations:
            raise IndexError(f"relation id out of range in {tuple(t)}")

    def describe(self, e: int) -> str:
        return self.descriptions[e]

    # -- derived indexes -----------------------------------------------------

    @cached_property
    def known(self) -> frozenset:
        """Every triple in train, valid and test as plain tuples."""
        rows = np.concatenate([self.train, self.valid, self.test])
        return frozenset(map(tuple, rows.tolist()))

    @cached_property
    def train_set(self) -> frozenset:
        return frozenset(map(tuple, self.train.tolist()))

    @cached_property
    def train_position(self) -> dict:
        return {t: i for i, t in enumerate(map(tuple, self.train.tolist()))}

    @cached_property
    def incidence(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR (indptr, triple ids) listing train triples incident to each entity."""
        n = self.num_entities
        tids = np.arange(len(self.train), dtype=np.int64)
        s, o = self.train[:, 0], self.train[:, 2]
        loops = s == o
        ent = np.concatenate([s, o[~loops]])
        tid = np.concatenate([tids, tids[~loops]])
        order = np.lexsort((tid, ent))
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(ent, minlength=n), out=indptr[1:])
        return indptr, tid[order]

    def incident(self, e: int) -> np.ndarray:
        indptr, tids = self.incidence
        return tids[indptr[e]:indptr[e + 1]]

    @cached_property
    def adjacency(self) -> tuple[np.ndarray, np.ndarray]:
        """Undirected entity adjacency (CSR, no self-loops) over train triples."""
        return kernels.csr_from_edges(self.num_entities, self.train[:, 0], self.train[:, 2])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for part in (self.entity_keys, self.relation_keys):
            h.update("\x1f".join(part).encode())
        for split in SPLITS:
            h.update(np.ascontiguousarray(self.split(split)).tobytes())
        return h.hexdigest()

    def with_train(self, train: np.ndarray) -> "KnowledgeGraph":
        """Copy sharing vocabularies but with a replaced training split."""
        return KnowledgeGraph(
            entity_keys=self.entity_keys,
            relation_keys=self.relation_keys,
            train=np.asarray(train, dtype=np.int64).reshape(-1, 3),
            valid=self.valid,
            test=self.test,
            entity_labels=self.entity_labels,
            relation_labels=self.relation_labels,
            descriptions=self.descriptions,
            name=self.name,
            _entity_index=self._entity_index,
            _relation_index=self._relation_index,
        )


def from_labelled_triples(
    splits: dict[str, Iterable[tuple[str, str, str]]],
    descriptions: dict[str, str] | None = None,
    name: str = "",
) -> KnowledgeGraph:
    """Intern string triples; entities are numbered by first appearance."""
    ents: dict[str, int] = {}
    rels: dict[str, int] = {}
    arrays = {}
    seen_all: dict[tuple, str] = {}
    for split in SPLITS:
        rows = []
        seen = set()
        dupes = overlap = 0
        for s, r, o in splits.get(split, ()):
            t = (ents.setdefault(s, len(ents)), rels.setdefault(r, len(rels)), ents.setdefault(o, len(ents)))
            if t in seen:
                dupes += 1
                continue
            if t in seen_all:
                overlap += 1
                continue
            seen.add(t)
            seen_all[t] = split
            rows.append(t)
        if dupes:
            log.warning("%s: dropped %d duplicate triples", split, dupes)
        if overlap:
            log.warning("%s: dropped %d triples already present in an earlier split", split, overlap)
        arrays[split] = np.array(rows, dtype=np.int64).reshape(-1, 3)
    descriptions = descriptions or {}
    for key in descriptions:
        ents.setdefault(key, len(ents))
    keys = tuple(ents)
    return KnowledgeGraph(
        entity_keys=keys,
        relation_keys=tuple(rels),
        train=arrays["train"],
        valid=arrays["valid"],
        test=arrays["test"],
        descriptions=tuple(descriptions.get(k, "") for k in keys),
        name=name,
    )


def _find(directory: Path, names) -> Path | None:
    for n in names:
        if (directory / n).is_file():
            return directory / n
    return None


def _read_pairs(path: Path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            key, sep, text = line.partition("\t")
            if not sep:
                raise DatasetError(f"{path.name}:{lineno}: expected 'id<TAB>text'")
            out[key] = text
    return out


def _read_triples(path: Path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DatasetError(f"{path.name}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
            rows.append(tuple(fields))
    return rows


def load_dataset(directory, format: str = "tsv") -> KnowledgeGraph:
    """Load ``train``/``valid``/``test`` triple files from ``directory``.

    Optional side files: ``entity2text.txt`` (descriptions) and
    ``entity2label.txt`` / ``relation2label.txt`` (display labels), all
    ``key<TAB>text``.
    """
    if format != "tsv":
        raise DatasetError(f"unsupported dataset format {format!r}")
    directory = Path(directory)
    splits = {}
    for split, names in _SPLIT_FILES.items():
        path = _find(directory, names)
        if path is None:
            if split == "train":
                raise DatasetError(f"no train file in {directory}")
            splits[split] = []
            continue
        splits[split] = _read_triples(path)
    if not splits["train"]:
        raise DatasetError("empty split: train")

    desc_path = _find(directory, _DESC_FILES)
    kg = from_labelled_triples(splits, _read_pairs(desc_path) if desc_path else None, name=directory.name)

    ent_path = _find(directory, _ENTITY_LABEL_FILES)
    rel_path = _find(directory, _RELATION_LABEL_FILES)
    if ent_path or rel_path:
        ent_labels = _read_pairs(ent_path) if ent_path else {}
        rel_labels = _read_pairs(rel_path) if rel_path else {}
        kg = KnowledgeGraph(
            entity_keys=kg.entity_keys,
            relation_keys=kg.relation_keys,
            train=kg.train,
            valid=kg.valid,
            test=kg.test,
            entity_labels=tuple(ent_labels.get(k, k) for k in kg.entity_keys),
            relation_labels=tuple(rel_labels.get(k, k) for k in kg.relation_keys),
            descriptions=kg.descriptions,
            name=kg.name,
        )
    log.info(
        "loaded %s: |E|=%d |R|=%d train=%d valid=%d test=%d",
        kg.name, kg.num_entities, kg.num_relations, len(kg.train), len(kg.valid), len(kg.test),
    )
    return kg


def save_dataset(kg: KnowledgeGraph, directory) -> None:
    """Write ``kg`` in the layout :func:`load_dataset` reads."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        with open(directory / f"{split}.txt", "w", encoding="utf-8") as fh:
            for s, r, o in kg.split(split).tolist():
                fh.write(f"{kg.entity_keys[s]}\t{kg.relation_keys[r]}\t{kg.entity_keys[o]}\n")
    if any(kg.descriptions):
        with open(directory / "entity2text.txt", "w", encoding="utf-8") as fh:
            for key, text in zip(kg.entity_keys, kg.descriptions):
                if text:
                    fh.write(f"{key}\t{text}\n")


# ---------------------------------------------------------------------------
# neighbourhoods


def khop_entities(kg: KnowledgeGraph, seeds, h: int) -> set[int]:
    """Entities within ``h`` undirected hops of ``seeds`` (seeds included)."""
    if h < 0:
        raise ValueError("h must be >= 0")
    seeds = np.asarray(sorted(set(int(e) for e in seeds)), dtype=np.int64)
    if seeds.size == 0:
        raise ValueError("seeds must be non-empty")
    if seeds[0] < 0 or seeds[-1] >= kg.num_entities:
        raise KeyError(f"unknown seed entity in {seeds.tolist()}")
    return set(np.flatnonzero(khop_distances(kg, seeds, h) >= 0).tolist())


def khop_distances(kg: KnowledgeGraph, seeds, h: int) -> np.ndarray:
    indptr, indices = kg.adjacency
    return kernels.bfs(indptr, indices, np.asarray(seeds, dtype=np.int64), h)


class TripleGraph:
    """Train triples as nodes, linked when they share an entity.

    Edges are never materialised; neighbour lists are assembled on demand
    from the entity incidence index.
    """

    def __init__(self, kg: KnowledgeGraph):
        self.kg = kg

    def __len__(self):
        return len(self.kg.train)

    def triple(self, i: int) -> Triple:
        return Triple(*map(int, self.kg.train[i]))

    def index(self, t) -> int:
        try:
            return self.kg.train_position[tuple(t)]
        except KeyError:
            raise KeyError(f"{tuple(t)} is not a train triple") from None

    def neighbors(self, i: int) -> np.ndarray:
        s, _, o = self.kg.train[i]
        ids = np.union1d(self.kg.incident(s), self.kg.incident(o))
        return ids[ids != i]

    def neighbors_of(self, t) -> np.ndarray:
        """Train-triple ids sharing an entity with any triple ``t``.

        ``t`` need not be in the train split (attack targets are test
        triples); if it is, it is excluded from its own neighbourhood.
        """
        s, _, o = t
        ids = np.union1d(self.kg.incident(s), self.kg.incident(o))
        own = self.kg.train_position.get(tuple(t))
        if own is not None:
            ids = ids[ids != own]
        return ids

    def edges(self):
        """Yield every undirected edge ``(i, j)`` with ``i < j``."""
        for i in range(len(self)):
            for j in self.neighbors(i):
                if j > i:
                    yield i, int(j)


def build_triple_graph(kg: KnowledgeGraph) -> TripleGraph:
    return TripleGraph(kg)


def khop_triples(tg: TripleGraph, seed, h: int) -> set[Triple]:
    """Train triples within ``h`` triple-graph hops of ``seed``, seed excluded."""
    start = tg.index(seed)
    seen = {start}
    frontier = [start]
    for _ in range(h):
        nxt = []
        for i in frontier:
            for j in tg.neighbors(i).tolist():
                if j not in seen:
                    seen.add(j)
                    nxt.append(j)
        if not nxt:
            break
        frontier = nxt
    seen.discard(start)
    return {tg.triple(i) for i in seen}
