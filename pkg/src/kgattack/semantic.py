"""Triple verbalisation, text-embedding providers and the semantic candidate filter."""
from __future__ import annotations

import hashlib
import logging
import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ._http import post_json
from .candidates import Candidate, CandidateSet
from .kg import KnowledgeGraph, Triple, TripleGraph

log = logging.getLogger(__name__)

_TOKEN = re.compile(r"[A-Za-z0-9]+")


def verbalize(t, kg: KnowledgeGraph, with_desc: bool = False) -> str:
    s, r, o = (int(x) for x in t)
    text = f"({kg.entity_labels[s]}, {kg.relation_labels[r]}, {kg.entity_labels[o]})"
    if with_desc:
        for tag, e in (("s", s), ("o", o)):
            desc = kg.describe(e).strip()
            if desc:
                text += f" | {tag}: {desc}"
    return text


class ProviderError(RuntimeError):
    pass


class EmbeddingProvider:
    """Maps strings to fixed-width vectors, batching and caching by content hash.

    Subclasses implement ``_embed_batch``.  Uncached strings are sent in
    batches of ``batch_size`` with up to ``max_workers`` batches in flight;
    results come back in input order.
    """

    name = "base"

    def __init__(self, dim: int, model: str = "", batch_size: int = 64, max_workers: int = 4):
        self.dim = dim
        self.model = model
        self.batch_size = batch_size
        self.max_workers = max_workers
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self.calls = 0

    @property
    def identity(self) -> tuple[str, str, int]:
        return (self.name, self.model, self.dim)

    def _embed_batch(self, texts: list[str]) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def _key(text: str) -> str:
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def embed(self, texts) -> np.ndarray:
        texts = list(texts)
        keys = [self._key(t) for t in texts]
        with self._lock:
            missing = {}
            for k, t in zip(keys, texts):
                if k not in self._cache and k not in missing:
                    missing[k] = t
        if missing:
            todo = list(missing.items())
            batches = [todo[i:i + self.batch_size] for i in range(0, len(todo), self.batch_size)]

            def run(batch):
                vecs = np.asarray(self._embed_batch([t for _, t in batch]), dtype=np.float64)
                if vecs.shape != (len(batch), self.dim):
                    raise ProviderError(f"{self.name}: expected {(len(batch), self.dim)} vectors, got {vecs.shape}")
                return vecs

            if len(batches) == 1 or self.max_workers <= 1:
                results = [run(b) for b in batches]
            else:
                with ThreadPoolExecutor(self.max_workers) as pool:
                    results = list(pool.map(run, batches))
            with self._lock:
                self.calls += len(batches)
                for batch, vecs in zip(batches, results):
                    for (k, _), v in zip(batch, vecs):
                        v.setflags(write=False)
                        self._cache[k] = v
        if not texts:
            return np.zeros((0, self.dim))
        with self._lock:
            return np.stack([self._cache[k] for k in keys])

    def embed_triples(self, triples, kg: KnowledgeGraph, with_desc: bool = False) -> np.ndarray:
        return self.embed([verbalize(t, kg, with_desc) for t in triples])


class HashEmbeddingProvider(EmbeddingProvider):
    """Signed feature hashing of lower-cased alphanumeric tokens.

    Deterministic and offline; strings sharing tokens get positive cosine.
    """

    name = "hash"

    def __init__(self, dim: int = 256, seed: int = 0, **kw):
        super().__init__(dim, model=f"blake2b-{seed}", **kw)
        self._salt = seed.to_bytes(8, "little")

    def _embed_batch(self, texts):
        out = np.zeros((len(texts), self.dim))
        for i, text in enumerate(texts):
            for tok in _TOKEN.findall(text.lower()):
                digest = hashlib.blake2b(tok.encode(), digest_size=8, salt=self._salt).digest()
                idx = int.from_bytes(digest[:4], "little") % self.dim
                out[i, idx] += 1.0 if digest[4] & 1 else -1.0
        return out


class StaticProvider(EmbeddingProvider):
    """Fixed string-to-vector table, mostly for tests."""

    name = "static"

    def __init__(self, table: dict, **kw):
        vecs = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}
        dims = {v.shape for v in vecs.values()}
        if len(dims) != 1:
            raise ValueError(f"inconsistent vector shapes {dims}")
        super().__init__(dims.pop()[0], model="table", **kw)
        self.table = vecs

    def _embed_batch(self, texts):
        try:
            return np.stack([self.table[t] for t in texts])
        except KeyError as exc:
            raise ProviderError(f"no vector for {exc.args[0]!r}") from None


class RemoteEmbeddingProvider(EmbeddingProvider):
    """HTTP endpoint taking ``{"input": [...], "model": name}``.

    Accepts replies shaped ``{"data": [{"embedding": [...], "index": i}]}``
    or ``{"embeddings": [[...], ...]}``.  The dimension is fixed by the first
    reply unless given.
    """

    name = "remote"

    def __init__(self, endpoint: str, model: str, api_key: str | None = None, dim: int | None = None,
                 attempts: int = 3, backoff_base: float = 1.0, timeout_s: float = 60.0, **kw):
        super().__init__(dim or 0, model=model, **kw)
        self.endpoint = endpoint
        self.api_key = api_key
        self.attempts = attempts
        self.backoff_base = backoff_base
        self.timeout_s = timeout_s
        self._dim_known = dim is not None

    @classmethod
    def from_env(cls, **kw) -> "RemoteEmbeddingProvider":
        endpoint = os.environ.get("EMBED_ENDPOINT")
        if not endpoint:
            raise ProviderError("EMBED_ENDPOINT is not set")
        return cls(endpoint, os.environ.get("EMBED_MODEL", ""), os.environ.get("EMBED_API_KEY"), **kw)

    def embed(self, texts) -> np.ndarray:
        texts = list(texts)
        if not self._dim_known and texts:
            # learn the width from one string before fanning out
            first = np.asarray(self._request([texts[0]]), dtype=np.float64)
            self.dim = first.shape[1]
            self._dim_known = True
        return super().embed(texts)

    def _request(self, texts):
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            res = post_json(self.endpoint, {"input": texts, "model": self.model}, headers,
                            attempts=self.attempts, backoff_base=self.backoff_base, budget_s=self.timeout_s)
        except RuntimeError as exc:
            raise ProviderError(f"embedding request failed: {exc}") from exc
        body = res.body
        if "data" in body:
            rows = sorted(body["data"], key=lambda d: d.get("index", 0))
            vecs = [d["embedding"] for d in rows]
        elif "embeddings" in body:
            vecs = body["embeddings"]
        else:
            raise ProviderError(f"unrecognised embedding reply keys {sorted(body)}")
        if len(vecs) != len(texts):
            raise ProviderError(f"asked for {len(texts)} embeddings, got {len(vecs)}")
        return vecs

    def _embed_batch(self, texts):
        return self._request(texts)


class HoaFeatureProvider(EmbeddingProvider):
    """Uses the HoA adapter features K of a triple as its embedding."""

    name = "hoa"

    def __init__(self, head, features):
        super().__init__(head.dim, model=f"h{head.hops}")
        self.head = head
        self.features = features

    def embed(self, texts):
        raise ProviderError("the HoA provider embeds triples, not text")

    def embed_triples(self, triples, kg=None, with_desc=False):
        return self.head.adapter_features(self.features, np.asarray([tuple(t) for t in triples]).reshape(-1, 3))


def cosine_scores(ref: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Cosine of each row of ``mat`` with ``ref``; -1 where either vector is zero."""
    norms = np.linalg.norm(mat, axis=1)
    ref_norm = np.linalg.norm(ref)
    out = np.full(len(mat), -1.0)
    ok = (norms > 0) & (ref_norm > 0)
    out[ok] = (mat[ok] @ ref) / (norms[ok] * ref_norm)
    return np.clip(out, -1.0, 1.0)


def semantic_filter(tg: TripleGraph, provider: EmbeddingProvider, tgt: Triple, k: int,
                    with_desc: bool = False) -> CandidateSet:
    """Top-k 1-hop neighbours of ``tgt`` by embedding cosine, ties by train index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ids = tg.neighbors_of(tgt)
    if len(ids) == 0:
        raise ValueError(f"empty triple-graph neighbourhood for {tuple(tgt)}")
    triples = [tuple(tgt)] + [tuple(row) for row in tg.kg.train[ids].tolist()]
    vecs = provider.embed_triples(triples, tg.kg, with_desc)
    scores = cosine_scores(vecs[0], vecs[1:])
    zero = np.flatnonzero(np.linalg.norm(vecs[1:], axis=1) == 0)
    if len(zero):
        log.warning("%d zero-norm candidate embeddings scored -1", len(zero))
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], int(ids[i])))[:k]
    items = [Candidate(tg.triple(int(ids[i])), float(scores[i]), f"semantic:{provider.name}",
                       {"index": int(ids[i])}) for i in order]
    return CandidateSet(Triple(*tgt), items, bound=k)
