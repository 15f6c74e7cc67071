"""High-order adjacency features, the multi-hop fusion head, and the HoA triple filter.

Entity features are propagated with the self-looped, symmetric-normalised
adjacency (H^k = A_hat H^(k-1), H^0 = TransE entity embeddings).  A small
fusion head mixes the hop features with softmax weights, an adapter maps
``f(s) | Z(r) | f(o)`` to a feature vector K, and a linear layer on K
classifies the triple as true or false.  The filter ranks neighbours by
cosine similarity of their K vectors to the target's.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import kernels
from .candidates import Candidate, CandidateSet
from .io import file_sha256, read_blocks, write_blocks
from .kg import KnowledgeGraph, Triple, TripleGraph

log = logging.getLogger(__name__)

FEATURES_MAGIC = b"KGAHOAF\x00"
HEAD_MAGIC = b"KGAHEAD\x00"


class HoaDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# propagation


def normalize_adjacency(kg: KnowledgeGraph) -> sp.csr_matrix:
    """``D^-1/2 (A + I) D^-1/2`` over the undirected, unweighted train entity graph."""
    if len(kg.train) == 0:
        raise ValueError("train split is empty")
    n = kg.num_entities
    indptr, indices = kernels.csr_from_edges(n, kg.train[:, 0], kg.train[:, 2])
    adj = sp.csr_matrix((np.ones(len(indices)), indices, indptr), shape=(n, n))
    adj = (adj + sp.identity(n, format="csr")).tocoo()
    deg = np.asarray(adj.sum(axis=1)).ravel()
    # one rounding per entry: 1/sqrt(d_i d_j) rather than a product of two roots
    vals = adj.data / np.sqrt(deg[adj.row] * deg[adj.col])
    return sp.csr_matrix((vals, (adj.row, adj.col)), shape=(n, n))


@dataclass(frozen=True)
class HoaFeatures:
    """``H[k] = A_hat^k Z`` for ``k = 0..hops``; ``H[0]`` is ``Z`` itself."""

    hops: int
    H: tuple
    relation: np.ndarray
    source: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.H[0].shape[1]

    @property
    def num_entities(self) -> int:
        return self.H[0].shape[0]


def propagate(a_hat, Z: np.ndarray, h: int, relation: np.ndarray | None = None,
              source: dict | None = None) -> HoaFeatures:
    if h < 1:
        raise ValueError("h must be >= 1")
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or a_hat.shape != (Z.shape[0], Z.shape[0]):
        raise ValueError(f"shape mismatch: A_hat {a_hat.shape} vs Z {Z.shape}")
    H = [Z]
    for _ in range(h):
        H.append(np.asarray(a_hat @ H[-1]))
    rel = np.zeros((0, Z.shape[1])) if relation is None else np.asarray(relation, dtype=np.float64)
    if rel.ndim != 2 or (rel.size and rel.shape[1] != Z.shape[1]):
        raise ValueError(f"relation embeddings {rel.shape} do not match dim {Z.shape[1]}")
    return HoaFeatures(h, tuple(H), rel, dict(source or {}))


def features_from_model(kg: KnowledgeGraph, transe, h: int = 3, source: dict | None = None) -> HoaFeatures:
    if transe.entity.shape[0] != kg.num_entities:
        raise ValueError("TransE model does not match the knowledge graph")
    return propagate(normalize_adjacency(kg), transe.entity, h, transe.relation, source)


def save_features(features: HoaFeatures, path) -> None:
    arrays = {f"H{k}": m for k, m in enumerate(features.H)}
    arrays["relation"] = features.relation
    write_blocks(path, FEATURES_MAGIC, {"hops": features.hops, "source": features.source}, arrays)


def load_features(path) -> HoaFeatures:
    header, arrays = read_blocks(path, FEATURES_MAGIC)
    h = header["hops"]
    return HoaFeatures(h, tuple(arrays[f"H{k}"] for k in range(h + 1)), arrays["relation"], header["source"])


def cached_features(kg: KnowledgeGraph, checkpoint, h: int, cache_dir) -> HoaFeatures:
    """Load features keyed by (kg hash, checkpoint hash, h), computing them on a miss."""
    from .kge.checkpoint import load_model

    key = {"kg": kg.fingerprint(), "checkpoint": file_sha256(checkpoint), "h": h}
    path = Path(cache_dir) / f"hoa-{key['kg'][:12]}-{key['checkpoint'][:12]}-h{h}.bin"
    if path.exists():
        feats = load_features(path)
        if feats.source == key:
            return feats
        log.warning("stale HoA cache %s, recomputing", path)
    model = load_model(checkpoint)
    if model.architecture != "transe":
        raise ValueError(f"HoA features need a TransE checkpoint, got {model.architecture}")
    feats = features_from_model(kg, model, h, key)
    save_features(feats, path)
    return feats


# ---------------------------------------------------------------------------
# fusion head


def softmax(theta: np.ndarray) -> np.ndarray:
    z = np.exp(theta - np.max(theta))
    return z / z.sum()


def _relu(x):
    return np.maximum(x, 0.0)


def _mlp_init(params, name, n_in, n_hidden, n_out, rng):
    params[f"{name}.w1"] = rng.normal(0.0, np.sqrt(2.0 / n_in), (n_in, n_hidden))
    params[f"{name}.b1"] = np.zeros(n_hidden)
    params[f"{name}.w2"] = rng.normal(0.0, np.sqrt(1.0 / n_hidden), (n_hidden, n_out))
    params[f"{name}.b2"] = np.zeros(n_out)


def _mlp_forward(params, name, x):
    z = x @ params[f"{name}.w1"] + params[f"{name}.b1"]
    a = _relu(z)
    return a @ params[f"{name}.w2"] + params[f"{name}.b2"], (x, z, a)


def _mlp_backward(params, name, cache, dy, grads):
    x, z, a = cache
    grads[f"{name}.w2"] = grads.get(f"{name}.w2", 0.0) + a.T @ dy
    grads[f"{name}.b2"] = grads.get(f"{name}.b2", 0.0) + dy.sum(axis=0)
    dz = (dy @ params[f"{name}.w2"].T) * (z > 0)
    grads[f"{name}.w1"] = grads.get(f"{name}.w1", 0.0) + x.T @ dz
    grads[f"{name}.b1"] = grads.get(f"{name}.b1", 0.0) + dz.sum(axis=0)
    return dz @ params[f"{name}.w1"].T


class FusionHead:
    """Per-hop MLPs, softmax hop weights, output MLP, adapter MLP and a linear classifier.

    The classifier weights start at zero so an untrained head outputs
    probability 0.5 for every triple.
    """

    def __init__(self, hops: int, dim: int, rng=None, hidden: int | None = None):
        rng = np.random.default_rng(rng)
        self.hops = hops
        self.dim = dim
        self.hidden = hidden or dim
        p: dict = {}
        for k in range(1, hops + 1):
            _mlp_init(p, f"hop{k}", dim, self.hidden, dim, rng)
        p["theta"] = np.zeros(hops)
        _mlp_init(p, "out", hops * dim, self.hidden, dim, rng)
        _mlp_init(p, "adapter", 3 * dim, self.hidden, dim, rng)
        p["cls.w"] = np.zeros(dim)
        p["cls.b"] = np.zeros(1)
        self.params = p
        self.history: list[float] = []

    @property
    def alpha(self) -> np.ndarray:
        return softmax(self.params["theta"])

    def copy(self) -> "FusionHead":
        other = FusionHead.__new__(FusionHead)
        other.hops, other.dim, other.hidden = self.hops, self.dim, self.hidden
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.history = list(self.history)
        return other

    def _check(self, features: HoaFeatures):
        if features.hops < self.hops or features.dim != self.dim:
            raise ValueError(f"head (h={self.hops}, d={self.dim}) does not fit features "
                             f"(h={features.hops}, d={features.dim})")

    # entity fusion -------------------------------------------------------

    def _fuse(self, features: HoaFeatures, ents):
        p = self.params
        alpha = self.alpha
        ys, caches = [], []
        for k in range(1, self.hops + 1):
            y, c = _mlp_forward(p, f"hop{k}", features.H[k][ents])
            ys.append(y)
            caches.append(c)
        cat = np.concatenate([a * y for a, y in zip(alpha, ys)], axis=1)
        f, out_cache = _mlp_forward(p, "out", cat)
        return f, (alpha, ys, caches, out_cache)

    def _fuse_backward(self, df, state, grads):
        alpha, ys, caches, out_cache = state
        dcat = _mlp_backward(self.params, "out", out_cache, df, grads)
        d = self.dim
        dalpha = np.empty(self.hops)
        for k in range(self.hops):
            block = dcat[:, k * d:(k + 1) * d]
            dalpha[k] = np.sum(block * ys[k])
            _mlp_backward(self.params, f"hop{k + 1}", caches[k], alpha[k] * block, grads)
        grads["theta"] = grads.get("theta", 0.0) + alpha * (dalpha - np.dot(alpha, dalpha))

    def fuse(self, features: HoaFeatures, ents) -> np.ndarray:
        self._check(features)
        scalar = np.ndim(ents) == 0
        f, _ = self._fuse(features, np.atleast_1d(np.asarray(ents, dtype=np.int64)))
        return f[0] if scalar else f

    # triple features and classifier ----------------------------------------

    def _forward(self, features: HoaFeatures, triples):
        t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        B = len(t)
        f, fuse_state = self._fuse(features, np.concatenate([t[:, 0], t[:, 2]]))
        x = np.concatenate([f[:B], features.relation[t[:, 1]], f[B:]], axis=1)
        K, ad_cache = _mlp_forward(self.params, "adapter", x)
        logits = K @ self.params["cls.w"] + self.params["cls.b"][0]
        return logits, K, (B, fuse_state, ad_cache)

    def adapter_features(self, features: HoaFeatures, triples) -> np.ndarray:
        """K = MLP_Adapter(f(s) | Z(r) | f(o)), the classifier's penultimate features."""
        self._check(features)
        return self._forward(features, triples)[1]

    def logits(self, features: HoaFeatures, triples) -> np.ndarray:
        self._check(features)
        return self._forward(features, triples)[0]

    def predict_proba(self, features: HoaFeatures, triples) -> np.ndarray:
        return _sigmoid(self.logits(features, triples))

    def loss_and_grad(self, features: HoaFeatures, triples, labels) -> tuple[float, dict]:
        """Mean binary cross-entropy and its gradient for every head parameter."""
        self._check(features)
        labels = np.asarray(labels, dtype=np.float64)
        logits, K, (B, fuse_state, ad_cache) = self._forward(features, triples)
        loss = float(np.mean(np.logaddexp(0.0, logits) - labels * logits))
        dlogit = (_sigmoid(logits) - labels) / B
        grads: dict = {"cls.w": K.T @ dlogit, "cls.b": np.array([dlogit.sum()])}
        dx = _mlp_backward(self.params, "adapter", ad_cache, np.outer(dlogit, self.params["cls.w"]), grads)
        d = self.dim
        df = np.concatenate([dx[:, :d], dx[:, 2 * d:]])
        self._fuse_backward(df, fuse_state, grads)
        return loss, grads

    def loss(self, features: HoaFeatures, triples, labels) -> float:
        labels = np.asarray(labels, dtype=np.float64)
        logits = self.logits(features, triples)
        return float(np.mean(np.logaddexp(0.0, logits) - labels * logits))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def fuse(features: HoaFeatures, head: FusionHead, e) -> np.ndarray:
    return head.fuse(features, e)


def save_head(head: FusionHead, path, extra: dict | None = None) -> None:
    header = {"hops": head.hops, "dim": head.dim, "hidden": head.hidden,
              "history": head.history, **(extra or {})}
    write_blocks(path, HEAD_MAGIC, header, head.params)


def load_head(path) -> FusionHead:
    header, arrays = read_blocks(path, HEAD_MAGIC)
    head = FusionHead.__new__(FusionHead)
    head.hops, head.dim, head.hidden = header["hops"], header["dim"], header["hidden"]
    head.params = arrays
    head.history = list(header.get("history", []))
    return head


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class HoaConfig:
    epochs: int = 200
    lr: float = 0.005
    batch_size: int = 128
    hidden: int | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def corrupt_filtered(triples: np.ndarray, kg: KnowledgeGraph, rng, max_tries: int = 100) -> np.ndarray:
    """One negative per positive by replacing a random side, rejecting known triples."""
    known = kg.known
    out = np.array(triples, dtype=np.int64).reshape(-1, 3).copy()
    for row in out:
        side = 0 if rng.random() < 0.5 else 2
        original = row.copy()
        for _ in range(max_tries):
            row[side] = rng.integers(kg.num_entities)
            if tuple(row.tolist()) not in known:
                break
        else:
            row[:] = original
            log.debug("no filtered corruption found for %s", original.tolist())
    return out


def labelled_pairs(triples, kg: KnowledgeGraph, rng) -> tuple[np.ndarray, np.ndarray]:
    """Positives followed by an equal number of filtered corruptions."""
    pos = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    neg = corrupt_filtered(pos, kg, rng)
    return np.concatenate([pos, neg]), np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])


def train_hoa_classifier(kg: KnowledgeGraph, features: HoaFeatures, config: HoaConfig = HoaConfig()) -> FusionHead:
    """Fit the fusion head on train triples against fresh 1:1 filtered negatives each epoch.

    Propagated features and relation embeddings stay frozen.
    """
    if features.num_entities != kg.num_entities:
        raise ValueError("features do not match the knowledge graph")
    rng = np.random.default_rng(config.seed)
    head = FusionHead(features.hops, features.dim, rng, config.hidden)
    p = head.params
    m = {k: np.zeros_like(v) for k, v in p.items()}
    v = {k: np.zeros_like(x) for k, x in p.items()}
    b1, b2, eps, t = 0.9, 0.999, 1e-8, 0
    pos_all = np.array(kg.train, dtype=np.int64)
    for epoch in range(config.epochs):
        X, y = labelled_pairs(pos_all, kg, rng)
        order = rng.permutation(len(X))
        total, batches = 0.0, 0
        for lo in range(0, len(X), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            loss, grads = head.loss_and_grad(features, X[idx], y[idx])
            if not np.isfinite(loss):
                raise HoaDiverged(f"HoA classifier diverged at epoch {epoch}")
            t += 1
            for name, g in grads.items():
                m[name] = b1 * m[name] + (1 - b1) * g
                v[name] = b2 * v[name] + (1 - b2) * g * g
                p[name] -= config.lr * (m[name] / (1 - b1 ** t)) / (np.sqrt(v[name] / (1 - b2 ** t)) + eps)
            total += loss
            batches += 1
        head.history.append(total / max(batches, 1))
    return head


def classification_accuracy(head: FusionHead, features: HoaFeatures, triples, labels) -> float:
    pred = head.predict_proba(features, triples) > 0.5
    return float(np.mean(pred == (np.asarray(labels) > 0.5)))


# ---------------------------------------------------------------------------
# filter


def _cosine(ref: np.ndarray, mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1)
    ref_norm = np.linalg.norm(ref)
    out = np.full(len(mat), -1.0)
    ok = (norms > 0) & (ref_norm > 0)
    out[ok] = (mat[ok] @ ref) / (norms[ok] * ref_norm)
    return out


def hoa_filter(tg: TripleGraph, head: FusionHead, features: HoaFeatures, tgt: Triple, k: int) -> CandidateSet:
    """Top-k 1-hop triple-graph neighbours by cosine of adapter features to the target.

    Triple-graph edges are undirected, so each neighbour is scored in both
    orientations ``(s, r, o)`` and ``(o, r, s)`` and keeps the better one.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ids = tg.neighbors_of(tgt)
    if len(ids) == 0:
        raise ValueError(f"empty triple-graph neighbourhood for {tuple(tgt)}")
    nb = tg.kg.train[ids]
    ref = head.adapter_features(features, [tuple(tgt)])[0]
    forward = _cosine(ref, head.adapter_features(features, nb))
    backward = _cosine(ref, head.adapter_features(features, nb[:, ::-1]))
    scores = np.maximum(forward, backward)
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], int(ids[i])))[:k]
    items = [Candidate(tg.triple(int(ids[i])), float(scores[i]), "hoa",
                       {"index": int(ids[i]), "reversed": bool(backward[i] > forward[i])})
             for i in order]
    return CandidateSet(Triple(*tgt), items, bound=k)
