"""TransE, DistMult, ComplEx and ConvE scorers with analytic gradients.

All scorers follow "higher is more plausible". ``backward(s, r, o, g)``
returns the gradient of ``sum(g * score(s, r, o))`` as a mapping from
parameter name to ``(rows, values)``; ``rows`` is ``None`` for a dense
gradient covering the whole array.
"""
from __future__ import annotations

import math

import numpy as np

ARCHITECTURES = ("transe", "distmult", "complex", "conve")

# entity rows scored at once in score_objects/score_subjects
_CHUNK_ELEMS = 1 << 22


def _ids(x):
    return np.atleast_1d(np.asarray(x, dtype=np.int64))


class KgeModel:
    architecture = ""

    def __init__(self, n_entities: int, n_relations: int, dim: int, params: dict[str, np.ndarray]):
        self.n_entities = n_entities
        self.n_relations = n_relations
        self.dim = dim
        self.params = params
        self.seed = 0
        self.history: list[float] = []

    @property
    def entity(self) -> np.ndarray:
        return self.params["entity"]

    @property
    def relation(self) -> np.ndarray:
        return self.params["relation"]

    def _check(self, s, r, o):
        s, r, o = _ids(s), _ids(r), _ids(o)
        for name, ids, bound in (("entity", s, self.n_entities), ("relation", r, self.n_relations),
                                 ("entity", o, self.n_entities)):
            if ids.size and (ids.min() < 0 or ids.max() >= bound):
                raise IndexError(f"{name} id out of range [0, {bound})")
        return s, r, o

    def score(self, s, r, o) -> np.ndarray:
        s, r, o = self._check(s, r, o)
        return self._score(s, r, o)

    def score_triple(self, t) -> float:
        return float(self.score(*t)[0])

    def score_objects(self, s, r) -> np.ndarray:
        s, r, _ = self._check(s, r, 0)
        return self._score_objects(s, r)

    def score_subjects(self, r, o) -> np.ndarray:
        _, r, o = self._check(0, r, o)
        return self._score_subjects(r, o)

    def copy(self) -> "KgeModel":
        new = type(self).__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.params = {k: v.copy() for k, v in self.params.items()}
        new.history = list(self.history)
        return new

    def config(self) -> dict:
        return {}

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.params.values())


class TransE(KgeModel):
    """Translation scorer ``-||s + r - o||_2``."""

    architecture = "transe"

    @classmethod
    def init(cls, n_entities, n_relations, dim, rng, **_):
        bound = 6.0 / math.sqrt(dim)
        ent = rng.uniform(-bound, bound, (n_entities, dim))
        rel = rng.uniform(-bound, bound, (n_relations, dim))
        rel /= np.linalg.norm(rel, axis=1, keepdims=True)
        return cls(n_entities, n_relations, dim, {"entity": ent, "relation": rel})

    def _score(self, s, r, o):
        diff = self.entity[s] + self.relation[r] - self.entity[o]
        return -np.sqrt(np.sum(diff * diff, axis=-1))

    def _score_objects(self, s, r):
        q = self.entity[s] + self.relation[r]
        return self._chunked(lambda ent: q[:, None, :] - ent[None, :, :], len(s))

    def _score_subjects(self, r, o):
        rel, obj = self.relation[r][:, None, :], self.entity[o][:, None, :]
        # same operation order as _score: (s + r) - o
        return self._chunked(lambda ent: (ent[None, :, :] + rel) - obj, len(r))

    def _chunked(self, diff_fn, batch):
        out = np.empty((batch, self.n_entities))
        step = max(1, _CHUNK_ELEMS // max(1, batch * self.dim))
        for lo in range(0, self.n_entities, step):
            diff = diff_fn(self.entity[lo:lo + step])
            out[:, lo:lo + step] = -np.sqrt(np.sum(diff * diff, axis=-1))
        return out

    def backward(self, s, r, o, g):
        s, r, o = self._check(s, r, o)
        diff = self.entity[s] + self.relation[r] - self.entity[o]
        norm = np.maximum(np.sqrt(np.sum(diff * diff, axis=-1)), 1e-12)
        d = -(np.asarray(g, dtype=float) / norm)[:, None] * diff
        return {
            "entity": (np.concatenate([s, o]), np.concatenate([d, -d])),
            "relation": (r, d),
        }


class DistMult(KgeModel):
    """Diagonal bilinear scorer ``sum(s * r * o)``."""

    architecture = "distmult"

    @classmethod
    def init(cls, n_entities, n_relations, dim, rng, **_):
        scale = 1.0 / math.sqrt(dim)
        return cls(n_entities, n_relations, dim, {
            "entity": rng.normal(0.0, scale, (n_entities, dim)),
            "relation": rng.normal(0.0, scale, (n_relations, dim)),
        })

    def _score(self, s, r, o):
        return np.sum(self.entity[s] * self.relation[r] * self.entity[o], axis=-1)

    def _score_objects(self, s, r):
        return (self.entity[s] * self.relation[r]) @ self.entity.T

    def _score_subjects(self, r, o):
        return (self.relation[r] * self.entity[o]) @ self.entity.T

    def backward(self, s, r, o, g):
        s, r, o = self._check(s, r, o)
        g = np.asarray(g, dtype=float)[:, None]
        es, rr, eo = self.entity[s], self.relation[r], self.entity[o]
        return {
            "entity": (np.concatenate([s, o]), np.concatenate([g * rr * eo, g * es * rr])),
            "relation": (r, g * es * eo),
        }


class ComplEx(KgeModel):
    """Complex bilinear scorer ``Re<s, r, conj(o)>``.

    Each row stores ``[real | imaginary]`` so arrays are ``(n, 2 * dim)``.
    """

    architecture = "complex"

    @classmethod
    def init(cls, n_entities, n_relations, dim, rng, **_):
        scale = 1.0 / math.sqrt(dim)
        return cls(n_entities, n_relations, dim, {
            "entity": rng.normal(0.0, scale, (n_entities, 2 * dim)),
            "relation": rng.normal(0.0, scale, (n_relations, 2 * dim)),
        })

    def _split(self, x):
        return x[..., :self.dim], x[..., self.dim:]

    def _score(self, s, r, o):
        sr, si = self._split(self.entity[s])
        rr, ri = self._split(self.relation[r])
        orr, oi = self._split(self.entity[o])
        return np.sum(sr * rr * orr + sr * ri * oi + si * rr * oi - si * ri * orr, axis=-1)

    def _score_objects(self, s, r):
        sr, si = self._split(self.entity[s])
        rr, ri = self._split(self.relation[r])
        q = np.concatenate([sr * rr - si * ri, sr * ri + si * rr], axis=-1)
        return q @ self.entity.T

    def _score_subjects(self, r, o):
        rr, ri = self._split(self.relation[r])
        orr, oi = self._split(self.entity[o])
        q = np.concatenate([rr * orr + ri * oi, rr * oi - ri * orr], axis=-1)
        return q @ self.entity.T

    def backward(self, s, r, o, g):
        s, r, o = self._check(s, r, o)
        g = np.asarray(g, dtype=float)[:, None]
        sr, si = self._split(self.entity[s])
        rr, ri = self._split(self.relation[r])
        orr, oi = self._split(self.entity[o])
        ds = np.concatenate([rr * orr + ri * oi, rr * oi - ri * orr], axis=-1)
        dr = np.concatenate([sr * orr + si * oi, sr * oi - si * orr], axis=-1)
        do = np.concatenate([sr * rr - si * ri, sr * ri + si * rr], axis=-1)
        return {
            "entity": (np.concatenate([s, o]), np.concatenate([g * ds, g * do])),
            "relation": (r, g * dr),
        }


def _reshape_dims(dim: int) -> tuple[int, int]:
    h = max(d for d in range(1, int(math.isqrt(dim)) + 1) if dim % d == 0)
    return h, dim // h


class ConvE(KgeModel):
    """2D-convolutional scorer queried in both directions.

    For a query entity ``e`` and a relation half ``q`` (each ``dim`` wide),
    ``e`` and ``q`` are reshaped to ``h x w``, stacked into a ``2h x w``
    image, convolved (valid padding), rectified, projected back to ``dim``
    and rectified again, giving ``f(e, q)``. Relation rows are
    ``[forward | reverse]`` and the triple score averages both readings::

        score(s, r, o) = (f(s, r_fwd) . o + b_o + f(o, r_rev) . s + b_s) / 2

    Training is reciprocal 1-N: ``f(s, r_fwd)`` against all objects and
    ``f(o, r_rev)`` against all subjects. Dropout applies during training
    only; batch normalisation is omitted.
    """

    architecture = "conve"

    def __init__(self, n_entities, n_relations, dim, params, channels=8, kernel=3):
        super().__init__(n_entities, n_relations, dim, params)
        self.channels = channels
        self.kernel = kernel
        self._build_geometry()

    def _build_geometry(self):
        h, w = _reshape_dims(self.dim)
        H, W, k = 2 * h, w, self.kernel
        if H < k or W < k:
            raise ValueError(f"dim {self.dim} reshapes to {H}x{W}, too small for a {k}x{k} kernel")
        oh, ow = H - k + 1, W - k + 1
        rows = (np.arange(oh)[:, None, None, None] + np.arange(k)[None, None, :, None]) * W
        cols = np.arange(ow)[None, :, None, None] + np.arange(k)[None, None, None, :]
        self.patch_index = (rows + cols).reshape(oh * ow, k * k)
        self.n_patches = oh * ow
        scatter = np.zeros((self.n_patches * k * k, H * W))
        scatter[np.arange(scatter.shape[0]), self.patch_index.ravel()] = 1.0
        self._col2im = scatter

    @classmethod
    def init(cls, n_entities, n_relations, dim, rng, channels=8, kernel=3, **_):
        h, w = _reshape_dims(dim)
        n_patches = (2 * h - kernel + 1) * (w - kernel + 1)
        fan = n_patches * channels
        scale = 1.0 / math.sqrt(dim)
        params = {
            "entity": rng.normal(0.0, scale, (n_entities, dim)),
            "relation": rng.normal(0.0, scale, (n_relations, 2 * dim)),
            "conv_w": rng.normal(0.0, math.sqrt(2.0 / (kernel * kernel)), (channels, kernel * kernel)),
            "conv_b": np.zeros(channels),
            "fc_w": rng.normal(0.0, math.sqrt(2.0 / fan), (fan, dim)),
            "fc_b": np.zeros(dim),
            "entity_bias": np.zeros(n_entities),
        }
        return cls(n_entities, n_relations, dim, params, channels=channels, kernel=kernel)

    def config(self):
        return {"channels": self.channels, "kernel": self.kernel}

    def _half(self, r, reverse: bool):
        rel = self.relation[r]
        return rel[..., self.dim:] if reverse else rel[..., :self.dim]

    def dropout_masks(self, batch: int, rates, rng):
        """Inverted-dropout masks for the input image, feature maps and hidden layer."""
        shapes = ((batch, 2 * self.dim), (batch, self.n_patches, self.channels), (batch, self.dim))
        masks = []
        for shape, rate in zip(shapes, rates):
            if rate > 0:
                masks.append((rng.random(shape) >= rate) / (1.0 - rate))
            else:
                masks.append(None)
        return tuple(masks)

    def _hidden(self, ent_rows, rel_rows, keep=False, masks=None):
        p = self.params
        m_in, m_feat, m_hid = masks or (None, None, None)
        img = np.concatenate([ent_rows, rel_rows], axis=-1)
        if m_in is not None:
            img = img * m_in
        patches = img[:, self.patch_index]
        conv = patches @ p["conv_w"].T + p["conv_b"]
        act = np.maximum(conv, 0.0)
        if m_feat is not None:
            act = act * m_feat
        flat = act.reshape(act.shape[0], -1)
        pre = flat @ p["fc_w"] + p["fc_b"]
        hid = np.maximum(pre, 0.0)
        if m_hid is not None:
            hid = hid * m_hid
        if keep:
            return hid, (patches, conv, flat, pre, masks or (None, None, None))
        return hid

    def _directional(self, e, r, reverse):
        return self._hidden(self.entity[e], self._half(r, reverse))

    def _score(self, s, r, o):
        bias = self.params["entity_bias"]
        fwd = np.sum(self._directional(s, r, False) * self.entity[o], axis=-1) + bias[o]
        rev = np.sum(self._directional(o, r, True) * self.entity[s], axis=-1) + bias[s]
        return 0.5 * (fwd + rev)

    def _sweep(self, r, reverse, against):
        """``f(e, r_half) . entity[against] + bias[against]`` for every entity ``e``."""
        out = np.empty((len(r), self.n_entities))
        bias = self.params["entity_bias"]
        for b in range(len(r)):
            rel = np.broadcast_to(self._half(r[b], reverse), (self.n_entities, self.dim))
            out[b] = self._hidden(self.entity, rel) @ self.entity[against[b]] + bias[against[b]]
        return out

    def _score_objects(self, s, r):
        direct = self._directional(s, r, False) @ self.entity.T + self.params["entity_bias"]
        return 0.5 * (direct + self._sweep(r, True, s))

    def _score_subjects(self, r, o):
        direct = self._directional(o, r, True) @ self.entity.T + self.params["entity_bias"]
        return 0.5 * (self._sweep(r, False, o) + direct)

    def _backward_hidden(self, dhid, cache, grads):
        p = self.params
        patches, conv, flat, pre, (m_in, m_feat, m_hid) = cache
        if m_hid is not None:
            dhid = dhid * m_hid
        dpre = dhid * (pre > 0)
        dact = (dpre @ p["fc_w"].T).reshape(conv.shape)
        if m_feat is not None:
            dact = dact * m_feat
        dconv = dact * (conv > 0)
        dpatch = dconv @ p["conv_w"]
        dimg = dpatch.reshape(dpatch.shape[0], -1) @ self._col2im
        if m_in is not None:
            dimg = dimg * m_in
        _accumulate(grads, "fc_w", flat.T @ dpre)
        _accumulate(grads, "fc_b", dpre.sum(axis=0))
        _accumulate(grads, "conv_w", np.einsum("bpc,bpk->ck", dconv, patches))
        _accumulate(grads, "conv_b", dconv.sum(axis=(0, 1)))
        return dimg[:, :self.dim], dimg[:, self.dim:]

    def _relation_rows(self, drel, reverse):
        out = np.zeros((drel.shape[0], 2 * self.dim))
        if reverse:
            out[:, self.dim:] = drel
        else:
            out[:, :self.dim] = drel
        return out

    def backward(self, s, r, o, g):
        s, r, o = self._check(s, r, o)
        g = 0.5 * np.asarray(g, dtype=float)
        grads: dict = {}
        ent_rows, ent_vals, rel_vals = [], [], []
        for query, other, reverse in ((s, o, False), (o, s, True)):
            hid, cache = self._hidden(self.entity[query], self._half(r, reverse), keep=True)
            dq, dr = self._backward_hidden(g[:, None] * self.entity[other], cache, grads)
            ent_rows += [query, other]
            ent_vals += [dq, g[:, None] * hid]
            rel_vals.append(self._relation_rows(dr, reverse))
        grads["entity"] = (np.concatenate(ent_rows), np.concatenate(ent_vals))
        grads["relation"] = (np.concatenate([r, r]), np.concatenate(rel_vals))
        grads["entity_bias"] = (np.concatenate([o, s]), np.concatenate([g, g]))
        return {k: v if isinstance(v, tuple) else (None, v) for k, v in grads.items()}

    def forward_one_to_all(self, e, r, reverse: bool, masks=None):
        """Scores ``f(e, r_half) . entity[x] + bias[x]`` for all ``x``, plus a backward cache."""
        e, r, _ = self._check(e, r, 0)
        hid, cache = self._hidden(self.entity[e], self._half(r, reverse), keep=True, masks=masks)
        return hid @ self.entity.T + self.params["entity_bias"], (e, r, reverse, hid, cache)

    def backward_one_to_all(self, state, G):
        """Gradient of ``sum(G * scores)`` for scores from :meth:`forward_one_to_all`."""
        e, r, reverse, hid, cache = state
        grads: dict = {}
        de, dr = self._backward_hidden(G @ self.entity, cache, grads)
        dent = G.T @ hid
        np.add.at(dent, e, de)
        grads = {k: (None, v) for k, v in grads.items()}
        grads["entity"] = (None, dent)
        grads["relation"] = (r, self._relation_rows(dr, reverse))
        grads["entity_bias"] = (None, G.sum(axis=0))
        return grads


def _accumulate(grads, name, value):
    grads[name] = grads[name] + value if name in grads else value


MODEL_TYPES = {cls.architecture: cls for cls in (TransE, DistMult, ComplEx, ConvE)}


def build_model(architecture: str, n_entities: int, n_relations: int, dim: int, rng, **kwargs) -> KgeModel:
    try:
        cls = MODEL_TYPES[architecture.lower()]
    except KeyError:
        raise ValueError(f"unknown architecture {architecture!r}; expected one of {ARCHITECTURES}") from None
    return cls.init(n_entities, n_relations, dim, rng, **kwargs)
