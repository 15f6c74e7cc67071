"""Optimisers, losses and the fixed-epoch training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from .. import kernels
from ..kg import KnowledgeGraph
from .models import ARCHITECTURES, ConvE, KgeModel, build_model

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    architecture: str = "transe"
    dim: int = 32
    epochs: int = 200
    lr: float = 0.1
    batch_size: int = 64
    negatives: int = 8
    margin: float = 1.0
    l2: float = 0.0
    label_smoothing: float = 0.1
    channels: int = 8
    kernel: int = 3
    input_dropout: float = 0.0
    feature_dropout: float = 0.0
    hidden_dropout: float = 0.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


_DEFAULTS = {
    "transe": dict(lr=0.1, negatives=8, margin=1.0),
    "distmult": dict(lr=0.1, negatives=8, l2=1e-3),
    "complex": dict(lr=0.1, negatives=8, l2=1e-3),
    "conve": dict(lr=0.01, label_smoothing=0.1,
                  input_dropout=0.2, feature_dropout=0.2, hidden_dropout=0.3),
}


def default_config(architecture: str, **overrides) -> TrainConfig:
    architecture = architecture.lower()
    if architecture not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture!r}")
    return replace(TrainConfig(architecture=architecture, **_DEFAULTS[architecture]), **overrides)


# ---------------------------------------------------------------------------
# optimisers


def _coalesce(rows, values):
    uniq, inv = np.unique(rows, return_inverse=True)
    flat = values.reshape(values.shape[0], -1)
    buf = np.zeros((uniq.size, flat.shape[1]))
    kernels.scatter_add_rows(buf, inv.astype(np.int64), np.ascontiguousarray(flat))
    return uniq, buf.reshape((uniq.size,) + values.shape[1:])


def merge_grads(*parts: dict) -> dict:
    out: dict = {}
    for grads in parts:
        for name, (rows, values) in grads.items():
            if name not in out:
                out[name] = (rows, values)
                continue
            prev_rows, prev = out[name]
            if prev_rows is None or rows is None:
                raise ValueError(f"cannot merge dense gradient for {name}; use densify first")
            out[name] = (np.concatenate([prev_rows, rows]), np.concatenate([prev, values]))
    return out


def densify(grads: dict, params: dict) -> dict:
    out = {}
    for name, (rows, values) in grads.items():
        if rows is None:
            out[name] = values
        else:
            dense = np.zeros_like(params[name])
            np.add.at(dense, rows, values)
            out[name] = dense
    return out


class Adagrad:
    """Adagrad with lazy row updates for sparse gradients."""

    def __init__(self, params: dict, lr: float, eps: float = 1e-10):
        self.params = params
        self.lr = lr
        self.eps = eps
        self.acc = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict) -> None:
        for name, (rows, g) in grads.items():
            p, acc = self.params[name], self.acc[name]
            if rows is None:
                acc += g * g
                p -= self.lr * g / (np.sqrt(acc) + self.eps)
            else:
                uniq, g = _coalesce(rows, g)
                acc[uniq] += g * g
                p[uniq] -= self.lr * g / (np.sqrt(acc[uniq]) + self.eps)


class Adam:
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            self.params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# losses; each returns (loss, grads) for one batch of positives


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return np.logaddexp(0.0, x)


def corrupt(pos: np.ndarray, n: int, n_entities: int, rng) -> np.ndarray:
    """Uniform single-side corruption: ``n`` negatives per positive."""
    neg = np.repeat(pos, n, axis=0)
    side = rng.random(len(neg)) < 0.5
    ents = rng.integers(0, n_entities, len(neg))
    neg[side, 0] = ents[side]
    neg[~side, 2] = ents[~side]
    return neg


def margin_loss(model: KgeModel, pos, cfg: TrainConfig, rng, known=None):
    B, n = len(pos), cfg.negatives
    neg = corrupt(pos, n, model.n_entities, rng)
    sp = model.score(pos[:, 0], pos[:, 1], pos[:, 2])
    sn = model.score(neg[:, 0], neg[:, 1], neg[:, 2]).reshape(B, n)
    slack = cfg.margin - sp[:, None] + sn
    active = (slack > 0).astype(float)
    loss = float(np.sum(slack * active) / (B * n))
    g_pos = -active.sum(axis=1) / (B * n)
    g_neg = active.ravel() / (B * n)
    grads = merge_grads(
        model.backward(pos[:, 0], pos[:, 1], pos[:, 2], g_pos),
        model.backward(neg[:, 0], neg[:, 1], neg[:, 2], g_neg),
    )
    return loss, grads


def logistic_loss(model: KgeModel, pos, cfg: TrainConfig, rng, known=None):
    B, n = len(pos), cfg.negatives
    neg = corrupt(pos, n, model.n_entities, rng)
    sp = model.score(pos[:, 0], pos[:, 1], pos[:, 2])
    sn = model.score(neg[:, 0], neg[:, 1], neg[:, 2])
    s, r, o = pos[:, 0], pos[:, 1], pos[:, 2]
    ent, rel = model.entity, model.relation
    reg = cfg.l2 * float(np.sum(ent[s] ** 2) + np.sum(rel[r] ** 2) + np.sum(ent[o] ** 2)) / B
    loss = float(np.sum(_softplus(-sp)) / B + np.sum(_softplus(sn)) / (B * n)) + reg
    grads = merge_grads(
        model.backward(s, r, o, -_sigmoid(-sp) / B),
        model.backward(neg[:, 0], neg[:, 1], neg[:, 2], _sigmoid(sn) / (B * n)),
        {
            "entity": (np.concatenate([s, o]), 2 * cfg.l2 / B * np.concatenate([ent[s], ent[o]])),
            "relation": (r, 2 * cfg.l2 / B * rel[r]),
        },
    )
    return loss, grads


def one_to_all_loss(model: ConvE, pos, cfg: TrainConfig, rng, known):
    """Label-smoothed 1-N BCE for ``(s, r_fwd) -> o`` and ``(o, r_rev) -> s`` queries."""
    E, eps = model.n_entities, cfg.label_smoothing
    rates = (cfg.input_dropout, cfg.feature_dropout, cfg.hidden_dropout)
    objects, subjects = known
    dense: dict = {}
    loss = 0.0
    for reverse, cols, answers in ((False, [0, 1], objects), (True, [2, 1], subjects)):
        queries = np.unique(pos[:, cols], axis=0)
        masks = model.dropout_masks(len(queries), rates, rng)
        scores, state = model.forward_one_to_all(queries[:, 0], queries[:, 1], reverse, masks)
        target = np.zeros_like(scores)
        for i, key in enumerate(map(tuple, queries.tolist())):
            target[i, answers.get(key, ())] = 1.0
        target = (1.0 - eps) * target + eps / E
        n = scores.size
        loss += float(np.sum(_softplus(scores) - target * scores) / n)
        grads = densify(model.backward_one_to_all(state, (_sigmoid(scores) - target) / n), model.params)
        for k, v in grads.items():
            dense[k] = dense[k] + v if k in dense else v
    return loss, dense


LOSSES: dict[str, Callable] = {
    "transe": margin_loss,
    "distmult": logistic_loss,
    "complex": logistic_loss,
    "conve": one_to_all_loss,
}


def _answer_index(train: np.ndarray) -> tuple[dict, dict]:
    objects: dict = {}
    subjects: dict = {}
    for s, r, o in train.tolist():
        objects.setdefault((s, r), []).append(o)
        subjects.setdefault((o, r), []).append(s)
    return objects, subjects


def train(kg: KnowledgeGraph, config: TrainConfig) -> KgeModel:
    """Train one model on ``kg.train`` for exactly ``config.epochs`` epochs.

    The per-epoch mean batch loss is kept on ``model.history``.
    """
    arch = config.architecture.lower()
    rng = np.random.default_rng(config.seed)
    model = build_model(arch, kg.num_entities, kg.num_relations, config.dim, rng,
                        channels=config.channels, kernel=config.kernel)
    model.seed = config.seed
    model.train_config = config
    loss_fn = LOSSES[arch]
    opt = Adam(model.params, config.lr) if arch == "conve" else Adagrad(model.params, config.lr)
    known = _answer_index(kg.train) if arch == "conve" else None
    data = np.array(kg.train, dtype=np.int64)

    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        total = 0.0
        batches = 0
        for lo in range(0, len(data), config.batch_size):
            batch = data[order[lo:lo + config.batch_size]]
            loss, grads = loss_fn(model, batch, config, rng, known)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            opt.step(grads)
            if arch == "transe":
                _project_unit_ball(model.params["entity"])
            total += loss
            batches += 1
        mean = total / max(batches, 1)
        if not model.all_finite():
            raise TrainingDiverged(epoch, float("nan"))
        model.history.append(mean)
        if epoch % 50 == 0 or epoch == config.epochs - 1:
            log.debug("%s epoch %d loss %.5f", arch, epoch, mean)
    return model


def _project_unit_ball(ent: np.ndarray) -> None:
    norms = np.linalg.norm(ent, axis=1, keepdims=True)
    np.divide(ent, np.maximum(norms, 1.0), out=ent)
