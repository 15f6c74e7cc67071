"""Model checkpoints: header {architecture, dim, |E|, |R|, seed} + parameter blocks."""
from __future__ import annotations

import numpy as np

from ..io import read_blocks, write_blocks
from .models import MODEL_TYPES, ConvE, KgeModel

MAGIC = b"KGACKPT\x00"


def save_model(model: KgeModel, path) -> None:
    header = {
        "kind": "kge-model",
        "architecture": model.architecture,
        "dim": model.dim,
        "n_entities": model.n_entities,
        "n_relations": model.n_relations,
        "seed": int(model.seed),
        "config": model.config(),
    }
    write_blocks(path, MAGIC, header, {k: model.params[k] for k in sorted(model.params)})


def load_model(path) -> KgeModel:
    header, arrays = read_blocks(path, MAGIC)
    cls = MODEL_TYPES[header["architecture"]]
    args = (header["n_entities"], header["n_relations"], header["dim"], {k: np.array(v) for k, v in arrays.items()})
    model = cls(*args, **header["config"]) if cls is ConvE else cls(*args)
    model.seed = header["seed"]
    if model.entity.shape[0] != model.n_entities or model.relation.shape[0] != model.n_relations:
        raise ValueError(f"{path}: parameter rows disagree with header counts")
    return model
