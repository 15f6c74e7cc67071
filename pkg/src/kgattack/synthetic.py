"""Rule-generated toy knowledge graphs for desk-scale experiments.

The layout mimics the inverse-pair leakage of WN18RR: ``n_hubs`` hub
entities each own one leaf per *kind*; kind ``k`` contributes the relation
``rel{k}`` (hub -> leaf) and its inverse ``rel{k}_inverse`` (leaf -> hub).
Hubs are additionally wired together with ``linked_to`` edges so that 3-hop
balls are non-trivial. For a ``held_out`` fraction of hub/leaf pairs one
direction is moved to valid/test while its inverse stays in train, so every
evaluation triple is recoverable from exactly one training fact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kg import KnowledgeGraph, from_labelled_triples


@dataclass(frozen=True)
class SyntheticConfig:
    n_hubs: int = 10
    n_kinds: int = 4
    hub_links: int = 2
    held_out: float = 0.3
    valid_share: float = 1 / 3
    seed: int = 0

    @property
    def num_entities(self) -> int:
        return self.n_hubs * (1 + self.n_kinds)


def generate(config: SyntheticConfig = SyntheticConfig()) -> KnowledgeGraph:
    rng = np.random.default_rng(config.seed)
    hubs = [f"hub{i}" for i in range(config.n_hubs)]
    train, valid, test = [], [], []
    desc = {h: f"hub node number {i}" for i, h in enumerate(hubs)}

    for k in range(config.n_kinds):
        perm = rng.permutation(config.n_hubs)
        rel, inv = f"rel{k}", f"rel{k}_inverse"
        for i, h in enumerate(hubs):
            leaf = f"item{k}_{perm[i]}"
            desc[leaf] = f"item of kind {k}"
            forward, backward = (h, rel, leaf), (leaf, inv, h)
            if rng.random() < config.held_out:
                held, kept = (forward, backward) if rng.random() < 0.5 else (backward, forward)
                train.append(kept)
                (valid if rng.random() < config.valid_share else test).append(held)
            else:
                train.extend([forward, backward])

    for i, h in enumerate(hubs):
        others = [j for j in range(config.n_hubs) if j != i]
        picks = rng.choice(others, size=min(config.hub_links, len(others)), replace=False)
        for j in sorted(picks.tolist()):
            train.append((h, "linked_to", hubs[j]))

    order = rng.permutation(len(train))
    train = [train[i] for i in order]
    return from_labelled_triples(
        {"train": train, "valid": valid, "test": test},
        descriptions=desc,
        name=f"synthetic-{config.seed}",
    )
