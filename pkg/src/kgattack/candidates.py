"""Bounded, score-ordered candidate lists produced by the filters."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .kg import Triple


@dataclass(frozen=True)
class Candidate:
    item: Any
    score: float
    provenance: str
    detail: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class CandidateSet:
    """At most ``bound`` candidates for ``target``, best first."""

    target: Triple
    items: tuple[Candidate, ...]
    bound: int

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if len(self.items) > self.bound:
            raise ValueError(f"{len(self.items)} candidates exceed bound {self.bound}")
        scores = [c.score for c in self.items]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("candidate scores must be non-increasing")

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    @property
    def values(self) -> list:
        return [c.item for c in self.items]

    def top(self):
        if not self.items:
            raise IndexError("empty candidate set")
        return self.items[0].item
