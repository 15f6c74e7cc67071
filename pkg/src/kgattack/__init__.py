"""Black-box poisoning attacks on knowledge graph embeddings with LLM-chosen perturbations."""
from .candidates import Candidate, CandidateSet
from .kg import KnowledgeGraph, Triple, TripleGraph, build_triple_graph, khop_entities, khop_triples, load_dataset

__version__ = "0.1.0"

__all__ = [
    "Candidate", "CandidateSet", "KnowledgeGraph", "Triple", "TripleGraph", "build_triple_graph",
    "khop_entities", "khop_triples", "load_dataset",
]
