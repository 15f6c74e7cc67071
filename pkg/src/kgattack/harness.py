"""Experiment runner: clean training, per-target attacks, poisoned retraining and comparison."""
from __future__ import annotations

import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import hoa
from .candidates import Candidate
from .centrality import centrality_filter
from .kg import KnowledgeGraph, Triple, build_triple_graph, load_dataset
from .kge import default_config, rank_targets, save_model, select_attack_targets, train
from .kge.models import ARCHITECTURES
from .orchestrator import (
    AttackDecision, HttpChatClient, LlmConfig, Perturbation, PerturbationError, ReplayClient, Transcript,
    apply_perturbations, decide, make_perturbation,
)
from .semantic import HashEmbeddingProvider, HoaFeatureProvider, RemoteEmbeddingProvider, semantic_filter
from .synthetic import SyntheticConfig, generate

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

FILTERS = ("semantic", "centrality", "hoa", "random")
LLM_MODES = ("off", "http", "replay")
METRICS = ("MRR", "Hits@1", "Hits@10")

# K grids: deletion per dataset, addition shared
K_GRIDS = {
    ("delete", "wn18rr"): (3, 5, 10),
    ("delete", "fb15k-237"): (5, 10, 30),
    ("delete", None): (3, 5, 10, 30),
    ("add", None): (15, 30, 50),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "synthetic"
    synthetic_seed: int = 0
    architectures: tuple = ARCHITECTURES
    mode: str = "delete"
    filter: str = "semantic"
    k: int = 5
    k_grid: tuple | None = None
    llm: str = "off"
    replay_transcript: str | None = None
    seeds: tuple = (0,)
    output_dir: str = "kgattack-out"
    epochs: int | None = None
    dim: int = 32
    provider: str = "hash"
    with_desc: bool = False
    centrality_h: int = 3
    hoa_h: int = 3
    hoa_epochs: int = 200
    isolated: bool = False
    max_targets: int | None = None
    workers: int = 4

    def __post_init__(self):
        for name in ("architectures", "seeds", "k_grid"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, tuple):
                object.__setattr__(self, name, tuple(value) if isinstance(value, (list, tuple)) else (value,))
        if isinstance(self.llm, bool):
            object.__setattr__(self, "llm", "http" if self.llm else "off")
        self.validate()

    @property
    def grid(self) -> tuple:
        if self.k_grid is not None:
            return self.k_grid
        name = Path(self.dataset).name.lower()
        key = next((d for m, d in K_GRIDS if m == self.mode and d and d in name), None)
        return K_GRIDS[(self.mode, key)]

    def validate(self):
        if self.mode not in ("delete", "add"):
            raise ConfigError(f"mode must be delete or add, got {self.mode!r}")
        if self.filter not in FILTERS:
            raise ConfigError(f"filter must be one of {FILTERS}, got {self.filter!r}")
        if self.mode == "delete" and self.filter == "centrality":
            raise ConfigError("the centrality filter proposes entities; use it with mode = add")
        if self.mode == "add" and self.filter in ("semantic", "hoa"):
            raise ConfigError("add mode takes entity candidates; use filter = centrality or random")
        bad = [a for a in self.architectures if a not in ARCHITECTURES]
        if bad or not self.architectures:
            raise ConfigError(f"unknown or empty architectures {bad}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.filter != "random" and self.k not in self.grid:
            raise ConfigError(f"k={self.k} not in grid {list(self.grid)}")
        if self.llm not in LLM_MODES:
            raise ConfigError(f"llm must be one of {LLM_MODES}")
        if self.llm == "replay" and not self.replay_transcript:
            raise ConfigError("llm = replay needs replay_transcript")
        if self.provider not in ("hash", "remote", "hoa"):
            raise ConfigError(f"unknown provider {self.provider!r}")

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("architectures", "seeds", "k_grid"):
            if out[key] is not None:
                out[key] = list(out[key])
        return out


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat; found tables {nested}")
    base = Path(path).parent
    for key in ("output_dir", "replay_transcript"):
        if key in raw and not Path(raw[key]).is_absolute():
            raw[key] = str(base / raw[key])
    if "dataset" in raw and raw["dataset"] != "synthetic" and not Path(raw["dataset"]).is_absolute():
        raw["dataset"] = str(base / raw["dataset"])
    return ExperimentConfig(**raw)


def load_kg(config: ExperimentConfig) -> KnowledgeGraph:
    if config.dataset == "synthetic":
        return generate(SyntheticConfig(seed=config.synthetic_seed))
    return load_dataset(config.dataset)


# ---------------------------------------------------------------------------
# random baseline


def target_rng(seed: int, tgt) -> np.random.Generator:
    return np.random.default_rng([int(seed), *map(int, tgt)])


def random_baseline(mode: str, tgt: Triple, kg: KnowledgeGraph, seed: int, max_tries: int = 1000) -> Perturbation:
    """Delete a uniform 1-hop neighbour, or replace a uniform side of one with a uniform entity."""
    tg = build_triple_graph(kg)
    ids = tg.neighbors_of(tgt)
    if len(ids) == 0:
        raise PerturbationError(f"no incident triples for {tuple(tgt)}")
    rng = target_rng(seed, tgt)
    t = tg.triple(int(ids[rng.integers(len(ids))]))
    if mode == "delete":
        return Perturbation("delete", t)
    if mode != "add":
        raise ValueError(f"unknown mode {mode!r}")
    for _ in range(max_tries):
        e = int(rng.integers(kg.num_entities))
        if rng.random() < 0.5:
            poison, side = Triple(e, t.r, t.o), "subject-replaced"
        else:
            poison, side = Triple(t.s, t.r, e), "object-replaced"
        if tuple(poison) not in kg.known:
            return Perturbation("add", poison, side, t)
    raise PerturbationError(f"no novel random replacement found for {tuple(tgt)}")


# ---------------------------------------------------------------------------
# records and reports


@dataclass
class AttackRecord:
    seed: int
    target: list
    candidates: list = field(default_factory=list)
    decision: dict | None = None
    perturbation: dict | None = None
    metrics: dict = field(default_factory=dict)
    failure: str | None = None


@dataclass
class AttackReport:
    config: dict
    status: str
    summary: dict
    runs: list
    records: list
    failures: list = field(default_factory=list)
    wall_clock: dict = field(default_factory=dict)

    def to_dict(self, with_timing: bool = False) -> dict:
        out = {
            "config": self.config,
            "status": self.status,
            "summary": self.summary,
            "runs": self.runs,
            "records": [asdict(r) for r in self.records],
            "failures": self.failures,
        }
        if with_timing:
            out["wall_clock"] = self.wall_clock
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "AttackReport":
        return cls(
            config=data["config"], status=data["status"], summary=data["summary"], runs=data["runs"],
            records=[AttackRecord(**r) for r in data["records"]], failures=data.get("failures", []),
            wall_clock=data.get("wall_clock", {}),
        )


def _metrics(per_target) -> dict:
    """Per-target-side micro averages; ``None`` when there is nothing to average."""
    if not per_target:
        return {m: None for m in METRICS}
    return {
        "MRR": float(np.mean([p.mrr for p in per_target])),
        "Hits@1": float(np.mean([p.hits(1) for p in per_target])),
        "Hits@10": float(np.mean([p.hits(10) for p in per_target])),
    }


def _delta(clean: dict, poisoned: dict) -> dict:
    return {m: None if clean[m] is None or poisoned[m] is None else poisoned[m] - clean[m] for m in METRICS}


def summarize_records(records, architectures) -> dict:
    """Micro-average over every (seed, target) record, per architecture."""
    out = {}
    for arch in architectures:
        rows = [r.metrics[arch] for r in records if arch in r.metrics]
        clean = {m: None for m in METRICS}
        poisoned = {m: None for m in METRICS}
        if rows:
            for side, dest in (("clean", clean), ("poisoned", poisoned)):
                for m in METRICS:
                    dest[m] = float(np.mean([row[side][m] for row in rows]))
        out[arch] = {"clean": clean, "poisoned": poisoned, "delta": _delta(clean, poisoned)}
    return out


def _rank_dict(p) -> dict:
    return {"rank_s": p.rank_s, "rank_o": p.rank_o, "MRR": p.mrr, "Hits@1": p.hits(1), "Hits@10": p.hits(10)}


# ---------------------------------------------------------------------------
# the pipeline


class _Context:
    """Per-seed state shared by the per-target attack workers."""

    def __init__(self, config: ExperimentConfig, kg: KnowledgeGraph, seed: int, client, transcript, clean_models):
        self.config = config
        self.kg = kg
        self.seed = seed
        self.client = client
        self.transcript = transcript
        self.tg = build_triple_graph(kg)
        self.provider = None
        self.hoa_head = None
        self.hoa_features = None
        self.clean_models = clean_models

    def ensure_provider(self):
        cfg = self.config
        if self.provider is not None:
            return self.provider
        if cfg.provider == "hoa" or cfg.filter == "hoa":
            self._ensure_hoa()
            self.provider = HoaFeatureProvider(self.hoa_head, self.hoa_features)
        elif cfg.provider == "remote":
            self.provider = RemoteEmbeddingProvider.from_env()
        else:
            self.provider = HashEmbeddingProvider()
        return self.provider

    def _ensure_hoa(self):
        if self.hoa_head is not None:
            return
        cfg = self.config
        transe = self.clean_models.get("transe")
        if transe is None:
            transe = train(self.kg, default_config("transe", seed=self.seed, dim=cfg.dim,
                                                   **({"epochs": cfg.epochs} if cfg.epochs else {})))
        self.hoa_features = hoa.features_from_model(self.kg, transe, cfg.hoa_h)
        self.hoa_head = hoa.train_hoa_classifier(self.kg, self.hoa_features,
                                                 hoa.HoaConfig(epochs=cfg.hoa_epochs, seed=self.seed))


def _attack_one(ctx: _Context, tgt: Triple) -> tuple[AttackRecord, Perturbation | None]:
    cfg, kg = ctx.config, ctx.kg
    rec = AttackRecord(seed=ctx.seed, target=list(map(int, tgt)))
    try:
        if cfg.filter == "random":
            pert = random_baseline(cfg.mode, tgt, kg, ctx.seed)
            rec.decision = {"index": None, "fallback_used": False, "failure": None, "explanation": ""}
        else:
            influential = None
            if cfg.mode == "delete":
                if cfg.filter == "hoa":
                    ctx._ensure_hoa()
                    cands = hoa.hoa_filter(ctx.tg, ctx.hoa_head, ctx.hoa_features, tgt, cfg.k)
                else:
                    cands = semantic_filter(ctx.tg, ctx.ensure_provider(), tgt, cfg.k, cfg.with_desc)
            else:
                influential = semantic_filter(ctx.tg, ctx.ensure_provider(), tgt, 1, cfg.with_desc).top()
                cands = centrality_filter(kg, tgt, cfg.centrality_h, cfg.k)
            rec.candidates = [_candidate_row(c) for c in cands]
            decision = decide(cfg.mode, tgt, cands, ctx.client, kg, influential=influential,
                              transcript=ctx.transcript)
            rec.decision = _decision_row(decision)
            pert = make_perturbation(cfg.mode, tgt, decision, cands, kg, influential)
        rec.perturbation = pert.to_dict()
        return rec, pert
    except Exception as exc:  # recorded per target; the run continues
        log.warning("attack on %s failed: %s", tuple(tgt), exc)
        rec.failure = f"{type(exc).__name__}: {exc}"
        return rec, None


def _candidate_row(c: Candidate) -> dict:
    item = list(map(int, c.item)) if isinstance(c.item, tuple) else int(c.item)
    return {"item": item, "score": float(c.score), "provenance": c.provenance}


def _decision_row(d: AttackDecision) -> dict:
    return {"index": d.index, "fallback_used": d.fallback_used, "failure": d.failure, "explanation": d.explanation}


def _train_all(kg, config: ExperimentConfig, seed: int) -> dict:
    models = {}
    for arch in config.architectures:
        overrides = {"seed": seed, "dim": config.dim}
        if config.epochs is not None:
            overrides["epochs"] = config.epochs
        models[arch] = train(kg, default_config(arch, **overrides))
    return models


def make_client(config: ExperimentConfig):
    if config.llm == "off":
        return None
    if config.llm == "replay":
        return ReplayClient.from_file(config.replay_transcript)
    return HttpChatClient(LlmConfig.from_env())


def run_experiment(config: ExperimentConfig, kg: KnowledgeGraph | None = None, client=None,
                   save_checkpoints: bool = True) -> AttackReport:
    """Run every seed; per-target or per-stage errors give a partial report instead of raising."""
    kg = kg if kg is not None else load_kg(config)
    client = client if client is not None else make_client(config)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    transcript = Transcript(out_dir / "transcript.jsonl") if client is not None else None
    runs, records, failures = [], [], []
    timing: dict = {}
    t_all = time.perf_counter()

    for seed in config.seeds:
        t_seed = time.perf_counter()
        stage = "train-clean"
        run = {"seed": seed, "targets": [], "n_perturbations": 0, "train_size": {}, "architectures": {}}
        try:
            clean = _train_all(kg, config, seed)
            if save_checkpoints:
                for arch, model in clean.items():
                    save_model(model, out_dir / f"seed{seed}" / f"clean-{arch}.ckpt")
            stage = "select-targets"
            targets = select_attack_targets(list(clean.values()), kg)
            if config.max_targets is not None:
                targets = targets[:config.max_targets]
            run["targets"] = [list(map(int, t)) for t in targets]
            _write_targets(out_dir / f"seed{seed}" / "targets.tsv", targets)

            stage = "attack"
            ctx = _Context(config, kg, seed, client, transcript, clean)
            if config.filter != "random":
                ctx.ensure_provider()  # before the worker pool, so HoA training happens once
            if config.workers > 1 and len(targets) > 1:
                with ThreadPoolExecutor(config.workers) as pool:
                    results = list(pool.map(lambda t: _attack_one(ctx, t), targets))
            else:
                results = [_attack_one(ctx, t) for t in targets]
            seed_records = [r for r, _ in results]
            perts = [p for _, p in results if p is not None]
            run["n_perturbations"] = len(perts)

            stage = "retrain"
            eval_set = targets if targets else kg.triples("test")
            clean_ranks = {a: rank_targets(m, kg, eval_set) for a, m in clean.items()}
            if config.isolated and targets:
                poisoned_ranks = _isolated(kg, config, seed, targets, results)
                poisoned_kg = apply_perturbations(kg, perts)
            else:
                poisoned_kg = apply_perturbations(kg, perts)
                poisoned = _train_all(poisoned_kg, config, seed) if perts else clean
                poisoned_ranks = {a: rank_targets(m, poisoned_kg, eval_set) for a, m in poisoned.items()}
            run["train_size"] = {"clean": int(len(kg.train)), "poisoned": int(len(poisoned_kg.train))}

            stage = "evaluate"
            for arch in config.architectures:
                c, p = _metrics(clean_ranks[arch]), _metrics(poisoned_ranks[arch])
                run["architectures"][arch] = {"clean": c, "poisoned": p, "delta": _delta(c, p)}
                for i, rec in enumerate(seed_records):
                    rec.metrics[arch] = {"clean": _rank_dict(clean_ranks[arch][i]),
                                         "poisoned": _rank_dict(poisoned_ranks[arch][i])}
            records.extend(seed_records)
            for rec in seed_records:
                if rec.failure:
                    failures.append({"seed": seed, "stage": "attack", "target": rec.target, "error": rec.failure})
        except Exception as exc:
            log.error("seed %s failed during %s: %s", seed, stage, exc)
            run["failed_stage"] = stage
            failures.append({"seed": seed, "stage": stage, "target": None, "error": f"{type(exc).__name__}: {exc}"})
        runs.append(run)
        timing[f"seed{seed}"] = time.perf_counter() - t_seed

    timing["total"] = time.perf_counter() - t_all
    return AttackReport(
        config=config.to_dict(),
        status="partial" if failures else "complete",
        summary=summarize_records(records, config.architectures),
        runs=runs,
        records=records,
        failures=failures,
        wall_clock=timing,
    )


def _isolated(kg, config, seed, targets, results) -> dict:
    """One retrain per target with only that target's perturbation."""
    ranks = {a: [] for a in config.architectures}
    for tgt, (_, pert) in zip(targets, results):
        pkg = apply_perturbations(kg, [pert] if pert is not None else [])
        models = _train_all(pkg, config, seed)
        for arch, model in models.items():
            ranks[arch].extend(rank_targets(model, pkg, [tgt]))
    return ranks


def _write_targets(path: Path, targets) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{s}\t{r}\t{o}\n" for s, r, o in targets))


def read_targets(path) -> list[Triple]:
    rows = [line.split("\t") for line in Path(path).read_text().splitlines() if line.strip()]
    return [Triple(*map(int, row)) for row in rows]
