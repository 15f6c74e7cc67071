"""Prompt assembly, chat-completion client, answer parsing and perturbation construction."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import requests

from ._http import BudgetExceeded, TransportError, post_json
from .candidates import CandidateSet
from .kg import KnowledgeGraph, Triple
from .semantic import verbalize

log = logging.getLogger(__name__)

MODES = ("delete", "add")
SECTIONS = ("instruction", "example", "candidates", "reference")
REQUIRED_PLACEHOLDERS = ("target_triple", "influence_triple_choice", "entity_desc")
_SECTION = re.compile(r"^\[(\w+)\]\s*$")


# ---------------------------------------------------------------------------
# prompts


@dataclass(frozen=True)
class PromptParts:
    I: str
    E: str
    C: str
    R: str

    def render(self) -> str:
        return "\n\n".join((self.I, self.E, self.C, self.R))

    @property
    def tokens_estimate(self) -> int:
        return math.ceil(len(self.render()) / 4)


@dataclass(frozen=True)
class Template:
    sections: dict
    source: str = ""

    @classmethod
    def parse(cls, text: str, source: str = "") -> "Template":
        sections: dict[str, list[str]] = {}
        current = None
        for line in text.splitlines():
            m = _SECTION.match(line)
            if m:
                current = m.group(1).lower()
                if current not in SECTIONS:
                    raise ValueError(f"{source}: unknown template section [{current}]")
                sections[current] = []
            elif current is not None:
                sections[current].append(line)
        missing = [s for s in SECTIONS if s not in sections]
        if missing:
            raise ValueError(f"{source}: template lacks section(s) {missing}")
        return cls({k: "\n".join(v).strip("\n") for k, v in sections.items()}, source)

    def placeholders(self) -> set[str]:
        return set(re.findall(r"\{(\w+)\}", "\n".join(self.sections.values())))


def load_template(template) -> Template:
    """``template`` is a mode name (packaged template), a path, or a Template."""
    if isinstance(template, Template):
        return template
    if template in MODES:
        text = resources.files("kgattack.templates").joinpath(f"{template}.txt").read_text(encoding="utf-8")
        return Template.parse(text, f"<{template}>")
    path = Path(template)
    return Template.parse(path.read_text(encoding="utf-8"), str(path))


def _bare(t, kg) -> str:
    return verbalize(t, kg)[1:-1]


def entity_descriptions(entities, kg: KnowledgeGraph) -> str:
    parts = []
    for e in dict.fromkeys(int(x) for x in entities):
        desc = kg.describe(e).strip()
        label = kg.entity_labels[e]
        parts.append(f"{label}: {desc}" if desc else label)
    return "; ".join(parts)


def build_prompt(mode: str, tgt: Triple, candidates: CandidateSet, kg: KnowledgeGraph, template=None,
                 influential: Triple | None = None, max_candidates: int | None = None) -> PromptParts:
    """Fill the template for one target.

    Delete mode lists candidate triples; add mode lists candidate entities
    and needs the influential triple whose endpoint will be replaced.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    n = len(candidates)
    if n < 1:
        raise ValueError("no candidates to choose from")
    if max_candidates is not None and n > max_candidates:
        raise ValueError(f"{n} candidates exceed budget {max_candidates}")
    tpl = load_template(template or mode)
    present = tpl.placeholders()
    for name in REQUIRED_PLACEHOLDERS + (("influence_triple",) if mode == "add" else ()):
        if name not in present:
            raise ValueError(f"template {tpl.source} is missing placeholder {{{name}}}")

    ents = [tgt[0], tgt[2]]
    if mode == "delete":
        lines = [f"{i}. {verbalize(c.item, kg)}" for i, c in enumerate(candidates, 1)]
        for c in candidates:
            ents += [c.item[0], c.item[2]]
    else:
        if influential is None:
            raise ValueError("add mode needs the influential triple")
        lines = [f"{i}. {kg.entity_labels[int(c.item)]}" for i, c in enumerate(candidates, 1)]
        ents += [influential[0], influential[2]] + [int(c.item) for c in candidates]
    values = {
        "target_triple": _bare(tgt, kg),
        "influence_triple_choice": "\n".join(lines),
        "entity_desc": entity_descriptions(ents, kg),
        "influence_triple": _bare(influential, kg) if influential is not None else "",
    }

    def fill(text):
        return re.sub(r"\{(\w+)\}", lambda m: values.get(m.group(1), m.group(0)), text)

    s = tpl.sections
    return PromptParts(fill(s["instruction"]), fill(s["example"]), fill(s["candidates"]), fill(s["reference"]))


# ---------------------------------------------------------------------------
# LLM access


class LlmError(RuntimeError):
    pass


class EmptyCompletion(LlmError):
    pass


class LlmTimeout(LlmError):
    def __init__(self, elapsed: float, budget: float):
        super().__init__(f"LLM call exceeded its {budget:.1f}s budget after {elapsed:.2f}s")
        self.elapsed = elapsed


@dataclass(frozen=True)
class LlmConfig:
    endpoint: str | None = None
    model: str = ""
    api_key: str | None = None
    timeout_s: float = 120.0
    temperature: float = 0.0
    max_retries: int = 3
    backoff_base: float = 1.0
    max_tokens: int | None = None
    extra_body: dict = field(default_factory=dict)

    @classmethod
    def from_env(cls, **overrides) -> "LlmConfig":
        env = os.environ
        base = dict(
            endpoint=env.get("LLM_ENDPOINT") or None,
            model=env.get("LLM_MODEL", ""),
            api_key=env.get("LLM_API_KEY") or None,
        )
        if env.get("LLM_TIMEOUT_S"):
            base["timeout_s"] = float(env["LLM_TIMEOUT_S"])
        base.update(overrides)
        return cls(**base)

    @property
    def url(self) -> str:
        if not self.endpoint:
            raise LlmError("LLM endpoint is not configured (set LLM_ENDPOINT)")
        url = self.endpoint.rstrip("/")
        return url if url.endswith("completions") else url + "/chat/completions"


@dataclass(frozen=True)
class LlmReply:
    text: str
    latency_s: float = 0.0
    retries: int = 0
    usage: dict | None = None


class HttpChatClient:
    """OpenAI-style chat-completion client."""

    def __init__(self, config: LlmConfig, session: requests.Session | None = None):
        self.config = config
        self.session = session

    def complete(self, prompt: str) -> LlmReply:
        cfg = self.config
        payload = {"model": cfg.model, "messages": [{"role": "user", "content": prompt}],
                   "temperature": cfg.temperature, **cfg.extra_body}
        if cfg.max_tokens is not None:
            payload["max_tokens"] = cfg.max_tokens
        headers = {"Authorization": f"Bearer {cfg.api_key}"} if cfg.api_key else {}
        try:
            res = post_json(cfg.url, payload, headers, attempts=cfg.max_retries + 1,
                            backoff_base=cfg.backoff_base, budget_s=cfg.timeout_s, session=self.session)
        except BudgetExceeded as exc:
            raise LlmTimeout(exc.elapsed, exc.budget) from exc
        except TransportError as exc:
            raise LlmError(str(exc)) from exc
        if res.retries:
            log.info("LLM call succeeded after %d retries", res.retries)
        try:
            text = res.body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise LlmError(f"malformed chat reply: {str(res.body)[:200]}") from exc
        if not isinstance(text, str) or not text.strip():
            raise EmptyCompletion("LLM returned an empty completion")
        return LlmReply(text, res.latency_s, res.retries, res.body.get("usage"))


def query_llm(prompt: str, config: LlmConfig) -> str:
    return HttpChatClient(config).complete(prompt).text


def prompt_key(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class Transcript:
    """Append-only JSONL log of prompts, responses and decisions."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def append(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True, ensure_ascii=False)
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    @staticmethod
    def read(path) -> list[dict]:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


class ReplayClient:
    """Serves responses recorded in a transcript, matched by prompt hash."""

    def __init__(self, records):
        self.responses: dict[str, str] = {}
        for rec in records:
            if rec.get("response") is not None:
                self.responses.setdefault(rec["prompt_sha256"], rec["response"])

    @classmethod
    def from_file(cls, path) -> "ReplayClient":
        return cls(Transcript.read(path))

    def complete(self, prompt: str) -> LlmReply:
        try:
            return LlmReply(self.responses[prompt_key(prompt)])
        except KeyError:
            raise LlmError("no recorded response for this prompt") from None


class ScriptedClient:
    """Returns canned responses (a string, a list cycled in order, or a callable)."""

    def __init__(self, responses):
        self._responses = responses
        self._i = 0
        self._lock = threading.Lock()

    def complete(self, prompt: str) -> LlmReply:
        if callable(self._responses):
            return LlmReply(self._responses(prompt))
        if isinstance(self._responses, str):
            return LlmReply(self._responses)
        with self._lock:
            text = self._responses[self._i % len(self._responses)]
            self._i += 1
        return LlmReply(text)


# ---------------------------------------------------------------------------
# decisions


class ParseFailure(ValueError):
    pass


class RangeFailure(ValueError):
    def __init__(self, value, n: int):
        super().__init__(f"answer {value} outside 1..{n}")
        self.value = value


# "answer" (optionally quoted) then ':' or '=', then an optionally quoted run of ASCII digits
ANSWER_PATTERN = re.compile(r"""["'“”]?answer["'“”]?\s*[:=]\s*["'“”]?\s*([0-9]+)""",
                            re.IGNORECASE | re.ASCII)


def parse_decision(response: str, n: int) -> int:
    """Index from the last ``"answer": "<int>"`` occurrence, validated against ``1..n``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not isinstance(response, str):
        raise ParseFailure(f"response is {type(response).__name__}, not str")
    matches = ANSWER_PATTERN.findall(response)
    if not matches:
        raise ParseFailure("no answer field found")
    digits = matches[-1]
    if len(digits.lstrip("0")) > 9:
        raise RangeFailure(digits[:12] + "...", n)
    value = int(digits)
    if not 1 <= value <= n:
        raise RangeFailure(value, n)
    return value


@dataclass(frozen=True)
class AttackDecision:
    index: int
    item: object
    explanation: str
    fallback_used: bool
    failure: str | None = None
    prompt_tokens: int = 0
    latency_s: float = 0.0
    retries: int = 0


def decide(mode: str, tgt: Triple, candidates: CandidateSet, client=None, kg: KnowledgeGraph | None = None,
           template=None, influential: Triple | None = None, transcript: Transcript | None = None,
           allow_fallback: bool = True) -> AttackDecision:
    """Ask the LLM to choose among ``candidates``; fall back to the filter's Top-1.

    ``client=None`` means the LLM is off and the Top-1 candidate is used.
    """
    if len(candidates) == 0:
        raise ValueError("no candidates to choose from")
    top = candidates[0].item
    if client is None:
        return AttackDecision(1, top, "", True, "llm disabled")
    if kg is None:
        raise ValueError("kg is required when the LLM is enabled")
    parts = build_prompt(mode, tgt, candidates, kg, template, influential)
    prompt = parts.render()
    record = {"mode": mode, "target": list(map(int, tgt)), "prompt_sha256": prompt_key(prompt), "prompt": prompt}
    reply = None
    try:
        reply = client.complete(prompt)
        index = parse_decision(reply.text, len(candidates))
        decision = AttackDecision(index, candidates[index - 1].item, reply.text, False, None,
                                  parts.tokens_estimate, reply.latency_s, reply.retries)
    except (ParseFailure, RangeFailure) as exc:
        decision = AttackDecision(1, top, reply.text, True, f"{type(exc).__name__}: {exc}",
                                  parts.tokens_estimate, reply.latency_s, reply.retries)
    except LlmError as exc:
        if not allow_fallback:
            raise
        decision = AttackDecision(1, top, "", True, f"{type(exc).__name__}: {exc}", parts.tokens_estimate)
    if decision.fallback_used:
        log.info("fallback to Top-1 for %s: %s", tuple(tgt), decision.failure)
    if transcript is not None:
        item = decision.item
        record.update(
            response=reply.text if reply else None,
            index=decision.index,
            item=list(map(int, item)) if isinstance(item, tuple) else int(item),
            fallback_used=decision.fallback_used,
            failure=decision.failure,
            usage=reply.usage if reply else None,
            latency_s=round(decision.latency_s, 6),
            retries=decision.retries,
        )
        transcript.append(record)
    return decision


# ---------------------------------------------------------------------------
# perturbations


class PerturbationError(ValueError):
    pass


@dataclass(frozen=True)
class Perturbation:
    kind: str
    triple: Triple
    side: str | None = None
    source: Triple | None = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "triple": list(map(int, self.triple)), "side": self.side,
                "source": list(map(int, self.source)) if self.source is not None else None}


def replacement_side(t_if: Triple, tgt: Triple) -> str:
    """Replace the endpoint of ``t_if`` not shared with ``tgt``; object when both or neither are."""
    ends = {tgt[0], tgt[2]}
    s_shared, o_shared = t_if[0] in ends, t_if[2] in ends
    if o_shared and not s_shared:
        return "subject-replaced"
    return "object-replaced"


def _poison(t_if: Triple, side: str, e: int) -> Triple:
    s, r, o = t_if
    return Triple(e, r, o) if side == "subject-replaced" else Triple(s, r, e)


def make_perturbation(mode: str, tgt: Triple, decision: AttackDecision, candidates: CandidateSet,
                      kg: KnowledgeGraph, influential: Triple | None = None) -> Perturbation:
    if mode == "delete":
        t = Triple(*map(int, decision.item))
        if tuple(t) not in kg.train_set:
            raise PerturbationError(f"{tuple(t)} is not a train triple")
        if tuple(t) == tuple(tgt):
            raise PerturbationError("cannot delete the target itself")
        return Perturbation("delete", t)
    if mode != "add":
        raise ValueError(f"mode must be one of {MODES}")
    if influential is None:
        raise PerturbationError("add mode needs the influential triple")
    t_if = Triple(*map(int, influential))
    first = replacement_side(t_if, tgt)
    second = "object-replaced" if first == "subject-replaced" else "subject-replaced"
    ents = [int(c.item) for c in candidates]
    start = decision.index - 1
    for e in ents[start:] + ents[:start]:
        for side in (first, second):
            poison = _poison(t_if, side, e)
            if tuple(poison) not in kg.known:
                if e != ents[start] or side != first:
                    log.info("add poison for %s moved to %s/%s", tuple(tgt), e, side)
                return Perturbation("add", poison, side, t_if)
    raise PerturbationError(f"every candidate entity yields an existing triple for {tuple(tgt)}")


def apply_perturbations(kg: KnowledgeGraph, perturbations) -> KnowledgeGraph:
    """Poisoned copy of ``kg``: deletions removed from and additions appended to train."""
    deletes = {tuple(p.triple) for p in perturbations if p.kind == "delete"}
    adds = list(dict.fromkeys(tuple(p.triple) for p in perturbations if p.kind == "add"))
    heldout = set(map(tuple, kg.valid.tolist())) | set(map(tuple, kg.test.tolist()))
    for t in adds:
        if t in kg.known:
            raise PerturbationError(f"added triple {t} already exists")
    for t in deletes:
        if t in heldout or t not in kg.train_set:
            raise PerturbationError(f"deleted triple {t} is not a train triple")
    keep = [t for t in map(tuple, kg.train.tolist()) if t not in deletes]
    return kg.with_train(keep + adds)
