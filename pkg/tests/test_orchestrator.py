import logging
import re

import pytest
from hypothesis import given, settings, strategies as st

from kgattack.candidates import Candidate, CandidateSet
from kgattack.kg import Triple
from kgattack.orchestrator import (
    AttackDecision, EmptyCompletion, LlmConfig, LlmError, LlmTimeout, ParseFailure, PerturbationError,
    RangeFailure, ReplayClient, ScriptedClient, Template, Transcript, HttpChatClient, apply_perturbations,
    build_prompt, decide, load_template, make_perturbation, parse_decision, prompt_key, query_llm,
    replacement_side,
)

from _mockhttp import MockServer
from _util import make_kg


@pytest.fixture
def phone_kg():
    rows = [("call", "verb group", "telephone"), ("call in", "hypernym", "telephone"),
            ("telephone", "hypernym", "telecommunicate"), ("telephone", "derivationally related form", "telephony"),
            ("telephony", "derivationally related form", "telephone"), ("radio", "hypernym", "medium"),
            ("silence", "hypernym", "quiet")]
    return make_kg(rows, test=[("telephone", "verb group", "call")],
                   descriptions={"telephone": "get or try to get into communication with someone by phone",
                                 "call": "make a telephone call"})


def triple_candidates(kg, tgt, n=None):
    rows = kg.triples("train")[: n or 5]
    return CandidateSet(tgt, [Candidate(t, 1.0 - 0.1 * i, "test") for i, t in enumerate(rows)], bound=len(rows))


def entity_candidates(kg, tgt, names):
    return CandidateSet(tgt, [Candidate(kg.entity_id(x), 1.0 - 0.1 * i, "test") for i, x in enumerate(names)],
                        bound=len(names))


# ---------------------------------------------------------------------------
# prompts


def test_prompt_layout(phone_kg):
    tgt = phone_kg.triples("test")[0]
    parts = build_prompt("delete", tgt, triple_candidates(phone_kg, tgt), phone_kg)
    assert "(telephone, verb group, call)" in parts.E
    assert "(call, verb group, telephone)" in parts.E
    assert parts.E.rstrip().endswith("Target triple: (telephone, verb group, call). Candidate triples:")
    lines = parts.C.splitlines()
    assert [re.match(r"(\d+)\. ", x).group(1) for x in lines] == ["1", "2", "3", "4", "5"]
    assert lines[0] == "1. (call, verb group, telephone)"
    assert parts.render() == "\n\n".join([parts.I, parts.E, parts.C, parts.R])
    assert parts.render().index(parts.I) < parts.render().index(parts.E) < parts.render().index(parts.C)
    assert "telephone: get or try to get into communication" in parts.R
    assert parts.tokens_estimate == -(-len(parts.render()) // 4)


def test_prompt_is_deterministic(phone_kg):
    tgt = phone_kg.triples("test")[0]
    cands = triple_candidates(phone_kg, tgt)
    assert build_prompt("delete", tgt, cands, phone_kg).render() == build_prompt("delete", tgt, cands, phone_kg).render()


def test_empty_descriptions_render_labels():
    kg = make_kg([("a", "r", "b"), ("b", "r", "c")], test=[("a", "q", "c")])
    tgt = kg.triples("test")[0]
    parts = build_prompt("delete", tgt, triple_candidates(kg, tgt, 2), kg)
    assert "Entity descriptions: a; c; b." in parts.R


def test_add_prompt_lists_entities(phone_kg):
    tgt = phone_kg.triples("test")[0]
    cands = entity_candidates(phone_kg, tgt, ["silence", "radio", "medium"])
    parts = build_prompt("add", tgt, cands, phone_kg, influential=phone_kg.triples("train")[0])
    assert parts.C.splitlines() == ["1. silence", "2. radio", "3. medium"]
    assert "Influential triple: (call, verb group, telephone)" in parts.E
    with pytest.raises(ValueError, match="influential"):
        build_prompt("add", tgt, cands, phone_kg)


def test_missing_placeholder_is_named(tmp_path, phone_kg):
    path = tmp_path / "t.txt"
    path.write_text("[instruction]\nhi\n[example]\n{target_triple}\n[candidates]\n{influence_triple_choice}\n"
                    "[reference]\nnothing here\n")
    tgt = phone_kg.triples("test")[0]
    with pytest.raises(ValueError, match=r"\{entity_desc\}"):
        build_prompt("delete", tgt, triple_candidates(phone_kg, tgt), phone_kg, template=path)


def test_custom_template_and_sections(tmp_path, phone_kg):
    path = tmp_path / "t.txt"
    path.write_text("[instruction]\nI\n[example]\nT={target_triple}\n[candidates]\n{influence_triple_choice}\n"
                    "[reference]\nD={entity_desc}\n")
    tgt = phone_kg.triples("test")[0]
    parts = build_prompt("delete", tgt, triple_candidates(phone_kg, tgt, 1), phone_kg, template=path)
    assert parts.render().startswith("I\n\nT=telephone, verb group, call\n\n1. (call, verb group, telephone)\n\nD=")
    with pytest.raises(ValueError, match="section"):
        Template.parse("[instruction]\nx\n[bogus]\ny\n")
    assert {"target_triple", "influence_triple_choice", "entity_desc"} <= load_template("delete").placeholders()


def test_prompt_preconditions(phone_kg):
    tgt = phone_kg.triples("test")[0]
    with pytest.raises(ValueError):
        build_prompt("delete", tgt, CandidateSet(tgt, [], bound=3), phone_kg)
    with pytest.raises(ValueError):
        build_prompt("delete", tgt, triple_candidates(phone_kg, tgt), phone_kg, max_candidates=3)
    with pytest.raises(ValueError):
        build_prompt("swap", tgt, triple_candidates(phone_kg, tgt), phone_kg)


# ---------------------------------------------------------------------------
# parsing

CANNED = ('The target is (telephone, verb group, call). Option 1 mirrors it, which looks like the '
          'strongest support, but the hypernym link in option 3 anchors the subject more broadly. '
          '"answer": "3".')


def test_parse_canned_response():
    assert parse_decision(CANNED, 5) == 3


@pytest.mark.parametrize("text,n,expect", [
    ('"answer": "1" ... on reflection "answer": "2"', 5, 2),
    ("answer: 3", 5, 3),
    ("ANSWER = 4", 5, 4),
    ("{'answer': '2'}", 2, 2),
    ("“answer”: “5”", 5, 5),
    ('"answer":"01"', 3, 1),
])
def test_parse_variants(text, n, expect):
    assert parse_decision(text, n) == expect


@pytest.mark.parametrize("text,n,exc", [
    ('answer: "7"', 5, RangeFailure),
    ('"answer": "0"', 5, RangeFailure),
    ('"answer": "99999999999999999999"', 5, RangeFailure),
    ("I pick the first one", 5, ParseFailure),
    ('"answer": "two"', 5, ParseFailure),
    ("", 1, ParseFailure),
    ('"answer": "٣"', 5, ParseFailure),
])
def test_parse_failures(text, n, exc):
    with pytest.raises(exc):
        parse_decision(text, n)


def test_parse_rejects_bad_n():
    with pytest.raises(ValueError):
        parse_decision('"answer": "1"', 0)


@settings(max_examples=2000, deadline=None)
@given(st.text(), st.integers(1, 50))
def test_parse_is_total(text, n):
    try:
        value = parse_decision(text, n)
    except (ParseFailure, RangeFailure):
        return
    assert 1 <= value <= n


@settings(max_examples=300, deadline=None)
@given(st.text(), st.integers(1, 9), st.text(alphabet=st.characters(blacklist_categories=("Nd",)), max_size=20))
def test_parse_finds_trailing_answer(prefix, k, tail):
    tail = re.sub(r"(?i)answer", "", tail)
    assert parse_decision(f'{prefix} "answer": "{k}"{tail}', 9) == k


# ---------------------------------------------------------------------------
# LLM client


def chat_reply(text):
    return {"choices": [{"message": {"role": "assistant", "content": text}}], "usage": {"total_tokens": 7}}


def test_echoes_canned_response():
    with MockServer(lambda body, n: (200, chat_reply(CANNED))) as srv:
        cfg = LlmConfig(endpoint=srv.url + "/v1", model="mock", api_key="sk")
        assert query_llm("hello", cfg) == CANNED
        reply = HttpChatClient(cfg).complete("hello")
    req = srv.requests[0]
    assert req["path"] == "/v1/chat/completions"
    assert req["body"]["messages"] == [{"role": "user", "content": "hello"}]
    assert req["body"]["temperature"] == 0.0 and req["body"]["model"] == "mock"
    assert reply.usage == {"total_tokens": 7} and reply.retries == 0


def test_retries_after_three_503s(caplog):
    def script(body, n):
        return (503, {"error": "busy"}) if n < 3 else (200, chat_reply('"answer": "2"'))

    with MockServer(script) as srv, caplog.at_level(logging.INFO):
        reply = HttpChatClient(LlmConfig(endpoint=srv.url, backoff_base=0.01)).complete("x")
    assert reply.text == '"answer": "2"' and reply.retries == 3
    assert len(srv.requests) == 4
    assert "after 3 retries" in caplog.text


def test_timeout_budget():
    with MockServer(lambda body, n: (200, chat_reply("late"), 2.0)) as srv:
        with pytest.raises(LlmTimeout) as info:
            HttpChatClient(LlmConfig(endpoint=srv.url, timeout_s=0.3, backoff_base=0.01)).complete("x")
    assert info.value.elapsed >= 0.3
    assert "0.3" in str(info.value)


def test_empty_completion_and_client_errors():
    with MockServer(lambda body, n: (200, chat_reply("   "))) as srv:
        with pytest.raises(EmptyCompletion):
            query_llm("x", LlmConfig(endpoint=srv.url))
    with MockServer(lambda body, n: (401, {"error": "no"})) as srv:
        with pytest.raises(LlmError):
            query_llm("x", LlmConfig(endpoint=srv.url, backoff_base=0.01))
    assert len(srv.requests) == 1
    with pytest.raises(LlmError):
        query_llm("x", LlmConfig())


def test_config_from_env(monkeypatch):
    monkeypatch.setenv("LLM_ENDPOINT", "http://h:1/v1/")
    monkeypatch.setenv("LLM_MODEL", "m")
    monkeypatch.setenv("LLM_TIMEOUT_S", "5")
    cfg = LlmConfig.from_env()
    assert cfg.url == "http://h:1/v1/chat/completions" and cfg.timeout_s == 5.0 and cfg.model == "m"


# ---------------------------------------------------------------------------
# decisions and perturbations


def test_decide_llm_off(phone_kg):
    tgt = phone_kg.triples("test")[0]
    cands = triple_candidates(phone_kg, tgt)
    d = decide("delete", tgt, cands)
    assert d.index == 1 and d.item == cands[0].item and d.fallback_used


def test_decide_follows_answer(phone_kg):
    tgt = phone_kg.triples("test")[0]
    cands = triple_candidates(phone_kg, tgt)
    d = decide("delete", tgt, cands, ScriptedClient('"answer": "2"'), phone_kg)
    assert d.index == 2 and d.item == cands[1].item and not d.fallback_used
    assert d.prompt_tokens > 0


@pytest.mark.parametrize("reply", ["no idea", '"answer": "9"'])
def test_decide_falls_back_on_garbage(phone_kg, reply):
    tgt = phone_kg.triples("test")[0]
    cands = triple_candidates(phone_kg, tgt)
    d = decide("delete", tgt, cands, ScriptedClient(reply), phone_kg)
    assert d.index == 1 and d.item == cands[0].item and d.fallback_used
    assert d.explanation == reply and d.failure


def test_decide_llm_error_fallback_policy(phone_kg):
    tgt = phone_kg.triples("test")[0]
    cands = triple_candidates(phone_kg, tgt)
    replay = ReplayClient([])
    assert decide("delete", tgt, cands, replay, phone_kg).fallback_used
    with pytest.raises(LlmError):
        decide("delete", tgt, cands, replay, phone_kg, allow_fallback=False)


def test_decision_always_in_candidate_set(phone_kg):
    tgt = phone_kg.triples("test")[0]
    cands = triple_candidates(phone_kg, tgt, 3)
    for reply in ['"answer": "1"', '"answer": "3"', '"answer": "4"', "(radio, hypernym, medium)"]:
        d = decide("delete", tgt, cands, ScriptedClient(reply), phone_kg)
        assert d.item in [c.item for c in cands]


def test_transcript_and_replay(tmp_path, phone_kg):
    tgt = phone_kg.triples("test")[0]
    cands = triple_candidates(phone_kg, tgt)
    log_path = tmp_path / "t.jsonl"
    decide("delete", tgt, cands, ScriptedClient(CANNED), phone_kg, transcript=Transcript(log_path))
    (rec,) = Transcript.read(log_path)
    assert rec["response"] == CANNED and rec["index"] == 3 and rec["fallback_used"] is False
    assert rec["prompt_sha256"] == prompt_key(rec["prompt"])
    assert rec["item"] == list(cands[2].item)
    again = decide("delete", tgt, cands, ReplayClient.from_file(log_path), phone_kg)
    assert again.index == 3


def test_delete_inverse_triple():
    kg = make_kg([("pyrexia", "drf", "feverish"), ("pyrexia", "hypernym", "symptom")],
                 test=[("feverish", "drf", "pyrexia")])
    tgt = kg.triples("test")[0]
    cands = triple_candidates(kg, tgt, 2)
    p = make_perturbation("delete", tgt, decide("delete", tgt, cands), cands, kg)
    assert p.kind == "delete"
    assert p.triple == Triple(kg.entity_id("pyrexia"), kg.relation_id("drf"), kg.entity_id("feverish"))


def side_kg():
    rows = [("pyrexia", "drf", "feverish"), ("unfitness", "hypernym", "condition"),
            ("hot", "similar", "feverish"), ("malaise", "hypernym", "condition")]
    return make_kg(rows, test=[("ill", "also", "feverish")])


def test_replacement_side_rule():
    kg = side_kg()
    e = kg.entity_id
    tgt = Triple(e("ill"), 0, e("feverish"))
    assert replacement_side(Triple(e("pyrexia"), 0, e("feverish")), tgt) == "subject-replaced"
    assert replacement_side(Triple(e("ill"), 0, e("hot")), tgt) == "object-replaced"
    assert replacement_side(Triple(e("ill"), 0, e("feverish")), tgt) == "object-replaced"
    assert replacement_side(Triple(e("hot"), 0, e("pyrexia")), tgt) == "object-replaced"


def test_add_replaces_unshared_endpoint():
    kg = side_kg()
    tgt = kg.triples("test")[0]
    t_if = kg.triples("train")[0]
    cands = entity_candidates(kg, tgt, ["unfitness", "malaise"])
    d = AttackDecision(1, cands[0].item, "", False)
    p = make_perturbation("add", tgt, d, cands, kg, influential=t_if)
    assert p.side == "subject-replaced"
    assert p.triple == Triple(kg.entity_id("unfitness"), t_if.r, kg.entity_id("feverish"))
    assert tuple(p.triple) not in kg.known and p.source == t_if


def test_add_tries_alternate_side_then_next_entity():
    rows = [("pyrexia", "drf", "feverish"), ("unfitness", "drf", "feverish"), ("malaise", "x", "y")]
    kg = make_kg(rows, test=[("ill", "also", "feverish")])
    tgt = kg.triples("test")[0]
    t_if = kg.triples("train")[0]
    cands = entity_candidates(kg, tgt, ["unfitness", "malaise"])
    p = make_perturbation("add", tgt, AttackDecision(1, cands[0].item, "", False), cands, kg, influential=t_if)
    assert p.side == "object-replaced"
    assert p.triple == Triple(kg.entity_id("pyrexia"), t_if.r, kg.entity_id("unfitness"))

    rows += [("pyrexia", "drf", "unfitness")]
    kg = make_kg(rows, test=[("ill", "also", "feverish")])
    p = make_perturbation("add", tgt, AttackDecision(1, cands[0].item, "", False), cands, kg, influential=t_if)
    assert p.triple == Triple(kg.entity_id("malaise"), t_if.r, kg.entity_id("feverish"))


def test_add_exhausted_raises():
    kg = make_kg([("a", "r", "b"), ("c", "r", "b"), ("a", "r", "c")], test=[("z", "q", "b")])
    tgt = kg.triples("test")[0]
    cands = entity_candidates(kg, tgt, ["c"])
    with pytest.raises(PerturbationError):
        make_perturbation("add", tgt, AttackDecision(1, cands[0].item, "", False), cands, kg,
                          influential=kg.triples("train")[0])


def test_delete_must_be_train_triple(phone_kg):
    tgt = phone_kg.triples("test")[0]
    cands = CandidateSet(tgt, [Candidate(tgt, 1.0, "x")], bound=1)
    with pytest.raises(PerturbationError):
        make_perturbation("delete", tgt, decide("delete", tgt, cands), cands, phone_kg)


def test_apply_perturbations(phone_kg):
    tgt = phone_kg.triples("test")[0]
    cands = triple_candidates(phone_kg, tgt)
    p = make_perturbation("delete", tgt, decide("delete", tgt, cands), cands, phone_kg)
    poisoned = apply_perturbations(phone_kg, [p])
    assert len(poisoned.train) == len(phone_kg.train) - 1
    assert tuple(p.triple) not in poisoned.train_set
    with pytest.raises(PerturbationError):
        apply_perturbations(phone_kg, [type(p)("add", phone_kg.triples("train")[1])])
