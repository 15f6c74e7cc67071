import itertools

import numpy as np
import pytest

from kgattack.kg import Triple
from kgattack.kge import (
    ARCHITECTURES, TrainingDiverged, build_model, default_config, evaluate, load_model,
    rank_targets, save_model, select_attack_targets, train,
)
from kgattack.kge.training import densify, logistic_loss, margin_loss, one_to_all_loss, _answer_index
from kgattack.io import FormatError

from _util import TOL, brute_force_ranks, make_kg, numeric_grad, random_kg, rel_error, small_model

@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_score_gradient_matches_finite_differences(arch):
    for draw in range(10):
        model, rng = small_model(arch, draw)
        batch = rng.integers(0, [7, 3, 7], size=(4, 3))
        g = rng.normal(size=4)

        def f():
            return float(np.dot(g, model.score(batch[:, 0], batch[:, 1], batch[:, 2])))

        analytic = densify(model.backward(batch[:, 0], batch[:, 1], batch[:, 2], g), model.params)
        numeric = numeric_grad(f, model.params)
        for name in model.params:
            got = analytic.get(name, np.zeros_like(model.params[name]))
            assert rel_error(got, numeric[name]) <= TOL, (arch, draw, name)


@pytest.mark.parametrize("arch,loss_fn", [("transe", margin_loss), ("distmult", logistic_loss),
                                          ("complex", logistic_loss), ("conve", one_to_all_loss)])
def test_loss_gradient_matches_finite_differences(arch, loss_fn):
    cfg = default_config(arch, input_dropout=0.0, feature_dropout=0.0, hidden_dropout=0.0)
    for draw in range(3):
        model, rng = small_model(arch, 100 + draw)
        pos = rng.integers(0, [7, 3, 7], size=(5, 3))
        known = _answer_index(pos)
        seed = int(rng.integers(1 << 30))

        def f():
            return loss_fn(model, pos, cfg, np.random.default_rng(seed), known)[0]

        _, grads = loss_fn(model, pos, cfg, np.random.default_rng(seed), known)
        analytic = densify(grads, model.params) if arch != "conve" else grads
        numeric = numeric_grad(f, model.params)
        for name in model.params:
            assert rel_error(analytic[name], numeric[name]) <= TOL, (arch, draw, name)


def test_transe_exact_translation_scores_zero():
    model = build_model("transe", 3, 1, 4, np.random.default_rng(0))
    model.params["entity"][2] = model.entity[0] + model.relation[0]
    assert model.score_triple((0, 0, 2)) == 0.0
    assert model.score_triple((0, 0, 1)) < 0.0


def test_distmult_is_symmetric():
    model = build_model("distmult", 5, 2, 6, np.random.default_rng(1))
    s, r, o = np.array([0, 1, 2]), np.array([0, 1, 1]), np.array([3, 4, 0])
    np.testing.assert_allclose(model.score(s, r, o), model.score(o, r, s), rtol=1e-14)


def test_complex_matches_complex_arithmetic():
    model = build_model("complex", 4, 2, 6, np.random.default_rng(2))
    d = model.entity.shape[1] // 2

    def as_complex(v):
        return v[:d] + 1j * v[d:]

    for s, r, o in itertools.product(range(4), range(2), range(4)):
        expect = np.real(np.sum(as_complex(model.entity[s]) * as_complex(model.relation[r])
                                * np.conj(as_complex(model.entity[o]))))
        assert model.score_triple((s, r, o)) == pytest.approx(expect, abs=1e-12)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_one_to_all_scores_agree_with_pointwise(arch):
    model, _ = small_model(arch, 5)
    s, r = np.array([0, 3]), np.array([1, 2])
    objs = model.score_objects(s, r)
    subs = model.score_subjects(r, s)
    for i in range(2):
        every = np.arange(model.n_entities)
        np.testing.assert_allclose(objs[i], model.score(np.full(7, s[i]), np.full(7, r[i]), every), atol=1e-12)
        np.testing.assert_allclose(subs[i], model.score(every, np.full(7, r[i]), np.full(7, s[i])), atol=1e-12)


# ---------------------------------------------------------------------------
# ranking


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_evaluate_matches_brute_force(arch):
    for seed in range(3):
        kg = random_kg(20, 3, 60, 15, seed)
        model = build_model(arch, kg.num_entities, kg.num_relations, 8, np.random.default_rng(seed))
        targets = kg.triples("test")
        res = evaluate(model, kg, targets)
        expect = [brute_force_ranks(model, kg, t) for t in targets]
        for got, (rs, ro) in zip(res.per_target, expect):
            assert (got.rank_s, got.rank_o) == (rs, ro)
        flat = [x for pair in expect for x in pair]
        assert res.mrr == pytest.approx(np.mean([1 / x for x in flat]), abs=1e-15)
        assert res.hits1 == np.mean([x <= 1 for x in flat])
        assert res.hits10 == np.mean([x <= 10 for x in flat])


def test_ties_are_averaged_with_duplicated_rows():
    kg = random_kg(12, 2, 30, 5, 7)
    model = build_model("distmult", kg.num_entities, kg.num_relations, 6, np.random.default_rng(0))
    t = kg.triples("test")[0]
    # clone the true object's embedding into three other entities
    others = [e for e in range(kg.num_entities) if e not in (t.s, t.o)][:3]
    model.params["entity"][others] = model.entity[t.o]
    (res,) = rank_targets(model, kg, [t])
    assert res.rank_o == brute_force_ranks(model, kg, t)[1]
    assert res.rank_o % 1 in (0.0, 0.5)


def test_all_zero_embeddings_tie_everything():
    kg = random_kg(15, 2, 30, 5, 3)
    model = build_model("distmult", kg.num_entities, kg.num_relations, 4, np.random.default_rng(0))
    for p in model.params.values():
        p[:] = 0.0
    known = {tuple(x) for x in kg.known}
    for res in rank_targets(model, kg, kg.triples("test")):
        s, r, o = res.target
        valid_o = sum((s, r, e) not in known for e in range(kg.num_entities))
        valid_s = sum((e, r, o) not in known for e in range(kg.num_entities))
        assert res.rank_o == (valid_o + 1 + 1) / 2
        assert res.rank_s == (valid_s + 1 + 1) / 2


def test_filtering_removes_known_answers():
    # a and b both score above the true object, but (x, r, a) is a known triple
    kg = make_kg([("x", "r", "a"), ("y", "r", "z")], test=[("x", "r", "t")])
    model = build_model("distmult", kg.num_entities, kg.num_relations, 2, np.random.default_rng(0))
    ent = np.zeros((kg.num_entities, 2))
    ids = {k: kg.entity_id(k) for k in ("x", "a", "t", "y", "z")}
    ent[ids["x"]] = [1, 0]
    ent[ids["a"]] = [3, 0]
    ent[ids["t"]] = [2, 0]
    model.params["entity"][:] = ent
    model.params["relation"][:] = 1.0
    (res,) = rank_targets(model, kg, kg.triples("test"))
    assert res.rank_o == 1.0


def test_select_attack_targets_is_intersection(synth_kg, clean_models):
    models = list(clean_models.values())
    picked = set(select_attack_targets(models, synth_kg))
    expect = set(synth_kg.triples("test"))
    for m in models:
        expect &= {p.target for p in rank_targets(m, synth_kg, synth_kg.triples("test"))
                   if p.rank_s == 1.0 and p.rank_o == 1.0}
    assert picked == expect and picked


def test_evaluate_is_pure(synth_kg, clean_models):
    m = clean_models["complex"]
    before = {k: v.copy() for k, v in m.params.items()}
    a = evaluate(m, synth_kg, synth_kg.triples("test"))
    b = evaluate(m, synth_kg, synth_kg.triples("test"))
    assert a.summary() == b.summary()
    assert all(np.array_equal(before[k], m.params[k]) for k in before)


def test_empty_targets_rejected(synth_kg, clean_models):
    with pytest.raises(ValueError):
        evaluate(clean_models["transe"], synth_kg, [])


def test_out_of_range_ids_raise(clean_models):
    with pytest.raises(IndexError):
        clean_models["transe"].score_triple((0, 0, 10_000))


# ---------------------------------------------------------------------------
# training


@pytest.mark.parametrize("arch,floor", [("transe", 0.9), ("distmult", 0.8), ("complex", 0.8), ("conve", 0.8)])
def test_sanity_mrr(synth_kg, clean_models, arch, floor):
    heldout = synth_kg.triples("valid") + synth_kg.triples("test")
    assert evaluate(clean_models[arch], synth_kg, heldout).mrr >= floor


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_training_is_deterministic(synth_kg, arch):
    a = train(synth_kg, default_config(arch, epochs=3))
    b = train(synth_kg, default_config(arch, epochs=3))
    assert a.history == b.history
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_zero_epochs_returns_initialisation(synth_kg):
    model = train(synth_kg, default_config("distmult", epochs=0, seed=4))
    init = build_model("distmult", synth_kg.num_entities, synth_kg.num_relations, 32, np.random.default_rng(4))
    assert all(np.array_equal(model.params[k], init.params[k]) for k in init.params)
    assert model.history == []


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_huge_learning_rate_diverges(synth_kg):
    with pytest.raises(TrainingDiverged):
        train(synth_kg, default_config("distmult", lr=1e200, epochs=5))


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_loss_trend_over_trailing_windows(clean_models, arch):
    # Negatives are resampled every epoch, so single epochs are noisy. The
    # trailing 10-epoch mean must never climb far above its best earlier value
    # and must end well below where it started.
    hist = np.asarray(clean_models[arch].history)
    trail = np.convolve(hist, np.ones(10) / 10, mode="valid")
    best = np.minimum.accumulate(trail)
    assert np.all(trail[10:] <= 1.25 * best[:-10])
    assert trail[-1] <= 0.3 * trail[0]
    assert clean_models[arch].all_finite()


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_checkpoint_round_trip(tmp_path, clean_models, synth_kg, arch):
    path = tmp_path / f"{arch}.ckpt"
    save_model(clean_models[arch], path)
    loaded = load_model(path)
    assert loaded.architecture == arch
    assert all(np.array_equal(loaded.params[k], clean_models[arch].params[k]) for k in loaded.params)
    t = synth_kg.triples("test")[:5]
    assert evaluate(loaded, synth_kg, t).summary() == evaluate(clean_models[arch], synth_kg, t).summary()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(FormatError):
        load_model(path)


def test_triple_namedtuple_in_targets(synth_kg, clean_models):
    t = synth_kg.triples("test")[0]
    assert isinstance(t, Triple)
    assert rank_targets(clean_models["transe"], synth_kg, [tuple(t)])[0].target == t
