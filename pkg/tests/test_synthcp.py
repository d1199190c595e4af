import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from semvqa.answer_space import RecordFormatError, build_answer_space
from semvqa.embedding import build_wordvec_space, cooc_space_from_records, mean_cosines_by_group
from semvqa.synthcp import (
    PriorShiftConfig,
    SynthRecord,
    WorldConfigError,
    WorldSpec,
    gen_dataset,
    read_dataset,
    simulate_annotators,
    synthetic_lexicon,
    total_variation,
    write_dataset,
)


def test_default_world_matches_category_table():
    world = WorldSpec()
    sizes = [len(m) for _, m in world.categories]
    assert sizes == [10, 9, 4, 4]
    assert len(world.templates) == 8
    assert {"harley", "suzuki", "palm tree", "golden retriever"} <= set(world.answers)


def test_world_validation():
    with pytest.raises(WorldConfigError):
        WorldSpec(categories=[("a", ("x", "y")), ("b", ("y", "z"))], templates=[("t", ("q",), "a")])
    with pytest.raises(WorldConfigError):
        WorldSpec(templates=[("t", ("q",), "nope")])
    with pytest.raises(WorldConfigError):
        WorldSpec(annotator_noise=1.0)


def test_noiseless_annotators_agree():
    world = WorldSpec(annotator_noise=0.0)
    assert simulate_annotators("husky", world, 0) == ["husky"] * 10


def test_single_member_category_always_agrees():
    world = WorldSpec(categories=[("solo", ("only",)), ("pair", ("a", "b"))],
                      templates=[("t0", ("q",), "solo"), ("t1", ("r",), "pair")], annotator_noise=0.9)
    assert simulate_annotators("only", world, 3) == ["only"] * 10


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.95))
@settings(max_examples=50)
def test_annotators_stay_in_category(seed, rho):
    world = WorldSpec(annotator_noise=rho)
    cat = world.category_of()
    for truth in ("red", "corgi", "suzuki", "log"):
        answers = simulate_annotators(truth, world, seed)
        assert len(answers) == 10
        assert {cat[a] for a in answers} == {cat[truth]}


def test_confusion_kernel_prefers_similar_prototypes():
    world = WorldSpec(confusion_temperature=0.3)
    protos = world.prototypes()
    others, probs = world.substitutes("husky")
    assert probs.sum() == pytest.approx(1.0)
    d2 = [np.sum((protos["husky"] - protos[a]) ** 2) for a in others]
    assert others[int(np.argmax(probs))] == others[int(np.argmin(d2))]


def test_same_seed_same_bytes(tmp_path):
    world, shift = WorldSpec(), PriorShiftConfig()
    for name in ("a", "b"):
        train, test = gen_dataset(world, shift, 200, 50, seed=11)
        write_dataset(train + test, tmp_path / f"{name}.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_record_invariants():
    world = WorldSpec()
    train, test = gen_dataset(world, PriorShiftConfig(), 300, 100, seed=2)
    cat = world.category_of()
    for rec in train + test:
        _, template_cat = world.template(rec.template_id)
        assert cat[rec.truth] == template_cat
        assert len(rec.annotator_answers) == 10
        assert len(rec.scene_ref) == world.feature_dim
    assert len({r.question_id for r in train + test}) == 400


def _histograms(records, world):
    out = {}
    for t, _, c in world.templates:
        members = world.members(c)
        counts = np.zeros(len(members))
        for r in records:
            if r.template_id == t:
                counts[members.index(r.truth)] += 1
        out[t] = counts
    return out


def test_unshifted_splits_share_priors():
    world = WorldSpec()
    train, test = gen_dataset(world, PriorShiftConfig(strength=0.0), 10000, 10000, seed=5)
    h_train, h_test = _histograms(train, world), _histograms(test, world)
    for t in h_train:
        _, p, _, _ = sps.chi2_contingency(np.stack([h_train[t], h_test[t]]))
        assert p > 0.01, t


def test_sampled_answers_follow_configured_prior():
    world = WorldSpec()
    shift = PriorShiftConfig(strength=0.8)
    train, _ = gen_dataset(world, shift, 10000, 1, seed=6)
    prior, _ = shift.priors(world)
    for t, counts in _histograms(train, world).items():
        _, p = sps.chisquare(counts, prior[t] * counts.sum())
        assert p > 0.01, t


def test_full_shift_swaps_majorities():
    world = WorldSpec()
    train, test = gen_dataset(world, PriorShiftConfig(strength=1.0), 2000, 2000, seed=7)
    h_train, h_test = _histograms(train, world), _histograms(test, world)
    for t in h_train:
        assert np.argmax(h_train[t]) != np.argmax(h_test[t])


def test_total_variation_monotone_in_strength():
    world = WorldSpec()
    tvs = []
    for s in np.linspace(0, 1, 11):
        train, test = PriorShiftConfig(strength=float(s)).priors(world)
        tvs.append(max(total_variation(train[t], test[t]) for t in train))
        assert all(abs(w.sum() - 1) < 1e-12 for w in list(train.values()) + list(test.values()))
    assert tvs[0] == 0
    assert all(b > a for a, b in zip(tvs, tvs[1:]))


def test_degenerate_prior_rejected():
    with pytest.raises(WorldConfigError):
        PriorShiftConfig(train={"color_what": [0.0] * 10}).priors(WorldSpec())
    with pytest.raises(WorldConfigError):
        gen_dataset(WorldSpec(), PriorShiftConfig(), 0, 10, seed=0)


def test_noiseless_features_identify_the_answer():
    world = WorldSpec()
    protos = world.prototypes()
    names = list(protos)
    P = np.stack([protos[a] for a in names])
    train, test = gen_dataset(world, PriorShiftConfig(), 500, 500, seed=8)
    for rec in train + test:
        nearest = names[int(np.argmin(np.sum((P - np.asarray(rec.attributes)) ** 2, axis=1)))]
        assert nearest == rec.truth


def test_dataset_round_trip(tmp_path):
    train, test = gen_dataset(WorldSpec(), PriorShiftConfig(), 30, 10, seed=9)
    path = tmp_path / "d.jsonl"
    write_dataset(train + test, path)
    back = read_dataset(path)
    assert back == train + test
    assert all(isinstance(r, SynthRecord) for r in back)


def test_empty_dataset_round_trip(tmp_path):
    write_dataset([], tmp_path / "e.jsonl")
    assert (tmp_path / "e.jsonl").read_bytes() == b""
    assert read_dataset(tmp_path / "e.jsonl") == []


def test_malformed_line_is_named(tmp_path):
    train, _ = gen_dataset(WorldSpec(), PriorShiftConfig(), 3, 1, seed=0)
    path = tmp_path / "d.jsonl"
    write_dataset(train, path)
    with open(path, "a") as fh:
        fh.write('{"question_id": "x", "question": "q"}\n')
    with pytest.raises(RecordFormatError, match="line 4"):
        read_dataset(path)


def test_world_config_round_trip():
    world = WorldSpec(annotator_noise=0.2, confusion_temperature=1.5)
    assert WorldSpec.from_dict(world.to_dict()) == world
    shift = PriorShiftConfig(strength=0.3)
    assert PriorShiftConfig.from_dict(shift.to_dict()) == shift


def test_category_clusters_in_both_spaces():
    world = WorldSpec()
    train, _ = gen_dataset(world, PriorShiftConfig(), 5000, 1, seed=0)
    answers = build_answer_space(train, 1)
    cat = world.category_of()
    groups = {answers.index[a]: cat[a] for a in answers.answers}
    for space in (cooc_space_from_records(train, answers),
                  build_wordvec_space(answers, synthetic_lexicon(world))):
        within, cross = mean_cosines_by_group(space, groups)
        assert within > cross
