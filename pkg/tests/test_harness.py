import inspect
import json

import numpy as np
import pytest

from semvqa.answer_space import build_answer_space, soft_target_matrix
from semvqa.embedding import cooc_space_from_records
from semvqa.gradnet import ModelConfig, ToyVqaModel
from semvqa.harness import (
    DEFAULT_ARMS,
    Arm,
    EvalReport,
    ExperimentConfig,
    TrainConfig,
    evaluate,
    format_table,
    predict,
    run_experiment,
    score_predictions,
    train,
    vocabulary_for,
    write_experiment,
)
from semvqa.semantic_loss import LossConfig
from semvqa.synthcp import PriorShiftConfig, WorldSpec, gen_dataset


@pytest.fixture(scope="module")
def small_data():
    train_recs, test_recs = gen_dataset(WorldSpec(), PriorShiftConfig(), 400, 200, seed=3)
    return train_recs, test_recs, build_answer_space(train_recs)


class LookupPredictor:
    """Scores a fixed class per record, found by its feature row."""

    def __init__(self, records, classes, n_classes):
        self.table = {tuple(r.scene_ref): c for r, c in zip(records, classes)}
        self.n_classes = n_classes

    def predict_logits(self, image_feats, questions):
        out = np.zeros((len(image_feats), self.n_classes))
        for i, row in enumerate(image_feats):
            out[i, self.table[tuple(row)]] = 1.0
        return out


def test_lr_schedule_shape():
    cfg = TrainConfig(lr=1e-2, lr_start=1e-4, warmup_epochs=3, decay_epochs=(20, 25))
    assert cfg.lr_at(0) == pytest.approx(1e-4)
    assert cfg.lr_at(1) < cfg.lr_at(2) < cfg.lr_at(3) == pytest.approx(1e-2)
    assert cfg.lr_at(20) == pytest.approx(2e-3)
    assert cfg.lr_at(29) == pytest.approx(4e-4)


def test_overfits_small_noiseless_set():
    world = WorldSpec(annotator_noise=0.0)
    recs, _ = gen_dataset(world, PriorShiftConfig(), 50, 1, seed=0)
    answers = build_answer_space(recs)
    model = ToyVqaModel(vocabulary_for(recs), answers.n_classes, ModelConfig(), seed=0)
    cfg = TrainConfig(epochs=300, batch_size=50, lr=1e-2, warmup_epochs=0, decay_epochs=(),
                      loss=LossConfig(lam=0.0, activation="sigmoid"))
    log = train(model, recs, answers, cfg).log
    losses = [e["base"] for e in log]
    assert losses[-1] < 0.01
    # full-batch Adam: allow only tiny numerical wobble
    assert all(b <= a * 1.01 for a, b in zip(losses, losses[1:]))
    assert evaluate(model, recs, answers).top1_accuracy == 1.0


def test_oracle_soft_accuracy_is_mean_max_target(small_data):
    _, test_recs, answers = small_data
    targets = soft_target_matrix(test_recs, answers)
    oracle = LookupPredictor(test_recs, np.argmax(targets, axis=1), answers.n_classes)
    report = evaluate(oracle, test_recs, answers)
    assert report.soft_accuracy == pytest.approx(float(np.mean(targets.max(axis=1))), abs=1e-12)


def test_latent_truth_predictor_is_exact(small_data):
    _, test_recs, answers = small_data
    truth = [answers.index[r.truth] for r in test_recs]
    report = evaluate(LookupPredictor(test_recs, truth, answers.n_classes), test_recs, answers,
                      cooc_space_from_records(small_data[0], answers))
    assert report.top1_accuracy == 1.0 and report.zero_errors
    assert report.mean_semantic_error == 0.0


def test_uniform_predictor_closed_form(small_data):
    # averaging a constant prediction over every class is the uniform-random expectation
    _, test_recs, answers = small_data
    n = answers.n_classes
    accs = [score_predictions(np.full(len(test_recs), c), test_recs, answers).soft_accuracy for c in range(n)]
    expected = float(np.mean(soft_target_matrix(test_recs, answers).sum(axis=1) / n))
    assert np.mean(accs) == pytest.approx(expected, abs=1e-12)


def test_prediction_never_takes_a_space_or_branch():
    params = inspect.signature(predict).parameters
    assert list(params) == ["model", "records", "batch_size"]


def test_metric_space_does_not_change_predictions(small_data):
    train_recs, test_recs, answers = small_data
    model = ToyVqaModel(vocabulary_for(train_recs), answers.n_classes, ModelConfig(), seed=1)
    a = evaluate(model, test_recs, answers)
    b = evaluate(model, test_recs, answers, cooc_space_from_records(train_recs, answers))
    assert (a.soft_accuracy, a.top1_accuracy, a.n_errors) == (b.soft_accuracy, b.top1_accuracy, b.n_errors)


def test_rubi_branch_is_dropped_at_inference(small_data):
    train_recs, test_recs, answers = small_data
    model = ToyVqaModel(vocabulary_for(train_recs), answers.n_classes, ModelConfig(), seed=2)
    result = train(model, train_recs, answers, TrainConfig(epochs=2, rubi=True, loss=LossConfig(lam=0.0)))
    before = predict(model, test_recs)
    for p in result.branch.parameters():
        p.data = p.data * 0 + 5.0
    assert np.array_equal(before, predict(model, test_recs))


def test_semantic_loss_needs_a_space(small_data):
    train_recs, _, answers = small_data
    model = ToyVqaModel(vocabulary_for(train_recs), answers.n_classes, ModelConfig())
    with pytest.raises(ValueError, match="semantic space"):
        train(model, train_recs, answers, TrainConfig(epochs=1))


def test_empty_evaluation_rejected(small_data):
    _, _, answers = small_data
    with pytest.raises(ValueError):
        evaluate(LookupPredictor([], [], answers.n_classes), [], answers)


def test_report_round_trip(small_data):
    _, test_recs, answers = small_data
    report = score_predictions(np.zeros(len(test_recs), dtype=int), test_recs, answers,
                               config={"a": 1}, seed=4)
    assert EvalReport.from_dict(json.loads(json.dumps(report.to_dict()))) == report


@pytest.fixture(scope="module")
def tiny_experiment():
    cfg = ExperimentConfig(n_train=200, n_test=100, seeds=(0, 1),
                           train=TrainConfig(epochs=2), arms=DEFAULT_ARMS)
    return cfg, run_experiment(cfg)


def test_experiment_rows_and_outputs(tiny_experiment, tmp_path):
    cfg, result = tiny_experiment
    assert len(result["rows"]) == len(cfg.arms) * len(cfg.seeds)
    written = write_experiment(result, tmp_path)
    assert len(list(tmp_path.glob("report_*_seed*.json"))) == 10
    assert {p.name for p in written} >= {"summary.json", "summary.txt"}
    table = (tmp_path / "summary.txt").read_text()
    assert "Δ OOD" in table and "CE+RUBi+SEM" in table
    assert result["summary"]["CE"]["ood.soft_accuracy"]["delta_median"] == 0.0


def test_experiment_is_deterministic(tiny_experiment, tmp_path):
    cfg, first = tiny_experiment
    second = run_experiment(cfg)
    assert format_table(first["summary"]) == format_table(second["summary"])
    write_experiment(first, tmp_path / "a")
    write_experiment(second, tmp_path / "b")
    for path in sorted((tmp_path / "a").iterdir()):
        assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes()


def test_experiment_config_round_trip():
    cfg = ExperimentConfig(seeds=(3, 4), arms=(Arm("CE"), Arm("X", lam=2.0, space="cooc")))
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()
