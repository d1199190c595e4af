"""Training, evaluation and multi-seed comparison of loss / debiasing arms."""

from __future__ import annotations

import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .answer_space import AnnotationRecord, AnswerSpace, build_answer_space, majority_answer, soft_target_matrix
from .embedding import SemanticSpace, build_wordvec_space, cooc_space_from_records
from .gradnet import (AdamState, GradCheckReport, ModelConfig, RubiBranch, ToyVqaModel, Vocabulary,
                      backward_all, grad_check, rubi_forward, step_adam)
from .semantic_loss import LossConfig, activate, combined_loss, topk_indices
from .synthcp import PriorShiftConfig, SynthRecord, WorldSpec, gen_dataset, gen_split, synthetic_lexicon

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 5e-3
    lr_start: float = 1e-4
    warmup_epochs: int = 3
    decay_epochs: tuple[int, ...] = (20, 25)
    decay_factor: float = 0.2
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: str = "adam"
    rubi: bool = False
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.decay_epochs = tuple(self.decay_epochs)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if min(self.lr, self.lr_start, self.decay_factor) <= 0:
            raise ValueError("learning-rate schedule values must be positive")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")

    def lr_at(self, epoch: int, frac: float = 0.0) -> float:
        """Linear warmup from lr_start to lr, then step decay."""
        t = epoch + frac
        if t < self.warmup_epochs:
            return self.lr_start + (self.lr - self.lr_start) * t / self.warmup_epochs
        return self.lr * self.decay_factor ** sum(epoch >= d for d in self.decay_epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d


@dataclass
class Batchable:
    feats: np.ndarray
    questions: list[tuple[str, ...]]
    targets: np.ndarray

    def __len__(self):
        return len(self.questions)

    def take(self, idx) -> "Batchable":
        return Batchable(self.feats[idx], [self.questions[i] for i in idx], self.targets[idx])


def features_of(records: Sequence[AnnotationRecord]) -> np.ndarray:
    if any(isinstance(r.scene_ref, str) for r in records):
        raise ValueError("records must carry inline numeric scene features")
    return np.array([r.scene_ref for r in records], dtype=np.float64)


def prepare(records: Sequence[AnnotationRecord], space: AnswerSpace, drop_empty: bool = True) -> Batchable:
    targets = soft_target_matrix(records, space)
    keep = np.flatnonzero(targets.sum(axis=1) > 0) if drop_empty else np.arange(len(records))
    recs = [records[i] for i in keep]
    return Batchable(features_of(recs), [r.question_tokens for r in recs], targets[keep])


@dataclass
class TrainResult:
    model: ToyVqaModel
    branch: RubiBranch | None
    log: list[dict]


class NonFiniteLoss(FloatingPointError):
    pass


def train(model: ToyVqaModel, records: Sequence[AnnotationRecord], answers: AnswerSpace,
          config: TrainConfig, space: SemanticSpace | None = None,
          eval_records: Sequence[AnnotationRecord] | None = None) -> TrainResult:
    """Minibatch Adam on base loss + lambda * semantic loss.

    With ``config.rubi`` a question-only branch masks the logits during
    training; it is returned separately and never used for prediction.
    """
    if config.loss.lam > 0 and space is None:
        raise ValueError("a semantic space is required when lambda > 0")
    data = prepare(records, answers)
    rng = np.random.default_rng([config.seed, 7])
    branch = RubiBranch(model.cfg.question_dim, answers.n_classes, seed=config.seed + 1) if config.rubi else None
    params = model.parameters() + (branch.parameters() if branch else [])
    state = AdamState()
    history = []
    n = len(data)
    n_batches = math.ceil(n / config.batch_size)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        totals = np.zeros(3)
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            batch = data.take(idx)
            out = rubi_forward(model, branch, batch.feats, batch.questions, training=True)
            loss = combined_loss(out.data, batch.targets, space, config.loss)
            if not math.isfinite(loss.total):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch} batch {b}: "
                                    f"base={loss.base} sem={loss.sem}")
            grads = backward_all(out, loss.grad_logits, params)
            model._tape = model._hq = None
            step_adam(params, grads, state, config.lr_at(epoch, b / n_batches))
            totals += len(idx) * np.array([loss.total, loss.base, loss.sem])
        entry = {"epoch": epoch, "lr": config.lr_at(epoch),
                 "loss": totals[0] / n, "base": totals[1] / n, "sem": totals[2] / n}
        if eval_records is not None:
            entry["eval_soft_acc"] = evaluate(model, eval_records, answers).soft_accuracy
        history.append(entry)
        log.debug("epoch %d %s", epoch, entry)
    return TrainResult(model, branch, history)


def topk_margin(logits: np.ndarray, cfg: LossConfig) -> float:
    """Smallest gap between the k-th and (k+1)-th probability over a batch."""
    p = np.sort(activate(logits, cfg.activation), axis=-1)[..., ::-1]
    if cfg.k >= p.shape[-1]:
        return float("inf")
    return float(np.min(p[..., cfg.k - 1] - p[..., cfg.k]))


def pipeline_grad_check(model: ToyVqaModel, batch: Batchable, space: SemanticSpace | None,
                        cfg: LossConfig, branch: RubiBranch | None = None, tolerance: float = 1e-4,
                        h: float = 1e-5, n_samples: int | None = 20,
                        rng: np.random.Generator | None = None) -> GradCheckReport:
    """Finite-difference check of d(combined loss)/d(parameters) through the model."""
    params = model.parameters() + (branch.parameters() if branch else [])

    def loss_value() -> float:
        out = rubi_forward(model, branch, batch.feats, batch.questions, training=branch is not None)
        model._tape = model._hq = None
        return combined_loss(out.data, batch.targets, space, cfg).total

    out = rubi_forward(model, branch, batch.feats, batch.questions, training=branch is not None)
    loss = combined_loss(out.data, batch.targets, space, cfg)
    analytic = backward_all(out, loss.grad_logits, params)
    model._tape = model._hq = None
    analytic = {k: v.copy() for k, v in analytic.items()}
    return grad_check(loss_value, params, analytic, tolerance, h, n_samples, rng)


class Predictor(Protocol):
    def predict_logits(self, image_feats, questions) -> np.ndarray: ...


def predict(model: Predictor, records: Sequence[AnnotationRecord], batch_size: int = 512) -> np.ndarray:
    """Argmax class ids; lowest id wins ties."""
    preds = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        logits = model.predict_logits(features_of(chunk), [r.question_tokens for r in chunk])
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


@dataclass
class EvalReport:
    soft_accuracy: float
    top1_accuracy: float
    mean_semantic_error: float
    n_records: int
    n_errors: int
    per_template: dict[str, float]
    config: dict = field(default_factory=dict)
    seed: int | None = None

    @property
    def zero_errors(self) -> bool:
        return self.n_errors == 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def truth_id(record: AnnotationRecord, answers: AnswerSpace) -> int | None:
    if isinstance(record, SynthRecord) and record.truth in answers.index:
        return answers.index[record.truth]
    return majority_answer(record, answers)


def evaluate(model: Predictor, records: Sequence[AnnotationRecord], answers: AnswerSpace,
             space_for_metric: SemanticSpace | None = None, config: dict | None = None,
             seed: int | None = None) -> EvalReport:
    """Soft (VQA) accuracy, exact accuracy and semantic distance of the errors.

    The semantic space only enters the error-distance metric, never the
    prediction.
    """
    if not records:
        raise ValueError("cannot evaluate on an empty record set")
    preds = predict(model, records)
    return score_predictions(preds, records, answers, space_for_metric, config, seed)


def score_predictions(preds: np.ndarray, records: Sequence[AnnotationRecord], answers: AnswerSpace,
                      space_for_metric: SemanticSpace | None = None, config: dict | None = None,
                      seed: int | None = None) -> EvalReport:
    cos = space_for_metric.cosine_matrix() if space_for_metric is not None else None
    soft, exact, dists = [], [], []
    by_template: dict[str, list[float]] = {}
    for rec, p in zip(records, preds):
        answer = answers.answers[p]
        m = rec.answer_counts().get(answer, 0)
        score = min(m / 3.0, 1.0)
        soft.append(score)
        t = truth_id(rec, answers)
        ok = t is not None and int(p) == t
        exact.append(float(ok))
        if not ok and t is not None and cos is not None:
            dists.append(1.0 - cos[p, t])
        key = rec.template_id if isinstance(rec, SynthRecord) else "all"
        by_template.setdefault(key, []).append(score)
    n_err = int(len(exact) - sum(exact))
    return EvalReport(
        soft_accuracy=math.fsum(soft) / len(soft),
        top1_accuracy=math.fsum(exact) / len(exact),
        mean_semantic_error=math.fsum(dists) / len(dists) if dists else 0.0,
        n_records=len(records),
        n_errors=n_err,
        per_template={k: math.fsum(v) / len(v) for k, v in sorted(by_template.items())},
        config=config or {},
        seed=seed,
    )


# --- experiments -----------------------------------------------------------------------

@dataclass(frozen=True)
class Arm:
    name: str
    lam: float = 0.0
    space: str | None = None
    rubi: bool = False


DEFAULT_ARMS = (
    Arm("CE"),
    Arm("CE+SEM(glove)", lam=10.0, space="wordvec"),
    Arm("CE+SEM(cooc)", lam=10.0, space="cooc"),
    Arm("CE+RUBi", rubi=True),
    Arm("CE+RUBi+SEM", lam=10.0, space="cooc", rubi=True),
)


@dataclass
class ExperimentConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    shift: PriorShiftConfig = field(default_factory=PriorShiftConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    n_train: int = 5000
    n_test: int = 2000
    min_count: int = 1
    lexicon_dim: int = 50
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    arms: tuple[Arm, ...] = DEFAULT_ARMS
    metric_space: str = "cooc"

    def __post_init__(self):
        if isinstance(self.world, dict):
            self.world = WorldSpec.from_dict(self.world)
        if isinstance(self.shift, dict):
            self.shift = PriorShiftConfig.from_dict(self.shift)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.seeds = tuple(self.seeds)
        self.arms = tuple(Arm(**a) if isinstance(a, dict) else a for a in self.arms)

    def to_dict(self) -> dict:
        return {
            "world": self.world.to_dict(), "shift": self.shift.to_dict(), "train": self.train.to_dict(),
            "model": asdict(self.model), "n_train": self.n_train, "n_test": self.n_test,
            "min_count": self.min_count, "lexicon_dim": self.lexicon_dim, "seeds": list(self.seeds),
            "arms": [asdict(a) for a in self.arms], "metric_space": self.metric_space,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)


@dataclass
class SeedData:
    train: list
    test_ood: list
    test_id: list
    answers: AnswerSpace
    spaces: dict[str, SemanticSpace]


def build_seed_data(cfg: ExperimentConfig, seed: int) -> SeedData:
    train, test = gen_dataset(cfg.world, cfg.shift, cfg.n_train, cfg.n_test, seed)
    train_prior, _ = cfg.shift.priors(cfg.world)
    test_id = gen_split(cfg.world, train_prior, cfg.n_test, [seed, 3], "test_id")
    answers = build_answer_space(train, cfg.min_count)
    spaces = {
        "cooc": cooc_space_from_records(train, answers),
        "wordvec": build_wordvec_space(answers, synthetic_lexicon(cfg.world, cfg.lexicon_dim)),
    }
    return SeedData(train, test, test_id, answers, spaces)


def vocabulary_for(records: Sequence[AnnotationRecord]) -> Vocabulary:
    return Vocabulary(t for r in records for t in r.question_tokens)


def run_arm(cfg: ExperimentConfig, arm: Arm, seed: int, data: SeedData | None = None) -> dict:
    data = data or build_seed_data(cfg, seed)
    tcfg = replace(cfg.train, seed=seed, rubi=arm.rubi,
                   loss=replace(cfg.train.loss, lam=arm.lam if arm.space else 0.0))
    model = ToyVqaModel(vocabulary_for(data.train), data.answers.n_classes, cfg.model, seed=seed)
    space = data.spaces[arm.space] if arm.space else None
    result = train(model, data.train, data.answers, tcfg, space)
    metric = data.spaces[cfg.metric_space]
    echo = {"arm": asdict(arm), "train": tcfg.to_dict()}
    ood = evaluate(model, data.test_ood, data.answers, metric, echo, seed)
    ind = evaluate(model, data.test_id, data.answers, metric, echo, seed)
    return {"arm": arm.name, "seed": seed, "ood": ood.to_dict(), "id": ind.to_dict(),
            "train_log": result.log}


def _run_seed(cfg: ExperimentConfig, seed: int) -> list[dict]:
    data = build_seed_data(cfg, seed)
    return [run_arm(cfg, arm, seed, data) for arm in cfg.arms]


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    """Train every arm on every seed; returns rows plus per-arm summaries."""
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(_run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        per_seed = [_run_seed(cfg, s) for s in cfg.seeds]
    rows = [row for seed_rows in per_seed for row in seed_rows]
    return {"config": cfg.to_dict(), "rows": rows, "summary": summarize(rows, cfg.arms[0].name)}


def metric_of(row: dict, metric: str) -> float:
    split, key = metric.split(".")
    return row[split][key]


SUMMARY_METRICS = ("ood.soft_accuracy", "ood.top1_accuracy", "id.soft_accuracy",
                   "ood.mean_semantic_error")


def summarize(rows: list[dict], baseline: str) -> dict:
    """Per-arm medians and seed-matched deltas against ``baseline``."""
    by_arm: dict[str, dict[int, dict]] = {}
    for row in rows:
        by_arm.setdefault(row["arm"], {})[row["seed"]] = row
    base = by_arm.get(baseline, {})
    summary = {}
    for arm, seeds in by_arm.items():
        entry = {}
        for metric in SUMMARY_METRICS:
            vals = [metric_of(seeds[s], metric) for s in sorted(seeds)]
            deltas = [metric_of(seeds[s], metric) - metric_of(base[s], metric) for s in sorted(seeds) if s in base]
            entry[metric] = {"median": statistics.median(vals), "values": vals,
                             "delta_median": statistics.median(deltas) if deltas else None,
                             "deltas": deltas}
        summary[arm] = entry
    return summary


def format_table(summary: dict) -> str:
    headers = ["arm", "OOD soft", "OOD top1", "ID soft", "sem.err", "Δ OOD", "Δ ID"]
    lines = []
    for arm, e in summary.items():
        def pct(m):
            return f"{100 * e[m]['median']:.2f}"

        def dpct(m):
            d = e[m]["delta_median"]
            return "" if d is None else f"{100 * d:+.2f}"

        lines.append([arm, pct("ood.soft_accuracy"), pct("ood.top1_accuracy"), pct("id.soft_accuracy"),
                      f"{e['ood.mean_semantic_error']['median']:.4f}",
                      dpct("ood.soft_accuracy"), dpct("id.soft_accuracy")])
    widths = [max(len(h), *(len(r[i]) for r in lines)) for i, h in enumerate(headers)]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(headers), fmt(["-" * w for w in widths])] + [fmt(r) for r in lines]) + "\n"


def write_experiment(result: dict, out_dir: str | Path) -> list[Path]:
    """One JSON report per arm and seed, plus summary JSON and text table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for row in result["rows"]:
        slug = row["arm"].replace("+", "_").replace("(", "_").replace(")", "")
        path = out / f"report_{slug}_seed{row['seed']}.json"
        path.write_text(json.dumps(row, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        written.append(path)
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps({"config": result["config"], "summary": result["summary"]},
                                       indent=1, sort_keys=True) + "\n", encoding="utf-8")
    table_path = out / "summary.txt"
    table_path.write_text(format_table(result["summary"]), encoding="utf-8")
    return written + [summary_path, table_path]


@dataclass
class SuiteResult:
    max_rel_error: float
    worst: tuple
    n_instances: int
    n_skipped: int
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.n_instances > 0 and self.max_rel_error < self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"max_rel_error={self.max_rel_error:.3e} instances={self.n_instances} "
                f"skipped={self.n_skipped} coords={self.n_checked} tol={self.tolerance:g} {status}")


def grad_check_suite(cfg: ExperimentConfig, n_instances: int = 100, seed: int = 0, batch_size: int = 4,
                     n_samples: int = 4, min_margin: float = 1e-4, tolerance: float = 1e-4,
                     h: float = 1e-5, rubi_every: int = 4) -> SuiteResult:
    """Gradient check of the full pipeline over many random model/batch instances.

    Each instance draws a fresh model and batch from the configured world;
    instances whose top-k selection sits within ``min_margin`` of a tie are
    skipped, since the frozen-index gradient is not defined there.
    Every ``rubi_every``-th instance also routes through a question-only branch.
    """
    rng = np.random.default_rng([seed, 11])
    train, _ = gen_dataset(cfg.world, cfg.shift, max(200, 4 * batch_size), 1, [seed, 12])
    answers = build_answer_space(train, cfg.min_count)
    space = cooc_space_from_records(train, answers)
    vocab = vocabulary_for(train)
    data = prepare(train, answers)
    loss_cfg = replace(cfg.train.loss, lam=cfg.train.loss.lam or 10.0)
    worst_err, worst, done, skipped, coords = -1.0, ("", ()), 0, 0, 0
    while done < n_instances:
        if skipped > 10 * n_instances:
            raise RuntimeError("could not draw instances away from top-k boundaries")
        model = ToyVqaModel(vocab, answers.n_classes, cfg.model, seed=int(rng.integers(2**31)))
        batch = data.take(rng.choice(len(data), size=batch_size, replace=False))
        branch = RubiBranch(cfg.model.question_dim, answers.n_classes, seed=int(rng.integers(2**31))) \
            if rubi_every and done % rubi_every == rubi_every - 1 else None
        logits = rubi_forward(model, branch, batch.feats, batch.questions, training=branch is not None).data
        model._tape = model._hq = None
        if topk_margin(logits, loss_cfg) < min_margin:
            skipped += 1
            continue
        report = pipeline_grad_check(model, batch, space, loss_cfg, branch, tolerance, h, n_samples, rng)
        coords += report.n_checked
        if report.max_rel_error > worst_err:
            worst_err, worst = report.max_rel_error, (done,) + tuple(report.worst)
        done += 1
    return SuiteResult(worst_err, worst, done, skipped, coords, tolerance)
