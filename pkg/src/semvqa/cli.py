"""Command-line entry point: ``semvqa <subcommand> [options]``.

Every subcommand reads an optional JSON config (same layout as
``ExperimentConfig.to_dict``), applies flag overrides on top, and echoes the
resolved config into what it writes. Exit codes: 0 ok, 1 runtime failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .answer_space import AnswerSpace, build_answer_space
from .embedding import (build_wordvec_space, cooc_space_from_records, export_space, import_space,
                        load_word_vectors)
from .gradnet import ModelConfig, ToyVqaModel, Vocabulary, load_checkpoint, save_checkpoint
from .harness import (ExperimentConfig, evaluate, format_table, grad_check_suite, run_experiment, train,
                      vocabulary_for, write_experiment)
from .synthcp import gen_dataset, gen_split, read_dataset, synthetic_lexicon, write_dataset


class CliError(RuntimeError):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_config(args) -> ExperimentConfig:
    """Defaults, then the config file, then flags."""
    raw = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    cfg = ExperimentConfig.from_dict(raw)
    world, shift, tcfg = cfg.world, cfg.shift, cfg.train
    loss = tcfg.loss
    if getattr(args, "shift", None) is not None:
        shift = replace(shift, strength=args.shift)
    if getattr(args, "rho", None) is not None:
        world = replace(world, annotator_noise=args.rho)
    if getattr(args, "lam", None) is not None and not isinstance(args.lam, list):
        loss = replace(loss, lam=args.lam)
    if getattr(args, "k", None) is not None and not isinstance(args.k, list):
        loss = replace(loss, k=args.k)
    for name in ("epochs", "lr"):
        if getattr(args, name, None) is not None:
            tcfg = replace(tcfg, **{name: getattr(args, name)})
    if getattr(args, "rubi", False):
        tcfg = replace(tcfg, rubi=True)
    if getattr(args, "seed", None) is not None:
        tcfg = replace(tcfg, seed=args.seed)
    cfg = replace(cfg, world=world, shift=shift, train=replace(tcfg, loss=loss))
    for name in ("n_train", "n_test"):
        if getattr(args, name, None) is not None:
            cfg = replace(cfg, **{name: getattr(args, name)})
    return cfg


def _seed(args, cfg: ExperimentConfig) -> int:
    return cfg.train.seed if args.seed is None else args.seed


# --- subcommands -------------------------------------------------------------------------

def cmd_gen_data(args, cfg: ExperimentConfig, out: Path) -> int:
    seed = _seed(args, cfg)
    train_recs, test_recs = gen_dataset(cfg.world, cfg.shift, cfg.n_train, cfg.n_test, seed)
    train_prior, _ = cfg.shift.priors(cfg.world)
    test_id = gen_split(cfg.world, train_prior, cfg.n_test, [seed, 3], "test_id")
    write_dataset(train_recs, out / "train.jsonl")
    write_dataset(test_recs, out / "test_ood.jsonl")
    write_dataset(test_id, out / "test_id.jsonl")
    _write_json(out / "config.json", {"seed": seed, **cfg.to_dict()})
    print(f"wrote {len(train_recs)} train, {len(test_recs)} OOD test, {len(test_id)} ID test records to {out}")
    return 0


def cmd_build_space(args, cfg: ExperimentConfig, out: Path) -> int:
    records = read_dataset(args.data)
    answers = build_answer_space(records, cfg.min_count)
    if args.kind == "cooc":
        space = cooc_space_from_records(records, answers)
    else:
        lexicon = load_word_vectors(args.vectors) if args.vectors else synthetic_lexicon(cfg.world, cfg.lexicon_dim)
        space = build_wordvec_space(answers, lexicon)
    answers.save(out / "answers.txt")
    export_space(space, out / f"space_{args.kind}.tsv")
    print(f"{args.kind} space: {space.n_classes} answers x {space.dim} dims -> {out}")
    if space.missing:
        print(f"warning: {len(space.missing)} answers have no word vector", file=sys.stderr)
    return 0


def _load_space(path: str | None, kind: str):
    return import_space(path, kind) if path else None


def cmd_train(args, cfg: ExperimentConfig, out: Path) -> int:
    records = read_dataset(args.data)
    answers = AnswerSpace.load(args.answers) if args.answers else build_answer_space(records, cfg.min_count)
    space = _load_space(args.space, args.space_kind)
    tcfg = cfg.train
    if space is None and tcfg.loss.lam > 0:
        tcfg = replace(tcfg, loss=replace(tcfg.loss, lam=0.0))
        print("no --space given: training with the base loss only (lambda=0)", file=sys.stderr)
    if space is not None and space.n_classes != answers.n_classes:
        raise CliError(f"space has {space.n_classes} rows but the answer dictionary has {answers.n_classes}")
    vocab = vocabulary_for(records)
    model = ToyVqaModel(vocab, answers.n_classes, cfg.model, seed=tcfg.seed)
    result = train(model, records, answers, tcfg, space)
    meta = {"answers": list(answers.answers), "vocab": vocab.tokens[1:], "model": asdict(cfg.model),
            "train": tcfg.to_dict()}
    save_checkpoint(model.state_dict(), out / "model.json", meta)
    _write_json(out / "train_log.json", {"config": cfg.to_dict(), "train": tcfg.to_dict(), "log": result.log})
    last = result.log[-1]
    print(f"trained {tcfg.epochs} epochs: loss={last['loss']:.4f} base={last['base']:.4f} sem={last['sem']:.4f}")
    return 0


def load_model(path: str) -> tuple[ToyVqaModel, AnswerSpace, dict]:
    blocks, meta = load_checkpoint(path)
    answers = AnswerSpace(tuple(meta["answers"]))
    model = ToyVqaModel(Vocabulary(meta["vocab"]), answers.n_classes, ModelConfig(**meta["model"]))
    model.load_state_dict(blocks)
    return model, answers, meta


def cmd_eval(args, cfg: ExperimentConfig, out: Path) -> int:
    model, answers, meta = load_model(args.model)
    records = read_dataset(args.data)
    metric = _load_space(args.metric_space, "cooc")
    report = evaluate(model, records, answers, metric, {"checkpoint": meta, "data": str(args.data)},
                      meta["train"].get("seed"))
    _write_json(out / "report.json", report.to_dict())
    lines = [f"soft_accuracy        {100 * report.soft_accuracy:.2f}",
             f"top1_accuracy        {100 * report.top1_accuracy:.2f}",
             f"mean_semantic_error  {report.mean_semantic_error:.4f}",
             f"n_records            {report.n_records}",
             f"n_errors             {report.n_errors}"]
    lines += [f"  {t:<18} {100 * v:.2f}" for t, v in report.per_template.items()]
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_experiment(args, cfg: ExperimentConfig, out: Path) -> int:
    if args.seeds is not None:
        cfg = replace(cfg, seeds=tuple(range(args.seed_start, args.seed_start + args.seeds)))
    lams = args.lam if isinstance(args.lam, list) else [args.lam]
    ks = args.k if isinstance(args.k, list) else [args.k]
    grid = list(itertools.product(lams, ks))
    for lam, k in grid:
        loss = replace(cfg.train.loss, **{n: v for n, v in (("lam", lam), ("k", k)) if v is not None})
        arms = tuple(replace(a, lam=lam) if a.space and lam is not None else a for a in cfg.arms)
        run_cfg, sub = replace(cfg, train=replace(cfg.train, loss=loss), arms=arms), out
        if len(grid) > 1:
            sub = out / f"lam{loss.lam:g}_k{loss.k}"
            sub.mkdir(parents=True, exist_ok=True)
        result = run_experiment(run_cfg, jobs=args.jobs)
        write_experiment(result, sub)
        print(format_table(result["summary"]), end="")
    return 0


def cmd_grad_check(args, cfg: ExperimentConfig, out: Path) -> int:
    result = grad_check_suite(cfg, n_instances=args.instances, seed=_seed(args, cfg), tolerance=args.tolerance)
    _write_json(out / "grad_check.json", {"config": cfg.to_dict(), "max_rel_error": result.max_rel_error,
                                          "worst": list(result.worst), "n_instances": result.n_instances,
                                          "n_skipped": result.n_skipped, "n_checked": result.n_checked,
                                          "tolerance": result.tolerance, "passed": result.passed})
    print(result.summary())
    return 0 if result.passed else 1


def cmd_inspect_space(args, cfg: ExperimentConfig, out: Path) -> int:
    if args.space:
        space = import_space(args.space, args.kind)
    elif args.data:
        records = read_dataset(args.data)
        answers = build_answer_space(records, cfg.min_count)
        space = cooc_space_from_records(records, answers) if args.kind == "cooc" else \
            build_wordvec_space(answers, synthetic_lexicon(cfg.world, cfg.lexicon_dim))
    else:
        raise CliError("give either --space or --data")
    if args.query not in space.answers:
        raise CliError(f"answer {args.query!r} is not in the space")
    for answer, sim in space.nearest(args.query, args.top):
        print(f"{answer}\t{sim:.4f}")
    return 0


# --- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semvqa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_text, needs_out=True):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn, needs_out=needs_out)
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int)
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic changing-priors dataset")
    p.add_argument("--shift", type=float, help="prior-shift strength in [0, 1]")
    p.add_argument("--rho", type=float, help="annotator noise")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)

    p = add("build-space", cmd_build_space, "build a semantic answer space from training data")
    p.add_argument("--kind", choices=("cooc", "wordvec"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vectors", help="word-vector text file (default: synthetic lexicon)")

    p = add("train", cmd_train, "train the toy model")
    p.add_argument("--data", required=True)
    p.add_argument("--answers", help="answer dictionary (default: built from --data)")
    p.add_argument("--space", help="exported semantic space; omit for base loss only")
    p.add_argument("--space-kind", choices=("cooc", "wordvec"), default="cooc")
    p.add_argument("--lam", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--rubi", action="store_true")

    p = add("eval", cmd_eval, "evaluate a trained checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metric-space", help="Co-oc space used for the semantic error metric")

    p = add("experiment", cmd_experiment, "multi-seed comparison of all arms")
    p.add_argument("--seeds", type=int, help="number of seeds")
    p.add_argument("--seed-start", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--shift", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lam", type=float, nargs="+", help="one value, or several for a grid")
    p.add_argument("--k", type=int, nargs="+", help="one value, or several for a grid")

    p = add("grad-check", cmd_grad_check, "finite-difference check of the training gradient")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = add("inspect-space", cmd_inspect_space, "print the nearest answers to a query", needs_out=False)
    p.add_argument("--query", required=True)
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--kind", choices=("cooc", "wordvec"), default="cooc")
    p.add_argument("--space", help="exported space file")
    p.add_argument("--data", help="dataset to build the space from instead")
    return parser


def _normalize_grid(args) -> None:
    # a single grid value behaves like a plain override
    for name in ("lam", "k"):
        v = getattr(args, name, None)
        if isinstance(v, list) and len(v) == 1:
            setattr(args, name, v[0])


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _normalize_grid(args)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        out = None
        if args.needs_out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
        return args.func(args, cfg, out)
    except Exception as exc:  # noqa: BLE001 - one-line report is the contract
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
