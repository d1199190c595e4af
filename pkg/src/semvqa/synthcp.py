"""Synthetic mini-VQA with category-structured answers and a train/test prior shift.

Each question is generated from a template that asks about one category
(colors, dog breeds, ...). The true answer is drawn from the split's
per-template prior, the image features are a noisy copy of a per-answer
prototype, and ten simulated annotators either repeat the truth or
substitute another member of the same category.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .answer_space import (
    N_ANNOTATORS,
    AnnotationRecord,
    RecordFormatError,
    iter_json_lines,
    record_from_json,
    record_to_json,
)
from .embedding import WordVectorLexicon

DEFAULT_CATEGORIES = (
    ("colors", ("orange", "white", "red", "blue", "green", "gray", "black", "pink", "brown", "yellow")),
    ("dogs", ("puppy", "golden retriever", "german shepherd", "husky", "terrier", "labrador",
              "sheepdog", "rottweiler", "corgi")),
    ("motorcycles", ("yamaha", "kawasaki", "harley", "suzuki")),
    ("trees", ("log", "palm tree", "tree branch", "christmas tree")),
)

DEFAULT_TEMPLATES = (
    ("color_what", ("what", "color", "is", "the", "object"), "colors"),
    ("color_which", ("which", "color", "is", "shown"), "colors"),
    ("dog_breed", ("what", "breed", "is", "the", "dog"), "dogs"),
    ("dog_kind", ("what", "kind", "of", "dog", "is", "this"), "dogs"),
    ("moto_brand", ("what", "brand", "is", "the", "motorcycle"), "motorcycles"),
    ("moto_make", ("who", "makes", "this", "motorcycle"), "motorcycles"),
    ("tree_type", ("what", "type", "of", "tree", "is", "it"), "trees"),
    ("tree_what", ("what", "is", "on", "the", "tree"), "trees"),
)


class WorldConfigError(ValueError):
    pass


@dataclass
class WorldSpec:
    categories: list[tuple[str, tuple[str, ...]]] = field(
        default_factory=lambda: [(n, tuple(m)) for n, m in DEFAULT_CATEGORIES])
    templates: list[tuple[str, tuple[str, ...], str]] = field(
        default_factory=lambda: [(t, tuple(toks), c) for t, toks, c in DEFAULT_TEMPLATES])
    feature_dim: int = 16
    feature_noise: float = 0.5
    centroid_scale: float = 1.0
    member_scale: float = 1.0
    annotator_noise: float = 0.1
    # relative substitution weight for each member, per category
    confusion: dict[str, list[float]] = field(default_factory=dict)
    # without explicit weights: exp(-|proto_a - proto_b|^2 / T) if set, else uniform
    confusion_temperature: float | None = 1.0
    world_seed: int = 0

    def __post_init__(self):
        self.categories = [(str(n), tuple(m)) for n, m in self.categories]
        self.templates = [(str(t), tuple(toks), str(c)) for t, toks, c in self.templates]
        names = [n for n, _ in self.categories]
        if len(set(names)) != len(names):
            raise WorldConfigError("duplicate category names")
        members = [a for _, m in self.categories for a in m]
        if len(set(members)) != len(members):
            raise WorldConfigError("categories must be disjoint")
        if any(not m for _, m in self.categories):
            raise WorldConfigError("empty category")
        if len({t for t, _, _ in self.templates}) != len(self.templates):
            raise WorldConfigError("duplicate template ids")
        for t, _, c in self.templates:
            if c not in names:
                raise WorldConfigError(f"template {t!r} refers to unknown category {c!r}")
        if not 0 <= self.annotator_noise < 1:
            raise WorldConfigError("annotator noise must be in [0, 1)")
        for c, w in self.confusion.items():
            if len(w) != len(self.members(c)) or any(x < 0 for x in w):
                raise WorldConfigError(f"bad confusion weights for {c!r}")

    @property
    def answers(self) -> list[str]:
        return [a for _, m in self.categories for a in m]

    def members(self, category: str) -> tuple[str, ...]:
        return dict(self.categories)[category]

    def category_of(self) -> dict[str, str]:
        return {a: n for n, m in self.categories for a in m}

    def template(self, template_id: str) -> tuple[tuple[str, ...], str]:
        for t, toks, c in self.templates:
            if t == template_id:
                return toks, c
        raise KeyError(template_id)

    def question_tokens(self, template_id: str) -> tuple[str, ...]:
        toks, category = self.template(template_id)
        return toks + (category,)

    def prototypes(self) -> dict[str, np.ndarray]:
        """Noiseless scene attribute vector per answer (centroid + member offset)."""
        rng = np.random.default_rng([self.world_seed, 1])
        out = {}
        for _, members in self.categories:
            centroid = _unit(rng.standard_normal(self.feature_dim)) * self.centroid_scale
            for a in members:
                out[a] = centroid + _unit(rng.standard_normal(self.feature_dim)) * self.member_scale
        return out

    def substitutes(self, truth: str) -> tuple[list[str], np.ndarray]:
        """Same-category alternatives to ``truth`` and their substitution probabilities."""
        category = self.category_of()[truth]
        members = self.members(category)
        others = [a for a in members if a != truth]
        if not others:
            return [], np.zeros(0)
        if category in self.confusion:
            w = np.array([x for a, x in zip(members, self.confusion[category]) if a != truth], dtype=np.float64)
        elif self.confusion_temperature:
            protos = self._protos()
            d2 = np.array([np.sum((protos[truth] - protos[a]) ** 2) for a in others])
            w = np.exp(-(d2 - d2.min()) / self.confusion_temperature)
        else:
            w = np.ones(len(others))
        if w.sum() <= 0:
            return [], np.zeros(0)
        return others, w / w.sum()

    def _protos(self) -> dict[str, np.ndarray]:
        cache = self.__dict__.get("_proto_cache")
        if cache is None:
            cache = self.prototypes()
            self.__dict__["_proto_cache"] = cache
        return cache

    def to_dict(self) -> dict:
        d = asdict(self)
        d["categories"] = [[n, list(m)] for n, m in self.categories]
        d["templates"] = [[t, list(toks), c] for t, toks, c in self.templates]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        return cls(**d)


@dataclass
class PriorShiftConfig:
    """Per-template answer priors for the two splits.

    Each template's prior mixes a uniform distribution with a point mass on
    a mode answer: ``(1 - strength) * uniform + strength * mode``. Templates
    of the same category swap modes between train and test. Explicit
    ``train``/``test`` priors (template id -> weights over category members)
    override the generated ones.
    """

    strength: float = 0.8
    train: dict[str, list[float]] = field(default_factory=dict)
    test: dict[str, list[float]] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.strength <= 1:
            raise WorldConfigError("shift strength must be in [0, 1]")

    def priors(self, world: WorldSpec) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        train, test = {}, {}
        by_category: dict[str, list[str]] = {}
        for t, _, c in world.templates:
            by_category.setdefault(c, []).append(t)
        for c, tids in by_category.items():
            n = len(world.members(c))
            modes = [j % n for j in range(len(tids))]
            for j, t in enumerate(tids):
                train_mode = modes[j]
                test_mode = modes[(j + 1) % len(tids)] if len(tids) > 1 else (train_mode + 1) % n
                train[t] = _mixture(n, train_mode, self.strength)
                test[t] = _mixture(n, test_mode, self.strength)
        for src, dst in ((self.train, train), (self.test, test)):
            for t, w in src.items():
                dst[t] = np.asarray(w, dtype=np.float64)
        for split in (train, test):
            for t, w in split.items():
                if w.shape != (len(world.members(world.template(t)[1])),) or np.any(w < 0):
                    raise WorldConfigError(f"bad prior for template {t!r}")
                total = w.sum()
                if not total > 0:
                    raise WorldConfigError(f"prior for template {t!r} has no mass")
                split[t] = w / total
        return train, test

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PriorShiftConfig":
        return cls(**d)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x)


def _mixture(n: int, mode: int, s: float) -> np.ndarray:
    w = np.full(n, (1.0 - s) / n)
    w[mode] += s
    return w


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


@dataclass(frozen=True)
class SynthRecord(AnnotationRecord):
    template_id: str = ""
    truth: str = ""
    attributes: tuple[float, ...] = ()

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "attributes", tuple(float(x) for x in self.attributes))

    @property
    def features(self) -> np.ndarray:
        return np.asarray(self.scene_ref, dtype=np.float64)


def simulate_annotators(truth: str, world: WorldSpec, seed) -> list[str]:
    """Ten answers: the truth w.p. 1 - noise, else a same-category substitute."""
    rng = np.random.default_rng(seed)
    others, probs = world.substitutes(truth)
    if not others:
        return [truth] * N_ANNOTATORS
    flips = rng.random(N_ANNOTATORS) < world.annotator_noise
    subs = rng.choice(len(others), size=N_ANNOTATORS, p=probs)
    return [others[s] if f else truth for f, s in zip(flips, subs)]


def _sample_split(world: WorldSpec, priors: dict[str, np.ndarray], n: int, rng: np.random.Generator,
                  name: str) -> list[SynthRecord]:
    protos = world._protos()
    template_ids = [t for t, _, _ in world.templates]
    out = []
    for q in range(n):
        t = template_ids[rng.integers(len(template_ids))]
        members = world.members(world.template(t)[1])
        truth = members[rng.choice(len(members), p=priors[t])]
        attrs = protos[truth]
        feats = attrs + world.feature_noise * rng.standard_normal(world.feature_dim)
        out.append(SynthRecord(
            question_id=f"{name}-{q:06d}",
            question_tokens=world.question_tokens(t),
            scene_ref=tuple(feats),
            annotator_answers=tuple(simulate_annotators(truth, world, rng)),
            template_id=t,
            truth=truth,
            attributes=tuple(attrs),
        ))
    return out


def gen_dataset(world: WorldSpec, shift: PriorShiftConfig, n_train: int, n_test: int,
                seed: int) -> tuple[list[SynthRecord], list[SynthRecord]]:
    if n_train < 1 or n_test < 1:
        raise WorldConfigError("split sizes must be at least 1")
    train_prior, test_prior = shift.priors(world)
    rng = np.random.default_rng(seed)
    train = _sample_split(world, train_prior, n_train, rng, "train")
    test = _sample_split(world, test_prior, n_test, rng, "test")
    return train, test


def gen_split(world: WorldSpec, priors: dict[str, np.ndarray], n: int, seed, name: str) -> list[SynthRecord]:
    """A single split drawn from explicit per-template priors."""
    return _sample_split(world, priors, n, np.random.default_rng(seed), name)


def synthetic_lexicon(world: WorldSpec, dim: int = 50, spread: float = 0.5,
                      seed: int | None = None) -> WordVectorLexicon:
    """Random word vectors drawn around a shared centroid per category.

    A token used by several categories takes the centroid of the first one.
    """
    rng = np.random.default_rng([world.world_seed if seed is None else seed, 2])
    lex = WordVectorLexicon()
    for _, members in world.categories:
        centroid = _unit(rng.standard_normal(dim))
        for answer in members:
            for token in answer.split():
                if token not in lex:
                    lex[token] = centroid + spread * rng.standard_normal(dim) / np.sqrt(dim)
    return lex


# --- dataset files ---------------------------------------------------------------------

def write_dataset(records: Sequence[AnnotationRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = record_to_json(rec)
            if isinstance(rec, SynthRecord):
                obj["template"] = rec.template_id
                obj["truth"] = rec.truth
                obj["attributes"] = list(rec.attributes)
            fh.write(json.dumps(obj) + "\n")


def read_dataset(path: str | Path) -> list[AnnotationRecord]:
    """Read annotation lines; lines with latent fields become SynthRecords."""
    records: list[AnnotationRecord] = []
    seen = set()
    for lineno, obj in iter_json_lines(path):
        try:
            rec = record_from_json(obj)
            if "truth" in obj:
                rec = SynthRecord(
                    question_id=rec.question_id,
                    question_tokens=rec.question_tokens,
                    scene_ref=rec.scene_ref,
                    annotator_answers=rec.annotator_answers,
                    template_id=str(obj.get("template", "")),
                    truth=str(obj["truth"]),
                    attributes=tuple(obj.get("attributes", ())),
                )
        except (ValueError, TypeError) as exc:
            raise RecordFormatError(lineno, str(exc)) from None
        if rec.question_id in seen:
            raise RecordFormatError(lineno, f"duplicate question_id {rec.question_id!r}")
        seen.add(rec.question_id)
        records.append(rec)
    return records
