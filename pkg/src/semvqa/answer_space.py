"""Answer dictionary, annotation records and soft targets."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

N_ANNOTATORS = 10

_WS = re.compile(r"\s+")


class AnswerSpaceError(ValueError):
    pass


class RecordFormatError(ValueError):
    """Malformed line in an annotation file."""

    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


def normalize_answer(text: str) -> str:
    return _WS.sub(" ", text.strip().lower())


@dataclass(frozen=True)
class AnnotationRecord:
    question_id: str
    question_tokens: tuple[str, ...]
    scene_ref: str | tuple[float, ...]
    annotator_answers: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "question_tokens", tuple(self.question_tokens))
        object.__setattr__(self, "annotator_answers", tuple(self.annotator_answers))
        if not isinstance(self.scene_ref, str):
            object.__setattr__(self, "scene_ref", tuple(float(x) for x in self.scene_ref))

    def validate(self, n_annotators: int = N_ANNOTATORS) -> None:
        if len(self.annotator_answers) != n_annotators:
            raise ValueError(
                f"record {self.question_id!r}: expected {n_annotators} answers, "
                f"got {len(self.annotator_answers)}"
            )
        if any(not normalize_answer(a) for a in self.annotator_answers):
            raise ValueError(f"record {self.question_id!r}: empty annotator answer")

    def distinct_answers(self) -> set[str]:
        return {normalize_answer(a) for a in self.annotator_answers}

    def answer_counts(self) -> Counter:
        return Counter(normalize_answer(a) for a in self.annotator_answers)


@dataclass(frozen=True)
class AnswerSpace:
    """Ordered answer dictionary; class id = position in ``answers``."""

    answers: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        answers = tuple(self.answers)
        object.__setattr__(self, "answers", answers)
        if len(answers) < 2:
            raise AnswerSpaceError(f"answer space needs at least 2 answers, got {len(answers)}")
        for a in answers:
            if not a or a != normalize_answer(a):
                raise AnswerSpaceError(f"answer {a!r} is empty or not normalized")
        index = {a: i for i, a in enumerate(answers)}
        if len(index) != len(answers):
            raise AnswerSpaceError("duplicate answers in dictionary")
        object.__setattr__(self, "index", index)

    @property
    def n_classes(self) -> int:
        return len(self.answers)

    def __len__(self) -> int:
        return len(self.answers)

    def __contains__(self, answer: str) -> bool:
        return normalize_answer(answer) in self.index

    def id_of(self, answer: str) -> int:
        return self.index[normalize_answer(answer)]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(a + "\n" for a in self.answers), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "AnswerSpace":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(line for line in lines if line))


def build_answer_space(records: Iterable[AnnotationRecord], min_count: int = 1) -> AnswerSpace:
    """Keep answers seen in at least ``min_count`` records.

    Ordering is by descending record frequency, ties broken lexicographically.
    An answer counts once per record no matter how many annotators gave it.
    """
    if min_count < 1:
        raise ValueError("min_count must be positive")
    freq: Counter = Counter()
    n = 0
    for rec in records:
        n += 1
        freq.update(rec.distinct_answers())
    if n == 0:
        raise AnswerSpaceError("cannot build an answer space from an empty record stream")
    kept = sorted((a for a, c in freq.items() if c >= min_count), key=lambda a: (-freq[a], a))
    if len(kept) < 2:
        raise AnswerSpaceError(f"only {len(kept)} answer(s) reach min_count={min_count}")
    return AnswerSpace(tuple(kept))


def soft_targets(record: AnnotationRecord, space: AnswerSpace) -> np.ndarray:
    """VQA-style soft score per class: min(#annotators giving the answer / 3, 1)."""
    values = np.zeros(space.n_classes)
    for answer, m in record.answer_counts().items():
        i = space.index.get(answer)
        if i is not None:
            values[i] = min(m / 3.0, 1.0)
    return values


def soft_target_matrix(records: Sequence[AnnotationRecord], space: AnswerSpace) -> np.ndarray:
    out = np.zeros((len(records), space.n_classes))
    for r, rec in enumerate(records):
        out[r] = soft_targets(rec, space)
    return out


def one_hot(class_id: int, space: AnswerSpace | int) -> np.ndarray:
    n = space if isinstance(space, int) else space.n_classes
    if not 0 <= class_id < n:
        raise IndexError(f"class id {class_id} out of range [0, {n})")
    values = np.zeros(n)
    values[class_id] = 1.0
    return values


def majority_answer(record: AnnotationRecord, space: AnswerSpace) -> int | None:
    """Most frequent in-dictionary annotator answer; lowest class id wins ties."""
    best = None
    best_m = 0
    for answer, m in record.answer_counts().items():
        i = space.index.get(answer)
        if i is None:
            continue
        if m > best_m or (m == best_m and i < best):
            best, best_m = i, m
    return best


# --- line-delimited annotation format -------------------------------------------------

def record_to_json(rec: AnnotationRecord) -> dict:
    scene = rec.scene_ref if isinstance(rec.scene_ref, str) else list(rec.scene_ref)
    return {
        "question_id": rec.question_id,
        "question": " ".join(rec.question_tokens),
        "scene": scene,
        "answers": list(rec.annotator_answers),
    }


def record_from_json(obj: dict, n_annotators: int = N_ANNOTATORS) -> AnnotationRecord:
    for key in ("question_id", "question", "scene", "answers"):
        if key not in obj:
            raise ValueError(f"missing field {key!r}")
    scene = obj["scene"]
    if not isinstance(scene, str):
        if not isinstance(scene, list) or not all(isinstance(x, (int, float)) for x in scene):
            raise ValueError("scene must be a string id or a list of numbers")
    answers = obj["answers"]
    if not isinstance(answers, list) or not all(isinstance(a, str) for a in answers):
        raise ValueError("answers must be a list of strings")
    rec = AnnotationRecord(
        question_id=str(obj["question_id"]),
        question_tokens=tuple(str(obj["question"]).split()),
        scene_ref=scene,
        annotator_answers=tuple(answers),
    )
    rec.validate(n_annotators)
    return rec


def iter_json_lines(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordFormatError(lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise RecordFormatError(lineno, "expected a JSON object")
            yield lineno, obj


def read_annotations(path: str | Path, n_annotators: int = N_ANNOTATORS) -> list[AnnotationRecord]:
    records = []
    seen = set()
    for lineno, obj in iter_json_lines(path):
        try:
            rec = record_from_json(obj, n_annotators)
        except ValueError as exc:
            raise RecordFormatError(lineno, str(exc)) from None
        if rec.question_id in seen:
            raise RecordFormatError(lineno, f"duplicate question_id {rec.question_id!r}")
        seen.add(rec.question_id)
        records.append(rec)
    return records


def write_annotations(records: Iterable[AnnotationRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_json(rec)) + "\n")
