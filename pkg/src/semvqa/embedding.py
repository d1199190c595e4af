"""Semantic spaces over the answer dictionary.

Two estimators are provided: a co-occurrence space built from multi-annotator
records and a word-vector space built by averaging token vectors.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

from .answer_space import AnnotationRecord, AnswerSpace

log = logging.getLogger(__name__)

SpaceKind = Literal["cooc", "wordvec"]


class EmbeddingError(ValueError):
    pass


def log_smooth(x):
    """Count transform used by the co-occurrence score: ln(1 + x)."""
    return np.log1p(x)


@dataclass
class CoocStats:
    occ: np.ndarray
    cooc: np.ndarray
    n_questions: int

    @classmethod
    def zeros(cls, n_classes: int) -> "CoocStats":
        return cls(np.zeros(n_classes, dtype=np.int64), np.zeros((n_classes, n_classes), dtype=np.int64), 0)

    def check(self) -> None:
        if not np.array_equal(self.cooc, self.cooc.T):
            raise EmbeddingError("co-occurrence counts are not symmetric")
        if not np.array_equal(np.diag(self.cooc), self.occ):
            raise EmbeddingError("co-occurrence diagonal differs from occurrence counts")
        if np.any(self.cooc > np.minimum.outer(self.occ, self.occ)):
            raise EmbeddingError("pair count exceeds a marginal count")
        if np.any(self.occ > self.n_questions):
            raise EmbeddingError("occurrence count exceeds number of questions")


def count_cooc(records: Iterable[AnnotationRecord], space: AnswerSpace) -> CoocStats:
    """Per-record presence counts for single answers and answer pairs."""
    stats = CoocStats.zeros(space.n_classes)
    for rec in records:
        stats.n_questions += 1
        ids = sorted({space.index[a] for a in rec.distinct_answers() if a in space.index})
        if not ids:
            continue
        ids = np.asarray(ids)
        stats.occ[ids] += 1
        stats.cooc[np.ix_(ids, ids)] += 1
    return stats


@dataclass(frozen=True, eq=False)
class SemanticSpace:
    """Row i is the embedding g(i) of answer class i."""

    vectors: np.ndarray
    kind: SpaceKind
    answers: tuple[str, ...] = ()
    missing: tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise EmbeddingError("space vectors must be a 2-D matrix")
        if not np.all(np.isfinite(vectors)):
            raise EmbeddingError("space contains non-finite entries")
        if self.kind not in ("cooc", "wordvec"):
            raise EmbeddingError(f"unknown space kind {self.kind!r}")
        if self.kind == "cooc":
            if vectors.shape[0] != vectors.shape[1]:
                raise EmbeddingError("cooc space must be square")
            if np.any(vectors < 0):
                raise EmbeddingError("cooc space must be nonnegative")
        if self.answers and len(self.answers) != vectors.shape[0]:
            raise EmbeddingError("answer labels do not match the number of rows")
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "answers", tuple(self.answers))

    def __eq__(self, other):
        if not isinstance(other, SemanticSpace):
            return NotImplemented
        return (self.kind == other.kind and self.answers == other.answers
                and np.array_equal(self.vectors, other.vectors))

    @property
    def n_classes(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def scaled(self, c: float) -> "SemanticSpace":
        return SemanticSpace(self.vectors * c, self.kind, self.answers)

    def cosine_matrix(self, eps: float = 1e-12) -> np.ndarray:
        norms = np.maximum(np.linalg.norm(self.vectors, axis=1), eps)
        unit = self.vectors / norms[:, None]
        return unit @ unit.T

    def nearest(self, answer: str, top: int = 5) -> list[tuple[str, float]]:
        """Answers closest to ``answer`` by cosine, excluding itself."""
        if not self.answers:
            raise EmbeddingError("space has no answer labels")
        try:
            i = self.answers.index(answer)
        except ValueError:
            raise KeyError(f"answer {answer!r} not in space") from None
        sims = self.cosine_matrix()[i]
        order = [j for j in np.argsort(-sims, kind="stable") if j != i]
        return [(self.answers[j], float(sims[j])) for j in order[:top]]


def build_cooc_space(stats: CoocStats, answers: tuple[str, ...] = ()) -> SemanticSpace:
    """c_ij = L(|(i,j)|) / (L(|(i)|) L(|(j)|)) with L(x) = ln(1 + x)."""
    zero = np.flatnonzero(stats.occ == 0)
    if zero.size:
        raise EmbeddingError(f"answer classes {zero.tolist()} never occur in the counted records")
    occ_log = log_smooth(stats.occ.astype(np.float64))
    vectors = log_smooth(stats.cooc.astype(np.float64)) / np.outer(occ_log, occ_log)
    return SemanticSpace(vectors, "cooc", answers)


def cooc_space_from_records(records, space: AnswerSpace) -> SemanticSpace:
    return build_cooc_space(count_cooc(records, space), space.answers)


# --- word vectors ----------------------------------------------------------------------

class WordVectorLexicon(dict):
    """token -> vector, all of one dimension."""

    @property
    def dim(self) -> int:
        return len(next(iter(self.values()))) if self else 0


def load_word_vectors(path: str | Path) -> WordVectorLexicon:
    """Read the GloVe-style text format: ``token v1 ... vd`` per line.

    A repeated token keeps its last vector.
    """
    lex = WordVectorLexicon()
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            token, raw = parts[0], parts[1:]
            if dim is None:
                dim = len(raw)
                if dim == 0:
                    raise EmbeddingError(f"{path}:{lineno}: token {token!r} has no vector")
            elif len(raw) != dim:
                raise EmbeddingError(f"{path}:{lineno}: expected {dim} values, got {len(raw)}")
            try:
                vec = np.array([float(x) for x in raw])
            except ValueError:
                raise EmbeddingError(f"{path}:{lineno}: unparsable number") from None
            if not np.all(np.isfinite(vec)):
                raise EmbeddingError(f"{path}:{lineno}: non-finite value")
            lex[token] = vec
    return lex


def save_word_vectors(lex: dict, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for token, vec in lex.items():
            fh.write(token + " " + " ".join(repr(float(x)) for x in vec) + "\n")


def build_wordvec_space(space: AnswerSpace, lexicon: WordVectorLexicon) -> SemanticSpace:
    """Mean of token vectors per answer; answers with no known token get a zero row."""
    if not lexicon:
        raise EmbeddingError("empty lexicon")
    vectors = np.zeros((space.n_classes, lexicon.dim))
    missing = []
    for i, answer in enumerate(space.answers):
        hits = [lexicon[t] for t in answer.split() if t in lexicon]
        if hits:
            vectors[i] = np.mean(hits, axis=0)
        else:
            missing.append(i)
    if missing:
        log.warning("no word vector for %d answer(s): %s", len(missing),
                    ", ".join(space.answers[i] for i in missing))
    return SemanticSpace(vectors, "wordvec", space.answers, tuple(missing))


# --- export ----------------------------------------------------------------------------

def export_space(space: SemanticSpace, path: str | Path) -> None:
    """One line per class: answer, then the row, tab-separated."""
    labels = space.answers or tuple(str(i) for i in range(space.n_classes))
    with open(path, "w", encoding="utf-8") as fh:
        for label, row in zip(labels, space.vectors):
            fh.write("\t".join([label] + [repr(float(x)) for x in row]) + "\n")


def import_space(path: str | Path, kind: SpaceKind = "wordvec") -> SemanticSpace:
    answers, rows = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            try:
                rows.append([float(x) for x in parts[1:]])
            except ValueError:
                raise EmbeddingError(f"{path}:{lineno}: unparsable number") from None
            answers.append(parts[0])
    if len({len(r) for r in rows}) > 1:
        raise EmbeddingError(f"{path}: rows have different widths")
    return SemanticSpace(np.array(rows), kind, tuple(answers))


def mean_cosines_by_group(space: SemanticSpace, groups: dict[int, int]) -> tuple[float, float]:
    """Mean cosine over within-group and cross-group pairs of distinct classes."""
    sims = space.cosine_matrix()
    within, cross = [], []
    ids = sorted(groups)
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            i, j = ids[a], ids[b]
            (within if groups[i] == groups[j] else cross).append(sims[i, j])
    return (math.fsum(within) / len(within) if within else float("nan"),
            math.fsum(cross) / len(cross) if cross else float("nan"))
