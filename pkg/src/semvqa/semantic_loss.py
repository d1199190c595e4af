"""Semantic loss over a structured answer space, with exact logit gradients.

The prediction and the target are each projected into the semantic space by
a probability-weighted sum of their top-k class embeddings; the loss is one
minus the cosine of the two projections. It is added to a classification
loss (BCE on sigmoids by default, CE on softmax as an alternative).

Every function works on a single logit vector or a batch of them (leading
axis); batch losses are means over records, and batch gradients are
gradients of that mean.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Literal

import numpy as np

from .embedding import SemanticSpace

Activation = Literal["sigmoid", "softmax"]


@dataclass(frozen=True)
class LossConfig:
    lam: float = 10.0
    k: int = 10
    activation: Activation = "sigmoid"
    eps: float = 1e-12

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.activation not in ("sigmoid", "softmax"):
            raise ValueError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossValue:
    total: float
    base: float
    sem: float
    grad_logits: np.ndarray


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax(x):
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def log_softmax(x):
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def activate(logits, activation: Activation):
    return sigmoid(logits) if activation == "sigmoid" else softmax(logits)


def topk_indices(p, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis, largest first.

    Ties go to the smaller index.
    """
    p = np.asarray(p)
    n = p.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range [1, {n}]")
    return np.argsort(-p, axis=-1, kind="stable")[..., :k]


def topk_mask(p, k: int) -> np.ndarray:
    idx = topk_indices(p, k)
    mask = np.zeros(np.shape(p), dtype=bool)
    np.put_along_axis(mask, idx, True, axis=-1)
    return mask


def gamma(p, space: SemanticSpace | np.ndarray, k: int):
    """Sum of p_i * g(i) over the top-k entries of p (raw weights)."""
    G = space.vectors if isinstance(space, SemanticSpace) else np.asarray(space)
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != G.shape[0]:
        raise ValueError(f"probability length {p.shape[-1]} != {G.shape[0]} classes")
    return np.where(topk_mask(p, k), p, 0.0) @ G


def cosine(u, v, eps: float = 1e-12):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.maximum(np.linalg.norm(u, axis=-1), eps)
    nv = np.maximum(np.linalg.norm(v, axis=-1), eps)
    # rounding can push parallel vectors a few ulps past 1
    return np.clip(np.sum(u * v, axis=-1) / (nu * nv), -1.0, 1.0)


def cosine_strict(u, v) -> float:
    """Plain cosine similarity; raises on a zero vector."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ZeroDivisionError("cosine of a zero vector")
    return float(u @ v / (nu * nv))


def _reduce(values):
    return float(values) if np.ndim(values) == 0 else float(np.mean(values))


def _sem_parts(logits, y_star, space: SemanticSpace, cfg: LossConfig):
    p = activate(logits, cfg.activation)
    mask = topk_mask(p, cfg.k)
    u = np.where(mask, p, 0.0) @ space.vectors
    v = gamma(y_star, space, cfg.k)
    return p, mask, u, v


def sem_loss(logits, y_star, space: SemanticSpace, cfg: LossConfig) -> float:
    _, _, u, v = _sem_parts(logits, y_star, space, cfg)
    return _reduce(1.0 - cosine(u, v, cfg.eps))


def _activation_vjp(p, dp, activation: Activation):
    if activation == "sigmoid":
        return dp * p * (1.0 - p)
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


def sem_loss_grad(logits, y_star, space: SemanticSpace, cfg: LossConfig) -> np.ndarray:
    """Gradient of the semantic loss w.r.t. logits, top-k selection held fixed."""
    return _sem_value_and_grad(logits, y_star, space, cfg)[1]


def _sem_value_and_grad(logits, y_star, space, cfg):
    p, mask, u, v = _sem_parts(logits, y_star, space, cfg)
    nu = np.linalg.norm(u, axis=-1, keepdims=True)
    nv = np.linalg.norm(v, axis=-1, keepdims=True)
    du = np.maximum(nu, cfg.eps)
    dv = np.maximum(nv, cfg.eps)
    cos = np.sum(u * v, axis=-1, keepdims=True) / (du * dv)
    # the clamp has zero derivative below eps
    norm_term = np.where(nu > cfg.eps, cos * u / (du * np.maximum(nu, cfg.eps)), 0.0)
    d_u = -(v / (du * dv) - norm_term)
    d_p = np.where(mask, d_u @ space.vectors.T, 0.0)
    grad = _activation_vjp(p, d_p, cfg.activation)
    loss = 1.0 - np.clip(cos[..., 0], -1.0, 1.0)
    if np.ndim(loss) > 0:
        grad = grad / loss.shape[0]
    return _reduce(loss), grad


def ce_loss(logits, y_star):
    """-sum_i y*_i log softmax(y)_i, and its exact gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    y_star = np.asarray(y_star, dtype=np.float64)
    per = -np.sum(y_star * log_softmax(logits), axis=-1)
    grad = softmax(logits) * np.sum(y_star, axis=-1, keepdims=True) - y_star
    if np.ndim(per) > 0:
        grad = grad / per.shape[0]
    return _reduce(per), grad


def bce_loss(logits, y_star):
    """Class-averaged soft binary cross-entropy on sigmoid outputs.

    Uses log sigmoid(y) = -softplus(-y), so no clamping is needed.
    """
    logits = np.asarray(logits, dtype=np.float64)
    y_star = np.asarray(y_star, dtype=np.float64)
    n = logits.shape[-1]
    # -[t log s + (1-t) log(1-s)] = softplus(y) - t*y
    per = np.mean(np.logaddexp(0.0, logits) - y_star * logits, axis=-1)
    grad = (sigmoid(logits) - y_star) / n
    if np.ndim(per) > 0:
        grad = grad / per.shape[0]
    return _reduce(per), grad


def base_loss(logits, y_star, activation: Activation):
    return bce_loss(logits, y_star) if activation == "sigmoid" else ce_loss(logits, y_star)


def combined_loss(logits, y_star, space: SemanticSpace | None, cfg: LossConfig) -> LossValue:
    """Base loss plus lambda times the semantic loss.

    ``space`` may be None only when lambda is 0; the semantic term is then
    reported as 0 and never evaluated.
    """
    base, base_grad = base_loss(logits, y_star, cfg.activation)
    if cfg.lam == 0:
        return LossValue(base, base, 0.0, base_grad)
    if space is None:
        raise ValueError("a semantic space is required when lambda > 0")
    if np.shape(logits)[-1] != space.n_classes:
        raise ValueError(f"logit length {np.shape(logits)[-1]} != space size {space.n_classes}")
    sem, sem_grad = _sem_value_and_grad(logits, y_star, space, cfg)
    return LossValue(base + cfg.lam * sem, base, sem, base_grad + cfg.lam * sem_grad)
