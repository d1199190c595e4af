"""A small reverse-mode autodiff core over 2-D arrays, plus the toy VQA model.

``Tensor`` wraps a 2-D numpy array and records the ops that produced it.
``Tensor.backward`` walks the graph in reverse topological order. Only the
handful of ops the toy model needs are implemented.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .semantic_loss import sigmoid

UNK = "<unk>"


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "name")

    def __init__(self, data, parents: tuple["Tensor", ...] = (), name: str | None = None):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"Tensor needs a 2-D array, got shape {data.shape}")
        self.data = data
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor({self.name or ''}{self.shape})"

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad = g.copy() if self.grad is None else self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def __matmul__(self, other: "Tensor") -> "Tensor":
        out = Tensor(self.data @ other.data, (self, other))

        def backward(g):
            self._accumulate(g @ other.data.T)
            other._accumulate(self.data.T @ g)

        out._backward = backward
        return out

    def __add__(self, other: "Tensor") -> "Tensor":
        """Elementwise add; a (1, n) operand is broadcast over rows."""
        out = Tensor(self.data + other.data, (self, other))

        def backward(g):
            for t in (self, other):
                t._accumulate(g.sum(axis=0, keepdims=True) if t.shape[0] == 1 and g.shape[0] != 1 else g)

        out._backward = backward
        return out

    def __mul__(self, other: "Tensor") -> "Tensor":
        out = Tensor(self.data * other.data, (self, other))

        def backward(g):
            self._accumulate(g * other.data)
            other._accumulate(g * self.data)

        out._backward = backward
        return out

    def relu(self) -> "Tensor":
        out = Tensor(np.maximum(self.data, 0.0), (self,))

        def backward(g):
            self._accumulate(g * (self.data > 0))

        out._backward = backward
        return out

    def sigmoid(self) -> "Tensor":
        s = sigmoid(self.data)
        out = Tensor(s, (self,))

        def backward(g):
            self._accumulate(g * s * (1.0 - s))

        out._backward = backward
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ValueError(f"upstream gradient shape {grad.shape} != {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Column-wise concatenation."""
    out = Tensor(np.concatenate([a.data, b.data], axis=1), (a, b))
    split = a.shape[1]

    def backward(g):
        a._accumulate(g[:, :split])
        b._accumulate(g[:, split:])

    out._backward = backward
    return out


def constant(data) -> Tensor:
    return Tensor(data)


# --- parameters and layers ---------------------------------------------------------------

def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


@dataclass
class Dense:
    weight: Tensor
    bias: Tensor
    activation: str = "relu"

    def __call__(self, x: Tensor) -> Tensor:
        h = x @ self.weight + self.bias
        return h.relu() if self.activation == "relu" else h


class DenseNet:
    """Stack of dense layers; ``sizes`` = [in, hidden..., out]."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, prefix: str = "mlp",
                 final_activation: str = "identity"):
        self.layers: list[Dense] = []
        for n, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = final_activation if n == len(sizes) - 2 else "relu"
            self.layers.append(Dense(Tensor(glorot(rng, a, b), name=f"{prefix}.{n}.weight"),
                                     Tensor(np.zeros((1, b)), name=f"{prefix}.{n}.bias"), act))

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in (layer.weight, layer.bias)]


@dataclass(frozen=True)
class ModelConfig:
    question_dim: int = 32
    image_dim: int = 16
    image_hidden: int = 32
    fusion_hidden: int = 64


class Vocabulary:
    """Token -> row of the embedding table; row 0 is reserved for unknown tokens."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens = [UNK] + sorted(set(tokens) - {UNK})
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(t, 0) for t in tokens]

    def pooling_matrix(self, batch: Sequence[Sequence[str]]) -> np.ndarray:
        """Row b averages the one-hot rows of question b's tokens."""
        pool = np.zeros((len(batch), len(self)))
        for b, tokens in enumerate(batch):
            ids = self.ids(tokens) or [0]
            for i in ids:
                pool[b, i] += 1.0
            pool[b] /= len(ids)
        return pool


class ToyVqaModel:
    """logits = MLP([mean-pooled question embedding, linear image encoding])."""

    def __init__(self, vocab: Vocabulary, n_classes: int, cfg: ModelConfig = ModelConfig(),
                 seed: int = 0):
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.cfg = cfg
        self.n_classes = n_classes
        self.embed = Tensor(glorot(rng, len(vocab), cfg.question_dim), name="question.embed")
        self.image_enc = Dense(Tensor(glorot(rng, cfg.image_dim, cfg.image_hidden), name="image.weight"),
                               Tensor(np.zeros((1, cfg.image_hidden)), name="image.bias"), "identity")
        self.fusion = DenseNet([cfg.question_dim + cfg.image_hidden, cfg.fusion_hidden, n_classes],
                               rng, prefix="fusion")
        self._tape: Tensor | None = None
        self._hq: Tensor | None = None

    def parameters(self) -> list[Tensor]:
        return [self.embed, self.image_enc.weight, self.image_enc.bias, *self.fusion.parameters()]

    def encode_question(self, questions: Sequence[Sequence[str]]) -> Tensor:
        return constant(self.vocab.pooling_matrix(questions)) @ self.embed

    def forward(self, image_feats, questions: Sequence[Sequence[str]]) -> Tensor:
        """Batched forward pass; records the graph for ``backward``."""
        feats = np.atleast_2d(np.asarray(image_feats, dtype=np.float64))
        if feats.shape[1] != self.cfg.image_dim:
            raise ValueError(f"image feature dim {feats.shape[1]} != {self.cfg.image_dim}")
        if feats.shape[0] != len(questions):
            raise ValueError("batch sizes of images and questions differ")
        h_q = self.encode_question(questions)
        h_v = self.image_enc(constant(feats))
        logits = self.fusion(concat(h_q, h_v))
        self._hq = h_q
        self._tape = logits
        return logits

    def predict_logits(self, image_feats, questions) -> np.ndarray:
        logits = self.forward(image_feats, questions).data
        self._tape = self._hq = None
        return logits

    def backward(self, grad_logits, output: Tensor | None = None) -> dict[str, np.ndarray]:
        """Backpropagate ``grad_logits`` from the last recorded forward.

        Returns gradients keyed by parameter name and clears the tape.
        """
        out = output if output is not None else self._tape
        if out is None:
            raise RuntimeError("backward called without a recorded forward pass")
        params = self.parameters()
        for p in params:
            p.zero_grad()
        out.backward(np.atleast_2d(grad_logits))
        self._tape = self._hq = None
        return {p.name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for p in params}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if state[p.name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {p.name}")
            p.data = np.array(state[p.name], dtype=np.float64)


class RubiBranch:
    """Question-only classifier whose sigmoid masks the main logits in training."""

    def __init__(self, question_dim: int, n_classes: int, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.net = DenseNet([question_dim, hidden, n_classes], rng, prefix="rubi")

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.data = np.array(state[p.name], dtype=np.float64)


def rubi_forward(model: ToyVqaModel, branch: RubiBranch | None, image_feats, questions,
                 training: bool) -> Tensor:
    """Main logits, multiplied by sigmoid(question-only logits) when training.

    At inference the branch is not evaluated at all.
    """
    logits = model.forward(image_feats, questions)
    if not training or branch is None:
        return logits
    mask = branch.net(model._hq).sigmoid()
    masked = logits * mask
    model._tape = masked
    return masked


def backward_all(output: Tensor, grad_logits, params: Sequence[Tensor]) -> dict[str, np.ndarray]:
    for p in params:
        p.zero_grad()
    output.backward(np.atleast_2d(grad_logits))
    return {p.name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for p in params}


# --- optimizer -------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def step_adam(params: Sequence[Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``."""
    for p in params:
        g = grads[p.name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {p.name}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block {p.name}")
    state.step += 1
    t = state.step
    for p in params:
        g = grads[p.name]
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


# --- checkpoints -----------------------------------------------------------------------

def save_checkpoint(blocks: dict[str, np.ndarray], path: str | Path, meta: dict | None = None) -> None:
    """Named parameter blocks as JSON text, sorted by name."""
    payload = {
        "meta": meta or {},
        "blocks": [{"name": name, "shape": list(blocks[name].shape),
                    "data": [float(x) for x in blocks[name].ravel()]}
                   for name in sorted(blocks)],
    }
    Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    blocks = {b["name"]: np.array(b["data"], dtype=np.float64).reshape(b["shape"])
              for b in payload["blocks"]}
    return blocks, payload.get("meta", {})


# --- gradient checking -----------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple[str, tuple[int, ...]]
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        name, idx = self.worst
        return (f"max_rel_error={self.max_rel_error:.3e} worst={name}{list(idx)} "
                f"checked={self.n_checked} tol={self.tolerance:g} {status}")


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    """|a - b| relative to the larger magnitude; below ``floor`` the error is absolute / floor."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(loss_fn: Callable[[], float], params: Sequence[Tensor], analytic: dict[str, np.ndarray],
               tolerance: float = 1e-4, h: float = 1e-5, n_samples: int | None = 50,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences of ``loss_fn``.

    ``loss_fn`` re-evaluates the loss from the current parameter values.
    ``n_samples`` coordinates are drawn per parameter block (all if None).
    """
    rng = rng or np.random.default_rng(0)
    worst_err, worst, n = -1.0, ("", ()), 0
    for p in params:
        flat = p.data.reshape(-1)
        size = flat.size
        coords = range(size) if n_samples is None or n_samples >= size else \
            rng.choice(size, size=n_samples, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            f_plus = loss_fn()
            flat[c] = orig - h
            f_minus = loss_fn()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            err = relative_error(float(analytic[p.name].reshape(-1)[c]), numeric)
            n += 1
            if err > worst_err:
                worst_err, worst = err, (p.name, tuple(int(i) for i in np.unravel_index(c, p.data.shape)))
    return GradCheckReport(worst_err, worst, n, tolerance)
