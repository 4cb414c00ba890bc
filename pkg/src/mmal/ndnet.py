"""Small dense-tensor autodiff on top of numpy.

Only the handful of ops the multimodal classifier needs are provided. Every op
records itself on the active :class:`Tape`; :func:`backward` walks the tape in
reverse and returns gradients for the trainable parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


class TapeError(RuntimeError):
    pass


class Tensor:
    """A numpy array with an optional gradient slot on the active tape."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def Parameter(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


# --------------------------------------------------------------------------- tape

_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive ops.

    Used as a context manager; ops executed inside the ``with`` block whose
    inputs need gradients are appended in execution order, which is already a
    topological order of the graph.
    """

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False
        self._needs: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.ops)

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._needs

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        self.ops.append((out, inputs, vjp))
        self._needs.add(id(out))


def _record(out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if _ACTIVE:
        tape = _ACTIVE[-1]
        if any(tape.tracks(t) for t in inputs):
            tape.record(out, inputs, vjp)
    return out


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Returns a map from parameter name to gradient array. Parameters listed in
    ``params`` that the loss never touched get zero gradients.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by backward()")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for out, inputs, vjp in reversed(tape.ops):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = vjp(g)
        for t, gt in zip(inputs, in_grads):
            if gt is None or not tape.tracks(t):
                continue
            if t.requires_grad:
                leaves[id(t)] = t
            prev = grads.get(id(t))
            grads[id(t)] = gt if prev is None else prev + gt
    if loss.requires_grad:
        leaves[id(loss)] = loss

    result: dict[str, np.ndarray] = {}
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {t.name!r}")
        result[t.name if t.name is not None else str(key)] = g
    if params is not None:
        for p in params:
            result.setdefault(p.name, np.zeros_like(p.data))
    return result


# ---------------------------------------------------------------------------- ops

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    out = Tensor(a.data * b.data)
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` as one fused op."""
    out = Tensor(x.data @ w.data + b.data)
    return _record(out, (x, w, b), lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)))


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    out = Tensor(np.where(keep, x.data, 0).astype(x.dtype, copy=False))
    return _record(out, (x,), lambda g: (g * keep,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    return _record(out, (x,), lambda g: (g * (1 - y * y),))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = Tensor(x.data.sum())
    return _record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(x.data.mean())
    return _record(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    out = Tensor(x.data[idx])

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (x,), vjp)


def scatter_rows(x: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """Place the rows of ``x`` at positions ``idx`` of an ``n``-row zero tensor."""
    data = np.zeros((n,) + x.shape[1:], dtype=x.dtype)
    data[idx] = x.data
    out = Tensor(data)
    return _record(out, (x,), lambda g: (g[idx],))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    keep = rng.random(x.shape) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    m = keep * scale
    out = Tensor(x.data * m)
    return _record(out, (x,), lambda g: (g * m,))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: Tensor, labels: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy over the batch; also returns the softmax probabilities."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    probs = np.exp(logp)
    rows = np.arange(n)
    loss_val = -logp[rows, labels].mean()
    if not np.isfinite(loss_val) or not np.all(np.isfinite(probs)):
        raise NonFiniteError("non-finite loss")
    out = Tensor(np.asarray(loss_val, dtype=logits.dtype))

    def vjp(g):
        d = probs.copy()
        d[rows, labels] -= 1
        return (d * (g / n),)

    return _record(out, (logits,), vjp), probs


# ----------------------------------------------------------------- initialisation

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def dense_params(rng: np.random.Generator, fan_in: int, fan_out: int, prefix: str, dtype=np.float32) -> list[Tensor]:
    return [
        Parameter(glorot_uniform(rng, fan_in, fan_out, dtype), f"{prefix}.w"),
        Parameter(np.zeros(fan_out, dtype=dtype), f"{prefix}.b"),
    ]


# ---------------------------------------------------------------- optimisation

AUGMENTATIONS = ("none", "basic")


@dataclass(frozen=True)
class TrainRecipe:
    epochs: int = 60
    batch_size: int = 128
    base_lr: float = 0.1
    weight_decay: float = 5e-4
    warmup_epochs: int = 10
    augmentation: str = "basic"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise ValueError("base_lr must be positive and weight_decay nonnegative")
        if self.augmentation not in AUGMENTATIONS:
            raise ValueError(f"unknown augmentation {self.augmentation!r}; expected one of {AUGMENTATIONS}")

    def with_(self, **kw) -> "TrainRecipe":
        return replace(self, **kw)


LR_GRID = (0.1, 0.01, 0.001)
WD_GRID = (5e-3, 5e-4)


def lr_at(epoch: int, recipe: TrainRecipe) -> float:
    """Linear warm-up to ``base_lr``, then cosine annealing towards 0.

    The ramp reaches ``base_lr`` exactly at ``epoch == warmup_epochs`` and starts
    one step above zero so that every epoch trains.
    """
    E, w = recipe.epochs, recipe.warmup_epochs
    if not 0 <= epoch < E:
        raise ValueError(f"epoch {epoch} outside [0, {E})")
    if epoch < w:
        return recipe.base_lr * (epoch + 1) / (w + 1)
    return recipe.base_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - w) / (E - w)))


def sgd_step(params: Sequence[Tensor], grads: dict[str, np.ndarray], lr: float, weight_decay: float) -> None:
    """In-place ``p <- p - lr * (g + weight_decay * p)``."""
    for p in params:
        g = grads[p.name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {p.name} {p.shape}")
        p.data -= (lr * (g + weight_decay * p.data)).astype(p.dtype, copy=False)
