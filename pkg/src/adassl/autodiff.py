"""Minimal reverse-mode autodiff for small multilayer perceptrons.

Operations record themselves eagerly on a :class:`Tape` when one is
passed; without a tape they only compute forward values.  All arithmetic
is float64.

>>> tape = Tape()
>>> w = Tensor([[1.0, 0.0]], requires_grad=True)
>>> logits = dense(Tensor([[1.0]]), w, Tensor([0.0, 0.0]), tape)
>>> loss = soft_cross_entropy(logits, [[1.0, 0.0]], [1.0], tape)
>>> round(loss.item(), 4)
0.3133
>>> [round(float(v), 4) for v in backward(loss, tape, [w])[0].ravel()]
[-0.2689, 0.2689]
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, UsageError, ValidationError

_node_ids = itertools.count()


def _as_float_array(values) -> np.ndarray:
    if isinstance(values, Tensor):
        return values.values
    return np.asarray(values, dtype=np.float64)


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains NaN or Inf")


class Tensor:
    """Dense float64 array with an optional gradient slot.

    Values are read-only after construction so a tensor recorded on a tape
    cannot change underneath its saved activations.
    """

    __slots__ = ("values", "grad", "node_id", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        _require_finite(arr, name or "tensor")
        arr.flags.writeable = False
        self.values = arr
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, what: str) -> "Tensor":
        # Internal constructor for op outputs; skips the defensive copy.
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        _require_finite(arr, what)
        arr.flags.writeable = False
        t.values = arr
        t.grad = None
        t.node_id = next(_node_ids)
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise UsageError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, node_id={self.node_id})"


@dataclass
class TapeRecord:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]
    saved: dict = field(default_factory=dict)


class Tape:
    """Ordered record of executed operations.

    Records are appended as operations run, so every record's inputs were
    produced before it (or are leaves); reversing the list is a valid
    topological order for backpropagation.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []
        self.loss: Tensor | None = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, kind, inputs, output, backward, **saved) -> Tensor:
        self.records.append(TapeRecord(kind, tuple(inputs), output, backward, saved))
        return output

    def mark_loss(self, loss: Tensor) -> None:
        if loss.values.ndim != 0:
            raise UsageError(f"loss must be a scalar tensor, got shape {loss.shape}")
        self.loss = loss


def dense(x: Tensor, weight: Tensor, bias: Tensor, tape: Tape | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` for a batch of row vectors."""
    if x.values.ndim != 2 or weight.values.ndim != 2 or bias.values.ndim != 1:
        raise DimensionError(
            f"dense expects [B,I], [I,O], [O]; got {x.shape}, {weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise DimensionError(
            f"dense shape mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    xv, wv = x.values, weight.values
    with np.errstate(over="ignore", invalid="ignore"):
        out = Tensor._wrap(xv @ wv + bias.values, "dense output")
    if tape is not None:

        def _backward(g):
            return g @ wv.T, xv.T @ g, g.sum(axis=0)

        tape.record("dense", (x, weight, bias), out, _backward)
    return out


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at 0 is 0."""
    mask = x.values > 0
    out = Tensor._wrap(np.where(mask, x.values, 0.0), "relu output")
    if tape is not None:
        tape.record("relu", (x,), out, lambda g: (g * mask,))
    return out


def grad_reverse(x: Tensor, scale: float = 1.0, tape: Tape | None = None) -> Tensor:
    """Identity forward; multiplies the upstream gradient by ``-scale``."""
    scale = float(scale)
    if not scale >= 0:
        raise ConfigError(f"grl scale must be non-negative, got {scale}", field="grl_scale")
    # Sharing the read-only buffer keeps the forward pass bit-identical.
    out = Tensor._wrap(x.values, "grad_reverse output")
    if tape is not None:
        tape.record("grad_reverse", (x,), out, lambda g: (-scale * g,), scale=scale)
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor._wrap(a.values + b.values, "add output")
    if tape is not None:
        tape.record("add", (a, b), out, lambda g: (g, g))
    return out


def scale(a: Tensor, factor: float, tape: Tape | None = None) -> Tensor:
    factor = float(factor)
    out = Tensor._wrap(factor * a.values, "scale output")
    if tape is not None:
        tape.record("scale", (a,), out, lambda g: (factor * g,), factor=factor)
    return out


def concat_rows(tensors: Sequence[Tensor], tape: Tape | None = None) -> Tensor:
    """Stack batches along axis 0."""
    tensors = list(tensors)
    if not tensors:
        raise UsageError("concat_rows needs at least one tensor")
    tail = tensors[0].shape[1:]
    if any(t.shape[1:] != tail for t in tensors):
        raise DimensionError("concat_rows needs matching trailing dimensions")
    out = Tensor._wrap(np.concatenate([t.values for t in tensors], axis=0), "concat output")
    if tape is not None:
        bounds = np.cumsum([0] + [t.shape[0] for t in tensors])

        def _backward(g):
            return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

        tape.record("concat_rows", tensors, out, _backward)
    return out


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def soft_cross_entropy(logits: Tensor, targets, sample_weights=None,
                       tape: Tape | None = None) -> Tensor:
    """Weighted mean cross-entropy against soft targets.

    Returns ``(1/B) * sum_b w_b * -sum_c t[b,c] * log_softmax(logits[b])[c]``.
    ``targets`` and ``sample_weights`` are treated as constants.
    """
    lv = logits.values
    t = _as_float_array(targets)
    if lv.ndim != 2 or t.shape != lv.shape:
        raise DimensionError(f"logits {lv.shape} and targets {t.shape} must both be [B,C]")
    batch = lv.shape[0]
    w = np.ones(batch) if sample_weights is None else _as_float_array(sample_weights)
    if w.shape != (batch,):
        raise DimensionError(f"sample_weights must have shape ({batch},), got {w.shape}")
    if not (np.all(np.isfinite(t)) and np.all(t >= 0)):
        raise ValidationError("targets must be finite and non-negative")
    row_sums = t.sum(axis=1)
    bad = np.flatnonzero(np.abs(row_sums - 1.0) > 1e-6)
    if bad.size:
        raise ValidationError(f"target row {bad[0]} sums to {row_sums[bad[0]]!r}, not 1")
    if not (np.all(np.isfinite(w)) and np.all(w >= 0)):
        raise ValidationError("sample_weights must be finite and non-negative")

    logp = log_softmax(lv)
    # 0 * log p is 0 even when p underflows, unlike a plain product with -inf.
    per_sample = -np.where(t > 0, t * logp, 0.0).sum(axis=1)
    out = Tensor._wrap(np.asarray(np.dot(w, per_sample) / batch), "cross-entropy")
    if tape is not None:
        coef = (w / batch)[:, None]

        def _backward(g):
            return (g * coef * (np.exp(logp) * row_sums[:, None] - t),)

        tape.record("soft_cross_entropy", (logits,), out, _backward)
    return out


def backward(loss: Tensor, tape: Tape, params: Sequence[Tensor] | None = None):
    """Back-propagate from a scalar ``loss`` through ``tape``.

    Fills ``.grad`` on every tensor in the tape that has ``requires_grad``
    (and on every tensor in ``params``, zero when unreachable).  Returns the
    gradients of ``params`` in order, or a ``{tensor: grad}`` dict of all
    ``requires_grad`` tensors when ``params`` is omitted.
    """
    if loss.values.ndim != 0:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape.mark_loss(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(())}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output.node_id, None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None:
                continue
            if inp.requires_grad:
                leaves[inp.node_id] = inp
            prev = grads.get(inp.node_id)
            grads[inp.node_id] = gi if prev is None else prev + gi

    if params is not None:
        out = []
        for p in params:
            g = grads.get(p.node_id)
            g = np.zeros_like(p.values) if g is None else np.array(g, dtype=np.float64)
            _require_finite(g, "gradient")
            p.grad = g
            out.append(g)
        return out

    result = {}
    for node_id, t in leaves.items():
        g = np.array(grads[node_id], dtype=np.float64)
        _require_finite(g, "gradient")
        t.grad = g
        result[t] = g
    return result


def finite_diff_gradient(loss_fn: Callable[[list[np.ndarray]], float],
                         params: Sequence, eps: float = 1e-4) -> list[np.ndarray]:
    """Central-difference gradient of ``loss_fn`` at ``params``.

    ``loss_fn`` receives a list of float64 arrays shaped like ``params`` and
    returns a float.  Independent of the tape; used as a test oracle.
    """
    if not eps > 0:
        raise ConfigError(f"eps must be positive, got {eps}", field="eps")
    base = [np.array(_as_float_array(p), dtype=np.float64) for p in params]
    grads = []
    for k, p in enumerate(base):
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(loss_fn(base))
            flat[i] = orig - eps
            f_minus = float(loss_fn(base))
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(g)
    return grads
