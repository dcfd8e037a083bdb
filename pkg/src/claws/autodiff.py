"""Small tape-based reverse-mode differentiation over float64 numpy arrays.

Only the handful of dense operations the scorer network and its losses need
are supported.  A :class:`GradTape` records every operation that touches a
tracked tensor; :func:`backward` replays the recorded adjoints in exact
reverse order.  Tensors built without a tape are plain values and cost
nothing beyond the forward arithmetic, which is what evaluation uses.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class TapeError(RuntimeError):
    """Misuse of a gradient tape."""


class Tensor:
    __slots__ = ("value", "grad", "name", "tape", "requires_grad")

    def __init__(self, value, tape: GradTape | None = None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.name = name
        self.tape = tape
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{tag})"


class GradTape:
    """Ordered record of executed operations.

    A tape may be differentiated exactly once; a second :func:`backward`
    call raises :class:`TapeError`.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._params: dict[str, Tensor] = {}
        self._consumed = False

    def param(self, value, name: str) -> Tensor:
        if name in self._params:
            raise TapeError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=np.float64), tape=self, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def constant(self, value) -> Tensor:
        return Tensor(value, tape=self, requires_grad=False)

    @property
    def params(self) -> dict[str, Tensor]:
        return dict(self._params)

    def __len__(self):
        return len(self._ops)

    def _record(self, out, inputs, backward_fn):
        if self._consumed:
            raise TapeError("tape already differentiated")
        self._ops.append((out, inputs, backward_fn))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(inputs: Iterable[Tensor]) -> GradTape | None:
    for t in inputs:
        if t.tape is not None and t.requires_grad:
            return t.tape
    return None


def node(value, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    """Create an output tensor and, if any input is tracked, record its adjoint.

    ``backward_fn(g)`` receives the output adjoint and returns one gradient
    array (or ``None``) per input, in input order.
    """
    tape = _tape_of(inputs)
    out = Tensor(value, tape=tape, requires_grad=tape is not None)
    if tape is not None:
        tape._record(out, inputs, backward_fn)
    return out


def _accumulate(t: Tensor, g):
    if g is None or not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64).reshape(t.value.shape)
    else:
        t.grad = t.grad + np.reshape(g, t.value.shape)


def backward(tape: GradTape, loss: Tensor, seed: float = 1.0) -> dict[str, np.ndarray]:
    """Propagate adjoints from the scalar ``loss`` and return parameter gradients.

    Parameters that did not influence the loss get zero gradients.
    """
    if tape._consumed:
        raise TapeError("backward already called on this tape")
    if loss.value.size != 1:
        raise TapeError(f"backward needs a scalar terminal, got shape {loss.value.shape}")
    tape._consumed = True
    if loss.requires_grad:
        loss.grad = np.full(loss.value.shape, float(seed))
        for out, inputs, fn in reversed(tape._ops):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for t, g in zip(inputs, grads):
                _accumulate(t, g)
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.value))
        for name, p in tape._params.items()
    }


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def affine(x, W, bias) -> Tensor:
    x, W, bias = as_tensor(x), as_tensor(W), as_tensor(bias)
    xv, Wv, bv = x.value, W.value, bias.value
    if xv.ndim != 2 or Wv.ndim != 2 or xv.shape[1] != Wv.shape[0]:
        raise DimensionError(f"affine: cannot multiply {xv.shape} by {Wv.shape}")
    if bv.shape != (Wv.shape[1],):
        raise DimensionError(f"affine: bias shape {bv.shape} does not match {Wv.shape[1]} outputs")
    out = xv @ Wv + bv

    def fn(g):
        return g @ Wv.T, xv.T @ g, g.sum(axis=0)

    return node(out, (x, W, bias), fn)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return node(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def dropout(x, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.value.shape) >= rate
    scale = np.where(keep, 1.0 / (1.0 - rate), 0.0)
    return node(x.value * scale, (x,), lambda g: (g * scale,))


def _stable_sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _stable_sigmoid(x.value)
    return node(s, (x,), lambda g: (g * s * (1.0 - s),))


def column_softmax(x) -> Tensor:
    """Softmax down each column: every column of the output sums to one."""
    x = as_tensor(x)
    v = x.value
    if v.ndim != 2 or v.shape[0] < 1:
        raise DimensionError(f"column_softmax needs a non-empty matrix, got {v.shape}")
    e = np.exp(v - v.max(axis=0, keepdims=True))
    s = e / e.sum(axis=0, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=0, keepdims=True)),)

    return node(s, (x,), fn)


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.shape != b.value.shape:
        raise DimensionError(f"hadamard: shapes {a.value.shape} and {b.value.shape} differ")
    av, bv = a.value, b.value
    return node(av * bv, (a, b), lambda g: (g * bv, g * av))


def flatten(x) -> Tensor:
    x = as_tensor(x)
    shape = x.value.shape
    return node(x.value.reshape(-1), (x,), lambda g: (g.reshape(shape),))


def total(x) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    x = as_tensor(x)
    shape = x.value.shape
    return node(np.array(x.value.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def weighted_sum(terms) -> Tensor:
    """``sum(c * t for c, t in terms)`` over scalar tensors."""
    terms = [(float(c), as_tensor(t)) for c, t in terms]
    if not terms:
        return Tensor(0.0)
    value = np.array(sum(c * float(t.value) for c, t in terms))
    coefs = [c for c, _ in terms]

    def fn(g):
        return tuple(c * g for c in coefs)

    return node(value, tuple(t for _, t in terms), fn)
