"""Dense tensors with tape-based reverse-mode differentiation.

Tensors wrap a numpy array. Operations are recorded on the innermost active
:class:`Tape` when at least one input requires a gradient; with no tape
active every operation runs untaped, which is how inference is done.

Typical training step::

    with Tape() as tape:
        loss = mean(square(affine(x, W, b)))
    tape.backward(loss)

After ``backward`` the tape is cleared; leaf tensors keep their ``grad``.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class TapeError(RuntimeError):
    pass


class Tensor:
    """A dense real array that can take part in gradient computation.

    ``data`` keeps the dtype it is given when that dtype is floating point;
    everything else is converted to float32. Gradient checks build float64
    tensors explicitly.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so inputs always precede their
    consumers and a single reverse sweep visits each node once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tapes must be exited in LIFO order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        output._tape = self
        self.nodes.append(_Node(tuple(inputs), output, backward))

    def clear(self) -> None:
        for node in self.nodes:
            node.output._tape = None
        self.nodes.clear()

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every leaf that requires it, then clear the tape.

        Gradients accumulate into existing leaf ``grad`` arrays.
        """
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(node.output) for node in self.nodes}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in produced:
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                else:
                    if gi.shape != t.data.shape:
                        gi = gi.reshape(t.data.shape)
                    gi = gi.astype(t.data.dtype, copy=False)
                    t.grad = gi if t.grad is None else t.grad + gi
        self.clear()


def backward(loss: Tensor) -> None:
    if loss._tape is None:
        raise TapeError("loss is not on any tape")
    loss._tape.backward(loss)


# ---------------------------------------------------------------------------
# helpers


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def detach(t: Tensor) -> Tensor:
    return Tensor(t.data)


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(inputs, out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _promote(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = _promote(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _promote(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _promote(a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), bw)


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` for a batch ``x`` of shape (batch, in)."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ValueError(f"affine dimension mismatch: x{x.shape} vs W{W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ValueError(f"affine dimension mismatch: W{W.shape} vs b{b.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ Wd.T if x.requires_grad else None
        gW = xd.T @ g if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g.sum(axis=0)

    inputs = (x, W) if b is None else (x, W, b)
    return _result(out, inputs, bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw)


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype, copy=False)
    return _result(out, (x,), lambda g: (g * out * (1 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2 * g * xd,))


_ELEMENTWISE = {"relu": relu, "sigmoid": sigmoid, "exp": exp, "square": square, "log": log}


def elementwise(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), bw)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def l1_to_target(x: Tensor, target) -> Tensor:
    """Mean absolute deviation of ``x`` from a constant target."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != x.shape:
        raise ValueError(f"l1 shape mismatch: {x.shape} vs target {t.shape}")
    diff = x.data - t
    n = diff.size
    out = np.asarray(np.abs(diff).sum() / n, dtype=x.dtype)
    return _result(out, (x,), lambda g: ((g / n) * np.sign(diff),))


def reduce(x: Tensor, kind: str, target=None) -> Tensor:
    if kind == "sum":
        return sum(x)
    if kind == "mean":
        return mean(x)
    if kind == "l1_to_target":
        if target is None:
            raise ValueError("l1_to_target needs a target")
        return l1_to_target(x, target)
    raise ValueError(f"unknown reduction {kind!r}")


# ---------------------------------------------------------------------------
# softmax and losses


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise ValueError(f"softmax_rows needs an n x k matrix, got {x.shape}")
    return softmax(x, axis=1)


def _check_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("binary labels must be 0 or 1")
    return labels


def binary_cross_entropy(p: Tensor, labels, eps: float = 1e-7) -> Tensor:
    """Mean BCE of probabilities against 0/1 labels; ``p`` is clamped to [eps, 1-eps]."""
    y = _check_labels(labels).reshape(p.shape).astype(p.dtype)
    pd = p.data
    pc = np.clip(pd, eps, 1 - eps)
    n = pd.size
    out = np.asarray(-(y * np.log(pc) + (1 - y) * np.log(1 - pc)).sum() / n, dtype=p.dtype)
    inside = (pd > eps) & (pd < 1 - eps)

    def bw(g):
        return ((g / n) * inside * ((pc - y) / (pc * (1 - pc))),)

    return _result(out, (p,), bw)


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean BCE of ``sigmoid(logits)`` against 0/1 labels, computed stably."""
    y = _check_labels(labels).reshape(logits.shape).astype(logits.dtype)
    s = logits.data
    n = s.size
    # log(1 + exp(-|s|)) + max(s, 0) - s*y
    out = np.asarray((np.maximum(s, 0) - s * y + np.log1p(np.exp(-np.abs(s)))).sum() / n,
                     dtype=logits.dtype)
    e = np.exp(-np.abs(s))
    prob = np.where(s >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (logits,), lambda g: ((g / n) * (prob - y),))
