"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations executed while a :class:`Tape` is active are recorded when at
least one input requires a gradient. :func:`backward` then walks the tape in
reverse and returns a :class:`GradientSet` covering every leaf tensor that
asked for a gradient (network parameters and, for attacks and saliency, the
input images themselves).

    x = Tensor(images, requires_grad=True)
    with Tape() as tape:
        loss = cross_entropy(log_softmax(net(x)), labels)
    grads = backward(tape, loss)
    grads[x]  # d loss / d x
"""

from __future__ import annotations

import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, StateError

DTYPE = np.float64

_local = threading.local()


class Tensor:
    """An n-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of executed primitives.

    A tape is single-use: after :func:`backward` consumes it the saved
    activations are released and a second backward raises
    :class:`~shapebias.errors.StateError`. Tapes are confined to the thread
    that opened them.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise StateError("tape already consumed by backward; run a fresh forward")
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [node.op for node in self.nodes]


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


class GradientSet:
    """Mapping from leaf tensor to its gradient.

    Looking up a tensor that did not influence the loss returns zeros of its
    shape, never a KeyError.
    """

    def __init__(self):
        self._grads: dict[int, tuple[Tensor, np.ndarray]] = {}

    def _set(self, tensor: Tensor, grad: np.ndarray) -> None:
        self._grads[id(tensor)] = (tensor, grad)

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        entry = self._grads.get(id(tensor))
        if entry is None or entry[0] is not tensor:
            return np.zeros(tensor.shape, dtype=DTYPE)
        return entry[1]

    def __contains__(self, tensor: Tensor) -> bool:
        entry = self._grads.get(id(tensor))
        return entry is not None and entry[0] is tensor

    def __len__(self) -> int:
        return len(self._grads)

    def __iter__(self) -> Iterator[Tensor]:
        return (t for t, _ in self._grads.values())

    def items(self):
        return list(self._grads.values())


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward) -> Tensor:
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(op, tuple(inputs), out, backward))
    return out


def backward(tape: Tape, loss: Tensor) -> GradientSet:
    """Differentiate a scalar ``loss`` recorded on ``tape``."""
    if tape.consumed:
        raise StateError("backward called on an already-consumed tape")
    if loss.size != 1:
        raise DimensionError(f"loss must be a scalar, got shape {loss.shape}")
    if not any(node.output is loss for node in reversed(tape.nodes)):
        raise StateError("loss was not produced on this tape")

    produced = {id(node.output) for node in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    leaves: dict[int, Tensor] = {}

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.backward(g)
        for inp, gi in zip(node.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in produced:
                leaves[key] = inp
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi

    result = GradientSet()
    for key, tensor in leaves.items():
        result._set(tensor, grads[key])
    tape.nodes.clear()
    tape.consumed = True
    return result


# ---------------------------------------------------------------------------
# primitives


def _check_ndim(t: Tensor, ndim: int, what: str) -> None:
    if t.ndim != ndim:
        raise DimensionError(f"{what} must be {ndim}-D, got shape {t.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, zero_pad: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW batch with an FCkHkW kernel bank."""
    _check_ndim(x, 4, "conv2d input")
    _check_ndim(kernel, 4, "conv2d kernel")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d channel axis (1) mismatch: input has {c}, kernel expects {kc}")
    if bias.shape != (f,):
        raise DimensionError(f"conv2d bias axis 0 must have length {f}, got shape {bias.shape}")
    if stride < 1 or zero_pad < 0:
        raise ConfigurationError(f"conv2d needs stride >= 1 and zero_pad >= 0, got {stride}, {zero_pad}")
    hp, wp = h + 2 * zero_pad, w + 2 * zero_pad
    if kh > hp:
        raise DimensionError(f"conv2d kernel height axis (2) {kh} exceeds padded input height {hp}")
    if kw > wp:
        raise DimensionError(f"conv2d kernel width axis (3) {kw} exceeds padded input width {wp}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ConfigurationError(
            f"conv2d output size not exact: ({hp}-{kh})/{stride} or ({wp}-{kw})/{stride} leaves a remainder"
        )
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    # channel-major im2col: cols[(c, i, j), (n, y, x)] keeps the backward scatter slices contiguous
    xp = np.pad(x.data, ((0, 0), (0, 0), (zero_pad, zero_pad), (zero_pad, zero_pad))) if zero_pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * oh * ow)
    kmat = kernel.data.reshape(f, c * kh * kw)
    out = (kmat @ cols + bias.data[:, None]).reshape(f, n, oh, ow).transpose(1, 0, 2, 3)

    def _backward(g):
        gt = g.transpose(1, 0, 2, 3).reshape(f, n * oh * ow)
        dk = db = dx = None
        if kernel.requires_grad:
            dk = (gt @ cols.T).reshape(kernel.shape)
        if bias.requires_grad:
            db = gt.sum(axis=1)
        if x.requires_grad:
            dcols = (kmat.T @ gt).reshape(c, kh, kw, n, oh, ow)
            dxp = np.zeros((c, n, hp, wp), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, i, j]
            dx = dxp[:, :, zero_pad : zero_pad + h, zero_pad : zero_pad + w].transpose(1, 0, 2, 3)
            dx = np.ascontiguousarray(dx)
        return dx, dk, db

    return _record("conv2d", (x, kernel, bias), np.ascontiguousarray(out), _backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first maximum."""
    _check_ndim(x, 4, "max_pool2 input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def _backward(g):
        d = np.zeros((n, c, h // 2, w // 2, 4), dtype=DTYPE)
        np.put_along_axis(d, arg[..., None], g[..., None], axis=-1)
        return (d.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _record("max_pool2", (x,), out, _backward)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_ndim(x, 4, "global_avg_pool input")
    n, c, h, w = x.shape

    def _backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _record("global_avg_pool", (x,), x.data.mean(axis=(2, 3)), _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        axis = next((i for i, (p, q) in enumerate(zip(a.shape, b.shape)) if p != q), len(a.shape))
        raise DimensionError(f"add shape mismatch at axis {axis}: {a.shape} vs {b.shape}")
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return _record("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def offset(x: Tensor, value: float) -> Tensor:
    """Add a constant to every element."""
    return _record("offset", (x,), x.data + value, lambda g: (g,))


def scale(x: Tensor, factor: float) -> Tensor:
    return _record("scale", (x,), x.data * factor, lambda g: (g * factor,))


def sum_all(x: Tensor) -> Tensor:
    return _record("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.full(x.shape, float(g), dtype=DTYPE),))


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    n = x.shape[0]
    return _record("flatten", (x,), x.data.reshape(n, -1), lambda g: (g.reshape(x.shape),))


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    _check_ndim(x, 2, "dense input")
    _check_ndim(weight, 2, "dense weight")
    d, k = weight.shape
    if x.shape[1] != d:
        raise DimensionError(f"dense feature axis (1) mismatch: input has {x.shape[1]}, weight expects {d}")
    if bias.shape != (k,):
        raise DimensionError(f"dense bias axis 0 must have length {k}, got shape {bias.shape}")

    def _backward(g):
        return (
            g @ weight.data.T if x.requires_grad else None,
            x.data.T @ g if weight.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return _record("dense", (x, weight, bias), x.data @ weight.data + bias.data, _backward)


def log_softmax(logits: Tensor) -> Tensor:
    _check_ndim(logits, 2, "log_softmax input")
    if logits.shape[1] < 2:
        raise DimensionError(f"log_softmax class axis (1) needs at least 2 entries, got {logits.shape[1]}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def _backward(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return _record("log_softmax", (logits,), out, _backward)


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k}): min {labels.min()}, max {labels.max()}")
    return labels.astype(np.intp)


def cross_entropy(log_probs: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``log_probs``."""
    _check_ndim(log_probs, 2, "cross_entropy input")
    n, k = log_probs.shape
    labels = _check_labels(labels, n, k)
    rows = np.arange(n)
    loss = -log_probs.data[rows, labels].sum() / n

    def _backward(g):
        d = np.zeros((n, k), dtype=DTYPE)
        d[rows, labels] = -float(g) / n
        return (d,)

    return _record("cross_entropy", (log_probs,), np.asarray(loss), _backward)


def pick(x: Tensor, classes) -> Tensor:
    """Select ``x[i, classes[i]]`` for every row."""
    _check_ndim(x, 2, "pick input")
    n, k = x.shape
    classes = _check_labels(classes, n, k)
    rows = np.arange(n)

    def _backward(g):
        d = np.zeros((n, k), dtype=DTYPE)
        d[rows, classes] = g
        return (d,)

    return _record("pick", (x,), x.data[rows, classes], _backward)


# ---------------------------------------------------------------------------
# test oracle


def finite_difference_gradient(f: Callable[[Tensor], object], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar function ``f`` at ``x``.

    ``f`` receives a fresh Tensor per evaluation and may return a Tensor or
    a float.
    """
    if step <= 0:
        raise ConfigurationError(f"finite-difference step must be positive, got {step}")
    base = np.array(x.data, dtype=DTYPE)
    flat = base.reshape(-1)
    grad = np.empty_like(flat)

    def _eval(arr):
        val = f(Tensor(arr.reshape(base.shape)))
        return float(val.data) if isinstance(val, Tensor) else float(val)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = _eval(flat)
        flat[i] = orig - step
        lo = _eval(flat)
        flat[i] = orig
        grad[i] = (hi - lo) / (2 * step)
    return grad.reshape(base.shape)
