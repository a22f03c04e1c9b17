"""Dense float64 tensors with reverse-mode automatic differentiation.

Operations record entries onto an explicit gradient tape (op id, inputs,
output, saved intermediates). `backward_pass` replays the tape once in
reverse, accumulating gradients with += so fan-out sums path gradients.
Backward rules live in a per-op registry, which keeps the tape replayable
and lets the verification suite inject faults into a single rule.

Everything is float64: signature levels multiply many small terms and
precision is cheaper than debugging. A tensor/tape graph is single-threaded;
independent graphs may live on independent threads (the active-tape stack is
thread-local).
"""

from __future__ import annotations

import threading
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward_pass",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "relu",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "dropout",
    "sum_all",
    "mean_rows",
    "take_row",
    "concat_last",
    "reshape",
    "register_op",
    "AdamState",
    "adam_step",
    "zero_grads",
]


class Tensor:
    """N-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class TapeEntry(NamedTuple):
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: tuple


_ACTIVE = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications, topologically sorted by construction.

    Use as a context manager; ops executed inside record entries whenever
    their output requires a gradient.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.entries)


# Backward rules, keyed by op id. Each rule maps
# (inputs, output, ctx, grad_out) -> per-input gradients (None where the
# input takes no gradient). Kept in a registry so the gradcheck CLI can
# temporarily corrupt a single rule as a fault-injection hook.
_BACKWARDS: dict[str, Callable] = {}


def register_op(name: str, backward: Callable) -> None:
    _BACKWARDS[name] = backward


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, ctx: tuple = ()) -> Tensor:
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    tape = current_tape()
    if tape is not None and out.requires_grad:
        tape.entries.append(TapeEntry(op, tuple(inputs), out, ctx))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def backward_pass(loss: Tensor, tape: Tape) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    Gradients accumulate across fan-out. The tape is replayed backward
    exactly once; entries not on a path to the loss are skipped.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward_pass needs a scalar loss, got shape {loss.shape}")
    _accumulate(loss, np.ones_like(loss.data))
    for entry in reversed(tape.entries):
        g = entry.output.grad
        if g is None:
            continue
        grads = _BACKWARDS[entry.op](entry.inputs, entry.output, entry.ctx, g)
        for t, gi in zip(entry.inputs, grads):
            if gi is not None and t.requires_grad:
                _accumulate(t, gi)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    return _record("add", (a, b), a.data + b.data)


register_op(
    "add",
    lambda inp, out, ctx, g: (_unbroadcast(g, inp[0].shape), _unbroadcast(g, inp[1].shape)),
)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _record("sub", (a, b), a.data - b.data)


register_op(
    "sub",
    lambda inp, out, ctx, g: (_unbroadcast(g, inp[0].shape), _unbroadcast(-g, inp[1].shape)),
)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _record("mul", (a, b), a.data * b.data)


register_op(
    "mul",
    lambda inp, out, ctx, g: (
        _unbroadcast(g * inp[1].data, inp[0].shape),
        _unbroadcast(g * inp[0].data, inp[1].shape),
    ),
)


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data)


register_op("neg", lambda inp, out, ctx, g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    c = float(c)
    return _record("scale", (a,), a.data * c, (c,))


register_op("scale", lambda inp, out, ctx, g: (g * ctx[0],))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes do not agree: {a.shape} x {b.shape}")
    return _record("matmul", (a, b), a.data @ b.data)


register_op(
    "matmul",
    lambda inp, out, ctx, g: (g @ inp[1].data.T, inp[0].data.T @ g),
)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _record("transpose", (a,), a.data.T.copy())


register_op("transpose", lambda inp, out, ctx, g: (g.T,))


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0: the mask is strict positivity
    return _record("relu", (x,), np.maximum(x.data, 0.0), (x.data > 0.0,))


register_op("relu", lambda inp, out, ctx, g: (g * ctx[0],))


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows input contains NaN")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    return _record("softmax_rows", (x,), y, (y,))


def _softmax_rows_bwd(inp, out, ctx, g):
    y = ctx[0]
    return (y * (g - (g * y).sum(axis=1, keepdims=True)),)


register_op("softmax_rows", _softmax_rows_bwd)


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"log_softmax_rows expects a matrix, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse
    return _record("log_softmax_rows", (x,), y, (np.exp(y),))


def _log_softmax_rows_bwd(inp, out, ctx, g):
    p = ctx[0]
    return (g - p * g.sum(axis=1, keepdims=True),)


register_op("log_softmax_rows", _log_softmax_rows_bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine gain/bias."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data
    return _record("layer_norm", (x, gain, bias), y, (xhat, inv))


def _layer_norm_bwd(inp, out, ctx, g):
    x, gain, bias = inp
    xhat, inv = ctx
    dxhat = g * gain.data
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    lead = tuple(range(g.ndim - 1))
    dgain = (g * xhat).sum(axis=lead)
    dbias = g.sum(axis=lead)
    return (dx, dgain, dbias)


register_op("layer_norm", _layer_norm_bwd)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero entries with prob p and scale survivors by 1/(1-p).

    Inference (training=False) is a pure identity and consumes no randomness.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = rng.random(x.shape) >= p
    scaled_mask = keep / (1.0 - p)
    return _record("dropout", (x,), x.data * scaled_mask, (scaled_mask,))


register_op("dropout", lambda inp, out, ctx, g: (g * ctx[0],))


def sum_all(x: Tensor) -> Tensor:
    return _record("sum_all", (x,), np.asarray(x.data.sum()))


register_op("sum_all", lambda inp, out, ctx, g: (np.broadcast_to(g, inp[0].shape),))


def mean_rows(x: Tensor) -> Tensor:
    """Mean over axis 0 of a matrix: [L x d] -> [d]."""
    if x.ndim != 2:
        raise ShapeError(f"mean_rows expects a matrix, got shape {x.shape}")
    return _record("mean_rows", (x,), x.data.mean(axis=0))


def _mean_rows_bwd(inp, out, ctx, g):
    L = inp[0].shape[0]
    return (np.broadcast_to(g / L, inp[0].shape),)


register_op("mean_rows", _mean_rows_bwd)


def take_row(x: Tensor, i: int) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"take_row expects a matrix, got shape {x.shape}")
    return _record("take_row", (x,), x.data[i].copy(), (int(i),))


def _take_row_bwd(inp, out, ctx, g):
    dx = np.zeros(inp[0].shape)
    dx[ctx[0]] = g
    return (dx,)


register_op("take_row", _take_row_bwd)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis (feature axis)."""
    parts = tuple(parts)
    widths = tuple(p.shape[-1] for p in parts)
    return _record(
        "concat_last", parts, np.concatenate([p.data for p in parts], axis=-1), (widths,)
    )


def _concat_last_bwd(inp, out, ctx, g):
    splits = np.cumsum(ctx[0][:-1])
    return tuple(np.split(g, splits, axis=-1))


register_op("concat_last", _concat_last_bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _record("reshape", (x,), x.data.reshape(shape))


register_op("reshape", lambda inp, out, ctx, g: (g.reshape(inp[0].shape),))


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second-moment running averages plus the shared timestep."""

    def __init__(self, params: Sequence[Tensor]):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update with bias correction; each param is updated independently."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError(
            f"adam_step got {len(params)} params, {len(grads)} grads, state for {len(state.m)}"
        )
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise ValueError(f"adam_step: parameter {i} has no gradient")
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        mhat = state.m[i] / bc1
        vhat = state.v[i] / bc2
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
