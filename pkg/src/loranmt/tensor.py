"""Dense-tensor core with reverse-mode automatic differentiation.

Design constraints, in order of importance: correctness, determinism, and
just enough surface for a small encoder-decoder transformer. Storage is
row-major dense numpy, float32 by default, float64 when gradients are being
verified against finite differences (float32 is too noisy for that).

Broadcasting is restricted to scalar-vs-tensor on the elementwise ops; the
fused ops (layer_norm, cross_entropy, softmax, matmul over leading batch
axes) handle their own shape logic internally.

Gradient semantics: `.grad` buffers accumulate (+=) across backward calls
and are cleared only by `zero_grad`. Within a single backward pass the flow
is pass-local, so repeated backward on the same graph adds one full dL/dx
per call.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, InputError, ShapeError, UsageError

DEFAULT_DTYPE = np.float32

# per-thread: a server thread evaluating under no_grad must not switch
# recording off for a thread that is training, and interleaved enter/exit
# on a shared flag can leave it stuck off
_grad_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class no_grad:
    """Context manager that disables tape recording (evaluation mode)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _grad_state.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_state.enabled = self._prev
        return False


class TapeNode:
    """One recorded operation: op tag, input tensors, and the backward rule.

    `backward_fn(g)` receives the upstream gradient for the node's output and
    returns one gradient array (or None) per input, in input order.
    """

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Sequence["Tensor"],
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None

    # -- bookkeeping ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Leaf view of the same data, off the tape."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return elementwise(self, other, "add")

    __radd__ = __add__

    def __sub__(self, other):
        return elementwise(self, other, "sub")

    def __rsub__(self, other):
        return elementwise(_lift(other, self.dtype), self, "sub")

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return elementwise(self, other, "scale")
        return elementwise(self, other, "mul")

    __rmul__ = __mul__

    def __neg__(self):
        return elementwise(self, -1.0, "scale")

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Populate dL/dx on every reachable requires_grad tensor.

        The root must be a scalar already on the tape (or a requires_grad
        leaf, which is its own trivial graph).
        """
        if self.data.size != 1:
            raise UsageError(f"backward root must be scalar, got shape {self.shape}")
        if self.node is None and not self.requires_grad:
            raise UsageError("backward root is not on the tape")

        order = _toposort(self)
        flow: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = flow.pop(id(t), None)
            if g is None:
                continue
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g.astype(t.data.dtype, copy=False)
            if t.node is None:
                continue
            input_grads = t.node.backward_fn(g)
            for parent, pg in zip(t.node.inputs, input_grads):
                if pg is None or not _needs_grad(parent):
                    continue
                acc = flow.get(id(parent))
                # never mutate in place: backward rules may return views or
                # share one array between two parents
                flow[id(parent)] = pg if acc is None else acc + pg


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS; inputs appear before their consumers."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.inputs:
                if id(p) not in visited:
                    stack.append((p, False))
    return order


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out: Tensor, op: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if _grad_enabled() and any(_needs_grad(t) for t in inputs):
        out.node = TapeNode(op, inputs, backward_fn)
    return out


# -- operations ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch axes broadcast, last two contract."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, "matmul", (a, b), backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to `shape` after leading-axis broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def elementwise(a: Tensor, b, kind: str) -> Tensor:
    """Pointwise add/sub/mul, plus `scale` by a python scalar.

    Shapes must match exactly; the only broadcast allowed is scalar-vs-tensor
    (python number or size-1 tensor).
    """
    if kind == "scale":
        if isinstance(b, Tensor):
            raise UsageError("scale expects a python scalar, got a Tensor")
        c = float(b)
        out = Tensor(a.data * c)
        return _record(out, "scale", (a,), lambda g: (g * c,))

    if kind not in ("add", "sub", "mul"):
        raise UsageError(f"unknown elementwise kind: {kind!r}")

    b = _lift(b, a.dtype)
    a_scalar, b_scalar = a.size == 1, b.size == 1
    if a.shape != b.shape and not (a_scalar or b_scalar):
        raise ShapeError(f"elementwise {kind} shape mismatch: {a.shape} vs {b.shape}")

    if kind == "add":
        out = Tensor(a.data + b.data)

        def backward_fn(g):
            return _reduce_to(g, a), _reduce_to(g, b)

    elif kind == "sub":
        out = Tensor(a.data - b.data)

        def backward_fn(g):
            return _reduce_to(g, a), _reduce_to(-g, b)

    else:  # mul
        out = Tensor(a.data * b.data)

        def backward_fn(g):
            return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return _record(out, kind, (a, b), backward_fn)


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    """Axis permutation; default reverses all axes (2-D transpose)."""
    perm = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    out = Tensor(np.ascontiguousarray(np.transpose(a.data, perm)))
    inv = tuple(np.argsort(perm))
    return _record(out, "transpose", (a,),
                   lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = weight[ids[...], :]. Backward scatter-adds."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise InputError(
            f"token id out of range [0, {weight.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}")
    out = Tensor(weight.data[ids])

    def backward_fn(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _record(out, "embedding", (weight,), backward_fn)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    return _record(out, "relu", (a,), lambda g: (g * (a.data > 0),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along one axis."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _record(out, "softmax", (x,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must be shape ({d},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    out = Tensor(xhat * gain.data + bias.data)

    def backward_fn(g):
        dxhat = g * gain.data
        # standard layer-norm backward, fused form
        dx = ivar / d * (d * dxhat
                         - dxhat.sum(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return dx, dgain, dbias

    return _record(out, "layer_norm", (x, gain, bias), backward_fn)


def cross_entropy(logits: Tensor, targets: np.ndarray, pad_id: int) -> Tensor:
    """Mean negative log-likelihood over non-pad positions, no label smoothing.

    `logits` is [..., V]; `targets` matches the leading shape. An all-pad
    target yields loss 0 with zero gradient.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(
            f"targets shape {targets.shape} does not match logits {logits.shape}")
    v = logits.shape[-1]
    bad = (targets != pad_id) & ((targets < 0) | (targets >= v))
    if bad.any():
        raise InputError(f"target id out of range [0, {v}): {targets[bad][:5]}")

    flat = logits.data.reshape(-1, v)
    tflat = targets.reshape(-1)
    mask = tflat != pad_id
    n = int(mask.sum())
    if n == 0:
        out = Tensor(np.zeros((), dtype=logits.dtype))
        return _record(out, "cross_entropy", (logits,),
                       lambda g: (np.zeros_like(logits.data),))

    zmax = flat.max(axis=-1, keepdims=True)
    z = flat - zmax
    lse = np.log(np.exp(z).sum(axis=-1)) + zmax[:, 0]
    safe_t = np.where(mask, tflat, 0)
    nll = lse - flat[np.arange(flat.shape[0]), safe_t]
    loss = float((nll * mask).sum() / n)
    out = Tensor(np.asarray(loss, dtype=logits.dtype))

    def backward_fn(g):
        p = np.exp(flat - zmax)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(flat.shape[0]), safe_t] -= 1.0
        p *= (mask / n)[:, None]
        return (float(np.asarray(g).reshape(-1)[0]) * p.reshape(logits.shape),)

    return _record(out, "cross_entropy", (logits,), backward_fn)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))
    return _record(out, "sum", (a,),
                   lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),))


def abs_pow(a: Tensor, gamma: float, eps: float = 1e-12) -> Tensor:
    """Elementwise |a|**gamma with subgradient 0 at a == 0.

    For gamma < 1 the derivative blows up near zero; |a| is floored at `eps`
    inside the (gamma-1) power to keep steps finite.
    """
    if gamma <= 0:
        raise ConfigError(f"abs_pow exponent must be > 0, got {gamma}")
    mag = np.abs(a.data)
    out = Tensor(mag ** gamma)

    def backward_fn(g):
        base = np.maximum(mag, eps) if gamma < 1.0 else mag
        d = gamma * base ** (gamma - 1.0) * np.sign(a.data)
        return (g * d,)

    return _record(out, "abs_pow", (a,), backward_fn)
