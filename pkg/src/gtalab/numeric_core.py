"""Dense float64 tensors with a reverse-mode differentiation tape.

Every value flowing through the attention blocks is a :class:`Tensor`. When a
:class:`Tape` is active (``with Tape() as tape:``), operations on tensors that
already live on the tape append a node recording the operation kind, the
parent node ids and a closure holding whatever forward values the backward
rule needs. ``tape.backward(loss)`` walks the nodes in reverse creation order,
which is a valid reverse topological order because parents are always created
before their children.

There is no implicit broadcasting. Shapes must match exactly, and
:func:`broadcast_to` is the only way to expand singleton axes.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor", "Tape", "Parameter", "active_tape", "no_tape",
    "tensor", "zeros", "ones", "eye",
    "matmul", "batched_matmul", "linear", "softmax_last", "log_softmax_last",
    "transpose_last2", "permute_axes", "reshape", "concat_axis",
    "sum_axis", "mean_axis", "sum_all", "mean_all", "add", "sub", "mul",
    "scale", "neg", "exp", "log", "tanh", "relu", "square", "slice_axis",
    "broadcast_to", "standardize_last", "backward", "grad_check",
]

_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("gtalab_tape", default=None)


def active_tape() -> "Tape | None":
    return _ACTIVE.get()


@contextlib.contextmanager
def no_tape():
    """Temporarily disable recording, even inside an active tape."""
    token = _ACTIVE.set(None)
    try:
        yield
    finally:
        _ACTIVE.reset(token)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite value produced by {op}")


class Tensor:
    """Immutable float64 array, optionally linked to a node on a tape."""

    __slots__ = ("data", "node", "tape")

    def __init__(self, data, *, _node: int | None = None, _tape: "Tape | None" = None, _owned: bool = False):
        if _owned:
            arr = np.asarray(data, dtype=np.float64)
        else:
            arr = np.array(data, dtype=np.float64, copy=True)
            if any(d <= 0 for d in arr.shape):
                raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
            _check_finite(arr, "tensor construction")
        arr.flags.writeable = False
        self.data = arr
        self.node = _node
        self.tape = _tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, _owned=True)

    def __repr__(self):
        tag = "" if self.node is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        if self.ndim == 2 and other.ndim == 2:
            return matmul(self, other)
        return batched_matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    vjp: Callable | None
    shape: tuple[int, ...]


class Tape:
    """Ordered record of operations for one forward/backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: dict[int, np.ndarray] = {}
        self._watched: dict[int, tuple[Parameter, Tensor]] = {}
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None
        return False

    def reset(self) -> None:
        """Forget every node and gradient. Tensors recorded earlier become constants."""
        self.nodes = []
        self.grads = {}
        self._watched = {}

    def leaf(self, value: Tensor, op: str = "leaf") -> Tensor:
        self.nodes.append(Node(op, (), None, value.shape))
        return Tensor(value.data, _node=len(self.nodes) - 1, _tape=self, _owned=True)

    def watch(self, param: "Parameter") -> Tensor:
        """Leaf tensor for ``param`` on this tape, created once per pass."""
        hit = self._watched.get(id(param))
        if hit is not None and hit[0] is param:
            return hit[1]
        t = self.leaf(param.value, op=f"param:{param.name}")
        self._watched[id(param)] = (param, t)
        return t

    def _record(self, op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
        ids = []
        for p in parents:
            if p.node is not None and p.tape is self:
                if p.node >= len(self.nodes):
                    raise ContractError("tensor belongs to a tape pass that has been reset")
                ids.append(p.node)
            else:
                ids.append(-1)
        self.nodes.append(Node(op, tuple(ids), vjp, data.shape))
        return Tensor(data, _node=len(self.nodes) - 1, _tape=self, _owned=True)

    def backward(self, loss: Tensor, keep_intermediate: bool = False) -> dict[int, np.ndarray]:
        if loss.shape != ():
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self or loss.node is None:
            raise ContractError("loss was not produced on this tape")
        if loss.node >= len(self.nodes):
            raise ContractError("loss belongs to a tape pass that has been reset")
        grads: dict[int, np.ndarray] = {loss.node: np.ones(())}
        leaves: dict[int, np.ndarray] = {}
        for i in range(loss.node, -1, -1):
            g = grads.get(i) if keep_intermediate else grads.pop(i, None)
            if g is None:
                continue
            node = self.nodes[i]
            if node.vjp is None:
                leaves[i] = g
                continue
            needs = tuple(pid >= 0 for pid in node.parents)
            parent_grads = node.vjp(g, needs)
            for pid, pg in zip(node.parents, parent_grads):
                if pid < 0 or pg is None:
                    continue
                prev = grads.get(pid)
                grads[pid] = pg if prev is None else prev + pg
        if keep_intermediate:
            leaves.update(grads)
        self.grads = leaves
        return leaves

    def grad(self, t: Tensor) -> np.ndarray | None:
        if t.tape is not self or t.node is None:
            return None
        return self.grads.get(t.node)

    def param_grads(self) -> dict[str, np.ndarray]:
        """Gradient per watched parameter name; watched but unreachable parameters get zeros."""
        out = {}
        for param, t in self._watched.values():
            g = self.grads.get(t.node)
            out[param.name] = np.zeros(param.shape) if g is None else g
        return out


class Parameter:
    """Named learnable value. The shape is fixed at construction."""

    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self._value = value if isinstance(value, Tensor) else Tensor(value)
        self.trainable = trainable

    @property
    def value(self) -> Tensor:
        return self._value

    @value.setter
    def value(self, new) -> None:
        new = new if isinstance(new, Tensor) else Tensor(new)
        if new.shape != self._value.shape:
            raise ContractError(f"parameter {self.name!r} has shape {self.shape}, got {new.shape}")
        self._value = new.detach() if new.node is not None else new

    @property
    def shape(self) -> tuple[int, ...]:
        return self._value.shape

    def tensor(self) -> Tensor:
        """The value as seen by the current pass: a tape leaf when trainable and recording."""
        tape = _ACTIVE.get()
        if tape is None or not self.trainable:
            return self._value
        return tape.watch(self)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    _check_finite(data, op)
    tape = None
    for p in parents:
        if p.node is not None and p.tape is not None:
            if tape is not None and p.tape is not tape:
                raise ContractError(f"{op}: operands recorded on different tapes")
            tape = p.tape
    if tape is None:
        return Tensor(data, _owned=True)
    return tape._record(op, data, parents, vjp)


# ---------------------------------------------------------------- constructors

def tensor(data) -> Tensor:
    return Tensor(data)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), _owned=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), _owned=True)


def eye(n: int) -> Tensor:
    return Tensor(np.eye(n), _owned=True)


# ---------------------------------------------------------------- products

def _ordered_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # accumulate over the inner index in ascending order, one rounding per term
    out = np.zeros(a.shape[:-1] + b.shape[-1:])
    tmp = np.empty_like(out)
    for p in range(a.shape[-1]):
        np.multiply(a[..., :, p, None], b[..., None, p, :], out=tmp)
        out += tmp
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g, needs):
        return (g @ bd.T if needs[0] else None, ad.T @ g if needs[1] else None)

    return _emit("matmul", _ordered_matmul(ad, bd), (a, b), vjp)


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 3 or a.ndim != b.ndim:
        raise DimensionError(f"batched_matmul: ranks must match and be >= 3, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"batched_matmul: batch extents differ, {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"batched_matmul: inner extents differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g, needs):
        ga = g @ np.swapaxes(bd, -1, -2) if needs[0] else None
        gb = np.swapaxes(ad, -1, -2) @ g if needs[1] else None
        return ga, gb

    return _emit("batched_matmul", _ordered_matmul(ad, bd), (a, b), vjp)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """Right-multiply the last axis of ``x`` by the matrix ``w``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: cannot apply {w.shape} to {x.shape}")
    lead = x.shape[:-1]
    flat = reshape(x, (math.prod(lead), x.shape[-1])) if x.ndim != 2 else x
    out = matmul(flat, w)
    return reshape(out, lead + (w.shape[1],)) if x.ndim != 2 else out


# ---------------------------------------------------------------- softmax family

def softmax_last(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.size == 0:
        raise DimensionError("softmax_last needs at least one axis with elements")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, needs):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_last", s, (x,), vjp)


def log_softmax_last(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.size == 0:
        raise DimensionError("log_softmax_last needs at least one axis with elements")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def vjp(g, needs):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax_last", out, (x,), vjp)


# ---------------------------------------------------------------- shape manipulation

def transpose_last2(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"transpose_last2 needs rank >= 2, got {x.shape}")
    return _emit("transpose_last2", np.ascontiguousarray(np.swapaxes(x.data, -1, -2)), (x,),
                 lambda g, needs: (np.swapaxes(g, -1, -2),))


def permute_axes(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute_axes: {axes} is not a permutation of the axes of {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _emit("permute_axes", np.ascontiguousarray(np.transpose(x.data, axes)), (x,),
                 lambda g, needs: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size or any(s <= 0 for s in shape):
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g, needs: (g.reshape(old),))


def concat_axis(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    if not xs:
        raise DimensionError("concat_axis needs at least one tensor")
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat_axis: {t.shape} does not fit {ref} along axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def vjp(g, needs):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit("concat_axis", np.concatenate([t.data for t in xs], axis=ax), xs, vjp)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % x.ndim
    if not 0 <= start < stop <= x.shape[ax]:
        raise DimensionError(f"slice_axis: [{start}, {stop}) out of range for axis {axis} of {x.shape}")
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def vjp(g, needs):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit("slice_axis", x.data[index].copy(), (x,), vjp)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Expand singleton axes of ``x`` to ``shape``. Ranks must already agree."""
    shape = tuple(shape)
    if x.ndim != len(shape) or any(a != b and a != 1 for a, b in zip(x.shape, shape)):
        raise DimensionError(f"broadcast_to: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if a != b)

    def vjp(g, needs):
        return (g.sum(axis=axes, keepdims=True),)

    return _emit("broadcast_to", np.broadcast_to(x.data, shape).copy(), (x,), vjp)


# ---------------------------------------------------------------- reductions

def sum_axis(x: Tensor, axis: int) -> Tensor:
    ax = axis % x.ndim
    shape = x.shape
    return _emit("sum_axis", x.data.sum(axis=ax), (x,),
                 lambda g, needs: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean_axis(x: Tensor, axis: int) -> Tensor:
    ax = axis % x.ndim
    shape = x.shape
    n = shape[ax]
    return _emit("mean_axis", x.data.mean(axis=ax), (x,),
                 lambda g, needs: (np.broadcast_to(np.expand_dims(g, ax) / n, shape).copy(),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum_all", np.asarray(x.data.sum()), (x,), lambda g, needs: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _emit("mean_all", np.asarray(x.data.mean()), (x,), lambda g, needs: (np.full(shape, float(g) / n),))


# ---------------------------------------------------------------- elementwise

def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes differ, {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g, needs: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g, needs: (g, -g if needs[1] else None))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g, needs: (g * bd if needs[0] else None, g * ad if needs[1] else None))


def scale(x: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)
    return _emit("scale", x.data * alpha, (x,), lambda g, needs: (g * alpha,))


def neg(x: Tensor) -> Tensor:
    return _emit("neg", -x.data, (x,), lambda g, needs: (-g,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g, needs: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if (xd <= 0).any():
        raise NumericError("log of a non-positive value")
    return _emit("log", np.log(xd), (x,), lambda g, needs: (g / xd,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _emit("tanh", out, (x,), lambda g, needs: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g, needs: (g * mask,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("square", xd * xd, (x,), lambda g, needs: (2.0 * g * xd,))


def standardize_last(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance over the last axis (no affine part)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def vjp(g, needs):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _emit("standardize_last", xhat, (x,), vjp)


# ---------------------------------------------------------------- differentiation

def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Backpropagate a scalar loss on the tape it was recorded on."""
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise ContractError("loss was produced outside an active tape")
    return loss.tape.backward(loss)


def grad_check(f: Callable[[], Tensor], params: Iterable[Parameter], step: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must build its scalar output from ``Parameter.tensor()`` calls so the
    same function serves both the recorded and the perturbed evaluations. The
    error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if step <= 0:
        raise ContractError("grad_check step must be positive")
    params = [p for p in params if p.trainable]
    with Tape() as tape:
        loss = f()
        if loss.tape is tape and loss.node is not None:
            tape.backward(loss)
            analytic = tape.param_grads()
        else:
            analytic = {}           # f does not depend on any recorded value
    worst = 0.0
    with no_tape():
        for p in params:
            base = p.value.numpy()
            flat = base.reshape(-1)
            ga = analytic.get(p.name, np.zeros(p.shape)).reshape(-1)
            try:
                for j in range(flat.size):
                    orig = flat[j]
                    flat[j] = orig + step
                    p.value = Tensor(base)
                    up = f().item()
                    flat[j] = orig - step
                    p.value = Tensor(base)
                    down = f().item()
                    flat[j] = orig
                    numeric = (up - down) / (2.0 * step)
                    if not math.isfinite(numeric):
                        raise NumericError(f"non-finite finite difference for {p.name}[{j}]")
                    err = abs(ga[j] - numeric) / max(1.0, abs(numeric))
                    worst = max(worst, err)
            finally:
                p.value = Tensor(base)
    return worst
