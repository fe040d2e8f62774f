"""Tape-based reverse-mode differentiation over numpy arrays.

Every value that takes part in a differentiable computation is a
:class:`Tensor`.  While a :class:`Tape` is active (see :func:`forward_scalar`)
each primitive op that touches a tensor requiring gradients appends one node
to the tape; :func:`backward` replays the nodes in reverse and writes the
resulting gradients into the slots of a :class:`ParamStore`.

All arithmetic is float64.  Any op that produces a non-finite value raises
:class:`NumericOverflowError` naming the op.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ParamStore",
    "StructuralError",
    "DimensionError",
    "NumericOverflowError",
    "EmptyInputError",
    "forward_scalar",
    "backward",
    "grad_check",
    "no_tape",
]


class StructuralError(ValueError):
    """Inputs do not fit together (shapes, tapes vs. stores, indices)."""


class DimensionError(StructuralError):
    pass


class EmptyInputError(ValueError):
    pass


class NumericOverflowError(FloatingPointError):
    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by op '{op}'")
        self.op = op


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate it."""

    __slots__ = ("value", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    # operator sugar
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

    def __getitem__(self, index):
        return getitem(self, index)


@dataclass(eq=False)
class _Node:
    op: str
    out: Tensor
    parents: tuple[Tensor, ...]
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Tape:
    """Ordered record of the primitive ops applied during a forward pass."""

    nodes: list[_Node] = field(default_factory=list)
    leaves: dict[int, Tensor] = field(default_factory=dict)
    output: Tensor | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


_local = threading.local()


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class _TapeContext:
    def __init__(self, tape: Tape | None):
        self.tape = tape

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self.tape)
        return self.tape

    def __exit__(self, *exc):
        _local.stack.pop()
        return False


def no_tape() -> _TapeContext:
    """Context in which ops are evaluated without recording."""
    return _TapeContext(None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, value: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    # a non-finite entry makes the sum non-finite
    if not np.isfinite(np.add.reduce(value, axis=None)):
        raise NumericOverflowError(op)
    needs = any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.nodes.append(_Node(op, out, parents, grad_fn))
        for p in parents:
            if p.name is not None and p.requires_grad:
                tape.leaves[id(p)] = p
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        "add",
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        "sub",
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        "mul",
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.value, b.shape) if b.requires_grad else None,
        ),
    )


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy broadcasting over leading axes (both at least 2-D)."""
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", a.value @ b.value, (a, b), grad_fn)


def linear(u, W) -> Tensor:
    """Apply ``W`` to the vector(s) ``u``.

    ``W`` is either one matrix ``(out, in)`` applied to ``u`` of shape ``(in,)``
    or ``(batch, in)``, or a stack of per-example matrices ``(batch, out, in)``
    applied row-wise to ``u`` of shape ``(batch, in)``.
    """
    u, W = as_tensor(u), as_tensor(W)
    if W.ndim == 2:
        if u.shape[-1] != W.shape[1]:
            raise DimensionError(f"linear: input {u.shape} does not fit weight {W.shape}")

        def grad_fn(g):
            gu = g @ W.value if u.requires_grad else None
            gW = None
            if W.requires_grad:
                gW = g.reshape(-1, g.shape[-1]).T @ u.value.reshape(-1, u.shape[-1])
            return gu, gW

        return _emit("linear", u.value @ W.value.T, (u, W), grad_fn)

    if W.ndim != 3 or u.ndim != 2 or W.shape[0] != u.shape[0] or W.shape[2] != u.shape[1]:
        raise DimensionError(f"linear: input {u.shape} does not fit weights {W.shape}")

    def grad_fn3(g):
        gu = np.einsum("bo,boi->bi", g, W.value) if u.requires_grad else None
        gW = g[:, :, None] * u.value[:, None, :] if W.requires_grad else None
        return gu, gW

    return _emit("linear", np.einsum("boi,bi->bo", W.value, u.value), (u, W), grad_fn3)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    # stable on both tails
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    try:
        value = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _emit("concat", value, parts, grad_fn)


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    value = np.stack([p.value for p in parts], axis=axis)

    def grad_fn(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _emit("stack", value, parts, grad_fn)


def getitem(a, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    a = as_tensor(a)
    basic = _is_basic(index)

    def grad_fn(g):
        out = np.zeros_like(a.value)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _emit("getitem", a.value[index], (a,), grad_fn)


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts)


def take_rows(table, ids) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by integer ``ids``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def grad_fn(g):
        out = np.zeros_like(table.value)
        np.add.at(out, ids, g)
        return (out,)

    return _emit("take_rows", table.value[ids], (table,), grad_fn)


def where(mask, a, b) -> Tensor:
    """Elementwise select; ``mask`` is a plain boolean array (broadcastable)."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return _emit(
        "where",
        np.where(mask, a.value, b.value),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(mask, g, 0.0), a.shape),
            _unbroadcast(np.where(mask, 0.0, g), b.shape),
        ),
    )


def sum_(a) -> Tensor:
    a = as_tensor(a)
    return _emit("sum", np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.value.size
    return _emit("mean", np.asarray(a.value.mean()), (a,), lambda g: (np.full(a.shape, g / n),))


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(log_softmax_np(a.value))

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (a,), grad_fn)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Per-example ``-log softmax(logits)[label]``; shape ``logits.shape[:-1]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax_np(logits.value)
    onehot = np.zeros_like(logp)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    nll = -(logp * onehot).sum(axis=-1)

    def grad_fn(g):
        return ((np.exp(logp) - onehot) * np.asarray(g)[..., None],)

    return _emit("softmax_xent", nll, (logits,), grad_fn)


# ----------------------------------------------------------------- parameters


@dataclass(eq=False)
class _Entry:
    tensor: Tensor
    grad: np.ndarray
    accum: np.ndarray
    frozen: bool = False


class ParamStore:
    """Named trainable tensors with gradient slots and Adagrad accumulators."""

    def __init__(self, label: str = ""):
        self.label = label
        self._entries: dict[str, _Entry] = {}

    def add(self, name: str, value, frozen: bool = False) -> Tensor:
        if name in self._entries:
            raise StructuralError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._entries[name] = _Entry(t, np.zeros_like(t.value), np.zeros_like(t.value), frozen)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name, e in self._entries.items():
            yield name, e.tensor

    def grad(self, name: str) -> np.ndarray:
        return self._entries[name].grad

    def accum(self, name: str) -> np.ndarray:
        return self._entries[name].accum

    def is_frozen(self, name: str) -> bool:
        return self._entries[name].frozen

    def freeze(self, names: Iterable[str] | None = None, frozen: bool = True) -> None:
        for name in self._entries if names is None else names:
            self._entries[name].frozen = frozen

    def zero_grad(self) -> None:
        for e in self._entries.values():
            e.grad[...] = 0.0

    def set_value(self, name: str, value) -> None:
        e = self._entries[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != e.tensor.shape:
            raise DimensionError(f"{name}: expected shape {e.tensor.shape}, got {value.shape}")
        e.tensor.value[...] = value

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: e.tensor.value.copy() for n, e in self._entries.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, value in snap.items():
            self.set_value(name, value)

    def count(self, names: Iterable[str] | None = None) -> int:
        names = self._entries if names is None else names
        return sum(self._entries[n].tensor.value.size for n in names)

    def _entry(self, name: str) -> _Entry:
        return self._entries[name]


# ------------------------------------------------------------ forward/backward


def forward_scalar(fn: Callable[..., object], *args, **kwargs) -> tuple[float, Tape]:
    """Evaluate ``fn`` while recording a tape; ``fn`` must return a scalar."""
    tape = Tape()
    with _TapeContext(tape):
        out = fn(*args, **kwargs)
    out = as_tensor(out)
    if out.value.size != 1:
        raise StructuralError(f"forward_scalar: expected a scalar, got shape {out.shape}")
    if not np.isfinite(out.value).all():
        raise NumericOverflowError("output")
    tape.output = out
    return float(out.value.reshape(())), tape


def _as_stores(params) -> list[ParamStore]:
    if isinstance(params, ParamStore):
        return [params]
    return list(params)


def backward(tape: Tape, params) -> None:
    """Accumulate d(output)/d(param) into the gradient slots of ``params``.

    ``params`` is one :class:`ParamStore` or an iterable of them.  Frozen
    entries are left at zero.  Slots accumulate, so callers zero them between
    steps (:func:`metalstm.training.adagrad_step` does).
    """
    if tape.output is None:
        raise StructuralError("backward: tape has no recorded output")
    stores = _as_stores(params)
    owners: dict[int, _Entry] = {}
    for store in stores:
        for name in store:
            e = store._entry(name)
            owners[id(e.tensor)] = e
    used = tape.leaves
    if used:
        stale = [t.name for key, t in used.items() if key not in owners and _name_in(stores, t.name)]
        if stale:
            raise StructuralError(f"backward: tape used parameters not owned by these stores: {stale}")
        if not any(key in owners for key in used):
            raise StructuralError("backward: tape and parameter stores share no parameters")

    grads: dict[int, np.ndarray] = {id(tape.output): np.ones_like(tape.output.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for key, e in owners.items():
        if e.frozen:
            continue
        g = grads.get(key)
        if g is not None:
            e.grad += g.reshape(e.grad.shape)


def _name_in(stores: list[ParamStore], name: str | None) -> bool:
    return name is not None and any(name in s for s in stores)


def grad_check(
    closure: Callable[[], object],
    params,
    eps: float = 1e-5,
    sample: int = 5,
    seed: int = 0,
    atol: float = 0.0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``sample`` coordinates are drawn per (non-frozen) tensor.  The relative
    error of one coordinate is ``|a - n| / max(1e-12, |a| + |n|)``.
    Coordinates with ``|a - n| <= atol`` count as exact; the default of 0
    keeps the plain relative metric.
    """
    if eps <= 0 or sample < 1:
        raise ValueError("grad_check needs eps > 0 and sample >= 1")
    stores = _as_stores(params)
    saved = [{n: s.grad(n).copy() for n in s} for s in stores]
    for s in stores:
        s.zero_grad()
    _, tape = forward_scalar(closure)
    backward(tape, stores)
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        for s in stores:
            for name, t in s.items():
                if s.is_frozen(name):
                    continue
                flat = t.value.reshape(-1)
                analytic = s.grad(name).reshape(-1)
                k = min(sample, flat.size)
                for i in rng.choice(flat.size, size=k, replace=False):
                    orig = flat[i]
                    flat[i] = orig + eps
                    up = _eval(closure)
                    flat[i] = orig - eps
                    down = _eval(closure)
                    flat[i] = orig
                    numeric = (up - down) / (2 * eps)
                    a = analytic[i]
                    diff = abs(a - numeric)
                    err = 0.0 if diff <= atol else diff / max(1e-12, abs(a) + abs(numeric))
                    worst = max(worst, err)
    finally:
        for s, g in zip(stores, saved):
            for n, v in g.items():
                s.grad(n)[...] = v
    return worst


def _eval(closure) -> float:
    with no_tape():
        v = float(as_tensor(closure()).value.reshape(()))
    if not np.isfinite(v):
        raise NumericOverflowError("grad_check perturbed loss")
    return v
