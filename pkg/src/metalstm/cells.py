"""Recurrent cells: standard LSTM, the Basic-LSTM whose weights are generated
per step from a meta vector, the Meta-LSTM that produces that vector, and
sequence runners.

Every step function accepts a single example (1-D vectors) or a batch
(leading batch axis).  Gate blocks are stacked in the order (g, o, i, f), and
affine inputs are concatenated as ``[x; h_prev]`` for the LSTM and
``[x; meta_h_prev; basic_h_prev]`` for the Meta-LSTM.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .autodiff import (
    DimensionError,
    EmptyInputError,
    ParamStore,
    Tensor,
    as_tensor,
    concat,
    linear,
    matmul,
    mul,
    sigmoid,
    stack,
    tanh,
    where,
    getitem,
)

GATES = ("g", "o", "i", "f")


class CellState(NamedTuple):
    h: Tensor
    c: Tensor


def zero_state(size: int, batch: int | None = None) -> CellState:
    shape = (size,) if batch is None else (batch, size)
    return CellState(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


@dataclass
class LSTMParams:
    W: Tensor  # (4h, h+d)
    b: Tensor  # (4h,)

    @property
    def hidden(self) -> int:
        return self.W.shape[-2] // 4

    @property
    def input_dim(self) -> int:
        return self.W.shape[-1] - self.hidden


@dataclass
class BasicLSTMParams:
    P: dict[str, Tensor]  # gate -> (h, z)
    Q: dict[str, Tensor]  # gate -> (z, h+d)
    B: dict[str, Tensor]  # gate -> (h, z)

    @property
    def hidden(self) -> int:
        return self.P["g"].shape[0]

    @property
    def rank(self) -> int:
        return self.P["g"].shape[1]

    @property
    def input_dim(self) -> int:
        return self.Q["g"].shape[1] - self.hidden


@dataclass
class MetaLSTMParams:
    W_m: Tensor  # (4m, d+m+h)
    b_m: Tensor  # (4m,)
    W_z: Tensor  # (z, m)

    @property
    def hidden(self) -> int:
        return self.b_m.shape[0] // 4


def _uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    r = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-r, r, size=shape)


# ------------------------------------------------------------------ creation


def init_lstm(store: ParamStore, prefix: str, d: int, h: int, rng: np.random.Generator) -> LSTMParams:
    W = _uniform(rng, (4 * h, h + d))
    b = np.zeros(4 * h)
    b[3 * h :] = 1.0  # forget gate
    return LSTMParams(store.add(f"{prefix}.W", W), store.add(f"{prefix}.b", b))


def init_basic(store: ParamStore, prefix: str, d: int, h: int, z: int, rng: np.random.Generator) -> BasicLSTMParams:
    P, Q, B = {}, {}, {}
    for k in GATES:
        P[k] = store.add(f"{prefix}.P_{k}", _uniform(rng, (h, z)))
        Q[k] = store.add(f"{prefix}.Q_{k}", _uniform(rng, (z, h + d)))
    for k in GATES:
        value = np.zeros((h, z)) if k == "f" else _uniform(rng, (h, z))
        B[k] = store.add(f"{prefix}.B_{k}", value)
    return BasicLSTMParams(P, Q, B)


def init_meta(store: ParamStore, prefix: str, d: int, h: int, m: int, z: int, rng: np.random.Generator) -> MetaLSTMParams:
    W_m = _uniform(rng, (4 * m, d + m + h))
    b_m = np.zeros(4 * m)
    b_m[3 * m :] = 1.0
    W_z = _uniform(rng, (z, m))
    return MetaLSTMParams(
        store.add(f"{prefix}.W_m", W_m),
        store.add(f"{prefix}.b_m", b_m),
        store.add(f"{prefix}.W_z", W_z),
    )


def lstm_from_store(store: ParamStore, prefix: str) -> LSTMParams:
    return LSTMParams(store[f"{prefix}.W"], store[f"{prefix}.b"])


def basic_from_store(store: ParamStore, prefix: str) -> BasicLSTMParams:
    return BasicLSTMParams(
        {k: store[f"{prefix}.P_{k}"] for k in GATES},
        {k: store[f"{prefix}.Q_{k}"] for k in GATES},
        {k: store[f"{prefix}.B_{k}"] for k in GATES},
    )


def meta_from_store(store: ParamStore, prefix: str) -> MetaLSTMParams:
    return MetaLSTMParams(store[f"{prefix}.W_m"], store[f"{prefix}.b_m"], store[f"{prefix}.W_z"])


META_NAMES = ("W_m", "b_m", "W_z")

# ------------------------------------------------------------------- steps


def _gates(W, b, u) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    n = W.shape[-2] // 4
    a = linear(u, W) + b
    g = tanh(getitem(a, (..., slice(0, n))))
    ofi = sigmoid(getitem(a, (..., slice(n, 4 * n))))
    o = getitem(ofi, (..., slice(0, n)))
    i = getitem(ofi, (..., slice(n, 2 * n)))
    f = getitem(ofi, (..., slice(2 * n, 3 * n)))
    return g, o, i, f


def _update(W, b, u, c_prev) -> CellState:
    g, o, i, f = _gates(W, b, u)
    c = mul(g, i) + mul(c_prev, f)
    return CellState(mul(o, tanh(c)), c)


def _check_state(s: CellState, n: int, who: str) -> None:
    if s.h.shape[-1] != n or s.c.shape != s.h.shape:
        raise DimensionError(f"{who}: state of size {s.h.shape[-1]} does not fit hidden size {n}")


def lstm_gates(p: LSTMParams, x_t, s: CellState) -> dict[str, Tensor]:
    """The four gate activations of a standard LSTM step, keyed g/o/i/f."""
    x_t = as_tensor(x_t)
    u = concat([x_t, s.h])
    return dict(zip(GATES, _gates(p.W, p.b, u)))


def lstm_step(p: LSTMParams, x_t, s: CellState) -> CellState:
    x_t = as_tensor(x_t)
    h = p.W.shape[-2] // 4
    if p.W.shape[-2] != 4 * h or p.b.shape[-1] != 4 * h:
        raise DimensionError(f"lstm_step: W {p.W.shape} / b {p.b.shape} are not 4h-stacked")
    _check_state(s, h, "lstm_step")
    if p.W.shape[-1] != h + x_t.shape[-1]:
        raise DimensionError(f"lstm_step: W has {p.W.shape[-1]} columns, expected h+d = {h + x_t.shape[-1]}")
    return _update(p.W, p.b, concat([x_t, s.h]), s.c)


def make_dynamic_weights(bp: BasicLSTMParams, z_t) -> tuple[Tensor, Tensor]:
    """Generate ``(W(z), b(z))`` for the Basic-LSTM.

    Each gate block is ``P_k diag(z) Q_k`` and each bias block ``B_k z``.  With a
    batch of meta vectors ``(batch, z)`` the result is a stack of matrices.
    """
    z_t = as_tensor(z_t)
    if z_t.shape[-1] != bp.rank:
        raise DimensionError(f"make_dynamic_weights: z has length {z_t.shape[-1]}, expected {bp.rank}")
    zrow = getitem(z_t, (..., None, slice(None)))  # (..., 1, z)
    blocks = [matmul(mul(bp.P[k], zrow), bp.Q[k]) for k in GATES]
    biases = [linear(z_t, bp.B[k]) for k in GATES]
    return concat(blocks, axis=-2), concat(biases, axis=-1)


def basic_lstm_step(bp: BasicLSTMParams, z_t, x_t, s: CellState) -> CellState:
    W, b = make_dynamic_weights(bp, z_t)
    return lstm_step(LSTMParams(W, b), x_t, s)


def meta_lstm_step(mp: MetaLSTMParams, x_t, h_basic_prev, ms: CellState) -> tuple[CellState, Tensor]:
    x_t, h_basic_prev = as_tensor(x_t), as_tensor(h_basic_prev)
    m = mp.hidden
    _check_state(ms, m, "meta_lstm_step")
    want = x_t.shape[-1] + m + h_basic_prev.shape[-1]
    if mp.W_m.shape != (4 * m, want):
        raise DimensionError(f"meta_lstm_step: W_m is {mp.W_m.shape}, expected {(4 * m, want)}")
    if mp.W_z.shape[1] != m:
        raise DimensionError(f"meta_lstm_step: W_z is {mp.W_z.shape}, expected (z, {m})")
    ms_next = _update(mp.W_m, mp.b_m, concat([x_t, ms.h, h_basic_prev]), ms.c)
    return ms_next, linear(ms_next.h, mp.W_z)


def meta_stack_step(mp: MetaLSTMParams, bp: BasicLSTMParams, x_t, ms: CellState, bs: CellState, return_z: bool = False):
    """One timestep of the Meta-LSTMs: the meta cell runs first, its ``z``
    then drives the basic cell."""
    ms_next, z_t = meta_lstm_step(mp, x_t, bs.h, ms)
    bs_next = basic_lstm_step(bp, z_t, x_t, bs)
    if return_z:
        return ms_next, bs_next, z_t
    return ms_next, bs_next


# ----------------------------------------------------------------- sequences


def _masked(mask, new: CellState, old: CellState) -> CellState:
    if mask is None:
        return new
    return CellState(where(mask, new.h, old.h), where(mask, new.c, old.c))


def run_sequence(kind: str, params, xs: Sequence, lengths=None):
    """Run a cell over ``xs`` from zero states.

    ``kind`` is ``"lstm"`` (params: LSTMParams) or ``"meta"`` (params:
    ``(MetaLSTMParams, BasicLSTMParams)``).  For a padded batch, ``lengths``
    gives each row's true length; states of finished rows are carried forward
    unchanged, so the final state is each row's state at its own last token.

    Returns ``(hs, final)`` where ``final`` is a CellState for ``"lstm"`` and
    a ``(meta_state, basic_state)`` pair for ``"meta"``.
    """
    if len(xs) == 0:
        raise EmptyInputError("run_sequence: empty input sequence")
    xs = [as_tensor(x) for x in xs]
    batch = xs[0].shape[0] if xs[0].ndim == 2 else None
    masks = _masks(lengths, len(xs))
    hs = []
    if kind == "lstm":
        s = zero_state(params.hidden, batch)
        for t, x in enumerate(xs):
            s = _masked(masks[t], lstm_step(params, x, s), s)
            hs.append(s.h)
        return hs, s
    if kind == "meta":
        mp, bp = params
        ms, bs = zero_state(mp.hidden, batch), zero_state(bp.hidden, batch)
        for t, x in enumerate(xs):
            ms_n, bs_n = meta_stack_step(mp, bp, x, ms, bs)
            ms, bs = _masked(masks[t], ms_n, ms), _masked(masks[t], bs_n, bs)
            hs.append(bs.h)
        return hs, (ms, bs)
    raise ValueError(f"unknown cell kind {kind!r}")


def _masks(lengths, T: int) -> list:
    if lengths is None:
        return [None] * T
    lengths = np.asarray(lengths)
    return [(t < lengths)[:, None] for t in range(T)]


def reverse_index(lengths, T: int) -> np.ndarray:
    """Per-row time index that reverses the first ``length`` steps and leaves
    padding in place; shape ``(T, batch)``."""
    lengths = np.asarray(lengths)
    t = np.arange(T)[:, None]
    return np.where(t < lengths[None, :], lengths[None, :] - 1 - t, t)


def reverse_sequence(xs: Sequence, lengths=None) -> list[Tensor]:
    xs = [as_tensor(x) for x in xs]
    if lengths is None:
        return xs[::-1]
    T = len(xs)
    idx = reverse_index(lengths, T)
    stacked = stack(xs, axis=0)  # (T, B, d)
    rows = np.arange(idx.shape[1])[None, :]
    flipped = getitem(stacked, (idx, np.broadcast_to(rows, idx.shape)))
    return [getitem(flipped, t) for t in range(T)]


def bidirectional_encode(kind: str, fwd, bwd, xs: Sequence, lengths=None) -> list[Tensor]:
    """Per-position ``[forward h_t ; backward h_t]``."""
    hf, _ = run_sequence(kind, fwd, xs, lengths)
    hb, _ = run_sequence(kind, bwd, reverse_sequence(xs, lengths), lengths)
    hb = reverse_sequence(hb, lengths)
    return [concat([a, b]) for a, b in zip(hf, hb)]


# ----------------------------------------------------------------- counting


def count_params(kind: str, d: int, h: int, m: int = 0, z: int = 0, with_bias: bool = False) -> int:
    """Closed-form parameter counts.

    kinds: ``standard`` (4h^2+4hd+4h), ``basic`` (8hz+4dz, plus 4hz for the
    bias generators when ``with_bias``), ``meta`` (4m(d+h+m+1)+mz) and
    ``meta_stack`` (meta + basic).
    """
    if kind == "standard":
        return 4 * h * h + 4 * h * d + 4 * h
    if kind == "basic":
        n = 8 * h * z + 4 * d * z
        return n + 4 * h * z if with_bias else n
    if kind == "meta":
        return 4 * m * (d + h + m + 1) + m * z
    if kind == "meta_stack":
        return count_params("meta", d, h, m, z) + count_params("basic", d, h, m, z, with_bias)
    raise ValueError(f"unknown kind {kind!r}")
