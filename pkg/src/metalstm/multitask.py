"""Multi-task sharing schemes built from the cells and heads.

Architectures:

``single-lstm``  one standard LSTM per task, nothing shared
``single-meta``  one Meta-LSTMs stack per task, nothing shared
``ssp``          stacked shared-private: shared LSTM feeds ``[x; h_shared]``
                 into each task's LSTM
``psp``          parallel shared-private: shared and task LSTMs both read
                 ``x``; representation is ``[h_task; h_shared]``
``meta-mtl``     one shared Meta-LSTM generates the weights of every task's
                 Basic-LSTM

Parameters live in one shared :class:`ParamStore` plus one private store per
task; a name never appears in both.  Tagging tasks use a bidirectional
encoder and a CRF; classification tasks use the forward encoder's final
state and a softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import cells
from .autodiff import (
    ParamStore,
    StructuralError,
    Tensor,
    as_tensor,
    concat,
    linear,
    mean,
    mul,
    no_tape,
    softmax_cross_entropy,
    stack,
    take_rows,
)
from .cells import CellState, LSTMParams, MetaLSTMParams, BasicLSTMParams
from .data import Batch, TaskSpec
from .heads import (
    classifier_from_store,
    crf_from_store,
    crf_nll_batch,
    crf_viterbi,
    init_classifier,
    init_crf,
    logits,
)

ARCHS = ("single-lstm", "single-meta", "ssp", "psp", "meta-mtl")

__all__ = [
    "ARCHS",
    "ModelConfig",
    "MultiTaskModel",
    "TaskSpec",
    "build_model",
    "ssp_step",
    "psp_step",
    "meta_mtl_step",
]


@dataclass
class ModelConfig:
    vocab_size: int
    d: int = 200
    h: int = 100
    m: int = 40
    z: int = 40
    share_embeddings: bool = True
    seed: int = 1
    embeddings: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("vocab_size", "d", "h", "m", "z"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# -------------------------------------------------------------- single steps


def ssp_step(shared: LSTMParams, private_k: LSTMParams, x_t, s_shared: CellState, s_k: CellState):
    s_shared = cells.lstm_step(shared, x_t, s_shared)
    s_k = cells.lstm_step(private_k, concat([as_tensor(x_t), s_shared.h]), s_k)
    return s_shared, s_k


def psp_step(shared: LSTMParams, private_k: LSTMParams, x_t, s_shared: CellState, s_k: CellState):
    s_shared = cells.lstm_step(shared, x_t, s_shared)
    s_k = cells.lstm_step(private_k, x_t, s_k)
    return s_shared, s_k, concat([s_k.h, s_shared.h])


def meta_mtl_step(shared_meta: MetaLSTMParams, private_k: BasicLSTMParams, x_t, ms: CellState, bs_k: CellState):
    """The shared meta cell reads task ``k``'s own basic state, so its
    activations are per task even though its parameters are shared."""
    return cells.meta_stack_step(shared_meta, private_k, x_t, ms, bs_k)


# ------------------------------------------------------------------- model


class MultiTaskModel:
    def __init__(self, arch: str, cfg: ModelConfig, tasks: Sequence[TaskSpec]):
        self.arch = arch
        self.cfg = cfg
        self.tasks = {t.id: t for t in tasks}
        self.shared = ParamStore("shared")
        self.private: dict[str, ParamStore] = {t.id: ParamStore(t.id) for t in tasks}

    # -- structure
    def directions(self, task_id: str) -> tuple[str, ...]:
        return ("fwd", "bwd") if self.tasks[task_id].head == "tagging" else ("fwd",)

    def stores_for(self, task_id: str) -> list[ParamStore]:
        return [self.shared, self.private[task_id]]

    def all_stores(self) -> list[ParamStore]:
        return [self.shared, *self.private.values()]

    def embedding(self, task_id: str) -> Tensor:
        store = self.shared if "embed" in self.shared else self.private[task_id]
        return store["embed"]

    def meta_store(self, task_id: str | None = None) -> ParamStore:
        if self.arch == "meta-mtl":
            return self.shared
        if self.arch == "single-meta":
            return self.private[task_id or next(iter(self.private))]
        raise StructuralError(f"architecture {self.arch} has no Meta-LSTM")

    def meta_names(self, direction: str = "fwd") -> list[str]:
        return [f"meta.{direction}.{n}" for n in cells.META_NAMES]

    def meta_params(self, task_id: str, direction: str = "fwd") -> MetaLSTMParams:
        return cells.meta_from_store(self.meta_store(task_id), f"meta.{direction}")

    def basic_params(self, task_id: str, direction: str = "fwd") -> BasicLSTMParams:
        return cells.basic_from_store(self.private[task_id], f"basic.{direction}")

    # -- encoding
    def embed(self, task_id: str, ids: np.ndarray) -> list[Tensor]:
        E = self.embedding(task_id)
        return [take_rows(E, ids[:, t]) for t in range(ids.shape[1])]

    def _run(self, task_id: str, xs, lengths, direction: str) -> list[Tensor]:
        shared, private = self.shared, self.private[task_id]
        if self.arch == "single-lstm":
            hs, _ = cells.run_sequence("lstm", cells.lstm_from_store(private, f"lstm.{direction}"), xs, lengths)
            return hs
        if self.arch in ("single-meta", "meta-mtl"):
            params = (self.meta_params(task_id, direction), self.basic_params(task_id, direction))
            hs, _ = cells.run_sequence("meta", params, xs, lengths)
            return hs
        sp = cells.lstm_from_store(shared, f"shared.{direction}")
        pp = cells.lstm_from_store(private, f"private.{direction}")
        hs_shared, _ = cells.run_sequence("lstm", sp, xs, lengths)
        if self.arch == "ssp":
            hs, _ = cells.run_sequence("lstm", pp, [concat([x, s]) for x, s in zip(xs, hs_shared)], lengths)
            return hs
        hs_private, _ = cells.run_sequence("lstm", pp, xs, lengths)
        return [concat([a, b]) for a, b in zip(hs_private, hs_shared)]

    def encode(self, task_id: str, ids: np.ndarray, lengths: np.ndarray) -> list[Tensor]:
        """Per-position representations, ``(batch, rep)`` each."""
        xs = self.embed(task_id, ids)
        if "bwd" not in self.directions(task_id):
            return self._run(task_id, xs, lengths, "fwd")
        hf = self._run(task_id, xs, lengths, "fwd")
        hb = self._run(task_id, cells.reverse_sequence(xs, lengths), lengths, "bwd")
        hb = cells.reverse_sequence(hb, lengths)
        return [concat([a, b]) for a, b in zip(hf, hb)]

    def rep_dim(self) -> int:
        return 2 * self.cfg.h if self.arch == "psp" else self.cfg.h

    # -- heads
    def task_logits(self, task_id: str, batch: Batch) -> Tensor:
        hs = self.encode(task_id, batch.ids, batch.lengths)
        return logits(hs[-1], classifier_from_store(self.private[task_id], "head"))

    def emissions(self, task_id: str, batch: Batch) -> Tensor:
        hs = self.encode(task_id, batch.ids, batch.lengths)
        crf = crf_from_store(self.private[task_id], "head")
        return linear(stack(hs, axis=1), crf.emit)

    def example_losses(self, task_id: str, batch: Batch) -> Tensor:
        task = self.tasks[task_id]
        if task.head == "classification":
            if batch.labels.min() < 0 or batch.labels.max() >= task.n_classes:
                raise StructuralError(f"task {task_id}: label outside [0, {task.n_classes})")
            return softmax_cross_entropy(self.task_logits(task_id, batch), batch.labels)
        crf = crf_from_store(self.private[task_id], "head")
        return crf_nll_batch(self.emissions(task_id, batch), crf, batch.labels, batch.lengths)

    def loss(self, task_id: str, batch: Batch) -> Tensor:
        """``lambda_k`` times the batch-mean negative log-likelihood."""
        return mul(mean(self.example_losses(task_id, batch)), self.tasks[task_id].lam)

    def predict(self, task_id: str, batch: Batch) -> list:
        with no_tape():
            if self.tasks[task_id].head == "classification":
                return list(np.argmax(self.task_logits(task_id, batch).value, axis=-1))
            E = self.emissions(task_id, batch).value
            crf = crf_from_store(self.private[task_id], "head")
            return [np.array(crf_viterbi(E[b, :L], crf)[0]) for b, L in enumerate(batch.lengths)]

    # -- bookkeeping
    def snapshot(self) -> dict[str, dict[str, np.ndarray]]:
        return {s.label: s.snapshot() for s in self.all_stores()}

    def restore(self, snap: dict[str, dict[str, np.ndarray]]) -> None:
        for s in self.all_stores():
            s.restore(snap[s.label])

    def n_params(self) -> int:
        return sum(s.count() for s in self.all_stores())


def _init_embeddings(store: ParamStore, cfg: ModelConfig, rng) -> None:
    if cfg.embeddings is not None:
        E = np.array(cfg.embeddings, dtype=np.float64)
        if E.shape != (cfg.vocab_size, cfg.d):
            raise StructuralError(f"embedding table is {E.shape}, expected {(cfg.vocab_size, cfg.d)}")
    else:
        E = rng.uniform(-0.1, 0.1, size=(cfg.vocab_size, cfg.d))
        E[0] = 0.0
    store.add("embed", E)


def build_model(arch: str, tasks: Sequence[TaskSpec], cfg: ModelConfig) -> MultiTaskModel:
    """Create all parameters for ``arch`` over ``tasks``.

    Initialization draws from one generator seeded with ``cfg.seed`` in a fixed
    order (embeddings, shared cells, then per task: cells and head), so a
    one-task ``meta-mtl`` model equals the ``single-meta`` model built with
    the same seed.
    """
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHS}")
    if not tasks:
        raise ValueError("build_model needs at least one task")
    ids = [t.id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate task ids in {ids}")
    model = MultiTaskModel(arch, cfg, tasks)
    rng = np.random.default_rng(cfg.seed)
    d, h, m, z = cfg.d, cfg.h, cfg.m, cfg.z
    dirs = ("fwd", "bwd") if any(t.head == "tagging" for t in tasks) else ("fwd",)
    shared_cells = arch in ("ssp", "psp", "meta-mtl")
    if shared_cells and cfg.share_embeddings:
        _init_embeddings(model.shared, cfg, rng)
    if arch == "meta-mtl":
        for dr in dirs:
            cells.init_meta(model.shared, f"meta.{dr}", d, h, m, z, rng)
    elif arch in ("ssp", "psp"):
        for dr in dirs:
            cells.init_lstm(model.shared, f"shared.{dr}", d, h, rng)
    for task in tasks:
        store = model.private[task.id]
        if not (shared_cells and cfg.share_embeddings):
            _init_embeddings(store, cfg, rng)
        if arch == "single-meta":
            for dr in model.directions(task.id):
                cells.init_meta(store, f"meta.{dr}", d, h, m, z, rng)
        for dr in model.directions(task.id):
            if arch == "single-lstm":
                cells.init_lstm(store, f"lstm.{dr}", d, h, rng)
            elif arch in ("single-meta", "meta-mtl"):
                cells.init_basic(store, f"basic.{dr}", d, h, z, rng)
            elif arch == "ssp":
                cells.init_lstm(store, f"private.{dr}", d + h, h, rng)
            else:
                cells.init_lstm(store, f"private.{dr}", d, h, rng)
        rep = model.rep_dim() * len(model.directions(task.id))
        if task.head == "classification":
            init_classifier(store, "head", rep, task.n_classes, rng)
        else:
            init_crf(store, "head", rep, len(task.tagset), rng)
    clash = set(model.shared.names()) & {n for s in model.private.values() for n in s.names()}
    if clash:
        raise StructuralError(f"names in both shared and private stores: {sorted(clash)}")
    return model
