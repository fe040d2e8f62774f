"""Adagrad, the stochastic multi-task training loop, fine-tuning and
frozen-meta transfer."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import cells
from .autodiff import ParamStore, backward, forward_scalar, no_tape
from .checkpoint import CheckpointError
from .data import Batch, Example, TaskSpec, iterate_batches
from .multitask import ModelConfig, MultiTaskModel, build_model

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    l2_reg: float = 1e-5
    batch_size: int = 16
    max_epochs: int = 20
    seed: int = 1
    adagrad_eps: float = 1e-8
    clip_norm: float | None = 5.0
    finetune_scale: float = 0.1
    finetune_epochs: int = 10
    patience: int = 5

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    task: str
    train_loss: float
    dev_loss: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    sampled: list[str] = field(default_factory=list)
    best_epoch: int = 0
    best_dev: float = math.inf
    final: dict | None = field(default=None, repr=False)  # end-of-training snapshot when the best is restored

    def to_tsv(self) -> str:
        lines = ["epoch\ttask\ttrain_loss\tdev_loss"]
        for r in self.records:
            lines.append(f"{r.epoch}\t{r.task}\t{r.train_loss:.17g}\t{r.dev_loss:.17g}")
        return "\n".join(lines) + "\n"

    def curve(self, task: str, which: str = "dev_loss") -> list[float]:
        return [getattr(r, which) for r in self.records if r.task == task]


# ---------------------------------------------------------------- optimizer


def _stores(params) -> list[ParamStore]:
    return [params] if isinstance(params, ParamStore) else list(params)


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradient slots so their joint L2 norm is at most ``max_norm``."""
    stores = _stores(params)
    total = math.sqrt(sum(float((s.grad(n) ** 2).sum()) for s in stores for n in s))
    if total > max_norm:
        scale = max_norm / total
        for s in stores:
            for n in s:
                s.grad(n)[...] *= scale
    return total


def adagrad_step(params, cfg: TrainConfig) -> None:
    """``acc += g^2; p -= lr * g / (sqrt(acc) + eps)`` for every non-frozen
    entry, with ``g`` including the L2 weight-decay term.  All gradient slots
    are zeroed afterwards."""
    for store in _stores(params):
        for name in store:
            g = store.grad(name)
            if not store.is_frozen(name):
                p = store[name].value
                if cfg.l2_reg:
                    g = g + cfg.l2_reg * p
                acc = store.accum(name)
                acc += g * g
                p -= cfg.learning_rate * g / (np.sqrt(acc) + cfg.adagrad_eps)
            store.grad(name)[...] = 0.0


# -------------------------------------------------------------------- loops


def sample_tasks(task_ids: Sequence[str], n: int, rng: np.random.Generator) -> list[str]:
    return [task_ids[int(i)] for i in rng.integers(len(task_ids), size=n)]


def _batch_stream(examples: Sequence[Example], batch_size: int, rng) -> Iterator[Batch]:
    while True:
        yield from iterate_batches(examples, batch_size, rng)


def split_loss(model: MultiTaskModel, task_id: str, split: str = "dev", batch_size: int = 64) -> float:
    """Mean per-example loss (without the task weight) over a split."""
    examples = model.tasks[task_id].split(split)
    if not examples:
        return math.nan
    total = 0.0
    with no_tape():
        for batch in iterate_batches(examples, batch_size):
            total += float(model.example_losses(task_id, batch).value.sum())
    return total / len(examples)


def train_step(model: MultiTaskModel, task_id: str, batch: Batch, cfg: TrainConfig, stores=None) -> float:
    stores = model.stores_for(task_id) if stores is None else stores
    loss, tape = forward_scalar(model.loss, task_id, batch)
    backward(tape, stores)
    if cfg.clip_norm:
        clip_gradients(stores, cfg.clip_norm)
    adagrad_step(stores, cfg)
    return loss


def joint_train(model: MultiTaskModel, cfg: TrainConfig, keep_best: bool = True) -> TrainLog:
    """Stochastic multi-task training.

    Each iteration picks a task uniformly at random, draws a mini-batch from
    it and updates the shared store and that task's private store only.  One
    epoch is ``ceil(sum_k N_k / batch_size)`` iterations.  With ``keep_best``
    the parameters with the lowest mean dev loss are restored at the end.
    """
    task_ids = list(model.tasks)
    for tid in task_ids:
        if not model.tasks[tid].train:
            raise ValueError(f"task {tid} has an empty training split")
    rng = np.random.default_rng(cfg.seed)
    streams = {tid: _batch_stream(model.tasks[tid].train, cfg.batch_size, rng) for tid in task_ids}
    steps = math.ceil(sum(len(model.tasks[t].train) for t in task_ids) / cfg.batch_size)
    out = TrainLog()
    best = model.snapshot() if keep_best else None
    for epoch in range(1, cfg.max_epochs + 1):
        losses: dict[str, list[float]] = {t: [] for t in task_ids}
        for tid in sample_tasks(task_ids, steps, rng):
            out.sampled.append(tid)
            losses[tid].append(train_step(model, tid, next(streams[tid]), cfg))
        devs = []
        for tid in task_ids:
            dev = split_loss(model, tid, "dev")
            devs.append(dev)
            train = float(np.mean(losses[tid])) if losses[tid] else math.nan
            out.records.append(EpochRecord(epoch, tid, train, dev))
        mean_dev = float(np.nanmean(devs)) if not all(math.isnan(d) for d in devs) else math.nan
        log.info("epoch %d mean dev loss %.4f", epoch, mean_dev)
        if keep_best and (mean_dev < out.best_dev or math.isnan(out.best_dev)):
            out.best_dev, out.best_epoch = mean_dev, epoch
            best = model.snapshot()
    if keep_best and best is not None and out.best_epoch > 0:
        out.final = model.snapshot()
        model.restore(best)
    return out


def fine_tune(model: MultiTaskModel, task_id: str, cfg: TrainConfig) -> TrainLog:
    """Continue training shared + private parameters on one task with a
    reduced learning rate; early-stop on dev loss and keep the best state."""
    if task_id not in model.tasks:
        raise KeyError(f"unknown task id {task_id!r}")
    stores = model.stores_for(task_id)
    ft_cfg = TrainConfig(**{**cfg.__dict__, "learning_rate": cfg.learning_rate * cfg.finetune_scale})
    rng = np.random.default_rng(cfg.seed + 7919)
    out = TrainLog()
    out.best_dev = split_loss(model, task_id, "dev")
    best = [s.snapshot() for s in stores]
    stale = 0
    for epoch in range(1, cfg.finetune_epochs + 1):
        losses = [train_step(model, task_id, b, ft_cfg, stores)
                  for b in iterate_batches(model.tasks[task_id].train, cfg.batch_size, rng)]
        dev = split_loss(model, task_id, "dev")
        out.records.append(EpochRecord(epoch, task_id, float(np.mean(losses)), dev))
        if dev < out.best_dev:
            out.best_dev, out.best_epoch, stale = dev, epoch, 0
            best = [s.snapshot() for s in stores]
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for s, snap in zip(stores, best):
        s.restore(snap)
    return out


def transfer_train(
    meta: dict[str, np.ndarray],
    task: TaskSpec,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    freeze_embeddings: bool = False,
) -> tuple[MultiTaskModel, TrainLog]:
    """Train a new task's Basic-LSTM (and head, embeddings) under a fixed,
    pre-trained Meta-LSTM."""
    model = build_model("meta-mtl", [task], model_cfg)
    store = model.shared
    names = [n for n in store if n.startswith("meta.")]
    missing = sorted(set(names) - set(meta))
    if missing:
        raise CheckpointError(f"meta checkpoint lacks tensors {missing}")
    for n in names:
        want, got = store[n].shape, np.shape(meta[n])
        if want != got:
            raise CheckpointError(f"{n}: expected shape {want}, found {got}")
        store.set_value(n, meta[n])
    store.freeze(names)
    if freeze_embeddings and "embed" in store:
        store.freeze(["embed"])
    return model, joint_train(model, cfg)


def random_meta(model_cfg: ModelConfig, seed: int, directions=("fwd",)) -> dict[str, np.ndarray]:
    """A freshly initialized Meta-LSTM, e.g. as the control for transfer."""
    store = ParamStore()
    rng = np.random.default_rng(seed)
    for dr in directions:
        cells.init_meta(store, f"meta.{dr}", model_cfg.d, model_cfg.h, model_cfg.m, model_cfg.z, rng)
    return store.snapshot()
