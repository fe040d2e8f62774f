"""Evaluation metrics, generated-weight change traces and parameter reports."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import cells
from .autodiff import DimensionError, EmptyInputError, Tensor, no_tape, take_rows
from .cells import GATES, make_dynamic_weights, meta_stack_step, zero_state
from .data import Vocab, iterate_batches
from .heads import classifier_from_store, logits

DELTA = 1e-8


def weight_change(W_t, W_prev, delta: float = DELTA) -> float:
    """Mean elementwise ``|W_t - W_prev| / (|W_prev| + delta)``."""
    a = W_t.value if isinstance(W_t, Tensor) else np.asarray(W_t, dtype=np.float64)
    b = W_prev.value if isinstance(W_prev, Tensor) else np.asarray(W_prev, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"weight_change: shapes {a.shape} and {b.shape} differ")
    return float(np.mean(np.abs(a - b) / (np.abs(b) + delta)))


@dataclass
class TraceRecord:
    position: int
    token: str
    diffs: dict[str, float] | None  # keyed by gate g/o/i/f; None at the first position
    score: float


TRACE_COLUMNS = ("pos", "token", "diff_i", "diff_g", "diff_f", "diff_o", "score")


def trace_sequence(model, task_id: str, tokens: Sequence[int], vocab: Vocab | None = None) -> list[TraceRecord]:
    """Per-position change of each gate block of the generated weights plus
    the classifier's positive-minus-negative logit on the running prefix."""
    if len(tokens) == 0:
        raise EmptyInputError("trace_sequence: empty token sequence")
    mp = model.meta_params(task_id)
    bp = model.basic_params(task_id)
    head = classifier_from_store(model.private[task_id], "head")
    E = model.embedding(task_id)
    h = bp.hidden
    records = []
    with no_tape():
        ms, bs = zero_state(mp.hidden), zero_state(h)
        prev = None
        for t, tok in enumerate(tokens):
            x = take_rows(E, int(tok))
            ms, bs, z = meta_stack_step(mp, bp, x, ms, bs, return_z=True)
            W, _ = make_dynamic_weights(bp, z)
            blocks = {k: W.value[j * h : (j + 1) * h] for j, k in enumerate(GATES)}
            diffs = None if prev is None else {k: weight_change(blocks[k], prev[k]) for k in GATES}
            prev = blocks
            lg = logits(bs.h, head).value
            score = float(lg[1] - lg[0]) if lg.shape[-1] > 1 else float(lg[0])
            name = vocab.itos[int(tok)] if vocab is not None else str(int(tok))
            records.append(TraceRecord(t + 1, name, diffs, score))
    return records


def format_trace(records: Sequence[TraceRecord]) -> str:
    lines = ["\t".join(TRACE_COLUMNS)]
    for r in records:
        d = ["-"] * 4 if r.diffs is None else [f"{r.diffs[k]:.10g}" for k in ("i", "g", "f", "o")]
        lines.append("\t".join([str(r.position), r.token, *d, f"{r.score:.10g}"]))
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ metrics


def bio_spans(tags: Sequence[str]) -> set[tuple[int, int, str]]:
    """Exact-match chunks ``(start, end_exclusive, type)``.  A stray ``I-X``
    opens a new chunk as if it were ``B-X``."""
    spans = set()
    start, kind = None, None
    for i, tag in enumerate(list(tags) + ["O"]):
        prefix, _, typ = tag.partition("-")
        continues = prefix == "I" and kind == typ and start is not None
        if start is not None and not continues:
            spans.add((start, i, kind))
            start, kind = None, None
        if prefix == "B" or (prefix == "I" and not continues):
            start, kind = i, typ
    return spans


def span_prf(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> tuple[float, float, float]:
    tp = n_gold = n_pred = 0
    for g, p in zip(gold, pred):
        gs, ps = bio_spans(g), bio_spans(p)
        tp += len(gs & ps)
        n_gold += len(gs)
        n_pred += len(ps)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def evaluate(model, task_id: str, split: str = "test", batch_size: int = 64) -> dict[str, float]:
    """Accuracy for classification; span P/R/F1 and token accuracy for tagging."""
    task = model.tasks[task_id]
    examples = task.split(split)
    if not examples:
        raise EmptyInputError(f"task {task_id}: split {split!r} is empty")
    preds = []
    for batch in iterate_batches(examples, batch_size):
        preds.extend(model.predict(task_id, batch))
    if task.head == "classification":
        correct = sum(int(p == e.label) for p, e in zip(preds, examples))
        return {"n": len(examples), "accuracy": correct / len(examples)}
    gold = [[task.tagset[i] for i in e.label] for e in examples]
    pred = [[task.tagset[i] for i in p] for p in preds]
    tokens = sum(len(g) for g in gold)
    hits = sum(a == b for g, p in zip(gold, pred) for a, b in zip(g, p))
    precision, recall, f1 = span_prf(gold, pred)
    return {"n": len(examples), "precision": precision, "recall": recall, "f1": f1, "token_accuracy": hits / tokens}


def format_report(report: dict) -> str:
    return "".join(f"{k}\t{v}\n" for k, v in report.items())


# ---------------------------------------------------------- parameter report


@dataclass
class ParamRow:
    store: str
    name: str
    shape: tuple[int, ...]
    count: int
    frozen: bool


def param_report(model) -> dict:
    """Per-tensor rows, per-store totals and the cell-level subtotals.

    ``cell_excl_bias_gen`` leaves out the Basic-LSTM bias generators ``B_*``;
    ``cell_with_bias`` includes them.
    """
    rows = [
        ParamRow(s.label, n, t.shape, int(t.value.size), s.is_frozen(n))
        for s in model.all_stores()
        for n, t in s.items()
    ]
    per_store: dict[str, int] = {}
    for r in rows:
        per_store[r.store] = per_store.get(r.store, 0) + r.count
    cell_rows = [r for r in rows if r.name != "embed" and not r.name.startswith("head.")]
    bias_gen = sum(r.count for r in cell_rows if ".B_" in r.name)
    cell = sum(r.count for r in cell_rows)
    return {
        "rows": rows,
        "per_store": per_store,
        "total": sum(r.count for r in rows),
        "cell_with_bias": cell,
        "cell_excl_bias_gen": cell - bias_gen,
        "shared_cell": sum(r.count for r in cell_rows if r.store == "shared"),
    }


def format_param_report(report: dict) -> str:
    lines = ["store\ttensor\tshape\tcount\tfrozen"]
    for r in report["rows"]:
        lines.append(f"{r.store}\t{r.name}\t{'x'.join(map(str, r.shape))}\t{r.count}\t{int(r.frozen)}")
    for store, n in report["per_store"].items():
        lines.append(f"{store}\t*\t-\t{n}\t-")
    lines.append(f"cell_excl_bias_gen\t{report['cell_excl_bias_gen']}")
    lines.append(f"cell_with_bias\t{report['cell_with_bias']}")
    lines.append(f"total\t{report['total']}")
    return "\n".join(lines) + "\n"
