"""``metalstm`` command line: train, eval, transfer, diagnose, synth.

Exit status is 0 when every requested artifact was written, 1 for input,
config or checkpoint errors and 2 for usage errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import StructuralError, grad_check
from .checkpoint import (
    CheckpointError,
    check_dims,
    load_checkpoint,
    load_model_into,
    model_header,
    save_checkpoint,
    save_meta,
    tensor_digest,
)
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import (
    CorpusFormatError,
    Example,
    TaskSpec,
    Vocab,
    conll_examples,
    corpus_paths,
    load_classification,
    load_classification_split,
    load_conll,
    load_embeddings,
    make_batch,
    synth_tasks,
    tokenize,
    write_classification,
)
from .diagnostics import evaluate, format_param_report, format_report, format_trace, param_report, trace_sequence
from .multitask import ARCHS, ModelConfig, build_model
from .training import fine_tune, joint_train, transfer_train

log = logging.getLogger("metalstm")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tasks(cfg: RunConfig) -> tuple[list[TaskSpec], Vocab, np.ndarray | None]:
    """Read every declared corpus into one shared vocabulary."""
    vocab = Vocab()
    tasks = []
    for decl in cfg.tasks:
        if decl.head == "tagging":
            loaded = [load_conll(p) for p in (decl.train, decl.dev, decl.test)]
            tagset = sorted({t for _, tags, ts in loaded for t in ts})
            splits = [conll_examples(s, t, vocab, tagset) for s, t, _ in loaded]
            tasks.append(TaskSpec(decl.name, "tagging", tagset=tagset, lam=decl.lam, train=splits[0], dev=splits[1], test=splits[2]))
            continue
        if decl.data is not None:
            train, dev, test, _ = load_classification(decl.data, vocab, grow=True, seed=cfg.seed)
        else:
            train, dev, test = (load_classification_split(p, vocab) for p in (decl.train, decl.dev, decl.test))
        labels = [e.label for e in train + dev + test]
        n_classes = decl.n_classes or (max(labels) + 1 if labels else 2)
        if labels and max(labels) >= n_classes:
            raise ConfigError(f"task {decl.name}: label {max(labels)} but n_classes = {n_classes}")
        tasks.append(TaskSpec(decl.name, "classification", n_classes=max(n_classes, 2), lam=decl.lam, train=train, dev=dev, test=test))
    E = None
    if cfg.embeddings is not None:
        load = load_embeddings(cfg.embeddings, vocab, cfg.d, seed=cfg.seed)
        log.info("embeddings cover %d of %d vocabulary entries", load.covered, len(vocab))
        E = load.matrix
    return tasks, vocab, E


def snapshot_arrays(snap: dict[str, dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    return {f"{label}/{name}": v for label, entries in snap.items() for name, v in entries.items()}


def build_from_config(cfg: RunConfig):
    tasks, vocab, E = load_tasks(cfg)
    model = build_model(cfg.arch, tasks, cfg.model_config(len(vocab), E))
    return model, tasks, vocab


def restore_model(cfg: RunConfig, checkpoint: Path):
    model, tasks, vocab = build_from_config(cfg)
    header = load_model_into(checkpoint, model)
    if header.get("arch") != cfg.arch:
        raise CheckpointError(f"checkpoint architecture {header.get('arch')!r} differs from config {cfg.arch!r}")
    if header.get("vocab_hash") and header["vocab_hash"] != vocab.digest():
        raise CheckpointError("checkpoint vocabulary differs from the one built from this config's corpora")
    return model, tasks, vocab


def eval_lines(model, split: str) -> dict[str, float]:
    report = {}
    for tid in model.tasks:
        for k, v in evaluate(model, tid, split).items():
            report[f"{tid}.{k}"] = v
    return report


# ----------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig) -> None:
    out = cfg.out
    model, tasks, vocab = build_from_config(cfg)
    tcfg = cfg.train_config()
    log.info("training %s on %d task(s), seed %d", cfg.arch, len(tasks), cfg.seed)
    tlog = joint_train(model, tcfg)
    records = list(tlog.records)
    if cfg.fine_tune:
        for t in tasks:
            ft = fine_tune(model, t.id, tcfg)
            for r in ft.records:
                r.task = f"{t.id}:finetune"
            records += ft.records
    header = model_header(model, vocab.digest())
    final = tlog.final if tlog.final is not None else model.snapshot()
    save_checkpoint(out / "final.ckpt", snapshot_arrays(final), header)
    save_checkpoint(out / "best.ckpt", snapshot_arrays(model.snapshot()), dict(header, best_epoch=tlog.best_epoch))
    if cfg.arch == "meta-mtl" or (cfg.arch == "single-meta" and len(tasks) == 1):
        save_meta(out / "meta.ckpt", model, vocab.digest())
    tlog.records = records
    write_atomic(out / "loss_log.tsv", tlog.to_tsv())
    ids = [t.id for t in tasks]
    curves = ["epoch\t" + "\t".join(ids)]
    for e in range(1, cfg.max_epochs + 1):
        row = {r.task: r.dev_loss for r in tlog.records if r.epoch == e}
        curves.append("\t".join([str(e)] + [f"{row[i]:.17g}" for i in ids]))
    write_atomic(out / "dev_curves.tsv", "\n".join(curves) + "\n")
    report = {"best_epoch": tlog.best_epoch, "best_mean_dev_loss": tlog.best_dev, **eval_lines(model, "test")}
    write_atomic(out / "eval_report.tsv", format_report(report))
    write_atomic(out / "vocab.txt", "\n".join(vocab.itos) + "\n")
    counts = Counter(tlog.sampled)
    run_log = [f"seed\t{cfg.seed}", f"vocab_hash\t{vocab.digest()}", f"steps\t{len(tlog.sampled)}"]
    run_log += [f"sampled.{t}\t{counts.get(t, 0)}" for t in ids]
    write_atomic(out / "run.log", "\n".join(run_log) + "\n\n" + dump_config(cfg))
    sys.stdout.write(format_report(report))


def cmd_eval(cfg: RunConfig, checkpoint: Path, split: str) -> None:
    model, _, _ = restore_model(cfg, checkpoint)
    report = eval_lines(model, split)
    write_atomic(cfg.out / f"eval_{split}.tsv", format_report(report))
    sys.stdout.write(format_report(report))


def read_meta(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    header, arrays = load_checkpoint(path)
    meta = {}
    for key, v in arrays.items():
        name = key.split("/", 1)[1] if "/" in key else key
        if name.startswith("meta."):
            meta[name] = v
    if not meta:
        raise CheckpointError(f"{path}: no Meta-LSTM tensors in checkpoint")
    return header, meta


def cmd_transfer(cfg: RunConfig, meta_path: Path) -> None:
    header, meta = read_meta(meta_path)
    check_dims(header, cfg)
    tasks, vocab, E = load_tasks(cfg)
    tcfg = cfg.train_config()
    loaded_digest = tensor_digest(meta)
    summary = []
    for task in tasks:
        model, tlog = transfer_train(
            {k: v.copy() for k, v in meta.items()}, task, cfg.model_config(len(vocab), E), tcfg, cfg.freeze_embeddings
        )
        names = [n for n in model.shared if n.startswith("meta.")]
        after = tensor_digest({n: model.shared[n].value for n in names})
        before = tensor_digest({n: meta[n] for n in names})
        report = {
            "task": task.id,
            "meta_checkpoint": str(meta_path),
            "meta_hash_loaded": before,
            "meta_hash_after": after,
            "meta_unchanged": int(before == after),
            "best_epoch": tlog.best_epoch,
        }
        report.update({f"dev.{k}": v for k, v in evaluate(model, task.id, "dev").items()})
        report.update({f"test.{k}": v for k, v in evaluate(model, task.id, "test").items()})
        arrays = snapshot_arrays(model.snapshot())
        save_checkpoint(cfg.out / f"transfer_{task.id}.ckpt", arrays, model_header(model, vocab.digest()))
        write_atomic(cfg.out / f"transfer_{task.id}_loss.tsv", tlog.to_tsv())
        write_atomic(cfg.out / f"transfer_{task.id}.tsv", format_report(report))
        summary.append(report)
        if before != after:
            raise StructuralError(f"task {task.id}: frozen Meta-LSTM tensors changed during transfer")
    log.info("meta checkpoint digest %s", loaded_digest)
    for r in summary:
        sys.stdout.write(f"{r['task']}\tmeta_unchanged={r['meta_unchanged']}\t" + "\t".join(
            f"{k}={v}" for k, v in r.items() if k.startswith("test.")) + "\n")


def tiny_grad_check(cfg: RunConfig, task: TaskSpec, vocab_size: int, token_lines: list[np.ndarray]) -> dict:
    """Central-difference check on a fresh d=h=6, m=z=3 replica of the
    configured architecture, fed with the diagnose input."""
    rng = np.random.default_rng(cfg.seed)
    rows = [ids[:12] for ids in token_lines[:4]]
    if task.head == "tagging":
        exs = [Example(ids, rng.integers(0, len(task.tagset), size=len(ids))) for ids in rows]
    else:
        exs = [Example(ids, int(rng.integers(0, task.n_classes))) for ids in rows]
    replica = TaskSpec(task.id, task.head, task.n_classes, list(task.tagset), task.lam, train=exs)
    model = build_model(cfg.arch, [replica], ModelConfig(vocab_size, d=6, h=6, m=3, z=3, seed=cfg.seed))
    # parameters well away from zero so that differences resolve in float64
    for store in model.all_stores():
        for name, t in store.items():
            store.set_value(name, rng.normal(0.0, 0.5, t.shape))
    batch = make_batch(exs)
    err = grad_check(lambda: model.loss(task.id, batch), model.stores_for(task.id), eps=1e-5, sample=5, seed=cfg.seed)
    return {"arch": cfg.arch, "d": 6, "h": 6, "m": 3, "z": 3, "max_rel_error": err, "pass": int(err < 1e-4)}


def cmd_diagnose(cfg: RunConfig, checkpoint: Path, input_path: Path, task_id: str | None) -> None:
    if not input_path.is_file():
        raise UsageError(f"input file not found: {input_path}")
    lines = [tokenize(line) for line in input_path.read_text(encoding="utf-8").splitlines()]
    lines = [toks for toks in lines if toks]
    if not lines:
        raise UsageError(f"input file {input_path} has no tokens")
    model, tasks, vocab = restore_model(cfg, checkpoint)
    tid = task_id or tasks[0].id
    if tid not in model.tasks:
        raise UsageError(f"unknown task {tid!r}; config declares {', '.join(model.tasks)}")
    if model.arch not in ("meta-mtl", "single-meta") or model.tasks[tid].head != "classification":
        raise UsageError("weight-change traces need a Meta-LSTM classifier (arch meta-mtl or single-meta)")
    ids = [vocab.encode(toks) for toks in lines]
    blocks = [format_trace(trace_sequence(model, tid, seq, vocab)) for seq in ids]
    header, rest = blocks[0].split("\n", 1)
    body = [rest] + [b.split("\n", 1)[1] for b in blocks[1:]]
    write_atomic(cfg.out / "trace.tsv", header + "\n" + "\n".join(body))
    write_atomic(cfg.out / "param_report.tsv", format_param_report(param_report(model)))
    gc = tiny_grad_check(cfg, model.tasks[tid], len(vocab), ids)
    write_atomic(cfg.out / "grad_check.tsv", format_report(gc))
    sys.stdout.write(format_report(gc))


def cmd_synth(k: int, seed: int, out: Path, arch: str) -> None:
    tasks, vocab = synth_tasks(k, seed)
    lines = [f"arch = {arch}", "d = 16", "h = 16", "m = 8", "z = 8", "max_epochs = 10", f"seed = {seed}", "out = run"]
    for t in tasks:
        paths = corpus_paths(out, t.id)
        for split, p in paths.items():
            p.parent.mkdir(parents=True, exist_ok=True)
            write_classification(p, t.split(split), vocab)
        lines += ["", f"[task:{t.id}]"] + [f"{s} = {p.name}" for s, p in paths.items()]
    write_atomic(out / "synth.cfg", "\n".join(lines) + "\n")
    sys.stdout.write(f"wrote {k} synthetic task(s) and {out / 'synth.cfg'}\n")


# -------------------------------------------------------------------- main


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--arch", choices=ARCHS, help="override the architecture")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="metalstm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="joint multi-task training")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", type=Path, help="defaults to OUT/best.ckpt")
    ev.add_argument("--split", choices=("train", "dev", "test"), default="test")
    tr = sub.add_parser("transfer", parents=[common], help="train new tasks under a frozen Meta-LSTM")
    tr.add_argument("--meta", type=Path, required=True, help="meta-only or full checkpoint")
    dg = sub.add_parser("diagnose", parents=[common], help="weight-change trace, parameter report, gradient check")
    dg.add_argument("--checkpoint", type=Path, help="defaults to OUT/best.ckpt")
    dg.add_argument("--input", type=Path, required=True, help="one whitespace-tokenized sequence per line")
    dg.add_argument("--task", help="task to trace (default: first declared)")
    sy = sub.add_parser("synth", parents=[common], help="write the synthetic task suite and a config for it")
    sy.add_argument("--tasks", type=_positive_int, default=4)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = os.environ.get("METALSTM_THREADS")
    if threads is not None and not (threads.isdigit() and int(threads) > 0):
        parser.error(f"METALSTM_THREADS must be a positive integer, got {threads!r}")
    try:
        if args.command == "synth":
            if args.out is None:
                raise UsageError("synth needs --out")
            cmd_synth(args.tasks, 1 if args.seed is None else args.seed, args.out, args.arch or "meta-mtl")
            return 0
        if args.config is None:
            raise UsageError(f"{args.command} needs --config")
        cfg = load_config(args.config, {"seed": args.seed, "out": args.out, "arch": args.arch})
        if args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint or cfg.out / "best.ckpt", args.split)
        elif args.command == "transfer":
            cmd_transfer(cfg, args.meta)
        elif args.command == "diagnose":
            cmd_diagnose(cfg, args.checkpoint or cfg.out / "best.ckpt", args.input, args.task)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"metalstm: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, CorpusFormatError, StructuralError, FileNotFoundError) as exc:
        print(f"metalstm: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
