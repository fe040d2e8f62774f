"""Binary checkpoint container.

Layout::

    b"MLSTMCKP"                 8-byte magic
    uint32 little-endian        format version (1)
    uint64 little-endian        header length in bytes
    header                      UTF-8 JSON
    payload                     concatenated little-endian float64 arrays

The header records the model dimensions, architecture, vocabulary hash, one
``{name, shape, offset, nbytes}`` entry per tensor and the SHA-256 of the
payload.  Files are written to a temporary name and renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"MLSTMCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], header: dict) -> None:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, value in arrays.items():
        buf = np.ascontiguousarray(value, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(value)), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    head = dict(header, entries=entries, payload_sha256=hashlib.sha256(payload).hexdigest())
    head_bytes = json.dumps(head, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", VERSION, len(head_bytes)))
            fh.write(head_bytes)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack("<IQ", raw[8:20])
        header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    payload = raw[20 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupted")
    arrays = {}
    for e in header.pop("entries"):
        buf = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(e["shape"])
    header.pop("payload_sha256")
    return header, arrays


def tensor_digest(arrays: dict[str, np.ndarray]) -> str:
    """Order-independent SHA-256 over names and exact float64 bytes."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    return h.hexdigest()


def model_header(model, vocab_hash: str = "", kind: str = "full") -> dict:
    cfg = model.cfg
    return {
        "kind": kind,
        "arch": model.arch,
        "d": cfg.d,
        "h": cfg.h,
        "m": cfg.m,
        "z": cfg.z,
        "vocab_size": cfg.vocab_size,
        "vocab_hash": vocab_hash,
        "tasks": list(model.tasks),
    }


def save_model(path, model, vocab_hash: str = "") -> None:
    arrays = {}
    for store in model.all_stores():
        for name, t in store.items():
            arrays[f"{store.label}/{name}"] = t.value
    save_checkpoint(path, arrays, model_header(model, vocab_hash))


def load_model_into(path, model) -> dict:
    header, arrays = load_checkpoint(path)
    check_dims(header, model.cfg)
    for store in model.all_stores():
        for name in store:
            key = f"{store.label}/{name}"
            if key not in arrays:
                raise CheckpointError(f"{path}: missing tensor {key}")
            store.set_value(name, arrays[key])
    return header


def save_meta(path, model, vocab_hash: str = "") -> None:
    """Meta-only checkpoint: exactly the Meta-LSTM tensors."""
    store = model.meta_store()
    arrays = {n: store[n].value for n in store if n.startswith("meta.")}
    save_checkpoint(path, arrays, model_header(model, vocab_hash, kind="meta"))


def check_dims(header: dict, cfg) -> None:
    bad = [(k, getattr(cfg, k), header.get(k)) for k in ("d", "h", "m", "z") if header.get(k) != getattr(cfg, k)]
    if bad:
        detail = ", ".join(f"{k}: expected {want}, found {got}" for k, want, got in bad)
        raise CheckpointError(f"checkpoint dimensions do not match config ({detail})")
