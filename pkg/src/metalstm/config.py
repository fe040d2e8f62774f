"""Run configuration files.

A config is ``key = value`` lines.  Keys before the first section describe
the run; each ``[task:NAME]`` section declares one task::

    arch = meta-mtl
    d = 16
    h = 16
    max_epochs = 10

    [task:books]
    data = books.tsv          ; one file, split 70/10/20 with the run seed

    [task:chunk]
    head = tagging
    train = chunk.train.conll
    dev = chunk.dev.conll
    test = chunk.test.conll

Relative paths resolve against the config file's directory.  Command-line
overrides are applied before validation, and validation touches no output.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .multitask import ARCHS, ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


RUN_KEYS = {
    "arch": str,
    "d": int,
    "h": int,
    "m": int,
    "z": int,
    "share_embeddings": bool,
    "embeddings": Path,
    "learning_rate": float,
    "l2_reg": float,
    "batch_size": int,
    "max_epochs": int,
    "seed": int,
    "adagrad_eps": float,
    "clip_norm": float,
    "fine_tune": bool,
    "finetune_scale": float,
    "finetune_epochs": int,
    "patience": int,
    "freeze_embeddings": bool,
    "out": Path,
}

TASK_KEYS = {"head": str, "data": Path, "train": Path, "dev": Path, "test": Path, "lam": float, "n_classes": int}


@dataclass
class TaskDecl:
    name: str
    head: str = "classification"
    data: Path | None = None
    train: Path | None = None
    dev: Path | None = None
    test: Path | None = None
    lam: float = 1.0
    n_classes: int | None = None

    def paths(self) -> list[Path]:
        return [p for p in (self.data, self.train, self.dev, self.test) if p is not None]


@dataclass
class RunConfig:
    # reference hyper-parameters; synthetic runs override the sizes
    arch: str = "meta-mtl"
    d: int = 200
    h: int = 100
    m: int = 40
    z: int = 40
    share_embeddings: bool = True
    embeddings: Path | None = None
    learning_rate: float = 0.1
    l2_reg: float = 1e-5
    batch_size: int = 16
    max_epochs: int = 20
    seed: int = 1
    adagrad_eps: float = 1e-8
    clip_norm: float = 5.0
    fine_tune: bool = False
    finetune_scale: float = 0.1
    finetune_epochs: int = 10
    patience: int = 5
    freeze_embeddings: bool = False
    out: Path = Path("run")
    tasks: list[TaskDecl] = field(default_factory=list)
    source: Path | None = None

    def model_config(self, vocab_size: int, embeddings=None) -> ModelConfig:
        return ModelConfig(vocab_size, self.d, self.h, self.m, self.z, self.share_embeddings, self.seed, embeddings)

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: getattr(self, k) for k in names})

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {', '.join(ARCHS)}; got {self.arch!r}")
        for k in ("d", "h", "m", "z", "batch_size"):
            if getattr(self, k) <= 0:
                raise ConfigError(f"{k} must be positive, got {getattr(self, k)}")
        if self.max_epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not self.tasks:
            raise ConfigError("no [task:NAME] sections declared")
        missing = [p for p in self._all_paths() if not p.exists()]
        if missing:
            raise ConfigError("missing input paths: " + ", ".join(str(p) for p in missing))
        for t in self.tasks:
            if t.head not in ("classification", "tagging"):
                raise ConfigError(f"task {t.name}: head must be classification or tagging")
            if t.lam <= 0:
                raise ConfigError(f"task {t.name}: lam must be positive")
            split = t.train is not None
            if split == (t.data is not None):
                raise ConfigError(f"task {t.name}: give either 'data' or 'train' (+ 'dev', 'test')")
            if split and (t.dev is None or t.test is None):
                raise ConfigError(f"task {t.name}: 'train' needs 'dev' and 'test'")
            if t.head == "tagging" and not split:
                raise ConfigError(f"task {t.name}: tagging tasks need pre-split train/dev/test files")

    def _all_paths(self) -> list[Path]:
        out = [p for t in self.tasks for p in t.paths()]
        if self.embeddings is not None:
            out.append(self.embeddings)
        return out


def _convert(kind, raw: str, key: str, base: Path):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if kind is Path:
            p = Path(raw).expanduser()
            return (p if p.is_absolute() else base / p).resolve()
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None


def parse_config(text: str, base: Path = Path(".")) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        if section == "run":
            for key, raw in parser.items("run"):
                if key not in RUN_KEYS:
                    raise ConfigError(f"unknown key {key!r}")
                setattr(cfg, key, _convert(RUN_KEYS[key], raw, key, base))
        elif section.startswith("task:") and section[5:].strip():
            decl = TaskDecl(section[5:].strip())
            for key, raw in parser.items(section):
                if key not in TASK_KEYS:
                    raise ConfigError(f"[{section}]: unknown key {key!r}")
                setattr(decl, key, _convert(TASK_KEYS[key], raw, key, base))
            cfg.tasks.append(decl)
        else:
            raise ConfigError(f"unknown section [{section}]; expected [task:NAME]")
    return cfg


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cfg = parse_config(path.read_text(encoding="utf-8"), path.parent)
    cfg.source = path
    for k, v in (overrides or {}).items():
        if v is not None:
            setattr(cfg, k, v)
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Serialize back to the file format (paths written absolute)."""
    lines = []
    for k in RUN_KEYS:
        v = getattr(cfg, k)
        if v is None:
            continue
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    for t in cfg.tasks:
        lines += ["", f"[task:{t.name}]", f"head = {t.head}", f"lam = {t.lam}"]
        for k in ("data", "train", "dev", "test", "n_classes"):
            v = getattr(t, k)
            if v is not None:
                lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
