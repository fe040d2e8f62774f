"""Corpora: vocabulary, file loaders, batching and the synthetic task suite."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD, UNK = 0, 1
MAX_LEN = 400


class CorpusFormatError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


class Vocab:
    """Token <-> index map.  Index 0 is padding, 1 is the unknown token."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = ["<pad>", "<unk>"]
        self.stoi: dict[str, int] = {"<pad>": PAD, "<unk>": UNK}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        idx = self.stoi.get(token)
        if idx is None:
            idx = self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return idx

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.stoi.get(t, UNK) for t in tokens], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()[:16]


@dataclass
class Example:
    tokens: np.ndarray
    label: int | np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if not np.isscalar(self.label):
            self.label = np.asarray(self.label, dtype=np.int64)
            if self.label.shape != self.tokens.shape:
                raise ValueError("tag sequence length differs from token length")


@dataclass
class TaskSpec:
    """One task: identity, output head, loss weight and its three splits.

    ``head`` is ``"classification"`` (``n_classes`` used) or ``"tagging"``
    (``tagset`` used).
    """

    id: str
    head: str = "classification"
    n_classes: int = 2
    tagset: list[str] = field(default_factory=list)
    lam: float = 1.0
    train: list[Example] = field(default_factory=list)
    dev: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError(f"task {self.id}: loss weight must be positive")
        if self.head not in ("classification", "tagging"):
            raise ValueError(f"task {self.id}: unknown head {self.head!r}")

    @property
    def n_outputs(self) -> int:
        return self.n_classes if self.head == "classification" else len(self.tagset)

    def split(self, name: str) -> list[Example]:
        return {"train": self.train, "dev": self.dev, "test": self.test}[name]


# ------------------------------------------------------------------ loaders


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def split_indices(n: int, seed: int, proportions=(0.7, 0.1, 0.2)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(proportions[0] * n))
    n_dev = int(round(proportions[1] * n))
    return perm[:n_train], perm[n_train : n_train + n_dev], perm[n_train + n_dev :]


def read_classification(path) -> list[tuple[int, list[str]]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            label, sep, text = line.partition("\t")
            if not sep or not label.strip().isdigit():
                raise CorpusFormatError(path, lineno, "expected 'label<TAB>text' with a non-negative integer label")
            rows.append((int(label), tokenize(text)[:MAX_LEN]))
    return rows


def load_classification(path, vocab: Vocab | None = None, grow: bool = True, seed: int = 1):
    """Read ``label<TAB>text`` lines and split them 70/10/20 with a seeded shuffle.

    Returns ``(train, dev, test, vocab)``.  With ``grow=False`` the vocabulary
    is left as is and unseen tokens map to the unknown index.
    """
    vocab = Vocab() if vocab is None else vocab
    rows = read_classification(path)
    examples = []
    for label, toks in rows:
        if grow:
            for t in toks:
                vocab.add(t)
        examples.append(Example(vocab.encode(toks), label))
    tr, dv, te = split_indices(len(examples), seed)
    pick = lambda idx: [examples[i] for i in idx]  # noqa: E731
    return pick(tr), pick(dv), pick(te), vocab


def load_classification_split(path, vocab: Vocab, grow: bool = True) -> list[Example]:
    """A pre-split file: every line becomes one example."""
    out = []
    for label, toks in read_classification(path):
        if grow:
            for t in toks:
                vocab.add(t)
        out.append(Example(vocab.encode(toks), label))
    return out


def load_conll(path) -> tuple[list[list[str]], list[list[str]], list[str]]:
    """Token-per-line file: first column word, last column tag, blank line ends a
    sentence.  Returns ``(sentences, tag_sequences, tagset)``."""
    sents, tags = [], []
    words, cur = [], []
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            cols = line.split()
            if not cols:
                if words:
                    sents.append(words)
                    tags.append(cur)
                words, cur, width = [], [], None
                continue
            if cols[0] == "-DOCSTART-":
                continue
            if len(cols) < 2 or (width is not None and len(cols) != width):
                raise CorpusFormatError(path, lineno, f"ragged columns ({len(cols)} vs {width})")
            width = len(cols)
            words.append(cols[0])
            cur.append(cols[-1])
    if words:
        sents.append(words)
        tags.append(cur)
    tagset = sorted({t for seq in tags for t in seq})
    return sents, tags, tagset


def write_conll(path, sentences: Sequence[Sequence[str]], tags: Sequence[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for words, seq in zip(sentences, tags):
            for w, t in zip(words, seq):
                fh.write(f"{w} {t}\n")
            fh.write("\n")


def conll_examples(sentences, tags, vocab: Vocab, tagset: Sequence[str], grow: bool = True) -> list[Example]:
    index = {t: i for i, t in enumerate(tagset)}
    out = []
    for words, seq in zip(sentences, tags):
        words = [w.lower() for w in words]
        if grow:
            for w in words:
                vocab.add(w)
        out.append(Example(vocab.encode(words), np.array([index[t] for t in seq])))
    return out


@dataclass
class EmbeddingLoad:
    matrix: np.ndarray
    covered: int


def load_embeddings(path, vocab: Vocab, d: int, seed: int = 0) -> EmbeddingLoad:
    """Fill a ``len(vocab) x d`` table from a text embedding file.

    Rows of tokens missing from the file are drawn uniform(-0.1, 0.1); the
    padding row is zero.
    """
    rng = np.random.default_rng(seed)
    E = rng.uniform(-0.1, 0.1, size=(len(vocab), d))
    E[PAD] = 0.0
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split(" ")
            if len(parts) <= 1:
                continue
            tok, vals = parts[0], parts[1:]
            if len(vals) != d:
                raise CorpusFormatError(path, lineno, f"vector for token {tok!r} has {len(vals)} values, expected {d}")
            idx = vocab.stoi.get(tok)
            if idx is None or idx == PAD:
                continue
            E[idx] = np.array(vals, dtype=np.float64)
            seen.add(tok)
    return EmbeddingLoad(E, len(seen))


# ----------------------------------------------------------------- batching


@dataclass
class Batch:
    ids: np.ndarray  # (B, T), padded with PAD
    lengths: np.ndarray  # (B,)
    labels: np.ndarray  # (B,) class ids or (B, T) tag ids

    def __len__(self) -> int:
        return len(self.lengths)


def make_batch(examples: Sequence[Example]) -> Batch:
    lengths = np.array([len(e.tokens) for e in examples], dtype=np.int64)
    T = int(lengths.max())
    ids = np.full((len(examples), T), PAD, dtype=np.int64)
    tagging = not np.isscalar(examples[0].label)
    labels = np.zeros((len(examples), T) if tagging else len(examples), dtype=np.int64)
    for b, e in enumerate(examples):
        ids[b, : len(e.tokens)] = e.tokens
        if tagging:
            labels[b, : len(e.tokens)] = e.label
        else:
            labels[b] = e.label
    return Batch(ids, lengths, labels)


def iterate_batches(examples: Sequence[Example], batch_size: int, rng: np.random.Generator | None = None) -> Iterator[Batch]:
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    for i in range(0, len(order), batch_size):
        yield make_batch([examples[j] for j in order[i : i + batch_size]])


# ------------------------------------------------------------ synthetic suite

SYNTH_VOCAB = [f"w{i:02d}" for i in range(50)]
NEGATORS = ("w00", "w01")
NEG_SPAN = 1  # a negator flips the trigger right after it
SYNTH_SIZES = (600, 100, 200)


def synth_triggers(k: int) -> tuple[tuple[str, str], tuple[str, str]]:
    """Positive and negative trigger words of synthetic task ``k``."""
    base = 2 + 4 * k
    if base + 3 >= 50:
        raise ValueError("the synthetic vocabulary supports at most 12 tasks")
    pos = (SYNTH_VOCAB[base], SYNTH_VOCAB[base + 1])
    neg = (SYNTH_VOCAB[base + 2], SYNTH_VOCAB[base + 3])
    return pos, neg


def synth_vocab() -> Vocab:
    return Vocab(SYNTH_VOCAB)


def _synth_sentence(rng, k: int, label: int, K: int, filler: list[str]) -> tuple[list[str], int]:
    """One sequence for task ``k`` with the requested label.

    A single trigger word of task ``k`` carries the polarity; a negator
    directly before it flips that polarity.  Negators elsewhere and
    trigger words of other tasks are distractors.  Returns the tokens and the
    trigger position.
    """
    L = int(rng.integers(8, 16))
    toks = list(rng.choice(filler, size=L))
    negated = bool(rng.random() < 0.5)
    polarity = label ^ int(negated)
    pos, neg = synth_triggers(k)
    trig = str(rng.choice(pos if polarity == 1 else neg))
    p = int(rng.integers(2, L))
    toks[p] = trig
    if negated:
        toks[p - int(rng.integers(1, NEG_SPAN + 1))] = str(rng.choice(NEGATORS))
    free = [i for i in range(L) if i < p - NEG_SPAN or i > p]
    if free and rng.random() < 0.5:
        toks[int(rng.choice(free))] = str(rng.choice(NEGATORS))
    others = [j for j in range(K) if j != k]
    free = [i for i in range(L) if i != p and toks[i] not in NEGATORS]
    if others and free and rng.random() < 0.5:
        j = int(rng.choice(others))
        words = synth_triggers(j)[0] + synth_triggers(j)[1]
        toks[int(rng.choice(free))] = str(rng.choice(words))
    return toks, p


def synth_label(tokens: Sequence[str], k: int) -> int:
    """Independent re-derivation of a synthetic label from the tokens."""
    pos, neg = synth_triggers(k)
    for p, t in enumerate(tokens):
        if t in pos or t in neg:
            polarity = int(t in pos)
            negated = any(tokens[q] in NEGATORS for q in range(max(0, p - NEG_SPAN), p))
            return polarity ^ int(negated)
    raise ValueError("no trigger of this task in the sequence")


def synth_tasks(K: int, seed: int, sizes: tuple[int, int, int] = SYNTH_SIZES) -> tuple[list[TaskSpec], Vocab]:
    """``K`` binary classification tasks over one shared 50-word vocabulary.

    All tasks share the same grammar (trigger word, optionally negated by the
    word before it) but use different trigger words.  Each split holds
    exactly balanced labels.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    vocab = synth_vocab()
    rng = np.random.default_rng(seed)
    used = {w for k in range(K) for pair in synth_triggers(k) for w in pair}
    filler = [w for w in SYNTH_VOCAB if w not in used and w not in NEGATORS]
    tasks = []
    for k in range(K):
        splits = []
        for n in sizes:
            labels = np.arange(n) % 2
            rng.shuffle(labels)
            split = []
            for y in labels:
                toks, _ = _synth_sentence(rng, k, int(y), K, filler)
                split.append(Example(vocab.encode(toks), int(y)))
            splits.append(split)
        tasks.append(TaskSpec(f"task{k}", "classification", 2, [], 1.0, *splits))
    return tasks, vocab


def write_classification(path, examples: Sequence[Example], vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in examples:
            fh.write(f"{e.label}\t{' '.join(vocab.decode(e.tokens))}\n")


def corpus_paths(root, task_id: str) -> dict[str, Path]:
    root = Path(root)
    return {s: root / f"{task_id}.{s}.tsv" for s in ("train", "dev", "test")}
