"""Task output layers: softmax classifier and linear-chain CRF.

A tag path ``y_1..y_T`` scores ``start[y_1] + sum_t e_t[y_t] +
sum_t trans[y_t, y_{t+1}] + stop[y_T]`` where ``e_t`` are the per-position
emission scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    DimensionError,
    EmptyInputError,
    ParamStore,
    StructuralError,
    Tensor,
    _emit,
    as_tensor,
    linear,
    softmax,
)


@dataclass
class ClassifierParams:
    W: Tensor  # (n_classes, rep_dim)
    b: Tensor  # (n_classes,)


@dataclass
class CRFParams:
    emit: Tensor  # (n_tags, rep_dim)
    trans: Tensor  # (n_tags, n_tags); trans[i, j] scores i -> j
    start: Tensor  # (n_tags,)
    stop: Tensor  # (n_tags,)

    @property
    def n_tags(self) -> int:
        return self.trans.shape[0]


def init_classifier(store: ParamStore, prefix: str, rep_dim: int, n_classes: int, rng: np.random.Generator) -> ClassifierParams:
    r = np.sqrt(6.0 / (rep_dim + n_classes))
    return ClassifierParams(
        store.add(f"{prefix}.W", rng.uniform(-r, r, size=(n_classes, rep_dim))),
        store.add(f"{prefix}.b", np.zeros(n_classes)),
    )


def init_crf(store: ParamStore, prefix: str, rep_dim: int, n_tags: int, rng: np.random.Generator) -> CRFParams:
    r = np.sqrt(6.0 / (rep_dim + n_tags))
    return CRFParams(
        store.add(f"{prefix}.emit", rng.uniform(-r, r, size=(n_tags, rep_dim))),
        store.add(f"{prefix}.trans", np.zeros((n_tags, n_tags))),
        store.add(f"{prefix}.start", np.zeros(n_tags)),
        store.add(f"{prefix}.stop", np.zeros(n_tags)),
    )


def classifier_from_store(store: ParamStore, prefix: str) -> ClassifierParams:
    return ClassifierParams(store[f"{prefix}.W"], store[f"{prefix}.b"])


def crf_from_store(store: ParamStore, prefix: str) -> CRFParams:
    return CRFParams(*(store[f"{prefix}.{k}"] for k in ("emit", "trans", "start", "stop")))


def logits(h_T, p: ClassifierParams) -> Tensor:
    h_T = as_tensor(h_T)
    if h_T.shape[-1] != p.W.shape[1]:
        raise DimensionError(f"classifier expects representation of size {p.W.shape[1]}, got {h_T.shape[-1]}")
    return linear(h_T, p.W) + p.b


def classify(h_T, p: ClassifierParams) -> Tensor:
    """Class probabilities ``softmax(W h_T + b)``."""
    return softmax(logits(h_T, p))


# ---------------------------------------------------------------- CRF (numpy)


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    mx = a.max(axis=axis, keepdims=True)
    return np.squeeze(mx, axis=axis) + np.log(np.exp(a - mx).sum(axis=axis))


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _crf_arrays(emissions, p: CRFParams):
    E = np.array([_value(e) for e in emissions], dtype=np.float64) if not isinstance(emissions, np.ndarray) else emissions
    if E.ndim != 2 or E.shape[0] == 0:
        raise EmptyInputError("CRF needs a non-empty emission sequence")
    trans, start, stop = _value(p.trans), _value(p.start), _value(p.stop)
    if trans.shape != (E.shape[1], E.shape[1]):
        raise DimensionError(f"emissions have {E.shape[1]} tags but trans is {trans.shape}")
    return E, trans, start, stop


def _forward(E, trans, start) -> np.ndarray:
    alpha = np.empty_like(E)
    alpha[0] = start + E[0]
    for t in range(1, len(E)):
        alpha[t] = _lse(alpha[t - 1][:, None] + trans, axis=0) + E[t]
    return alpha


def _backward(E, trans, stop) -> np.ndarray:
    beta = np.empty_like(E)
    beta[-1] = stop
    for t in range(len(E) - 2, -1, -1):
        beta[t] = _lse(trans + (E[t + 1] + beta[t + 1])[None, :], axis=1)
    return beta


def crf_log_partition(emissions, p: CRFParams) -> float:
    """log of the summed exp-scores of every tag path (forward algorithm)."""
    E, trans, start, stop = _crf_arrays(emissions, p)
    alpha = _forward(E, trans, start)
    return float(_lse(alpha[-1] + stop, axis=0))


def path_score(emissions, p: CRFParams, tags) -> float:
    E, trans, start, stop = _crf_arrays(emissions, p)
    tags = _check_tags(tags, E)
    score = start[tags[0]] + stop[tags[-1]] + E[np.arange(len(tags)), tags].sum()
    score += trans[tags[:-1], tags[1:]].sum()
    return float(score)


def _check_tags(tags, E) -> np.ndarray:
    tags = np.asarray(tags, dtype=np.int64)
    if tags.shape != (E.shape[0],):
        raise StructuralError(f"{len(tags)} tags for {E.shape[0]} positions")
    if tags.min() < 0 or tags.max() >= E.shape[1]:
        raise StructuralError(f"tag index out of range [0, {E.shape[1]})")
    return tags


def crf_nll(emissions, p: CRFParams, tags) -> float:
    return crf_log_partition(emissions, p) - path_score(emissions, p, tags)


def crf_viterbi(emissions, p: CRFParams) -> tuple[list[int], float]:
    """Best tag path and its score.  Ties go to the lower tag index."""
    E, trans, start, stop = _crf_arrays(emissions, p)
    T, n = E.shape
    delta = start + E[0]
    back = np.zeros((T, n), dtype=np.int64)
    for t in range(1, T):
        cand = delta[:, None] + trans  # (prev, cur)
        back[t] = np.argmax(cand, axis=0)  # argmax returns the first maximum
        delta = cand[back[t], np.arange(n)] + E[t]
    final = delta + stop
    best = int(np.argmax(final))
    path = [best]
    for t in range(T - 1, 0, -1):
        path.append(int(back[t, path[-1]]))
    path.reverse()
    return path, float(final[best])


def crf_marginals(emissions, p: CRFParams):
    """Node marginals (T, n), summed edge marginals (n, n), and log Z."""
    E, trans, start, stop = _crf_arrays(emissions, p)
    alpha = _forward(E, trans, start)
    beta = _backward(E, trans, stop)
    logz = _lse(alpha[-1] + stop, axis=0)
    node = np.exp(alpha + beta - logz)
    edge = np.zeros_like(trans)
    for t in range(len(E) - 1):
        edge += np.exp(alpha[t][:, None] + trans + (E[t + 1] + beta[t + 1])[None, :] - logz)
    return node, edge, float(logz)


# -------------------------------------------------------- CRF (differentiable)


def crf_nll_batch(emissions, p: CRFParams, tags, lengths) -> Tensor:
    """Per-row CRF negative log-likelihood over a padded batch.

    ``emissions`` is a tensor ``(batch, T, n_tags)``; row ``b`` uses its first
    ``lengths[b]`` positions.  Returns a ``(batch,)`` tensor.
    """
    emissions = as_tensor(emissions)
    tags = np.asarray(tags, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    B = emissions.shape[0]
    trans, start, stop = _value(p.trans), _value(p.start), _value(p.stop)
    nll = np.empty(B)
    cache = []
    for b in range(B):
        L = int(lengths[b])
        E = emissions.value[b, :L]
        y = _check_tags(tags[b, :L], E)
        node, edge, logz = crf_marginals(E, p)
        gold = start[y[0]] + stop[y[-1]] + E[np.arange(L), y].sum() + trans[y[:-1], y[1:]].sum()
        nll[b] = logz - gold
        cache.append((L, y, node, edge))

    def grad_fn(g):
        gE = np.zeros_like(emissions.value)
        gT = np.zeros_like(trans)
        gS = np.zeros_like(start)
        gP = np.zeros_like(stop)
        for b, (L, y, node, edge) in enumerate(cache):
            w = g[b]
            gold_node = np.zeros_like(node)
            gold_node[np.arange(L), y] = 1.0
            gE[b, :L] += w * (node - gold_node)
            gold_edge = np.zeros_like(edge)
            np.add.at(gold_edge, (y[:-1], y[1:]), 1.0)
            gT += w * (edge - gold_edge)
            gS += w * node[0]
            gS[y[0]] -= w
            gP += w * node[L - 1]
            gP[y[-1]] -= w
        return gE, gT, gS, gP

    return _emit("crf_nll", nll, (emissions, p.trans, p.start, p.stop), grad_fn)
