"""Straight-line reference implementations used as test oracles.

Nothing here touches the tape; loops run element by element over plain
Python floats so they share no code path with the library.
"""

import itertools
import math

import numpy as np


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def lstm_loop(W, b, x, h_prev, c_prev):
    """Element-wise LSTM step; gate rows stacked (g, o, i, f), input [x; h]."""
    W = np.asarray(W)
    n = len(h_prev)
    u = list(x) + list(h_prev)
    pre = [sum(W[r][j] * u[j] for j in range(len(u))) + b[r] for r in range(4 * n)]
    h_new, c_new = [], []
    for k in range(n):
        g = math.tanh(pre[k])
        o = sig(pre[n + k])
        i = sig(pre[2 * n + k])
        f = sig(pre[3 * n + k])
        c = g * i + c_prev[k] * f
        c_new.append(c)
        h_new.append(o * math.tanh(c))
    return np.array(h_new), np.array(c_new)


def dynamic_weights_loop(P, Q, B, z):
    """W[k-block][r][j] = sum_s P_k[r][s] z[s] Q_k[s][j]; b = B_k z."""
    h, rank = P["g"].shape
    cols = Q["g"].shape[1]
    W = np.zeros((4 * h, cols))
    b = np.zeros(4 * h)
    for blk, k in enumerate("goif"):
        for r in range(h):
            for j in range(cols):
                W[blk * h + r, j] = sum(P[k][r, s] * z[s] * Q[k][s, j] for s in range(rank))
            b[blk * h + r] = sum(B[k][r, s] * z[s] for s in range(rank))
    return W, b


def meta_loop(W_m, b_m, W_z, x, mh, mc, bh):
    """Meta cell: LSTM over [x; meta_h; basic_h] in size m, then z = W_z h."""
    u = list(x) + list(mh) + list(bh)
    m = len(mh)
    pre = [sum(W_m[r][j] * u[j] for j in range(len(u))) + b_m[r] for r in range(4 * m)]
    hs, cs = [], []
    for k in range(m):
        g = math.tanh(pre[k])
        o = sig(pre[m + k])
        i = sig(pre[2 * m + k])
        f = sig(pre[3 * m + k])
        cc = g * i + mc[k] * f
        cs.append(cc)
        hs.append(o * math.tanh(cc))
    z = [sum(W_z[a][s] * hs[s] for s in range(m)) for a in range(len(W_z))]
    return np.array(hs), np.array(cs), np.array(z)


def crf_paths(E, trans, start, stop):
    """Yield (path, score) for every tag path."""
    T, n = E.shape
    for path in itertools.product(range(n), repeat=T):
        s = start[path[0]] + stop[path[-1]]
        s += sum(E[t, path[t]] for t in range(T))
        s += sum(trans[path[t], path[t + 1]] for t in range(T - 1))
        yield path, s


def crf_brute_logz(E, trans, start, stop):
    scores = [s for _, s in crf_paths(E, trans, start, stop)]
    mx = max(scores)
    return mx + math.log(sum(math.exp(s - mx) for s in scores))


def crf_brute_argmax(E, trans, start, stop):
    best, best_s = None, -math.inf
    for path, s in crf_paths(E, trans, start, stop):
        if s > best_s:
            best, best_s = path, s
    return list(best), best_s
