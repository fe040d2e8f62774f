#!/usr/bin/env python3
"""The linear-chain CRF on its own: log-partition, Viterbi and marginals on a
tiny random problem, checked against brute-force enumeration."""

import itertools

import numpy as np

from metalstm.autodiff import ParamStore
from metalstm.heads import crf_log_partition, crf_marginals, crf_viterbi, init_crf, path_score

rng = np.random.default_rng(0)
T, n = 4, 3
store = ParamStore()
p = init_crf(store, "crf", 1, n, rng)
for name in ("crf.trans", "crf.start", "crf.stop"):
    store.set_value(name, rng.normal(size=store[name].shape))
E = rng.normal(size=(T, n))

scores = {y: path_score(E, p, y) for y in itertools.product(range(n), repeat=T)}
brute_z = np.log(np.sum(np.exp(list(scores.values()))))
print(f"log Z forward={crf_log_partition(E, p):.12f} brute={brute_z:.12f}")

best, best_score = crf_viterbi(E, p)
print("viterbi", best, round(best_score, 6), "brute", list(max(scores, key=scores.get)))

node, edge, _ = crf_marginals(E, p)
print("per-position marginals (rows sum to 1):")
print(np.round(node, 3))
print(f"expected transitions: {edge.sum():.6f} (T - 1 = {T - 1})")
