import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metalstm.autodiff import DimensionError, EmptyInputError
from metalstm.data import Example, TaskSpec, synth_tasks, synth_triggers
from metalstm.diagnostics import (
    DELTA,
    TRACE_COLUMNS,
    bio_spans,
    evaluate,
    format_param_report,
    format_report,
    format_trace,
    param_report,
    span_prf,
    trace_sequence,
    weight_change,
)
from metalstm.multitask import ModelConfig, build_model
from metalstm.training import TrainConfig, joint_train


def brute_change(a, b, delta=DELTA):
    total = 0.0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            total += abs(a[i, j] - b[i, j]) / (abs(b[i, j]) + delta)
    return total / a.size


# ------------------------------------------------------------ weight change


def test_identical_matrices_give_zero():
    W = np.random.default_rng(0).normal(size=(4, 5))
    assert weight_change(W, W) == 0.0


def test_doubled_matrix_gives_about_one():
    W = np.random.default_rng(1).normal(size=(4, 5))
    assert weight_change(2 * W, W) == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=50)
@given(seed=st.integers(0, 2**31 - 1))
def test_matches_elementwise_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    assert abs(weight_change(a, b) - brute_change(a, b)) < 1e-12


@settings(max_examples=50)
@given(seed=st.integers(0, 2**31 - 1), c=st.floats(2.0, 1e3))
def test_scaling_previous_divides_result(seed, c):
    rng = np.random.default_rng(seed)
    b = rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
    dW = rng.normal(size=(3, 4))
    base = weight_change(b + dW, b)
    scaled = weight_change(c * b + dW, c * b)
    assert scaled == pytest.approx(base / c, rel=1e-6)


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        weight_change(np.zeros((2, 2)), np.zeros((2, 3)))


# ------------------------------------------------------------------- traces


def meta_model(K=1, seed=1, **dims):
    tasks, vocab = synth_tasks(K, seed)
    cfg = ModelConfig(len(vocab), **(dims or dict(d=6, h=6, m=3, z=3)), seed=seed)
    return build_model("meta-mtl", tasks, cfg), tasks, vocab


def test_length_one_trace_has_absent_diffs():
    model, _, vocab = meta_model()
    recs = trace_sequence(model, "task0", [5], vocab)
    assert len(recs) == 1 and recs[0].diffs is None and recs[0].token == "w03"
    lines = format_trace(recs).splitlines()
    assert lines[0].split("\t") == list(TRACE_COLUMNS)
    assert lines[1].split("\t")[2:6] == ["-"] * 4


def test_zero_meta_gives_zero_diffs():
    model, _, vocab = meta_model()
    for n in model.meta_names():
        model.shared.set_value(n, np.zeros_like(model.shared[n].value))
    recs = trace_sequence(model, "task0", vocab.encode(["w10", "w11", "w20", "w03"]), vocab)
    for r in recs[1:]:
        assert all(v == 0.0 for v in r.diffs.values())
        assert all(v >= 0 for v in r.diffs.values())


def test_trace_score_is_logit_difference():
    from metalstm.data import make_batch

    model, tasks, vocab = meta_model()
    ex = tasks[0].dev[0]
    recs = trace_sequence(model, "task0", ex.tokens, vocab)
    lg = model.task_logits("task0", make_batch([ex])).value[0]
    assert recs[-1].score == pytest.approx(lg[1] - lg[0], abs=1e-12)


def test_trace_rejects_empty():
    model, _, _ = meta_model()
    with pytest.raises(EmptyInputError):
        trace_sequence(model, "task0", [])


def test_trigger_positions_spike_after_training():
    model, tasks, vocab = meta_model(K=1, seed=1, d=16, h=16, m=8, z=8)
    joint_train(model, TrainConfig(max_epochs=8, seed=1))
    pos, neg = synth_triggers(0)
    triggers = set(pos + neg)
    at_trigger, elsewhere = [], []
    for ex in tasks[0].test[:40]:
        words = vocab.decode(ex.tokens)
        for r, w in zip(trace_sequence(model, "task0", ex.tokens, vocab)[1:], words[1:]):
            (at_trigger if w in triggers else elsewhere).append(np.mean(list(r.diffs.values())))
    assert np.median(at_trigger) > np.median(elsewhere)


# ------------------------------------------------------------------ metrics


def test_bio_spans_repairs_stray_inside():
    assert bio_spans(["I-PER", "I-PER", "O", "B-LOC", "I-ORG"]) == {(0, 2, "PER"), (3, 4, "LOC"), (4, 5, "ORG")}


def test_hand_built_f1():
    gold = [["B-PER", "I-PER", "O", "B-LOC"], ["B-ORG", "O"]]
    pred = [["B-PER", "O", "O", "B-LOC"], ["B-ORG", "O"]]
    # gold spans: PER[0,2) LOC[3,4) ORG[0,1); predicted: PER[0,1) LOC ORG -> 2 of 3 match
    p, r, f = span_prf(gold, pred)
    assert (p, r) == (2 / 3, 2 / 3)
    assert f == pytest.approx(2 / 3, abs=1e-15)


@given(
    st.lists(st.lists(st.sampled_from(["O", "B-A", "I-A", "B-B", "I-B"]), min_size=1, max_size=6), min_size=1, max_size=4),
    st.randoms(use_true_random=False),
)
def test_f1_is_harmonic_mean(gold, rnd):
    pred = [[rnd.choice(["O", "B-A", "I-A", "B-B", "I-B"]) for _ in g] for g in gold]
    p, r, f = span_prf(gold, pred)
    if p + r > 0:
        assert f == 2 * p * r / (p + r)
    else:
        assert f == 0.0
    assert span_prf(gold, gold)[2] in (0.0, 1.0)


def test_perfect_and_constant_predictors():
    tasks, vocab = synth_tasks(1, 2, (16, 16, 16))
    model = build_model("single-lstm", tasks, ModelConfig(len(vocab), d=6, h=6))
    store = model.private["task0"]
    store.set_value("head.W", np.zeros_like(store["head.W"].value))
    store.set_value("head.b", np.array([0.0, 5.0]))
    assert evaluate(model, "task0", "test")["accuracy"] == 0.5


def test_tagging_evaluation_of_gold_predictor():
    tagset = ["B-X", "I-X", "O"]
    exs = [Example([2, 3, 4], [0, 1, 2]), Example([5, 6], [2, 0])]
    task = TaskSpec("tag", "tagging", tagset=tagset, train=exs, dev=exs, test=exs)
    model = build_model("single-lstm", [task], ModelConfig(8, d=4, h=4))
    # make emissions irrelevant and let the transition scores force the gold paths
    store = model.private["tag"]
    store.set_value("head.emit", np.zeros_like(store["head.emit"].value))
    store.set_value("head.trans", np.array([[-50, 20.0, -50], [-50, -50, 20.0], [20.0, -50, -50]]))
    store.set_value("head.start", np.array([0.0, -50, 1.0]))
    store.set_value("head.stop", np.array([1.0, -50, 0.0]))
    rep = evaluate(model, "tag", "test")
    assert rep["f1"] == 1.0 and rep["token_accuracy"] == 1.0
    assert format_report(rep).splitlines()[0] == "n\t2"


def test_empty_split_rejected():
    task = TaskSpec("t", train=[Example([2], 0)])
    model = build_model("single-lstm", [task], ModelConfig(4, d=2, h=2))
    with pytest.raises(EmptyInputError):
        evaluate(model, "t", "dev")


# ---------------------------------------------------------- param reports


def test_param_report_standard_lstm():
    tasks, vocab = synth_tasks(1, 1, (4, 4, 4))
    rep = param_report(build_model("single-lstm", tasks, ModelConfig(len(vocab), d=100, h=100)))
    assert rep["cell_excl_bias_gen"] == rep["cell_with_bias"] == 80_400


def test_param_report_meta_single_task():
    tasks, vocab = synth_tasks(1, 1, (4, 4, 4))
    model = build_model("meta-mtl", tasks, ModelConfig(len(vocab), d=100, h=100, m=20, z=20))
    rep = param_report(model)
    assert rep["cell_excl_bias_gen"] == 42_080
    assert rep["cell_with_bias"] == 42_080 + 4 * 100 * 20
    assert rep["shared_cell"] == 18_080
    assert sum(r.count for r in rep["rows"]) == rep["total"] == model.n_params()
    assert sum(rep["per_store"].values()) == rep["total"]
    text = format_param_report(rep)
    assert "cell_excl_bias_gen\t42080" in text
