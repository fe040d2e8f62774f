#!/usr/bin/env python3
"""Watch the Meta-LSTM rewrite the basic cell's weights as a sentence is read.
The diff columns measure how much each generated gate matrix moved at each
token; the score is the positive minus negative logit of the prefix."""

from metalstm.data import NEGATORS, synth_tasks, synth_triggers
from metalstm.diagnostics import format_trace, trace_sequence, weight_change
from metalstm.multitask import ModelConfig, build_model
from metalstm.training import TrainConfig, joint_train

import numpy as np

tasks, vocab = synth_tasks(1, 1)
model = build_model("meta-mtl", tasks, ModelConfig(len(vocab), d=16, h=16, m=8, z=8, seed=1))
joint_train(model, TrainConfig(max_epochs=6, seed=1))

pos, neg = synth_triggers(0)
print("task0 triggers: positive", pos, "negative", neg, "negators", NEGATORS)
ex = tasks[0].test[0]
print("label", ex.label)
print(format_trace(trace_sequence(model, "task0", ex.tokens, vocab)))

W = np.ones((3, 3))
print("weight_change(2W, W) =", weight_change(2 * W, W))
