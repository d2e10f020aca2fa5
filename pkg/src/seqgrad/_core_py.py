"""Pure-Python stand-in for the compiled ``_core`` kernel.

Same signature and results (to roundoff) as ``_core.seq_grad``, computed by
running the generic per-step cell code over the batch.
"""

from __future__ import annotations

import numpy as np

from .params import GATES, ParamSet
from .sequence import SequenceSample, _run, backward, step_loss

ARCH_CODES = ("rnn", "lstm", "gru")


def seq_grad(arch: int, wx, wh, b, wout, bout, X, labels, stop: int):
    name = ARCH_CODES[arch]
    T, B, M = X.shape
    n = wh.shape[1]
    gn = wx.shape[0]
    if wh.shape[0] != gn or b.shape[0] != gn or wx.shape[1] != M or wout.shape[1] != n:
        raise ValueError("inconsistent kernel shapes")
    if labels.shape != (T, B):
        raise ValueError("labels must be (T, B)")
    if not 0 <= stop < T:
        raise ValueError("stop must lie in [0, T)")
    tensors = {}
    for g, (wi, ws, bb) in enumerate(GATES[name].values()):
        tensors[wi] = wx[g * n:(g + 1) * n]
        tensors[ws] = wh[g * n:(g + 1) * n]
        tensors[bb] = b[g * n:(g + 1) * n]
    tensors["w_out"], tensors["b_out"] = wout, bout
    params = ParamSet(name, tensors)
    k = wout.shape[0]
    mask = [bool(np.any(labels[t] >= 0)) for t in range(T)]
    targets = []
    for t in range(T):
        if mask[t]:
            y = np.zeros((B, k))
            rows = np.nonzero(labels[t] >= 0)[0]
            y[rows, labels[t, rows]] = 1.0
            targets.append((t, y))
    trace = _run(params, X, mask)
    loss = sum(float(step_loss(y, trace.outputs[t])) for t, y in targets)
    # Rows without a label contribute nothing: zero their output gradients by
    # giving them a target equal to the prediction.
    fixed = []
    for t, y in targets:
        blank = labels[t] < 0
        if blank.any():
            y = y.copy()
            y[blank] = trace.outputs[t][blank]
        fixed.append((t, y))
    sample = SequenceSample.__new__(SequenceSample)
    sample.inputs, sample.targets = X, fixed
    k_trunc = None if stop == 0 else T - stop
    g = backward(params, trace, sample, k=k_trunc).grads
    gates = GATES[name].values()
    dwx = np.concatenate([g[wi] for wi, _, _ in gates])
    dwh = np.concatenate([g[ws] for _, ws, _ in gates])
    db = np.concatenate([g[bb] for _, _, bb in gates])
    return loss, dwx, dwh, db, g["w_out"], g["b_out"]
