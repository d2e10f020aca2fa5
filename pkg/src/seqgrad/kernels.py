"""Backend selection for the batched sequence-gradient kernel.

The compiled ``_core`` extension is used when it imports; otherwise, or when
``SEQGRAD_BACKEND=python`` is set, the pure-Python ``_core_py`` runs instead.
"""

from __future__ import annotations

import os

import numpy as np

from .params import GATES, GradSet, ParamSet

ARCH_CODE = {"rnn": 0, "lstm": 1, "gru": 2}

if os.environ.get("SEQGRAD_BACKEND", "").lower() == "python":
    from . import _core_py as _impl
    BACKEND = "python"
else:
    try:
        from . import _core as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        from . import _core_py as _impl
        BACKEND = "python"


def eligible(params: ParamSet, n_layers: int, labels: np.ndarray, k: int | None,
             keep_prob: float = 1.0) -> bool:
    """True when the fused kernel computes exactly what the generic path would."""
    if n_layers != 1 or keep_prob < 1.0 or params.output != "softmax":
        return False
    expected = [n for triple in GATES[params.arch].values() for n in triple] + ["w_out", "b_out"]
    if sorted(params.names()) != sorted(expected):
        return False
    if any(a.dtype != np.float64 for a in params.tensors.values()):
        return False
    if k is not None and k < labels.shape[0]:
        steps = np.nonzero((labels >= 0).any(axis=1))[0]
        return list(steps) == [labels.shape[0] - 1]
    return True


def seq_grad(params: ParamSet, X: np.ndarray, labels: np.ndarray, k: int | None = None,
             impl=None) -> tuple[float, GradSet]:
    """Loss summed over the batch and loss-bearing steps, plus its gradient.

    ``X`` is (T, B, M); ``labels`` is (T, B) with -1 where a step carries no
    loss.  ``k`` truncates the backward sweep (single final-step loss only).
    """
    impl = impl or _impl
    gates = list(GATES[params.arch].values())
    wx = np.ascontiguousarray(np.concatenate([params[wi] for wi, _, _ in gates]))
    wh = np.ascontiguousarray(np.concatenate([params[ws] for _, ws, _ in gates]))
    b = np.ascontiguousarray(np.concatenate([params[bb] for _, _, bb in gates]))
    T = X.shape[0]
    stop = 0 if k is None or k >= T else T - k
    loss, dwx, dwh, db, dwout, dbout = impl.seq_grad(
        ARCH_CODE[params.arch], wx, wh, b, np.ascontiguousarray(params["w_out"]),
        np.ascontiguousarray(params["b_out"]), np.ascontiguousarray(X, dtype=np.float64),
        np.ascontiguousarray(labels, dtype=np.int64), stop)
    n = params.hidden_dim
    grads = params.zeros_like()
    for g, (wi, ws, bb) in enumerate(gates):
        grads[wi] = dwx[g * n:(g + 1) * n].copy()
        grads[ws] = dwh[g * n:(g + 1) * n].copy()
        grads[bb] = db[g * n:(g + 1) * n].copy()
    grads["w_out"], grads["b_out"] = dwout, dbout
    return float(loss), grads
