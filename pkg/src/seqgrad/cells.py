"""Single-timestep forward and backward passes for RNN, LSTM and GRU cells.

Every function accepts either one sample (1-D ``x``/``h``) or a batch (2-D,
one row per sample).  Weight matrices act on the feature axis as ``W @ x``;
parameter gradients returned by the backward functions are summed over the
batch.

LSTM cell (gates f, il, o are sigmoids, the candidate ``if`` is tanh)::

    c = f * c_prev + il * g
    h = o * tanh(c)

GRU cell (z close to 1 keeps the previous state)::

    h' = tanh(W_ci x + r * (W_si h_prev) + b_c)
    h  = z * h_prev + (1 - z) * h'
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import ShapeError, sigmoid, softmax, tanh_act
from .params import GATES, ParamSet
from .training import layer_norm_backward, layer_norm_forward


@dataclass
class CellState:
    h: np.ndarray
    c: np.ndarray | None = None


@dataclass
class StepCache:
    arch: str
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray | None
    # gate name -> activation output
    act: dict[str, np.ndarray] = field(default_factory=dict)
    # gate name -> layer-norm cache (only when enabled)
    ln: dict[str, tuple] = field(default_factory=dict)
    h: np.ndarray | None = None
    c: np.ndarray | None = None
    tanh_c: np.ndarray | None = None
    u: np.ndarray | None = None  # GRU: W_si h_prev


def _outer(d: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.outer(d, v) if d.ndim == 1 else d.T @ v


def _bsum(d: np.ndarray) -> np.ndarray:
    return d if d.ndim == 1 else d.sum(axis=0)


def _check(p: ParamSet, arch: str, x, h_prev, c_prev=None) -> None:
    if p.arch != arch:
        raise ShapeError(f"{arch} step given {p.arch} parameters")
    m, n = p.cell_input_dim, p.hidden_dim
    if np.shape(x)[-1] != m or np.shape(h_prev)[-1] != n:
        raise ShapeError(f"x{np.shape(x)} / h{np.shape(h_prev)} vs input {m}, hidden {n}")
    if np.shape(x)[:-1] != np.shape(h_prev)[:-1]:
        raise ShapeError(f"batch shapes differ: x{np.shape(x)} h{np.shape(h_prev)}")
    if c_prev is not None and np.shape(c_prev) != np.shape(h_prev):
        raise ShapeError(f"c{np.shape(c_prev)} vs h{np.shape(h_prev)}")


def _gate_pre(p: ParamSet, gate: str, x, h_prev, cache: StepCache):
    wi, ws, b = GATES[p.arch][gate]
    a = x @ p[wi].T + h_prev @ p[ws].T + p[b]
    return _maybe_ln(p, gate, a, cache)


def _maybe_ln(p: ParamSet, gate: str, a, cache: StepCache):
    g = f"ln_g_{gate}"
    if g in p:
        a, cache.ln[gate] = layer_norm_forward(a, p[g], p[f"ln_b_{gate}"])
    return a


def _ln_back(p: ParamSet, gate: str, da, cache: StepCache, grads: dict):
    if gate in cache.ln:
        da, dg, db = layer_norm_backward(da, cache.ln[gate])
        grads[f"ln_g_{gate}"] = dg
        grads[f"ln_b_{gate}"] = db
    return da


def _gate_back(p: ParamSet, gate: str, da, cache: StepCache, grads: dict):
    """Backprop through the affine map of one gate; returns (dx, dh_prev) parts."""
    wi, ws, b = GATES[p.arch][gate]
    da = _ln_back(p, gate, da, cache, grads)
    grads[wi] = _outer(da, cache.x)
    grads[ws] = _outer(da, cache.h_prev)
    grads[b] = _bsum(da)
    return da @ p[wi], da @ p[ws]


# -- vanilla RNN ---------------------------------------------------------------

def rnn_step(p: ParamSet, x, h_prev):
    _check(p, "rnn", x, h_prev)
    cache = StepCache("rnn", x, h_prev, None)
    h = tanh_act(_gate_pre(p, "h", x, h_prev, cache))
    cache.act["h"] = cache.h = h
    return h, cache


def rnn_step_backward(cache: StepCache, p: ParamSet, dh):
    if cache.arch != "rnn" or p.arch != "rnn":
        raise ShapeError("rnn backward given a non-rnn cache or parameters")
    grads: dict[str, np.ndarray] = {}
    da = dh * (1.0 - cache.h * cache.h)
    dx, dh_prev = _gate_back(p, "h", da, cache, grads)
    return grads, dh_prev, dx


# -- LSTM ----------------------------------------------------------------------

def lstm_step(p: ParamSet, x, h_prev, c_prev):
    _check(p, "lstm", x, h_prev, c_prev)
    cache = StepCache("lstm", x, h_prev, c_prev)
    f = sigmoid(_gate_pre(p, "f", x, h_prev, cache))
    i = sigmoid(_gate_pre(p, "il", x, h_prev, cache))
    g = tanh_act(_gate_pre(p, "if", x, h_prev, cache))
    o = sigmoid(_gate_pre(p, "o", x, h_prev, cache))
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    cache.act.update(f=f, il=i, **{"if": g}, o=o)
    cache.c, cache.tanh_c, cache.h = c, tc, h
    return h, c, cache


def lstm_step_backward(cache: StepCache, p: ParamSet, dh, dc):
    """``dc`` is the gradient reaching c_t from step t+1 (the carousel path)."""
    if cache.arch != "lstm" or p.arch != "lstm":
        raise ShapeError("lstm backward given a non-lstm cache or parameters")
    a = cache.act
    f, i, g, o = a["f"], a["il"], a["if"], a["o"]
    tc = cache.tanh_c
    dc_total = dc + dh * o * (1.0 - tc * tc)
    grads: dict[str, np.ndarray] = {}
    dx = np.zeros_like(cache.x, dtype=float)
    dh_prev = np.zeros_like(cache.h_prev, dtype=float)
    pre = {
        "f": dc_total * cache.c_prev * f * (1.0 - f),
        "il": dc_total * g * i * (1.0 - i),
        "if": dc_total * i * (1.0 - g * g),
        "o": dh * tc * o * (1.0 - o),
    }
    for gate in ("f", "il", "if", "o"):
        gx, gh = _gate_back(p, gate, pre[gate], cache, grads)
        dx += gx
        dh_prev += gh
    return grads, dh_prev, dc_total * f, dx


# -- GRU -----------------------------------------------------------------------

def gru_step(p: ParamSet, x, h_prev):
    _check(p, "gru", x, h_prev)
    cache = StepCache("gru", x, h_prev, None)
    z = sigmoid(_gate_pre(p, "z", x, h_prev, cache))
    r = sigmoid(_gate_pre(p, "r", x, h_prev, cache))
    u = h_prev @ p["w_si"].T
    a_c = _maybe_ln(p, "c", x @ p["w_ci"].T + r * u + p["b_c"], cache)
    hc = tanh_act(a_c)
    h = z * h_prev + (1.0 - z) * hc
    cache.act.update(z=z, r=r, c=hc)
    cache.u, cache.h = u, h
    return h, cache


def gru_step_backward(cache: StepCache, p: ParamSet, dh):
    if cache.arch != "gru" or p.arch != "gru":
        raise ShapeError("gru backward given a non-gru cache or parameters")
    z, r, hc = cache.act["z"], cache.act["r"], cache.act["c"]
    grads: dict[str, np.ndarray] = {}
    dz = dh * (cache.h_prev - hc)
    da_c = _ln_back(p, "c", dh * (1.0 - z) * (1.0 - hc * hc), cache, grads)
    du = da_c * r
    dr = da_c * cache.u
    grads["w_ci"] = _outer(da_c, cache.x)
    grads["w_si"] = _outer(du, cache.h_prev)
    grads["b_c"] = _bsum(da_c)
    dx = da_c @ p["w_ci"]
    dh_prev = dh * z + du @ p["w_si"]
    for gate, d in (("z", dz * z * (1.0 - z)), ("r", dr * r * (1.0 - r))):
        gx, gh = _gate_back(p, gate, d, cache, grads)
        dx = dx + gx
        dh_prev = dh_prev + gh
    return grads, dh_prev, dx


# -- output head -----------------------------------------------------------------

def output_head(p: ParamSet, h) -> np.ndarray:
    w, b = p["w_out"], p["b_out"]
    if np.shape(h)[-1] != w.shape[1]:
        raise ShapeError(f"hidden of length {np.shape(h)[-1]} vs head {w.shape}")
    logits = h @ w.T + b
    if p.output == "sigmoid":
        return sigmoid(logits)
    return softmax(logits)


def output_head_backward(p: ParamSet, h, yhat, y):
    """Gradient of the cross-entropy at the true class through the head.

    Returns ({w_out, b_out} grads, dh).
    """
    if p.output == "sigmoid":
        dlogits = -y * (1.0 - yhat)
    else:
        dlogits = yhat - y
    return {"w_out": _outer(dlogits, h), "b_out": _bsum(dlogits)}, dlogits @ p["w_out"]


def step(p: ParamSet, x, state: CellState):
    """Arch-dispatching forward step: returns (new CellState, cache)."""
    if p.arch == "lstm":
        h, c, cache = lstm_step(p, x, state.h, state.c)
        return CellState(h, c), cache
    if p.arch == "gru":
        h, cache = gru_step(p, x, state.h)
    else:
        h, cache = rnn_step(p, x, state.h)
    return CellState(h), cache


def step_backward(cache: StepCache, p: ParamSet, dh, dc=None):
    """Arch-dispatching backward step: returns (grads, dh_prev, dc_prev, dx)."""
    if p.arch == "lstm":
        return lstm_step_backward(cache, p, dh, np.zeros_like(dh) if dc is None else dc)
    if p.arch == "gru":
        grads, dh_prev, dx = gru_step_backward(cache, p, dh)
    else:
        grads, dh_prev, dx = rnn_step_backward(cache, p, dh)
    return grads, dh_prev, None, dx
