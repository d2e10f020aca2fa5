"""Unrolling a cell over time, sequence losses and backpropagation through time.

Samples may be single sequences (inputs of shape ``(T, M)``, one-hot targets
of shape ``(K,)``) or batches (inputs ``(T, B, M)``, targets ``(B, K)``).
Losses are summed over the batch; so are parameter gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import cells
from .cells import CellState, StepCache
from .linalg import Rng, ShapeError, as_float
from .params import GradSet, ParamSet, merge_layers, split_layers
from .training import dropout_mask, input_projection, input_projection_backward

TOPOLOGIES = ("one-to-one", "one-to-many", "many-to-one", "many-to-many")
LOG_EPS = 1e-12


@dataclass(frozen=True)
class Topology:
    """Which steps carry a loss-bearing output.

    ``feed_previous`` (one-to-many only) feeds the one-hot argmax of the
    previous prediction back in as the next input instead of zeros.
    """

    kind: str
    feed_previous: bool = False

    def __post_init__(self):
        if self.kind not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.kind!r}; expected one of {TOPOLOGIES}")
        if self.feed_previous and self.kind != "one-to-many":
            raise ValueError("feed_previous only applies to one-to-many")

    def mask(self, T: int) -> list[bool]:
        if T < 1:
            raise ValueError("sequence length must be >= 1")
        if self.kind == "one-to-one":
            if T != 1:
                raise ValueError("one-to-one topology requires T == 1")
            return [True]
        if self.kind == "many-to-one":
            return [t == T - 1 for t in range(T)]
        return [True] * T

    def steps(self, T: int) -> list[int]:
        return [t for t, on in enumerate(self.mask(T)) if on]


@dataclass
class SequenceSample:
    inputs: np.ndarray
    targets: list[tuple[int, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        if self.inputs.ndim not in (2, 3) or self.inputs.shape[0] < 1:
            raise ValueError(f"inputs must be (T, M) or (T, B, M) with T >= 1, got {self.inputs.shape}")
        T = self.T
        for t, y in self.targets:
            if not 0 <= t < T:
                raise ValueError(f"target index {t} outside [0, {T})")
            y = np.asarray(y)
            if y.ndim != self.inputs.ndim - 1:
                raise ValueError("target rank does not match inputs")
            if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)):
                raise ValueError(f"target at step {t} is not one-hot")

    @property
    def T(self) -> int:
        return self.inputs.shape[0]

    @property
    def batched(self) -> bool:
        return self.inputs.ndim == 3

    def target(self, t: int) -> np.ndarray | None:
        for s, y in self.targets:
            if s == t:
                return y
        return None


@dataclass
class Dropout:
    rng: Rng
    keep_p: float


@dataclass
class ForwardTrace:
    arch: str
    caches: list[StepCache]
    outputs: dict[int, np.ndarray]
    state0: CellState
    mask: list[bool]
    raw_inputs: np.ndarray
    hs: np.ndarray
    proj: list[np.ndarray] | None = None
    cell_inputs: list[np.ndarray] = field(default_factory=list)
    in_masks: list[np.ndarray] | None = None
    out_masks: dict[int, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.caches)


@dataclass
class BackwardResult:
    grads: GradSet
    dh_norms: list[float] | None
    dc_norms: list[float] | None
    dxs: np.ndarray
    contributions: list[tuple[int, dict]] | None = None


def _initial_state(params: ParamSet, batch_shape, h0, c0) -> CellState:
    n = params.hidden_dim

    def pick(name, given):
        if name in params:
            return np.broadcast_to(params[name], batch_shape + (n,)).copy()
        if given is not None:
            given = np.asarray(given, dtype=float)
            if given.shape[-1] != n:
                raise ShapeError(f"initial state of length {given.shape[-1]}, hidden is {n}")
            return np.broadcast_to(given, batch_shape + (n,)).copy()
        return np.zeros(batch_shape + (n,))

    h = pick("h0", h0)
    c = pick("c0", c0) if params.arch == "lstm" else None
    return CellState(h, c)


def _run(params: ParamSet, inputs: np.ndarray, mask: list[bool], h0=None, c0=None,
         dropout: Dropout | None = None, one_to_many: bool = False,
         feed_previous: bool = False) -> ForwardTrace:
    T = inputs.shape[0]
    if T < 1:
        raise ValueError("empty sequence")
    if inputs.shape[-1] != params.input_dim:
        raise ShapeError(f"inputs of width {inputs.shape[-1]}, parameters expect {params.input_dim}")
    has_head = "w_out" in params
    batch_shape = inputs.shape[1:-1]
    state = _initial_state(params, batch_shape, h0, c0)
    dtype = np.result_type(inputs, *params.tensors.values())
    trace = ForwardTrace(params.arch, [], {}, state, list(mask), inputs.copy(),
                         np.zeros((T,) + batch_shape + (params.hidden_dim,), dtype=dtype))
    use_proj = "w_proj" in params
    drop = dropout is not None and dropout.keep_p < 1.0
    if use_proj:
        trace.proj = []
    if drop:
        trace.in_masks, trace.out_masks = [], {}
    for t in range(T):
        x = inputs[t]
        if one_to_many and t > 0:
            if feed_previous:
                prev = trace.outputs[t - 1]
                x = np.zeros_like(x)
                np.put_along_axis(x, np.argmax(prev, axis=-1)[..., None], 1.0, axis=-1)
            else:
                x = np.zeros_like(x)
            trace.raw_inputs[t] = x
        if use_proj:
            x = input_projection(params, x)
            trace.proj.append(x)
        if drop:
            m = dropout_mask(dropout.rng, x.shape, dropout.keep_p)
            trace.in_masks.append(m)
            x = x * m
        trace.cell_inputs.append(x)
        state, cache = cells.step(params, x, state)
        trace.caches.append(cache)
        trace.hs[t] = state.h
        if has_head and mask[t]:
            h = state.h
            if drop:
                m = dropout_mask(dropout.rng, h.shape, dropout.keep_p)
                trace.out_masks[t] = m
                h = h * m
            trace.outputs[t] = cells.output_head(params, h)
    return trace


def unroll_forward(params: ParamSet, sample: SequenceSample, topology: Topology,
                   h0=None, c0=None, dropout: Dropout | None = None):
    """Apply the cell over the whole sequence, sharing ``params`` at every step.

    Returns (outputs keyed by step, trace).
    """
    if "w_out" not in params:
        raise ShapeError("unroll_forward needs parameters with an output head")
    mask = topology.mask(sample.T)
    trace = _run(params, sample.inputs, mask, h0, c0, dropout,
                 one_to_many=topology.kind == "one-to-many", feed_previous=topology.feed_previous)
    return trace.outputs, trace


def step_loss(y, yhat) -> float:
    """Cross-entropy -sum(y * log(yhat)); batched inputs are summed over rows."""
    y = np.asarray(y, dtype=float)
    yhat = as_float(yhat)
    if y.shape != yhat.shape:
        raise ShapeError(f"target {y.shape} vs prediction {yhat.shape}")
    # Kept as a numpy scalar so extended-precision evaluations stay extended.
    return -np.sum(y * np.log(np.maximum(yhat, LOG_EPS)))


def total_loss(sample: SequenceSample, outputs: dict[int, np.ndarray],
               topology: Topology | None = None) -> float:
    """Sum of step losses over the loss-bearing steps (all target steps if no topology)."""
    steps = topology.steps(sample.T) if topology is not None else sorted(t for t, _ in sample.targets)
    total = 0.0
    for t in steps:
        if t not in outputs:
            raise ValueError(f"missing output at masked step {t}")
        y = sample.target(t)
        if y is None:
            raise ValueError(f"missing target at masked step {t}")
        total += step_loss(y, outputs[t])
    return total


def _norm(a) -> float:
    return math.sqrt(float(np.sum(a * a)))


def _bsum(a: np.ndarray) -> np.ndarray:
    return a if a.ndim == 1 else a.reshape(-1, a.shape[-1]).sum(axis=0)


class _Backward:
    """Shared machinery for the full and truncated backward sweeps."""

    def __init__(self, params: ParamSet, trace: ForwardTrace, sample: SequenceSample | None):
        if len(trace) == 0:
            raise ValueError("empty trace")
        if params.arch != trace.arch or trace.caches[0].x.shape[-1] != params.cell_input_dim:
            raise ShapeError("trace was not produced with these parameters")
        self.p, self.trace, self.sample = params, trace, sample
        self.lstm = params.arch == "lstm"

    def head(self, t: int):
        tr, p = self.trace, self.p
        y = self.sample.target(t) if self.sample is not None else None
        if y is None:
            raise ValueError(f"missing target at masked step {t}")
        h = tr.hs[t]
        m = tr.out_masks.get(t) if tr.out_masks else None
        if m is not None:
            h = h * m
        g, dh = cells.output_head_backward(p, h, tr.outputs[t], y)
        if m is not None:
            dh = dh * m
        return g, dh

    def cell(self, t: int, dh, dc):
        tr, p = self.trace, self.p
        g, dh_prev, dc_prev, dx = cells.step_backward(tr.caches[t], p, dh, dc)
        if tr.in_masks is not None:
            dx = dx * tr.in_masks[t]
        if tr.proj is not None:
            pg, dx = input_projection_backward(p, tr.raw_inputs[t], tr.proj[t], dx)
            g.update(pg)
        return g, dh_prev, dc_prev, dx

    def dc_total(self, t: int, dh, dc):
        c = self.trace.caches[t]
        return dc + dh * c.act["o"] * (1.0 - c.tanh_c * c.tanh_c)

    def init_state_grads(self, dh0, dc0) -> dict:
        g = {}
        if "h0" in self.p:
            g["h0"] = _bsum(dh0)
        if self.lstm and "c0" in self.p:
            g["c0"] = _bsum(dc0)
        return g


def backward(params: ParamSet, trace: ForwardTrace, sample: SequenceSample | None,
             k: int | None = None, dh_ext: np.ndarray | None = None,
             contributions: bool = False) -> BackwardResult:
    """Backpropagation through time over a recorded trace.

    Loss gradients enter at the steps that produced an output; ``dh_ext``
    (shape like the hidden sequence) injects extra per-step gradients, which
    is how a layer above a stack feeds its input gradients down.  With ``k``
    the state recursion from each gradient source stops after ``k`` steps.
    Parameter gradients are accumulated strictly from t = T-1 down to 0.
    """
    if k is not None and k < 1:
        raise ValueError("truncation length must be >= 1")
    bw = _Backward(params, trace, sample)
    T = len(trace)
    G = params.zeros_like()
    dxs = np.zeros_like(trace.raw_inputs)
    zeros = np.zeros_like(trace.hs[0])
    has_head = "w_out" in params

    def source(t):
        dh, hg = None, None
        if has_head and trace.mask[t]:
            hg, dh = bw.head(t)
        if dh_ext is not None:
            dh = dh_ext[t] if dh is None else dh + dh_ext[t]
        return hg, dh

    if k is None:
        norms, cnorms = [0.0] * T, ([0.0] * T if bw.lstm else None)
        contrib = [] if contributions else None
        dh = zeros.copy()
        dc = zeros.copy() if bw.lstm else None
        for t in range(T - 1, -1, -1):
            part: dict = {}
            hg, dsrc = source(t)
            if hg is not None:
                G.add_(hg)
                part.update(hg)
            if dsrc is not None:
                dh = dh + dsrc
            norms[t] = _norm(dh)
            if bw.lstm:
                cnorms[t] = _norm(bw.dc_total(t, dh, dc))
            cg, dh, dc, dx = bw.cell(t, dh, dc)
            G.add_(cg)
            part.update(cg)
            dxs[t] += dx
            if contrib is not None:
                contrib.append((t, part))
        ig = bw.init_state_grads(dh, dc)
        if ig:
            G.add_(ig)
            if contrib is not None:
                contrib.append((-1, ig))
        return BackwardResult(G, norms, cnorms, dxs, contrib)

    dh0 = zeros.copy()
    dc0 = zeros.copy()
    for s in range(T - 1, -1, -1):
        hg, dh = source(s)
        if hg is not None:
            G.add_(hg)
        if dh is None:
            continue
        dc = zeros.copy() if bw.lstm else None
        for t in range(s, max(-1, s - k), -1):
            cg, dh, dc, dx = bw.cell(t, dh, dc)
            G.add_(cg)
            dxs[t] += dx
        if s - k < 0:
            dh0 += dh
            if bw.lstm:
                dc0 += dc
    ig = bw.init_state_grads(dh0, dc0)
    if ig:
        G.add_(ig)
    return BackwardResult(G, None, None, dxs)


def bptt(params: ParamSet, trace: ForwardTrace, sample: SequenceSample, topology: Topology):
    """Full BPTT. Returns (gradients, per-step norms of dL/dh_t)."""
    _check_topology(trace, sample, topology)
    res = backward(params, trace, sample)
    return res.grads, res.dh_norms


def truncated_bptt(params: ParamSet, trace: ForwardTrace, sample: SequenceSample,
                   topology: Topology, k: int) -> GradSet:
    if k < 1:
        raise ValueError("truncation length must be >= 1")
    _check_topology(trace, sample, topology)
    return backward(params, trace, sample, k=k).grads


def _check_topology(trace: ForwardTrace, sample: SequenceSample, topology: Topology) -> None:
    if len(trace) != sample.T or trace.mask != topology.mask(sample.T):
        raise ValueError("trace does not match sample/topology")


# -- stacking --------------------------------------------------------------------

def stack_forward(layers: list[ParamSet], sample: SequenceSample, topology: Topology,
                  dropout: Dropout | None = None):
    """Feed each layer's hidden sequence into the next; only the top has a head.

    Returns (outputs of the top layer, one trace per layer).
    """
    if not layers:
        raise ValueError("need at least one layer")
    for below, above in zip(layers, layers[1:]):
        if above.input_dim != below.hidden_dim:
            raise ShapeError(f"layer input {above.input_dim} != hidden {below.hidden_dim} below")
        if "w_out" in below:
            raise ShapeError("only the top layer may carry an output head")
    if "w_out" not in layers[-1]:
        raise ShapeError("top layer needs an output head")
    mask = topology.mask(sample.T)
    traces = []
    inputs = sample.inputs
    for i, p in enumerate(layers):
        tr = _run(p, inputs, mask, dropout=dropout,
                  one_to_many=(i == 0 and topology.kind == "one-to-many"),
                  feed_previous=False)
        traces.append(tr)
        inputs = tr.hs
    return traces[-1].outputs, traces


def stack_backward(layers: list[ParamSet], traces: list[ForwardTrace], sample: SequenceSample,
                   topology: Topology, k: int | None = None) -> list[GradSet]:
    grads: list[GradSet] = [None] * len(layers)
    dh_ext = None
    for i in range(len(layers) - 1, -1, -1):
        res = backward(layers[i], traces[i], sample if i == len(layers) - 1 else None,
                       k=k, dh_ext=dh_ext)
        grads[i] = res.grads
        dh_ext = res.dxs
    return grads


# -- whole-model helpers (flat ParamSet, optional l<i>. prefixes) ----------------

def model_forward(params: ParamSet, n_layers: int, sample: SequenceSample, topology: Topology,
                  dropout: Dropout | None = None):
    layers = split_layers(params, n_layers)
    if n_layers == 1:
        outputs, trace = unroll_forward(layers[0], sample, topology, dropout=dropout)
        return outputs, [trace]
    return stack_forward(layers, sample, topology, dropout)


def model_backward(params: ParamSet, n_layers: int, traces: list[ForwardTrace],
                   sample: SequenceSample, topology: Topology, k: int | None = None) -> GradSet:
    layers = split_layers(params, n_layers)
    if n_layers == 1:
        return backward(layers[0], traces[0], sample, k=k).grads
    return merge_layers(stack_backward(layers, traces, sample, topology, k))


def model_loss(params: ParamSet, n_layers: int, sample: SequenceSample, topology: Topology) -> float:
    outputs, _ = model_forward(params, n_layers, sample, topology)
    return total_loss(sample, outputs, topology)
