"""Optimizers, gradient hygiene, initialization and regularization helpers."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import Rng, tanh_act
from .params import ARCHS, GATES, GradSet, ParamSet, layer_prefix, ln_names

LN_EPS = 1e-5
OPTIMIZERS = ("sgd", "rmsprop", "adam")
INIT_SCHEMES = ("glorot", "uniform", "normal")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    optimizer: str = "adam"
    clip: float | None = 5.0
    clip_mode: str = "global"  # or "per_tensor"
    truncation: int | None = None
    keep_prob: float = 1.0
    normalize_loss: bool = False
    forget_bias: float = 1.0
    init: str = "glorot"
    init_scale: float = 0.1
    seed: int = 0
    steps: int = 1000
    batch_size: int = 16
    layer_norm: bool = False
    input_projection: int | None = None
    layers: int = 1
    hidden: int = 32
    trainable_init_state: bool = False
    output_activation: str = "softmax"
    dtype: str = "float64"
    rho: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.clip is not None and not self.clip > 0:
            raise ValueError("clip threshold must be > 0")
        if self.clip_mode not in ("global", "per_tensor"):
            raise ValueError("clip_mode must be 'global' or 'per_tensor'")
        if self.truncation is not None and self.truncation < 1:
            raise ValueError("truncation must be >= 1")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError("keep_prob must lie in (0, 1]")
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"init must be one of {INIT_SCHEMES}")
        if self.steps < 0 or self.batch_size < 1 or self.layers < 1 or self.hidden < 1:
            raise ValueError("steps >= 0, batch_size >= 1, layers >= 1, hidden >= 1 required")
        if self.input_projection is not None and self.input_projection < 1:
            raise ValueError("input_projection must be >= 1")
        if self.output_activation not in ("softmax", "sigmoid"):
            raise ValueError("output_activation must be 'softmax' or 'sigmoid'")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    kind: str
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fresh(cls, kind: str, params: ParamSet) -> "OptimizerState":
        st = cls(kind)
        if kind in ("rmsprop", "adam"):
            st.v = {k: np.zeros_like(a) for k, a in params.items()}
        if kind == "adam":
            st.m = {k: np.zeros_like(a) for k, a in params.items()}
        return st


# -- initialization ---------------------------------------------------------

def _draw(rng: Rng, shape, config: TrainConfig) -> np.ndarray:
    fan_out, fan_in = shape if len(shape) == 2 else (shape[0], 1)
    if config.init == "glorot":
        a = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, shape)
    if config.init == "uniform":
        return rng.uniform(-config.init_scale, config.init_scale, shape)
    return rng.normal(0.0, config.init_scale, shape)


def init_variance(shape, config: TrainConfig) -> float:
    """Nominal variance of a weight drawn by ``init_params``."""
    fan_out, fan_in = shape
    if config.init == "glorot":
        return 2.0 / (fan_in + fan_out)
    if config.init == "uniform":
        return config.init_scale**2 / 3.0
    return config.init_scale**2


def init_layer(arch: str, n_in: int, n_hidden: int, n_out: int | None,
               config: TrainConfig, rng: Rng, projection: int | None = None) -> ParamSet:
    """Initialize one recurrent layer (optionally with projection and head)."""
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}")
    if min(n_in, n_hidden) < 1 or (n_out is not None and n_out < 1):
        raise ValueError("dimensions must be positive")
    dtype = np.dtype(config.dtype)
    t: dict[str, np.ndarray] = {}
    cell_in = n_in
    if projection is not None:
        t["w_proj"] = _draw(rng, (projection, n_in), config)
        t["b_proj"] = np.zeros(projection)
        cell_in = projection
    for gate, (wi, ws, b) in GATES[arch].items():
        t[wi] = _draw(rng, (n_hidden, cell_in), config)
        t[ws] = _draw(rng, (n_hidden, n_hidden), config)
        t[b] = np.full(n_hidden, config.forget_bias) if (arch, gate) == ("lstm", "f") else np.zeros(n_hidden)
    if config.layer_norm:
        for name in ln_names(arch):
            t[name] = np.ones(n_hidden) if name.startswith("ln_g_") else np.zeros(n_hidden)
    if config.trainable_init_state:
        t["h0"] = np.zeros(n_hidden)
        if arch == "lstm":
            t["c0"] = np.zeros(n_hidden)
    if n_out is not None:
        t["w_out"] = _draw(rng, (n_out, n_hidden), config)
        t["b_out"] = np.zeros(n_out)
    return ParamSet(arch, {k: v.astype(dtype) for k, v in t.items()}, config.output_activation)


def init_params(arch: str, dims: tuple[int, int, int], config: TrainConfig, rng: Rng) -> ParamSet:
    """Initialize a full network for (input M, hidden N, output K).

    With ``config.layers > 1`` the layer tensors are stored under ``l0.``,
    ``l1.``, ... prefixes; only the top layer owns the output head and only
    the bottom one the input projection.
    """
    m, n, k = dims
    if min(m, n, k) < 1:
        raise ValueError(f"invalid dims {dims}")
    layers = config.layers
    out: dict[str, np.ndarray] = {}
    for i in range(layers):
        p = init_layer(arch, m if i == 0 else n, n, k if i == layers - 1 else None, config, rng,
                       projection=config.input_projection if i == 0 else None)
        for name, a in p.items():
            out[layer_prefix(i, layers) + name] = a
    return ParamSet(arch, out, config.output_activation)


# -- gradient hygiene ----------------------------------------------------------

def global_norm(g: ParamSet) -> float:
    return math.sqrt(sum(float(np.sum(a * a)) for a in g.tensors.values()))


def clip_gradients(g: GradSet, threshold: float, mode: str = "global") -> tuple[GradSet, bool, float]:
    """Rescale ``g`` so its L2 norm does not exceed ``threshold``.

    Returns (gradients, applied, norm before clipping).  In ``per_tensor``
    mode each tensor is clipped separately and the returned norm is still the
    global one.
    """
    if not threshold > 0:
        raise ValueError("clip threshold must be > 0")
    for k, a in g.items():
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"non-finite gradient in {k}")
    norm = global_norm(g)
    if mode == "per_tensor":
        applied = False
        out = g.copy()
        for k, a in out.items():
            n = float(np.linalg.norm(a))
            if n > threshold:
                out[k] = a * (threshold / n)
                applied = True
        return out, applied, norm
    if norm <= threshold:
        return g, False, norm
    scale = threshold / norm
    out = GradSet(g.arch, {k: a * scale for k, a in g.items()}, g.output)
    return out, True, norm


# -- optimizers ----------------------------------------------------------------

def _check_update(params: ParamSet, grads: ParamSet) -> None:
    if not params.same_structure(grads):
        raise ValueError("parameter/gradient structure mismatch")


def _finite(name: str, a: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite update for {name}")
    return a


def sgd_step(params: ParamSet, grads: ParamSet, state: OptimizerState, config: TrainConfig):
    _check_update(params, grads)
    new = params.copy()
    for k in new:
        new[k] = _finite(k, params[k] - config.lr * grads[k])
    state.step += 1
    return new, state


def rmsprop_step(params: ParamSet, grads: ParamSet, state: OptimizerState, config: TrainConfig):
    _check_update(params, grads)
    new = params.copy()
    rho, eps = config.rho, config.eps
    for k in new:
        g = grads[k]
        v = rho * state.v[k] + (1.0 - rho) * g * g
        state.v[k] = v
        new[k] = _finite(k, params[k] - config.lr * g / (np.sqrt(v) + eps))
    state.step += 1
    return new, state


def adam_step(params: ParamSet, grads: ParamSet, state: OptimizerState, config: TrainConfig):
    _check_update(params, grads)
    new = params.copy()
    b1, b2, eps = config.beta1, config.beta2, config.eps
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k in new:
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        new[k] = _finite(k, params[k] - config.lr * (m / c1) / (np.sqrt(v / c2) + eps))
    return new, state


STEP_FNS = {"sgd": sgd_step, "rmsprop": rmsprop_step, "adam": adam_step}


def optimizer_step(params, grads, state, config):
    return STEP_FNS[state.kind](params, grads, state, config)


# -- regularizers and input path ----------------------------------------------

def layer_norm(z, gain, bias, eps: float = LN_EPS):
    return layer_norm_forward(z, gain, bias, eps)[0]


def layer_norm_forward(z, gain, bias, eps: float = LN_EPS):
    z = np.asarray(z, dtype=float)
    if z.shape[-1] < 1 or np.shape(gain) != z.shape[-1:] or np.shape(bias) != z.shape[-1:]:
        raise ValueError("layer_norm needs equal non-zero lengths")
    mu = z.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(z.var(axis=-1, keepdims=True) + eps)
    xhat = (z - mu) * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(dout, cache):
    """Returns (dz, dgain, dbias); gain/bias grads are summed over the batch."""
    xhat, inv, gain = cache
    dy = dout * gain
    dz = inv * (dy - dy.mean(axis=-1, keepdims=True)
                - xhat * (dy * xhat).mean(axis=-1, keepdims=True))
    batch_axes = tuple(range(dout.ndim - 1))
    return dz, (dout * xhat).sum(axis=batch_axes), dout.sum(axis=batch_axes)


def input_projection(p_proj: ParamSet, x) -> np.ndarray:
    w, b = p_proj["w_proj"], p_proj["b_proj"]
    if np.shape(x)[-1] != w.shape[1]:
        raise ValueError(f"input of length {np.shape(x)[-1]} vs projection {w.shape}")
    return tanh_act(x @ w.T + b)


def input_projection_backward(p_proj: ParamSet, x, out, dout):
    """Returns ({w_proj, b_proj} grads, dx)."""
    da = dout * (1.0 - out * out)
    if da.ndim == 1:
        dw, db = np.outer(da, x), da
    else:
        dw, db = da.T @ x, da.sum(axis=0)
    return {"w_proj": dw, "b_proj": db}, da @ p_proj["w_proj"]


def dropout_mask(rng: Rng, length, keep_p: float) -> np.ndarray:
    """Inverted-dropout mask: 0 w.p. 1-keep_p, else 1/keep_p.

    ``length`` may be an int or a shape tuple (batch, features).
    """
    if not 0.0 < keep_p <= 1.0:
        raise ValueError("keep_p must lie in (0, 1]")
    if keep_p == 1.0:
        return np.ones(length)
    return (rng.random(length) < keep_p) / keep_p


def normalize_loss(total: float, max_seq_len: int) -> float:
    if max_seq_len < 1:
        raise ValueError("max sequence length must be >= 1")
    return total / max_seq_len
