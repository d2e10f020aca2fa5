"""Finite-difference gradient oracle and gradient-flow measurements."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .linalg import Rng, ShapeError
from .params import ARCHS, GradSet, ParamSet
from .sequence import SequenceSample, Topology, backward, model_backward, model_forward, model_loss, unroll_forward
from .training import TrainConfig, init_params

REL_FLOOR = 1e-8


def finite_diff_grad(loss_fn: Callable[[ParamSet], float], params: ParamSet,
                     epsilon: float = 1e-5, dtype=None) -> GradSet:
    """Central differences (L(p + eps e) - L(p - eps e)) / (2 eps) for every scalar.

    With ``dtype`` (e.g. ``np.longdouble``) the loss is evaluated on a copy of
    the parameters held in that precision, which keeps evaluation roundoff far
    below the difference being measured.  The divisor is the step actually
    taken after rounding the perturbed values.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    work = params if dtype is None else ParamSet(
        params.arch, {k: v.astype(dtype) for k, v in params.items()}, params.output)
    grad = params.zeros_like()
    for name, a in work.items():
        flat = a.reshape(-1)
        out = grad[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            plus = flat[i]
            lp = loss_fn(work)
            flat[i] = orig - epsilon
            minus = flat[i]
            lm = loss_fn(work)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}[{i}]")
            out[i] = (lp - lm) / (plus - minus)
    return grad


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    n = np.asarray(n, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)


@dataclass
class GradCheckReport:
    arch: str
    dims: tuple[int, int, int]
    T: int
    topology: str
    seed: int
    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def global_max(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def worst(self) -> str | None:
        return max(self.per_param, key=self.per_param.get) if self.per_param else None

    @property
    def passed(self) -> bool:
        return self.global_max < self.tolerance

    def __str__(self) -> str:
        lines = [f"gradcheck arch={self.arch} dims(M,N,K)={self.dims} T={self.T} "
                 f"topology={self.topology} seed={self.seed}"]
        for name, err in self.per_param.items():
            lines.append(f"  {name:<12} max_rel_error={err:.3e}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"  global max {self.global_max:.3e} (worst: {self.worst}) "
                     f"tolerance {self.tolerance:g} -> {verdict}")
        return "\n".join(lines)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["param_name", "rel_error"])
            for name, err in self.per_param.items():
                w.writerow([name, repr(err)])


def random_instance(arch: str, dims, T: int, topology: Topology, seed: int,
                    config: TrainConfig | None = None):
    """Random parameters and a random sample with targets at every step."""
    m, n, k = dims
    config = config or TrainConfig(init="normal", init_scale=0.5, clip=None)
    rng = Rng(seed)
    params = init_params(arch, dims, config, rng)
    # Non-zero biases so no gradient vanishes by symmetry.
    for name, a in params.items():
        if a.ndim == 1 and not name.startswith("ln_g"):
            a += rng.normal(0.0, 0.3, a.shape)
    inputs = rng.normal(0.0, 1.0, (T, m))
    labels = rng.integers(0, k, T)
    targets = [(t, np.eye(k)[labels[t]]) for t in range(T)]
    return params, SequenceSample(inputs, targets)


def grad_check(arch: str, dims, T: int, topology: Topology | str, seed: int,
               tolerance: float = 1e-6, epsilon: float = 1e-5,
               config: TrainConfig | None = None, oracle_dtype=np.longdouble,
               corrupt: tuple[str, int, float] | None = None) -> GradCheckReport:
    """Compare analytic BPTT gradients with central finite differences.

    The analytic side runs in float64.  The oracle evaluates the loss in
    ``oracle_dtype`` (extended precision by default; pass ``None`` for plain
    float64, whose roundoff limits agreement on gradient entries below ~1e-5).
    ``corrupt=(name, flat_index, delta)`` adds ``delta`` to one analytic entry
    before comparison (fault injection).
    """
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}")
    if isinstance(topology, str):
        topology = Topology(topology)
    layers = config.layers if config is not None else 1
    params, sample = random_instance(arch, dims, T, topology, seed, config)
    if params.size() > 5000:
        raise ValueError("too many parameters for the finite-difference oracle")
    _, traces = model_forward(params, layers, sample, topology)
    analytic = model_backward(params, layers, traces, sample, topology)
    if corrupt is not None:
        name, idx, delta = corrupt
        analytic[name].reshape(-1)[idx] += delta
    numeric = finite_diff_grad(lambda p: model_loss(p, layers, sample, topology), params,
                               epsilon, dtype=oracle_dtype)
    report = GradCheckReport(arch, tuple(dims), T, topology.kind, seed, tolerance)
    for name in params:
        report.per_param[name] = float(relative_error(analytic[name], numeric[name]).max())
    return report


@dataclass
class FlowTrace:
    """Per-step norms of dL/dh_t for a loss placed at the final step only.

    For the LSTM, ``cell_norms`` additionally holds the norms of the total
    derivative dL/dc_t.
    """

    arch: str
    norms: list[float]
    config: dict = field(default_factory=dict)
    cell_norms: list[float] | None = None

    def __len__(self) -> int:
        return len(self.norms)

    def ratio(self) -> float:
        """||dL/dh_0|| / ||dL/dh_{T-1}||."""
        return self.norms[0] / self.norms[-1] if self.norms[-1] > 0 else 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "grad_norm"])
            for t, v in enumerate(self.norms):
                w.writerow([t, repr(v)])


def gradient_flow(params: ParamSet, sample: SequenceSample, T: int | None = None,
                  config: dict | None = None) -> FlowTrace:
    """Backpropagate a final-step loss and record how its gradient decays in time."""
    if T is not None and T != sample.T:
        raise ShapeError(f"sample has length {sample.T}, expected {T}")
    topology = Topology("many-to-one")
    _, trace = unroll_forward(params, sample, topology)
    res = backward(params, trace, sample)
    return FlowTrace(params.arch, res.dh_norms, dict(config or {}), res.dc_norms)


def recurrent_spectral_radius(w_rec, iterations: int = 100) -> float:
    """Dominant singular value of ``w_rec`` by power iteration on W^T W.

    Starts from the normalized all-ones vector, so the result is deterministic.
    """
    w = np.asarray(w_rec, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"expected a square matrix, got {w.shape}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    v = np.ones(w.shape[1]) / math.sqrt(w.shape[1])
    sigma = 0.0
    for _ in range(iterations):
        u = w.T @ (w @ v)
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        v = u / nu
        sigma = float(np.linalg.norm(w @ v))
    return sigma
