"""Training loop: init, forward, loss, BPTT, clipping, optimizer step."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .data_tasks import Checkpoint, batch_sample
from .linalg import Rng
from . import cells
from .params import GradSet, ParamSet, split_layers
from .sequence import Dropout, _initial_state, model_backward, model_forward, total_loss
from .training import (OptimizerState, TrainConfig, clip_gradients, global_norm, init_params,
                       input_projection, optimizer_step)

METRIC_COLUMNS = ("step", "loss", "norm_loss", "grad_norm", "clipped")


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class StepMetrics:
    step: int
    loss: float
    norm_loss: float
    grad_norm: float
    clipped: bool

    def row(self) -> list[str]:
        return [str(self.step), repr(self.loss), repr(self.norm_loss), repr(self.grad_norm),
                str(int(self.clipped))]


def batch_loss_and_grads(params: ParamSet, config: TrainConfig, task, X, labels,
                         rng: Rng, use_kernel: bool = True) -> tuple[float, GradSet]:
    """Summed loss and gradient for one batch, via the fused kernel when eligible."""
    k = config.truncation
    if use_kernel and kernels.eligible(params, config.layers, labels, k, config.keep_prob):
        return kernels.seq_grad(params, X, labels, k)
    sample = batch_sample(X, labels, task.output_dim)
    dropout = Dropout(rng, config.keep_prob) if config.keep_prob < 1.0 else None
    outputs, traces = model_forward(params, config.layers, sample, task.topology, dropout)
    loss = float(total_loss(sample, outputs, task.topology))
    grads = model_backward(params, config.layers, traces, sample, task.topology, k=k)
    return loss, grads


class Trainer:
    """Owns parameters, optimizer state, the random stream and the step counter.

    All randomness (initialization, batches, dropout masks) is drawn from one
    generator seeded by ``config.seed``.
    """

    def __init__(self, arch: str, task, config: TrainConfig, use_kernel: bool = True):
        self.arch = arch
        self.task = task
        self.config = config
        self.use_kernel = use_kernel
        self.rng = Rng(config.seed)
        self.dims = (task.input_dim, config.hidden, task.output_dim)
        self.params = init_params(arch, self.dims, config, self.rng)
        self.opt_state = OptimizerState.fresh(config.optimizer, self.params)
        self.step = 0

    def train_step(self) -> StepMetrics:
        cfg = self.config
        X, labels = self.task.batch(self.rng, cfg.batch_size)
        loss_sum, grads = batch_loss_and_grads(self.params, cfg, self.task, X, labels, self.rng,
                                               self.use_kernel)
        T = X.shape[0]
        loss = loss_sum / cfg.batch_size
        norm_loss = loss / T
        scale = 1.0 / cfg.batch_size
        if cfg.normalize_loss:
            scale /= T
        for name in grads:
            grads[name] *= scale
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {self.step + 1}")
        try:
            if cfg.clip is not None:
                grads, clipped, gnorm = clip_gradients(grads, cfg.clip, cfg.clip_mode)
            else:
                gnorm, clipped = global_norm(grads), False
                if not math.isfinite(gnorm):
                    raise FloatingPointError("non-finite gradient")
            self.params, self.opt_state = optimizer_step(self.params, grads, self.opt_state, cfg)
        except FloatingPointError as e:
            raise DivergenceError(f"step {self.step + 1}: {e}") from e
        self.step += 1
        return StepMetrics(self.step, loss, norm_loss, gnorm, clipped)

    def run(self, steps: int, on_step=None) -> list[StepMetrics]:
        out = []
        for _ in range(steps):
            m = self.train_step()
            out.append(m)
            if on_step is not None:
                on_step(m)
        return out

    def checkpoint(self, vocab: list[str] | None = None, task_info: dict | None = None) -> Checkpoint:
        return Checkpoint(self.arch, self.dims, self.config.layers, self.params.copy(),
                          OptimizerState(self.opt_state.kind, self.opt_state.step,
                                         {k: v.copy() for k, v in self.opt_state.m.items()},
                                         {k: v.copy() for k, v in self.opt_state.v.items()}),
                          self.config, self.rng.get_state(), self.step, vocab, task_info or {})

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint, task, config: TrainConfig | None = None,
                        use_kernel: bool = True) -> "Trainer":
        tr = cls.__new__(cls)
        tr.arch, tr.task, tr.use_kernel = ck.arch, task, use_kernel
        tr.config = config or ck.config
        tr.dims = tuple(ck.dims)
        if tr.dims != (task.input_dim, tr.config.hidden, task.output_dim):
            raise ValueError(f"checkpoint dims {tr.dims} do not fit the task")
        tr.params = ck.params.copy()
        tr.opt_state = ck.opt_state
        tr.rng = Rng(ck.config.seed)
        tr.rng.set_state(ck.rng_state)
        tr.step = ck.step
        return tr


def evaluate(params: ParamSet, layers: int, task, rng: Rng, count: int, batch: int = 256) -> dict:
    """Mean per-target cross-entropy and accuracy on ``count`` fresh samples."""
    total, n_targets, correct = 0.0, 0, 0
    done = 0
    while done < count:
        size = min(batch, count - done)
        X, labels = task.batch(rng, size)
        sample = batch_sample(X, labels, task.output_dim)
        outputs, _ = model_forward(params, layers, sample, task.topology)
        total += float(total_loss(sample, outputs, task.topology))
        for t, y in sample.targets:
            n_targets += y.shape[0]
            correct += int(np.sum(np.argmax(outputs[t], axis=-1) == np.argmax(y, axis=-1)))
        done += size
    return {"cross_entropy": total / n_targets, "accuracy": correct / n_targets,
            "targets": n_targets}


def generate(params: ParamSet, layers: int, K: int, seed: np.ndarray, length: int,
             greedy: bool = True, rng: Rng | None = None) -> list[int]:
    """Feed ``seed`` symbol indices, then ``length`` symbols of the model's own output.

    Greedy mode takes the argmax (ties go to the lowest index); otherwise each
    symbol is a categorical draw from ``rng``.
    """
    if length == 0:
        return []
    if not greedy and rng is None:
        raise ValueError("stochastic sampling needs an rng")
    stack = split_layers(params, layers)
    states = [_initial_state(p, (), None, None) for p in stack]
    eye = np.eye(K)

    def advance(sym: int) -> np.ndarray:
        x = eye[sym]
        for i, p in enumerate(stack):
            if "w_proj" in p:
                x = input_projection(p, x)
            states[i], _ = cells.step(p, x, states[i])
            x = states[i].h
        return cells.output_head(stack[-1], x)

    for sym in seed:
        probs = advance(int(sym))
    out = []
    for _ in range(length):
        if greedy:
            sym = int(np.argmax(probs))
        else:
            sym = int(rng.choice(K, p=probs / probs.sum()))
        out.append(sym)
        probs = advance(sym)
    return out
