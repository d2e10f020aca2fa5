"""Synthetic copy task, character corpora and checkpoint files.

Checkpoint layout (version 1)::

    SEQGRAD-CHECKPOINT 1\\n
    <header: one line of JSON>\\n
    <payload: little-endian float64 values>

The header lists every tensor as ``{"name", "shape"}`` in payload order;
names are ``param/<name>``, ``adam_m/<name>`` or ``sq_avg/<name>``.  It also
carries the architecture, dims (M, N, K), layer count, the training config,
optimizer kind and step, generator state, training step, vocabulary (char
models) and ``payload_bytes``.  Loading rejects other versions, truncated or
oversized payloads, and tensors whose shapes disagree with the header dims.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linalg import Rng
from .params import GATES, ParamSet, split_layers
from .sequence import SequenceSample, Topology
from .training import OptimizerState, TrainConfig

MAGIC = "SEQGRAD-CHECKPOINT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def one_hot(index: int, K: int) -> np.ndarray:
    if not 0 <= index < K:
        raise IndexError(f"index {index} outside [0, {K})")
    v = np.zeros(K)
    v[index] = 1.0
    return v


@dataclass
class Vocab:
    symbols: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {s: i for i, s in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise ValueError("vocabulary symbols must be unique")

    def __len__(self) -> int:
        return len(self.symbols)

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        return cls(list(dict.fromkeys(text)))

    def encode(self, text: str) -> np.ndarray:
        try:
            return np.array([self.index[ch] for ch in text], dtype=np.int64)
        except KeyError as e:
            raise ValueError(f"symbol {e.args[0]!r} not in vocabulary") from None

    def decode(self, indices) -> str:
        return "".join(self.symbols[int(i)] for i in indices)


def load_text_corpus(path) -> tuple[Vocab, np.ndarray]:
    """Read a text file; vocabulary in first-appearance order plus the index sequence."""
    text = Path(path).read_text(encoding="utf-8")
    if not text:
        raise ValueError(f"corpus {path} is empty")
    vocab = Vocab.from_text(text)
    return vocab, vocab.encode(text)


def shift_targets(indices) -> tuple[np.ndarray, np.ndarray]:
    """Next-symbol pairs: inputs are indices[:-1], targets indices[1:]."""
    indices = np.asarray(indices)
    return indices[:-1], indices[1:]


# -- tasks --------------------------------------------------------------------------

@dataclass
class CopyTask:
    """Show a symbol at step 0, then filler; predict the symbol at the last step.

    Inputs are one-hot over K symbols plus one filler symbol (index K).
    """

    lag: int
    K: int

    def __post_init__(self):
        if self.lag < 2 or self.K < 2:
            raise ValueError("copy task needs lag >= 2 and K >= 2")

    @property
    def input_dim(self) -> int:
        return self.K + 1

    @property
    def output_dim(self) -> int:
        return self.K

    @property
    def filler(self) -> int:
        return self.K

    topology = Topology("many-to-one")

    def batch(self, rng: Rng, size: int) -> tuple[np.ndarray, np.ndarray]:
        """(X of shape (lag, size, K+1), labels of shape (lag, size), -1 = no loss)."""
        symbols = rng.integers(0, self.K, size)
        X = np.zeros((self.lag, size, self.K + 1))
        X[0, np.arange(size), symbols] = 1.0
        X[1:, :, self.filler] = 1.0
        labels = np.full((self.lag, size), -1, dtype=np.int64)
        labels[-1] = symbols
        return X, labels


def make_copy_task(rng: Rng, T: int, K: int, count: int) -> list[SequenceSample]:
    task = CopyTask(T, K)
    if count < 0:
        raise ValueError("count must be >= 0")
    X, labels = task.batch(rng, count)
    return [SequenceSample(X[:, i], [(T - 1, one_hot(int(labels[-1, i]), K))])
            for i in range(count)]


@dataclass
class CharTask:
    """Next-character prediction on windows drawn from a corpus."""

    vocab: Vocab
    indices: np.ndarray
    seq_len: int

    def __post_init__(self):
        if len(self.indices) < self.seq_len + 1:
            raise ValueError(f"corpus shorter than seq_len + 1 = {self.seq_len + 1}")

    @property
    def input_dim(self) -> int:
        return len(self.vocab)

    @property
    def output_dim(self) -> int:
        return len(self.vocab)

    topology = Topology("many-to-many")

    def batch(self, rng: Rng, size: int) -> tuple[np.ndarray, np.ndarray]:
        K, T = len(self.vocab), self.seq_len
        starts = rng.integers(0, len(self.indices) - T, size)
        win = np.stack([self.indices[s:s + T + 1] for s in starts], axis=1)  # (T+1, B)
        inp, labels = win[:-1], win[1:]
        X = np.zeros((T, size, K))
        X[np.arange(T)[:, None], np.arange(size)[None, :], inp] = 1.0
        return X, labels.astype(np.int64)


def batch_sample(X: np.ndarray, labels: np.ndarray, K: int) -> SequenceSample:
    """Batched SequenceSample with one-hot targets at the steps that carry labels."""
    eye = np.eye(K)
    targets = [(t, eye[labels[t]]) for t in range(labels.shape[0]) if np.all(labels[t] >= 0)]
    return SequenceSample(X, targets)


# -- checkpoints ----------------------------------------------------------------------

@dataclass
class Checkpoint:
    arch: str
    dims: tuple[int, int, int]
    layers: int
    params: ParamSet
    opt_state: OptimizerState
    config: TrainConfig
    rng_state: dict
    step: int
    vocab: list[str] | None = None
    task: dict = field(default_factory=dict)


def _tensor_list(ck: Checkpoint):
    out = [(f"param/{k}", v) for k, v in ck.params.items()]
    out += [(f"adam_m/{k}", v) for k, v in ck.opt_state.m.items()]
    out += [(f"sq_avg/{k}", v) for k, v in ck.opt_state.v.items()]
    return out


def save_checkpoint(path, ck: Checkpoint) -> None:
    tensors = _tensor_list(ck)
    payload = b"".join(np.asarray(v, dtype="<f8").tobytes() for _, v in tensors)
    header = {
        "version": FORMAT_VERSION,
        "arch": ck.arch,
        "dims": list(ck.dims),
        "layers": ck.layers,
        "output": ck.params.output,
        "config": ck.config.to_dict(),
        "optimizer": {"kind": ck.opt_state.kind, "step": ck.opt_state.step},
        "rng_state": ck.rng_state,
        "step": ck.step,
        "vocab": ck.vocab,
        "task": ck.task,
        "tensors": [{"name": n, "shape": list(v.shape)} for n, v in tensors],
        "payload_bytes": len(payload),
    }
    path = Path(path)
    data = f"{MAGIC} {FORMAT_VERSION}\n".encode() + json.dumps(header).encode() + b"\n" + payload
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _check_dims(arch: str, dims, layers: int, params: ParamSet) -> None:
    m, n, k = dims
    stack = split_layers(params, layers)
    for i, p in enumerate(stack):
        for wi, ws, b in GATES[arch].values():
            if p[ws].shape != (n, n) or p[b].shape != (n,) or p[wi].shape[0] != n:
                raise CheckpointError(f"layer {i} tensors disagree with hidden dim {n}")
        if p.input_dim != (m if i == 0 else n):
            raise CheckpointError(f"layer {i} input width disagrees with dims {dims}")
    if stack[-1].output_dim != k:
        raise CheckpointError(f"output head disagrees with K = {k}")


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    try:
        first, rest = raw.split(b"\n", 1)
        magic, version = first.decode().split(" ")
        header_line, payload = rest.split(b"\n", 1)
    except ValueError:
        raise CheckpointError(f"{path}: not a checkpoint file") from None
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != str(FORMAT_VERSION):
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: header version mismatch")
    specs = header["tensors"]
    expected = sum(int(np.prod(s["shape"], dtype=np.int64)) for s in specs) * 8
    if len(payload) != expected or header["payload_bytes"] != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    values = np.frombuffer(payload, dtype="<f8")
    config = TrainConfig.from_dict(header["config"])
    dtype = np.dtype(config.dtype)
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "sq_avg": {}}
    off = 0
    for s in specs:
        size = int(np.prod(s["shape"], dtype=np.int64))
        group, name = s["name"].split("/", 1)
        if group not in groups:
            raise CheckpointError(f"{path}: unknown tensor group {group!r}")
        groups[group][name] = values[off:off + size].reshape(s["shape"]).astype(dtype)
        off += size
    params = ParamSet(header["arch"], groups["param"], header["output"])
    dims = tuple(header["dims"])
    _check_dims(header["arch"], dims, header["layers"], params)
    for g in ("adam_m", "sq_avg"):
        for k, v in groups[g].items():
            if k not in params or params[k].shape != v.shape:
                raise CheckpointError(f"{path}: optimizer tensor {k} does not match parameters")
    opt = OptimizerState(header["optimizer"]["kind"], header["optimizer"]["step"],
                         groups["adam_m"], groups["sq_avg"])
    return Checkpoint(header["arch"], dims, header["layers"], params, opt, config,
                      header["rng_state"], header["step"], header.get("vocab"), header.get("task") or {})
