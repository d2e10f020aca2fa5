import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from seqgrad.data_tasks import (CharTask, CheckpointError, CopyTask, Vocab, load_checkpoint,
                                load_text_corpus, make_copy_task, one_hot, save_checkpoint,
                                shift_targets)
from seqgrad.linalg import Rng
from seqgrad.trainer import Trainer
from seqgrad.training import TrainConfig


def test_one_hot():
    assert one_hot(0, 3).tolist() == [1, 0, 0]
    assert one_hot(2, 3).tolist() == [0, 0, 1]
    for k in range(1, 6):
        for i in range(k):
            assert one_hot(i, k).sum() == 1
    for bad in (-1, 3):
        with pytest.raises(IndexError):
            one_hot(bad, 3)


# -- copy task ---------------------------------------------------------------------

def test_copy_task_T2_target_is_first_symbol():
    for s in make_copy_task(Rng(0), 2, 5, 50):
        (t, y), = s.targets
        assert t == 1 and np.argmax(y) == np.argmax(s.inputs[0][:5])


def test_copy_task_filler_steps():
    K = 4
    for s in make_copy_task(Rng(1), 9, K, 20):
        assert s.inputs[0, K] == 0 and s.inputs[0].sum() == 1
        assert np.all(s.inputs[1:, K] == 1) and np.all(s.inputs[1:].sum(axis=1) == 1)


def test_copy_task_class_uniformity():
    n, K = 10_000, 8
    samples = make_copy_task(Rng(2), 3, K, n)
    counts = np.bincount([int(np.argmax(s.targets[0][1])) for s in samples], minlength=K)
    sigma = math.sqrt(n * (1 / K) * (1 - 1 / K))
    assert np.all(np.abs(counts - n / K) < 3 * sigma)


def test_copy_task_deterministic_and_validated():
    a = make_copy_task(Rng(3), 6, 4, 10)
    b = make_copy_task(Rng(3), 6, 4, 10)
    assert all(np.array_equal(x.inputs, y.inputs) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        make_copy_task(Rng(0), 1, 4, 1)
    with pytest.raises(ValueError):
        make_copy_task(Rng(0), 5, 1, 1)


def test_copy_task_batch_labels():
    X, labels = CopyTask(6, 3).batch(Rng(0), 5)
    assert X.shape == (6, 5, 4) and labels.shape == (6, 5)
    assert np.all(labels[:-1] == -1)
    assert np.array_equal(labels[-1], np.argmax(X[0], axis=1))


# -- corpora ------------------------------------------------------------------------

def test_load_corpus_aba(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("aba")
    vocab, idx = load_text_corpus(f)
    assert vocab.symbols == ["a", "b"] and idx.tolist() == [0, 1, 0]
    x, y = shift_targets(idx)
    assert x.tolist() == [0, 1] and y.tolist() == [1, 0]


def test_load_corpus_errors(tmp_path):
    empty = tmp_path / "e.txt"
    empty.write_text("")
    with pytest.raises(ValueError):
        load_text_corpus(empty)
    with pytest.raises(OSError):
        load_text_corpus(tmp_path / "missing.txt")


@given(st.text(min_size=1, max_size=200))
def test_encode_decode_roundtrip(text):
    v = Vocab.from_text(text)
    assert v.decode(v.encode(text)) == text
    assert sorted(v.index.values()) == list(range(len(v)))


def test_vocab_rejects_unknown_and_duplicates():
    v = Vocab.from_text("abc")
    with pytest.raises(ValueError):
        v.encode("abz")
    with pytest.raises(ValueError):
        Vocab(["a", "a"])


def test_char_task_batch():
    v = Vocab.from_text("hello world")
    task = CharTask(v, v.encode("hello world"), 4)
    X, labels = task.batch(Rng(0), 3)
    assert X.shape == (4, 3, len(v))
    assert np.array_equal(np.argmax(X[1:], axis=-1), labels[:-1])
    with pytest.raises(ValueError):
        CharTask(v, v.encode("hi"), 4)


# -- checkpoints ------------------------------------------------------------------------

def small_trainer(arch="lstm", **kw):
    cfg = TrainConfig(hidden=6, batch_size=4, **kw)
    return Trainer(arch, CopyTask(5, 3), cfg)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    tr = small_trainer(optimizer="adam")
    tr.run(3)
    ck = tr.checkpoint(task_info={"task": "copy", "lag": 5, "vocab_size": 3})
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, ck)
    back = load_checkpoint(path)
    assert back.arch == "lstm" and back.dims == (4, 6, 3) and back.step == 3
    assert back.config == ck.config and back.rng_state == ck.rng_state
    assert back.task == ck.task
    for n in ck.params:
        assert back.params[n].tobytes() == ck.params[n].tobytes()
        assert back.opt_state.m[n].tobytes() == ck.opt_state.m[n].tobytes()
        assert back.opt_state.v[n].tobytes() == ck.opt_state.v[n].tobytes()
    assert back.opt_state.step == 3
    assert not [p for p in tmp_path.iterdir() if p.name.endswith(".tmp")]


def test_checkpoint_layout(tmp_path):
    tr = small_trainer("rnn", optimizer="sgd")
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tr.checkpoint())
    raw = path.read_bytes()
    magic, header, payload = raw.split(b"\n", 2)
    assert magic == b"SEQGRAD-CHECKPOINT 1"
    h = json.loads(header)
    assert h["payload_bytes"] == len(payload)
    first = h["tensors"][0]
    n = int(np.prod(first["shape"]))
    assert np.array_equal(np.frombuffer(payload[:8 * n], "<f8").reshape(first["shape"]),
                          tr.params[first["name"].split("/", 1)[1]])


@pytest.mark.parametrize("arch", ["rnn", "lstm", "gru"])
def test_resume_matches_unbroken_run(tmp_path, arch):
    full = small_trainer(arch, keep_prob=0.9)
    unbroken = [m.loss for m in full.run(20)]
    first = small_trainer(arch, keep_prob=0.9)
    losses = [m.loss for m in first.run(10)]
    save_checkpoint(tmp_path / "c", first.checkpoint())
    resumed = Trainer.from_checkpoint(load_checkpoint(tmp_path / "c"), CopyTask(5, 3))
    losses += [m.loss for m in resumed.run(10)]
    assert losses == unbroken


def corrupt(path, fn):
    raw = path.read_bytes()
    path.write_bytes(fn(raw))


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "c"
    save_checkpoint(path, small_trainer().checkpoint())
    corrupt(path, lambda raw: raw[:-8])
    with pytest.raises(CheckpointError, match="payload"):
        load_checkpoint(path)
    save_checkpoint(path, small_trainer().checkpoint())
    corrupt(path, lambda raw: raw + b"\0" * 8)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_version_and_magic_rejected(tmp_path):
    path = tmp_path / "c"
    save_checkpoint(path, small_trainer().checkpoint())
    corrupt(path, lambda raw: raw.replace(b"SEQGRAD-CHECKPOINT 1", b"SEQGRAD-CHECKPOINT 2", 1))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    corrupt(path, lambda raw: b"NOTACKPT 1\n" + raw.split(b"\n", 1)[1])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_header_dims_inconsistent_with_payload(tmp_path):
    path = tmp_path / "c"
    save_checkpoint(path, small_trainer().checkpoint())
    magic, header, payload = path.read_bytes().split(b"\n", 2)
    h = json.loads(header)
    h["dims"][1] = 7
    path.write_bytes(magic + b"\n" + json.dumps(h).encode() + b"\n" + payload)
    with pytest.raises(CheckpointError, match="hidden"):
        load_checkpoint(path)
