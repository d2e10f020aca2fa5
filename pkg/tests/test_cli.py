import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from seqgrad.cli import main
from seqgrad.data_tasks import load_checkpoint
from seqgrad.linalg import Rng
from seqgrad.training import TrainConfig, init_params

HEADER = ["step", "loss", "norm_loss", "grad_norm", "clipped"]
CORPUS = "the cat sat on the mat. the dog sat on the log. " * 4


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def corpus(tmp_path):
    f = tmp_path / "corpus.txt"
    f.write_text(CORPUS)
    return str(f)


@pytest.fixture
def charlm(tmp_path, corpus):
    ck = tmp_path / "lm.ckpt"
    assert main(["train", "--task", "charlm", "--corpus", corpus, "--arch", "lstm",
                 "--seq-len", "12", "--hidden", "16", "--steps", "60", "--lr", "0.01",
                 "--checkpoint", str(ck)]) == 0
    return str(ck)


# -- train ------------------------------------------------------------------------------

def test_zero_budget_writes_header_and_initial_checkpoint(tmp_path):
    m, ck = tmp_path / "m.csv", tmp_path / "c.ckpt"
    assert main(["train", "--arch", "lstm", "--lag", "6", "--vocab-size", "4", "--hidden", "5",
                 "--steps", "0", "--seed", "3", "--metrics", str(m), "--checkpoint", str(ck)]) == 0
    assert rows(m) == [HEADER]
    saved = load_checkpoint(ck)
    cfg = TrainConfig(hidden=5, steps=0, seed=3)
    expect = init_params("lstm", (5, 5, 4), cfg, Rng(3))
    assert saved.step == 0
    assert all(np.array_equal(saved.params[n], expect[n]) for n in expect)


def test_same_seed_byte_identical_metrics(tmp_path):
    args = ["train", "--arch", "gru", "--lag", "6", "--hidden", "8", "--steps", "15",
            "--keep-prob", "0.8"]
    assert main(args + ["--metrics", str(tmp_path / "a.csv")]) == 0
    assert main(args + ["--metrics", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_metrics_schema_and_order(tmp_path):
    m = tmp_path / "m.csv"
    assert main(["train", "--arch", "rnn", "--lag", "4", "--steps", "12", "--clip", "0.01",
                 "--metrics", str(m)]) == 0
    r = rows(m)
    assert r[0] == HEADER
    assert [int(x[0]) for x in r[1:]] == list(range(1, 13))
    for step, loss, norm_loss, gnorm, clipped in r[1:]:
        assert float(norm_loss) == pytest.approx(float(loss) / 4)
        assert clipped in ("0", "1")
    assert any(x[4] == "1" for x in r[1:])


def test_gru_copy_lag5_loss_decreases(tmp_path):
    m = tmp_path / "m.csv"
    assert main(["train", "--arch", "gru", "--task", "copy", "--lag", "5", "--steps", "2000",
                 "--metrics", str(m)]) == 0
    r = rows(m)[1:]
    first, last = float(r[0][2]), float(r[-1][2])
    assert last < first
    assert last < 0.01  # first green run ended at 2.1e-4 from 0.43


def test_resume_via_cli_matches_unbroken(tmp_path):
    base = ["train", "--arch", "lstm", "--lag", "7", "--hidden", "8", "--keep-prob", "0.9"]
    assert main(base + ["--steps", "16", "--metrics", str(tmp_path / "full.csv")]) == 0
    assert main(base + ["--steps", "8", "--metrics", str(tmp_path / "a.csv"),
                        "--checkpoint", str(tmp_path / "c.ckpt")]) == 0
    assert main(base + ["--steps", "16", "--metrics", str(tmp_path / "b.csv"),
                        "--resume", str(tmp_path / "c.ckpt")]) == 0
    assert rows(tmp_path / "a.csv") + rows(tmp_path / "b.csv")[1:] == rows(tmp_path / "full.csv")


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"arch": "rnn", "lag": 4, "hidden": 6, "steps": 3, "seed": 1}))
    m, ck = tmp_path / "m.csv", tmp_path / "c.ckpt"
    assert main(["train", "--config", str(cfg), "--steps", "5", "--metrics", str(m),
                 "--checkpoint", str(ck)]) == 0
    assert len(rows(m)) == 6
    saved = load_checkpoint(ck)
    assert saved.arch == "rnn" and saved.dims == (9, 6, 8) and saved.config.steps == 5


@pytest.mark.parametrize("content", ['{"learning_rate": 1}', "not json", '{"task": "charlm"}',
                                     '{"lr": -1}', '{"task": "copy", "topology": "one-to-many"}'])
def test_invalid_config_exits_2(tmp_path, capsys, content):
    cfg = tmp_path / "run.json"
    cfg.write_text(content)
    m = tmp_path / "m.csv"
    assert main(["train", "--config", str(cfg), "--metrics", str(m)]) == 2
    assert "error" in capsys.readouterr().err
    assert not m.exists()  # nothing computed or written


def test_missing_config_file_exits_4(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 4


def test_unwritable_metrics_exits_4(tmp_path):
    assert main(["train", "--steps", "1", "--metrics", str(tmp_path / "no" / "m.csv")]) == 4


def test_divergence_exits_3(tmp_path, capsys):
    m = tmp_path / "m.csv"
    code = main(["train", "--arch", "rnn", "--lag", "4", "--optimizer", "sgd", "--lr", "1e308",
                 "--no-clip", "--steps", "5", "--metrics", str(m)])
    assert code == 3
    assert "diverged" in capsys.readouterr().err


def test_invalid_arch_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--arch", "transformer"])
    assert e.value.code == 2
    assert "usage" in capsys.readouterr().err


# -- gradcheck ---------------------------------------------------------------------------

def test_gradcheck_lstm_passes(capsys):
    assert main(["gradcheck", "--arch", "lstm", "--hidden", "3", "--T", "4",
                 "--tolerance", "1e-6"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_gradcheck_zero_tolerance_fails_with_report(capsys, tmp_path):
    out = tmp_path / "gc.csv"
    assert main(["gradcheck", "--arch", "gru", "--tolerance", "0", "--csv", str(out)]) == 1
    text = capsys.readouterr().out
    assert "FAIL" in text and "w_zi" in text
    assert rows(out)[0] == ["param_name", "rel_error"]


def test_gradcheck_invalid_arch_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["gradcheck", "--arch", "elman"])
    assert e.value.code == 2
    assert "usage" in capsys.readouterr().err


# -- flowtrace ---------------------------------------------------------------------------

def test_flowtrace_zero_recurrence(tmp_path):
    out = tmp_path / "f.csv"
    assert main(["flowtrace", "--arch", "rnn", "--T", "9", "--output", str(out),
                 "--zero-recurrent"]) == 0
    r = rows(out)
    assert r[0] == ["t", "grad_norm"] and len(r) == 10
    assert all(float(x[1]) == 0.0 for x in r[1:-1]) and float(r[-1][1]) > 0


@pytest.mark.parametrize("T", [2, 17, 50])
def test_flowtrace_row_count(tmp_path, T):
    out = tmp_path / "f.csv"
    assert main(["flowtrace", "--arch", "gru", "--T", str(T), "--output", str(out)]) == 0
    assert [int(x[0]) for x in rows(out)[1:]] == list(range(T))


@pytest.mark.parametrize("seed", range(3))
def test_flowtrace_lstm_keeps_more_gradient_than_rnn(tmp_path, seed):
    norms = {}
    for arch in ("rnn", "lstm"):
        out = tmp_path / f"{arch}.csv"
        assert main(["flowtrace", "--arch", arch, "--T", "50", "--seed", str(seed),
                     "--hidden", "16", "--init", "uniform", "--init-scale", "0.1",
                     "--forget-bias", "1", "--output", str(out)]) == 0
        norms[arch] = float(rows(out)[1][1])
    assert norms["lstm"] > norms["rnn"]


def test_flowtrace_io_error(tmp_path):
    assert main(["flowtrace", "--arch", "rnn", "--T", "5",
                 "--output", str(tmp_path / "missing" / "f.csv")]) == 4


# -- sample and eval ------------------------------------------------------------------------

def test_sample_length_zero_echoes_seed(charlm, capsys):
    assert main(["sample", "--checkpoint", charlm, "--seed-text", "the c", "--length", "0"]) == 0
    assert capsys.readouterr().out == "the c\n"


@pytest.mark.parametrize("mode", ["greedy", "stochastic"])
def test_sample_deterministic(charlm, capsys, mode):
    args = ["sample", "--checkpoint", charlm, "--seed-text", "the ", "--length", "40",
            "--mode", mode, "--seed", "7"]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    assert capsys.readouterr().out == first
    assert first.startswith("the ") and len(first) == len("the ") + 40 + 1
    assert set(first.strip()) <= set(CORPUS)


def test_sample_rejects_foreign_symbols_and_non_charlm(tmp_path, charlm):
    assert main(["sample", "--checkpoint", charlm, "--seed-text", "xyz", "--length", "3"]) == 2
    ck = tmp_path / "copy.ckpt"
    assert main(["train", "--steps", "0", "--checkpoint", str(ck)]) == 0
    assert main(["sample", "--checkpoint", str(ck), "--seed-text", "a"]) == 2


def test_sample_missing_checkpoint_exits_4(tmp_path):
    assert main(["sample", "--checkpoint", str(tmp_path / "x"), "--seed-text", "a"]) == 4


def test_eval_prints_json(tmp_path, capsys, charlm):
    assert main(["eval", "--checkpoint", charlm, "--samples", "20"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["targets"] == 20 * 12 and res["cross_entropy"] > 0 and 0 <= res["accuracy"] <= 1
    ck = tmp_path / "c.ckpt"
    assert main(["train", "--lag", "5", "--steps", "3", "--checkpoint", str(ck)]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ck), "--samples", "50"]) == 0
    assert json.loads(capsys.readouterr().out)["targets"] == 50


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "seqgrad", "gradcheck", "--arch", "rnn"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "PASS" in out.stdout
