"""Command-line front end: train, eval, sample, gradcheck, flowtrace.

Exit codes: 0 ok, 1 gradient check failed, 2 usage/config error,
3 training diverged, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_tasks import (CharTask, CheckpointError, CopyTask, Vocab, load_checkpoint,
                         load_text_corpus, make_copy_task, save_checkpoint)
from .diagnostics import grad_check, gradient_flow
from .linalg import Rng
from .params import ARCHS, GATES
from .sequence import TOPOLOGIES
from .trainer import METRIC_COLUMNS, DivergenceError, Trainer, evaluate, generate
from .training import TrainConfig, init_params

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4
TASK_TOPOLOGY = {"copy": "many-to-one", "charlm": "many-to-many"}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    arch: str = "lstm"
    task: str = "copy"
    topology: str | None = None
    corpus: str | None = None
    lag: int = 20
    vocab_size: int = 8
    seq_len: int = 25
    checkpoint: str | None = None
    resume: str | None = None
    metrics: str | None = None
    log_every: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise UsageError(f"arch must be one of {ARCHS}")
        if self.task not in TASK_TOPOLOGY:
            raise UsageError(f"task must be one of {sorted(TASK_TOPOLOGY)}")
        if self.topology is None:
            self.topology = TASK_TOPOLOGY[self.task]
        if self.topology not in TOPOLOGIES:
            raise UsageError(f"topology must be one of {TOPOLOGIES}")
        if self.topology != TASK_TOPOLOGY[self.task]:
            raise UsageError(f"task {self.task} runs with topology {TASK_TOPOLOGY[self.task]}")
        if self.task == "charlm":
            if not self.corpus:
                raise UsageError("charlm requires a corpus path")
            if self.seq_len < 1:
                raise UsageError("seq_len must be >= 1")
        elif self.lag < 2 or self.vocab_size < 2:
            raise UsageError("copy task needs lag >= 2 and vocab_size >= 2")
        if self.log_every < 0:
            raise UsageError("log_every must be >= 0")
        try:
            self.train.validate()
        except ValueError as e:
            raise UsageError(str(e)) from None

    @classmethod
    def from_flat(cls, d: dict) -> "RunConfig":
        run_keys = {f.name for f in dataclasses.fields(cls)} - {"train"}
        train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(d) - run_keys - train_keys
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        try:
            train = TrainConfig(**{k: v for k, v in d.items() if k in train_keys})
        except (TypeError, ValueError) as e:
            raise UsageError(str(e)) from None
        return cls(train=train, **{k: v for k, v in d.items() if k in run_keys})


TRAIN_FLAGS = {
    # flag: (config key, type)
    "lr": float, "optimizer": str, "clip": float, "truncation": int, "keep_prob": float,
    "forget_bias": float, "init": str, "init_scale": float, "seed": int, "steps": int,
    "batch_size": int, "hidden": int, "layers": int, "input_projection": int,
}
RUN_FLAGS = {"arch": str, "task": str, "topology": str, "corpus": str, "lag": int,
             "vocab_size": int, "seq_len": int, "checkpoint": str, "resume": str,
             "metrics": str, "log_every": int}
BOOL_FLAGS = ("normalize_loss", "layer_norm", "trainable_init_state")


def _read_config_file(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    return data


def _build_run_config(args) -> RunConfig:
    flat = _read_config_file(args.config) if args.config else {}
    for key in list(TRAIN_FLAGS) + list(RUN_FLAGS):
        v = getattr(args, key, None)
        if v is not None:
            flat[key] = v
    for key in BOOL_FLAGS:
        if getattr(args, key, False):
            flat[key] = True
    if getattr(args, "no_clip", False):
        flat["clip"] = None
    rc = RunConfig.from_flat(flat)
    rc.validate()
    return rc


def _make_task(rc: RunConfig):
    if rc.task == "copy":
        return CopyTask(rc.lag, rc.vocab_size), None
    vocab, indices = load_text_corpus(rc.corpus)
    return CharTask(vocab, indices, rc.seq_len), vocab


def _task_info(rc: RunConfig) -> dict:
    if rc.task == "copy":
        return {"task": "copy", "lag": rc.lag, "vocab_size": rc.vocab_size}
    return {"task": "charlm", "seq_len": rc.seq_len, "corpus": rc.corpus}


def cmd_train(args) -> int:
    rc = _build_run_config(args)
    try:
        task, vocab = _make_task(rc)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if rc.resume:
        ck = load_checkpoint(rc.resume)
        if ck.arch != rc.arch:
            raise UsageError(f"checkpoint holds a {ck.arch} model, config asks for {rc.arch}")
        if vocab is not None and ck.vocab != vocab.symbols:
            raise UsageError("checkpoint vocabulary does not match the corpus")
        cfg = dataclasses.replace(ck.config, steps=rc.train.steps)
        try:
            trainer = Trainer.from_checkpoint(ck, task, cfg)
        except ValueError as e:
            raise UsageError(str(e)) from None
    else:
        trainer = Trainer(rc.arch, task, rc.train)

    fh = open(rc.metrics, "w", newline="") if rc.metrics else None
    writer = csv.writer(fh) if fh else None
    status = EXIT_OK
    try:
        if writer:
            writer.writerow(METRIC_COLUMNS)
        while trainer.step < trainer.config.steps:
            try:
                m = trainer.train_step()
            except DivergenceError as e:
                print(f"error: training diverged: {e}", file=sys.stderr)
                status = EXIT_DIVERGED
                break
            if writer:
                writer.writerow(m.row())
            if rc.log_every and m.step % rc.log_every == 0:
                print(f"step {m.step} loss {m.loss:.6f} norm_loss {m.norm_loss:.6f} "
                      f"grad_norm {m.grad_norm:.4f}", file=sys.stderr)
    finally:
        if fh:
            fh.close()
    if status == EXIT_OK and rc.checkpoint:
        save_checkpoint(rc.checkpoint, trainer.checkpoint(vocab.symbols if vocab else None,
                                                          _task_info(rc)))
    return status


def _task_from_checkpoint(ck, corpus: str | None):
    info = ck.task
    if info.get("task") == "copy":
        return CopyTask(info["lag"], info["vocab_size"])
    if info.get("task") == "charlm":
        path = corpus or info.get("corpus")
        if not path:
            raise UsageError("charlm evaluation needs --corpus")
        vocab, indices = load_text_corpus(path)
        if vocab.symbols != ck.vocab:
            raise UsageError("corpus vocabulary does not match the checkpoint")
        return CharTask(vocab, indices, info["seq_len"])
    raise UsageError("checkpoint does not record its task")


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    task = _task_from_checkpoint(ck, args.corpus)
    res = evaluate(ck.params, ck.layers, task, Rng(args.seed), args.samples)
    res["step"] = ck.step
    print(json.dumps(res))
    return EXIT_OK


def cmd_sample(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    if not ck.vocab:
        raise UsageError("sampling needs a character-model checkpoint")
    vocab = Vocab(ck.vocab)
    if len(vocab) != ck.dims[0] or len(vocab) != ck.dims[2]:
        raise UsageError("checkpoint vocabulary does not match its dims")
    if args.length < 0:
        raise UsageError("length must be >= 0")
    try:
        seed_idx = vocab.encode(args.seed_text)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if args.length > 0 and len(seed_idx) == 0:
        raise UsageError("seed text must be non-empty to generate")
    out = generate(ck.params, ck.layers, len(vocab), seed_idx, args.length,
                   greedy=args.mode == "greedy", rng=Rng(args.seed))
    print(args.seed_text + vocab.decode(out))
    return EXIT_OK


def _parse_dims(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must be M,N,K integers, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError("dims must be three positive integers M,N,K")
    return dims


def cmd_gradcheck(args) -> int:
    dims = list(args.dims)
    if args.hidden is not None:
        dims[1] = args.hidden
    cfg = None
    if args.layer_norm or args.layers > 1:
        cfg = TrainConfig(init="normal", init_scale=0.5, clip=None, layer_norm=args.layer_norm,
                          layers=args.layers)
    oracle = np.longdouble if args.oracle_precision == "extended" else None
    try:
        report = grad_check(args.arch, tuple(dims), args.T, args.topology, args.seed,
                            args.tolerance, args.epsilon, config=cfg, oracle_dtype=oracle)
    except ValueError as e:
        raise UsageError(str(e)) from None
    print(report)
    if args.csv:
        report.to_csv(args.csv)
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_flowtrace(args) -> int:
    flat = _read_config_file(args.config) if args.config else {}
    for key in ("seed", "hidden", "init", "init_scale", "forget_bias"):
        v = getattr(args, key)
        if v is not None:
            flat[key] = v
    rc = RunConfig.from_flat(flat)
    if args.arch is not None:
        rc.arch = args.arch
    if args.vocab_size is not None:
        rc.vocab_size = args.vocab_size
    if args.T < 2:
        raise UsageError("T must be >= 2")
    rc.lag = args.T
    rc.validate()
    cfg = dataclasses.replace(rc.train, layers=1, layer_norm=False, input_projection=None,
                              trainable_init_state=False)
    rng = Rng(cfg.seed)
    K = rc.vocab_size
    params = init_params(rc.arch, (K + 1, cfg.hidden, K), cfg, rng)
    if args.zero_recurrent:
        for _, ws, _ in GATES[rc.arch].values():
            params[ws][...] = 0.0
    sample = make_copy_task(rng, args.T, K, 1)[0]
    ft = gradient_flow(params, sample, args.T, config=cfg.to_dict())
    ft.to_csv(args.output)
    print(f"wrote {len(ft)} rows to {args.output}; |dL/dh_0| / |dL/dh_T-1| = {ft.ratio():.3e}")
    return EXIT_OK


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run-config file (flags override it)")
    for key, typ in {**RUN_FLAGS, **TRAIN_FLAGS}.items():
        kw = {"type": typ, "default": None}
        if key == "arch":
            kw["choices"] = ARCHS
        p.add_argument("--" + key.replace("_", "-"), dest=key, **kw)
    for key in BOOL_FLAGS:
        p.add_argument("--" + key.replace("_", "-"), dest=key, action="store_true")
    p.add_argument("--no-clip", action="store_true", help="disable gradient clipping")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqgrad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write per-step metrics")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mean per-target cross-entropy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=12345)
    p.add_argument("--corpus")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="generate text from a character-model checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed-text", required=True)
    p.add_argument("--length", type=int, default=100)
    p.add_argument("--mode", choices=("greedy", "stochastic"), default="greedy")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("gradcheck", help="compare BPTT with finite differences")
    p.add_argument("--arch", required=True, choices=ARCHS)
    p.add_argument("--dims", type=_parse_dims, default=(2, 3, 2), help="M,N,K")
    p.add_argument("--hidden", type=int, help="override N")
    p.add_argument("--T", type=int, default=4)
    p.add_argument("--topology", choices=TOPOLOGIES, default="many-to-one")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--layer-norm", action="store_true")
    p.add_argument("--oracle-precision", choices=("extended", "double"), default="extended")
    p.add_argument("--csv", help="write param_name,rel_error rows here")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("flowtrace", help="per-step |dL/dh_t| for a final-step loss")
    p.add_argument("--arch", choices=ARCHS)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--init", choices=("glorot", "uniform", "normal"))
    p.add_argument("--init-scale", dest="init_scale", type=float)
    p.add_argument("--forget-bias", dest="forget_bias", type=float)
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--zero-recurrent", action="store_true",
                   help="zero every recurrent weight matrix before tracing")
    p.set_defaults(func=cmd_flowtrace)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
