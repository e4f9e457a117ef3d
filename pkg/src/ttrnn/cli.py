"""Command-line entry point: ``ttrnn {params,bench,gradcheck,train,eval,inspect}``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import statistics
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .cells import (GATES, FusedTTCellParams, SeparateTTCellParams, gate_count, gate_matrix_mixture,
                    init_cell, run_sequence)
from .config import ConfigError, RunConfig
from .data import (DataFormatError, as_sequences, downsample, find_mnist, load_idx, permute_pixels,
                   synth_speakers, toy_sequences, train_val_split)
from .tensor_core import ShapeError
from .tt_format import balanced_factorization, param_count_dense, param_count_fused, param_count_separate
from .training import (AdamState, CheckpointError, TrainingDiverged, adam_step, build_model,
                       cross_entropy_logits, evaluate_classifier, evaluate_verifier, ge2e_loss,
                       load_checkpoint, train_classifier, train_verifier)

EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG, EXIT_IO = 0, 2, 3, 4
GRADCHECK_LIMIT = 1e-4

log = logging.getLogger("ttrnn")


# ---------------------------------------------------------------------------
# task data

def task_data(config: RunConfig) -> dict:
    """Build the train/val(/test) splits a config asks for."""
    if config.task == "mnist":
        files = find_mnist()
        full = load_idx(*files["train"], split="train")
        test = load_idx(*files["test"], split="test").subset(slice(0, config.n_test), "test")
        train, val = train_val_split(full.subset(slice(0, config.n_train + config.n_val)), config.n_val)
        out = {}
        for name, ds in (("train", train), ("val", val), ("test", test)):
            if config.downsample > 1:
                ds = downsample(ds, config.downsample)
            if config.permute_seed >= 0:
                ds = permute_pixels(ds, config.permute_seed)
            out[name] = as_sequences(ds, config.step)
        return out
    if config.task == "synth-speaker":
        train = synth_speakers(config.speakers, config.utterances, config.frames, config.input,
                               config.sep, config.noise, seed=config.seed)
        val = synth_speakers(config.val_speakers, config.utterances, config.frames, config.input,
                             config.sep, config.noise, seed=config.seed + 1000)
        return {"train": train, "val": val}
    n = config.n_train + config.n_val + config.n_test
    ds = toy_sequences(n, T=8, M=config.input, seed=config.seed)
    a, b = config.n_train, config.n_train + config.n_val
    return {"train": ds.subset(slice(0, a), "train"), "val": ds.subset(slice(a, b), "val"),
            "test": ds.subset(slice(b, n), "test")}


# ---------------------------------------------------------------------------
# parameter accounting

def head_size(config: RunConfig) -> int:
    if config.proj:
        out = config.proj
    elif config.task == "synth-speaker":
        out = config.emb
    else:
        out = config.classes
    extra = 2 if config.task == "synth-speaker" else 0
    return config.hidden * out + out + extra


def param_report(config: RunConfig) -> dict:
    """Formula and element counts for the recurrent cell and the full model."""
    g, D, M = gate_count(config.cell), config.hidden, config.input
    biases = g * D * (1 if config.cell == "lstm" else 2)
    dense_w = param_count_dense(g, D, M)
    if config.param == "dense":
        formula = dense_w
    else:
        dd = config.dims("row") or balanced_factorization(D, config.cores)
        md = config.dims("col") or balanced_factorization(M, config.cores)
        inner = [config.rank] * (config.cores - 1)
        if config.param == "tt-sep":
            formula = param_count_separate(g, dd, md, [1] + inner + [1])
        else:
            r0 = config.r0
            formula = param_count_fused(g, r0, dd, md, [r0] + inner + [1])
    cell = init_cell(config.cell, config.param, M, D, n_cores=config.cores, rank=config.rank,
                     rank0=config.r0, seed=0, row_dims=config.dims("row"), col_dims=config.dims("col"))
    actual = cell.num_weights()
    head = head_size(config)
    return {
        "cell": config.cell, "param": config.param, "hidden": D, "input": M,
        "formula_weights": formula, "actual_weights": actual, "dense_weights": dense_w,
        "weight_compression": dense_w / actual,
        "biases": biases, "head": head,
        "total": actual + biases + head, "dense_total": dense_w + biases + head,
        "total_compression": (dense_w + biases + head) / (actual + biases + head),
    }


def _table(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def _write(config: RunConfig, name: str, text: str):
    if config.out:
        out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)


def cmd_params(config: RunConfig, args) -> int:
    text = _table([param_report(config)])
    print(text, end="")
    _write(config, "params.csv", text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# benchmark

def _bench_one(config: RunConfig, repeats: int) -> dict:
    rng = np.random.default_rng(config.seed)
    model = build_model(config, rng)
    B, T = config.batch_size, config.frames
    x = rng.standard_normal((B, T, config.input))
    y = rng.integers(0, config.classes, size=B)

    def loss_of(m):
        if m.task == "verify":
            emb = m.forward(x)
            E = ag.value_of(emb).shape[1]
            return ge2e_loss(ag.reshape(emb, (2, B // 2, E)), *m.ge2e_head())
        return cross_entropy_logits(m.forward(x), y)

    train_ms, eval_ms = [], []
    adam = AdamState(lr=config.lr)
    for _ in range(repeats):
        t0 = time.perf_counter()
        tape = ag.Tape()
        loss = loss_of(model.with_tensors(tape.watch(model.tensors())))
        params, adam = adam_step(model.tensors(), tape.backward(loss), adam)
        model = model.with_tensors(params)
        train_ms.append((time.perf_counter() - t0) * 1e3)
        t0 = time.perf_counter()
        model.forward(x)
        eval_ms.append((time.perf_counter() - t0) * 1e3)

    def fmt(v):
        return (statistics.mean(v), statistics.stdev(v) if len(v) > 1 else None)

    (tm, ts), (em, es) = fmt(train_ms), fmt(eval_ms)
    return {"cell": config.cell, "param": config.param, "hidden": config.hidden, "input": config.input,
            "batch": B, "steps": T, "repeats": repeats,
            "train_ms_mean": tm, "train_ms_std": "" if ts is None else ts,
            "eval_ms_mean": em, "eval_ms_std": "" if es is None else es,
            "eval_flops": model.cell.flops_per_step(B) * T, "params": model.num_params()}


def cmd_bench(config: RunConfig, args) -> int:
    forms = args.forms.split(",") if args.forms else [config.param]
    rows = [_bench_one(config.replace(param=f), config.repeats) for f in forms]
    text = _table(rows)
    print(text, end="")
    _write(config, "bench.csv", text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradient check

def gradcheck_cell(config: RunConfig, steps: int = 3, batch: int = 2) -> float:
    cell = init_cell(config.cell, config.param, config.input, config.hidden, n_cores=config.cores,
                     rank=config.rank, rank0=config.r0, seed=config.seed,
                     row_dims=config.dims("row"), col_dims=config.dims("col"))
    rng = np.random.default_rng(config.seed + 1)
    x = rng.standard_normal((steps, batch, config.input))
    w = rng.standard_normal((batch, config.hidden))
    for k, v in cell.tensors.items():
        if k.startswith("b"):
            cell.tensors[k] = 0.1 * rng.standard_normal(v.shape)

    def f(tensors):
        _, state = run_sequence(cell.with_tensors(tensors), x)
        return ag.sum_(ag.mul(state.h, w))

    return ag.gradcheck(f, cell.tensors, seed=config.seed)


def cmd_gradcheck(config: RunConfig, args) -> int:
    if args.inject_bug:
        with ag.inject_fault(args.inject_bug):
            err = gradcheck_cell(config, args.steps)
    else:
        err = gradcheck_cell(config, args.steps)
    ok = err <= GRADCHECK_LIMIT
    print(f"gradcheck {config.cell}/{config.param} steps={args.steps} max_rel_err={err:.3e} "
          f"{'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VALIDATION


# ---------------------------------------------------------------------------
# train / eval / inspect

def cmd_train(config: RunConfig, args) -> int:
    if config.task == "toy":
        config = config.replace(classes=2)
    data = task_data(config)
    out = config.out or None
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and resume.meta["config_hash"] != config.hash():
        raise ConfigError("checkpoint was written under a different config")
    if config.task == "synth-speaker":
        result = train_verifier(config, data["train"], data["val"], out_dir=out, resume=resume)
        print(f"best val_eer={result.final['val_eer']!r} train_loss={result.final['train_loss']!r} "
              f"val_loss={result.final['val_loss']!r}")
    else:
        result = train_classifier(config, data["train"], data["val"], out_dir=out, resume=resume)
        line = f"best val_accuracy={result.final['val_accuracy']!r}"
        if "test" in data:
            line += f" test_accuracy={evaluate_classifier(result.model, data['test'])['accuracy']!r}"
        print(line)
    return EXIT_OK


def cmd_eval(config: RunConfig, args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    config = ckpt.config
    model = ckpt.model("best")
    data = task_data(config)
    metrics = {}
    for split in ("val", "test"):
        if split not in data:
            continue
        if model.task == "verify":
            m = evaluate_verifier(model, data[split], config.ge2e_speakers, config.ge2e_utterances)
        else:
            m = evaluate_classifier(model, data[split])
        metrics.update({f"{split}_{k}": v for k, v in m.items()})
    print(json.dumps(metrics, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(metrics, sort_keys=True) + "\n")
    return EXIT_OK


def inspect_text(ckpt) -> str:
    lines = []
    meta = ckpt.meta
    model = ckpt.model("best")
    cell = model.cell
    lines.append(f"config_hash {meta['config_hash']}  task {meta['task']}  epochs_run {meta['state']['epoch']}")
    lines.append(f"cell {cell.kind} form {cell.form} D={cell.hidden_size} M={cell.input_size} "
                 f"gates {','.join(GATES[cell.kind])} bias {meta['bias_convention']}")
    for name, v in sorted(model.tensors().items()):
        lines.append(f"  {name:<16} {tuple(np.shape(v))}")
    head = sum(int(np.size(v)) for v in model.head.values())
    lines.append(f"weights {cell.num_weights()} biases {cell.num_biases()} head {head} "
                 f"total {model.num_params()}")
    if isinstance(cell, FusedTTCellParams):
        for side in "WU":
            stack = cell.stack(side)
            lines.append(f"{side}: row_dims {list(stack.row_dims)} col_dims {list(stack.col_dims)} "
                         f"ranks {list(stack.ranks)}")
            V = np.asarray(stack.cores[0])[:, 0, 0, :]
            lines.append(f"  V ({V.shape[0]}x{V.shape[1]}):")
            for gate, row in zip(GATES[cell.kind], V):
                lines.append(f"    {gate}: " + " ".join(f"{v: .6f}" for v in row))
            norms = [np.linalg.norm(gate_matrix_mixture(stack, i)) for i in range(cell.g)]
            lines.append("  mixture norms: " + " ".join(f"{g}={n:.6f}" for g, n in zip(GATES[cell.kind], norms)))
    elif isinstance(cell, SeparateTTCellParams):
        for side in "WU":
            for i, gate in enumerate(GATES[cell.kind]):
                tt = cell.tt(side, i)
                lines.append(f"{side}.{gate}: row_dims {list(tt.row_dims)} col_dims {list(tt.col_dims)} "
                             f"ranks {list(tt.ranks)}")
    else:
        lines.append("no TT structure (dense cell)")
    return "\n".join(lines) + "\n"


def cmd_inspect(config: RunConfig, args) -> int:
    print(inspect_text(load_checkpoint(args.checkpoint)), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

_FLAGS = ("cell", "param", "hidden", "input", "cores", "rank", "rank0", "task", "seed", "epochs", "lr",
          "out", "repeats", "workers", "data_fraction", "proj", "classes", "emb", "batch_size", "patience",
          "shards", "row_dims", "col_dims", "frames", "speakers", "utterances", "n_train", "n_val",
          "n_test", "downsample", "step", "permute_seed", "steps_per_epoch")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("-v", "--verbose", action="store_true")
    types = {f.name: f.type for f in fields(RunConfig)}
    for name in _FLAGS:
        kind = {"int": int, "float": float}.get(types[name], str)
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttrnn", description="Tensor-train recurrent networks")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("params", help="parameter counts and compression")
    _common(p)
    p = sub.add_parser("bench", help="time training and evaluation steps")
    _common(p)
    p.add_argument("--forms", help="comma-separated parameterizations to compare")
    p = sub.add_parser("gradcheck", help="finite-difference gradient check of a cell")
    _common(p)
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--inject-bug", choices=("tanh", "sigmoid"), help="corrupt a backward rule")
    p = sub.add_parser("train", help="train a classifier or speaker encoder")
    _common(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    for name in ("eval", "inspect"):
        p = sub.add_parser(name, help=f"{name} a checkpoint")
        p.add_argument("checkpoint")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            p.add_argument("--out", help="write metrics JSON here")
    return parser


def config_from_args(args) -> RunConfig:
    overrides = {k: getattr(args, k) for k in _FLAGS if getattr(args, k, None) is not None}
    if args.config:
        config = RunConfig.from_file(args.config, overrides)
    else:
        config = RunConfig.from_mapping(overrides)
    config.warn_ignored()
    return config


COMMANDS = {"params": cmd_params, "bench": cmd_bench, "gradcheck": cmd_gradcheck, "train": cmd_train,
            "eval": cmd_eval, "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        config = config_from_args(args) if hasattr(args, "cell") else None
        return COMMANDS[args.command](config, args)
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError, DataFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingDiverged as exc:
        print(f"training diverged: {exc} {exc.diagnostics}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
