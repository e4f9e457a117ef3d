"""Models, losses, Adam, training loops and checkpoints."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .cells import GATES, CellParams, cell_from_meta, init_cell, run_sequence
from .config import RunConfig
from .data import SequenceDataset, SpeakerDataset, batches, fingerprint, speaker_batch
from .tt_format import TTMatrix

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TTRNNCKP"
CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ("epoch", "step", "split", "loss", "accuracy_or_eer",
                  "grad_norm_p50", "grad_norm_p95", "lr", "wall_ms")


class TrainingDiverged(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# losses and metrics

def cross_entropy_logits(logits, labels):
    """Mean cross-entropy of integer labels; max-subtracted for stability."""
    return ag.softmax_cross_entropy(logits, labels)


@dataclass
class GE2EHead:
    w: float = 10.0
    b: float = -5.0

    def clamp(self) -> "GE2EHead":
        return GE2EHead(max(self.w, 1e-6), self.b)


def similarity_matrix(embeddings, w=1.0, b=0.0):
    """Scaled cosine similarities ``S[j*P + i, k]`` of utterances to speaker centroids.

    ``embeddings`` has shape ``[N, P, E]``. Each utterance embedding is
    L2-normalized first; a centroid averages all ``P`` normalized embeddings
    of its speaker, including the utterance being scored.
    """
    ev = ag.value_of(embeddings)
    if ev.ndim != 3:
        raise ValueError("embeddings must be [speakers, utterances, dim]")
    N, P, E = ev.shape
    e = ag.l2_normalize(ag.reshape(embeddings, (N * P, E)), axis=1)
    centroids = ag.mean(ag.reshape(e, (N, P, E)), axis=1)
    c = ag.l2_normalize(centroids, axis=1)
    cos = ag.contract(e, c, [1], [1])
    return ag.add(ag.mul(cos, w), b)


def ge2e_loss(embeddings, w=10.0, b=-5.0):
    """Sum over utterances of ``-S[ji, j] + log sum_k exp(S[ji, k])``."""
    ev = ag.value_of(embeddings)
    if ev.ndim != 3:
        raise ValueError("embeddings must be [speakers, utterances, dim]")
    N, P, _ = ev.shape
    if N < 2 or P < 1:
        raise ValueError("GE2E needs at least 2 speakers")
    S = similarity_matrix(embeddings, w, b)
    own = np.repeat(np.eye(N), P, axis=0)
    return ag.sub(ag.sum_(ag.logsumexp(S, axis=1)), ag.sum_(ag.mul(S, own)))


def verification_scores(embeddings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Same-speaker and different-speaker cosine scores of utterances against centroids.

    A same-speaker score uses the centroid of the speaker's other
    utterances, so an utterance never scores against itself.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    N, P, _ = e.shape
    if P < 2:
        raise ValueError("verification needs at least 2 utterances per speaker")
    e = e / np.linalg.norm(e, axis=-1, keepdims=True)
    total = e.sum(axis=1)
    c = total / np.linalg.norm(total, axis=-1, keepdims=True)
    loo = (total[:, None, :] - e) / (P - 1)
    loo /= np.linalg.norm(loo, axis=-1, keepdims=True)
    same = np.einsum("jpe,jpe->jp", e, loo).reshape(-1)
    cos = np.einsum("jpe,ke->jpk", e, c)
    diff = cos[~np.eye(N, dtype=bool)[:, None, :].repeat(P, axis=1)]
    return same, diff


def eer(same_scores, diff_scores) -> float:
    """Equal error rate: where false-accept and false-reject rates cross.

    A pair is accepted when its score is at least the threshold. Thresholds
    sweep the union of scores; between adjacent thresholds the crossing is
    located by linear interpolation.
    """
    same = np.sort(np.asarray(same_scores, dtype=np.float64))
    diff = np.sort(np.asarray(diff_scores, dtype=np.float64))
    if same.size == 0 or diff.size == 0:
        raise ValueError("both score lists must be non-empty")
    thresholds = np.concatenate([np.unique(np.concatenate([same, diff])), [np.inf]])
    fpr = 1.0 - np.searchsorted(diff, thresholds, side="left") / diff.size
    fnr = np.searchsorted(same, thresholds, side="left") / same.size
    gap = fpr - fnr  # non-increasing in the threshold
    hit = np.flatnonzero(gap <= 0)[0]
    if gap[hit] == 0 or hit == 0:
        return float((fpr[hit] + fnr[hit]) / 2)
    a, b = gap[hit - 1], gap[hit]
    lam = a / (a - b)
    f = (1 - lam) * fpr[hit - 1] + lam * fpr[hit]
    n = (1 - lam) * fnr[hit - 1] + lam * fnr[hit]
    return float((f + n) / 2)


# ---------------------------------------------------------------------------
# models

@dataclass
class SequenceModel:
    """A recurrent cell followed by a linear head on the last hidden state.

    ``task`` is ``classify`` (head produces logits) or ``verify`` (head
    produces utterance embeddings, plus the trainable GE2E scale/offset).
    """

    cell: CellParams
    head: dict
    task: str = "classify"

    def tensors(self) -> dict:
        return {**{f"cell.{k}": v for k, v in self.cell.tensors.items()}, **self.head}

    def with_tensors(self, flat: dict) -> "SequenceModel":
        cell = {k[5:]: v for k, v in flat.items() if k.startswith("cell.")}
        head = {k: v for k, v in flat.items() if not k.startswith("cell.")}
        return SequenceModel(self.cell.with_tensors(cell), head, self.task)

    def forward(self, x):
        """Map ``x: [batch, T, M]`` to logits or embeddings ``[batch, K]``."""
        seq = np.transpose(np.asarray(x, dtype=np.float64), (1, 0, 2))
        _, state = run_sequence(self.cell, seq)
        W, b = (self.head["head.W"], self.head["head.b"])
        return ag.add(ag.contract(state.h, W, [1], [1]), b)

    def embed_speakers(self, utterances):
        """Embeddings ``[N, P, E]`` for utterances ``[N, P, T, M]``."""
        N, P, T, M = np.shape(utterances)
        out = self.forward(np.reshape(utterances, (N * P, T, M)))
        return ag.reshape(out, (N, P, ag.value_of(out).shape[-1]))

    def ge2e_head(self):
        return self.head["ge2e.w"], self.head["ge2e.b"]

    def num_params(self) -> int:
        return sum(int(np.size(ag.value_of(v))) for v in self.tensors().values())


def build_model(config: RunConfig, rng=None) -> SequenceModel:
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    cell = init_cell(config.cell, config.param, config.input, config.hidden, n_cores=config.cores,
                     rank=config.rank, rank0=config.r0, seed=rng, row_dims=config.dims("row"),
                     col_dims=config.dims("col"), forget_bias=config.forget_bias)
    D = config.hidden
    if config.task == "synth-speaker":
        E = config.emb
        head = {"head.W": rng.standard_normal((E, D)) / math.sqrt(D), "head.b": np.zeros(E),
                "ge2e.w": np.array(GE2EHead().w), "ge2e.b": np.array(GE2EHead().b)}
        return SequenceModel(cell, head, "verify")
    K = config.classes
    head = {"head.W": rng.standard_normal((K, D)) / math.sqrt(D), "head.b": np.zeros(K)}
    return SequenceModel(cell, head, "classify")


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """Bias-corrected Adam update, applied identically to every tensor."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingDiverged(f"non-finite gradient in {bad}", {"params": bad, "step": state.t})
    t = state.t + 1
    m, v, new = {}, {}, {}
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for k, p in params.items():
        g = grads[k]
        m[k] = state.beta1 * state.m.get(k, np.zeros_like(p)) + (1 - state.beta1) * g
        v[k] = state.beta2 * state.v.get(k, np.zeros_like(p)) + (1 - state.beta2) * g * g
        new[k] = p - state.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + state.eps)
    return new, replace(state, t=t, m=m, v=v)


def global_grad_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads)))


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    meta: dict
    tensors: dict
    best: dict = field(default_factory=dict)
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)

    def model(self, which: str = "best") -> SequenceModel:
        cell_meta = self.meta["cell"]
        flat = self.best if which == "best" and self.best else self.tensors
        cell = cell_from_meta(cell_meta, {k[5:]: v for k, v in flat.items() if k.startswith("cell.")})
        head = {k: v for k, v in flat.items() if not k.startswith("cell.")}
        return SequenceModel(cell, head, self.meta["task"])

    @property
    def config(self) -> RunConfig:
        return RunConfig.from_text(self.meta["config"])


def _tt_records(model_meta: dict, tensors: dict) -> dict:
    records = {}
    n = model_meta.get("n_cores")
    if model_meta["form"] == "tt-fused":
        for side in "WU":
            tt = TTMatrix(tuple(tensors[f"cell.{side}.{k}"] for k in range(n + 1)))
            rec = tt.to_record()
            rec.pop("cores")
            records[side] = rec
    elif model_meta["form"] == "tt-sep":
        for side in "WU":
            for e in GATES[model_meta["kind"]]:
                tt = TTMatrix(tuple(tensors[f"cell.{side}.{e}.{k}"] for k in range(n)))
                rec = tt.to_record()
                rec.pop("cores")
                records[f"{side}.{e}"] = rec
    return records


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    table, chunks, offset = [], [], 0
    groups = (("params", ckpt.tensors), ("best", ckpt.best), ("adam.m", ckpt.adam_m), ("adam.v", ckpt.adam_v))
    for group, tensors in groups:
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f8")
            table.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(arr.tobytes())
            offset += arr.size * 8
    header = {"version": CHECKPOINT_VERSION, "meta": ckpt.meta, "tensors": table,
              "tt": _tt_records(ckpt.meta["cell"], ckpt.tensors), "payload_bytes": offset}
    head = json.dumps(header, sort_keys=True).encode()
    return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(head)) + head + b"".join(chunks)


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(blob) < 20:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    start = 20 + hlen
    try:
        header = json.loads(blob[20:start])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if len(blob) - start != header["payload_bytes"]:
        raise CheckpointError(f"checkpoint payload has {len(blob) - start} bytes, expected {header['payload_bytes']}")
    meta = header["meta"]
    cell_meta = meta["cell"]
    if cell_meta.get("gate_order") != list(GATES.get(cell_meta.get("kind"), ())):
        raise CheckpointError(f"gate order {cell_meta.get('gate_order')} is incompatible with this version")
    if meta.get("bias_convention") != _bias_convention(cell_meta["kind"]):
        raise CheckpointError(f"bias convention {meta.get('bias_convention')!r} is incompatible")
    groups = {"params": {}, "best": {}, "adam.m": {}, "adam.v": {}}
    for entry in header["tensors"]:
        count = math.prod(entry["shape"])
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start + entry["offset"])
        groups[entry["group"]][entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
    return Checkpoint(meta, groups["params"], groups["best"], groups["adam.m"], groups["adam.v"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically: a temporary file in the same directory is renamed over ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


def _bias_convention(kind: str) -> str:
    return "single" if kind == "lstm" else "dual"


# ---------------------------------------------------------------------------
# training loops

@dataclass
class TrainResult:
    model: SequenceModel
    history: list
    checkpoint: Checkpoint
    grad_norms: list
    final: dict = field(default_factory=dict)


@dataclass
class _LoopState:
    epoch: int = 0
    lr: float = 1e-3
    best: float | None = None
    bad_epochs: int = 0
    stopped: bool = False
    history: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)


def _percentile(values, q):
    return float(np.percentile(values, q)) if len(values) else float("nan")


def _row(epoch, step, split, loss, metric, norms, lr, wall_ms):
    return {"epoch": epoch, "step": step, "split": split, "loss": float(loss), "accuracy_or_eer": float(metric),
            "grad_norm_p50": _percentile(norms, 50), "grad_norm_p95": _percentile(norms, 95),
            "lr": lr, "wall_ms": round(wall_ms, 3)}


def _check_finite(loss, epoch, step, norms):
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}",
                               {"epoch": epoch, "step": step, "loss": loss, "recent_grad_norms": norms[-10:]})


def _make_checkpoint(config, model, best_tensors, adam, state, data_fp) -> Checkpoint:
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_text(),
        "config_hash": config.hash(),
        "task": model.task,
        "cell": model.cell.meta(),
        "bias_convention": _bias_convention(model.cell.kind),
        "gate_order": list(GATES[model.cell.kind]),
        "dataset": data_fp,
        "rng": {"seed": config.seed, "next_epoch": state.epoch},
        "state": {"epoch": state.epoch, "lr": state.lr, "best": state.best, "bad_epochs": state.bad_epochs,
                  "stopped": state.stopped, "adam_t": adam.t},
        "history": state.history,
        "grad_norms": state.grad_norms,
    }
    as_arrays = lambda d: {k: np.array(ag.value_of(v)) for k, v in d.items()}
    return Checkpoint(meta, as_arrays(model.tensors()), as_arrays(best_tensors), as_arrays(adam.m), as_arrays(adam.v))


def _resume(config, resume: Checkpoint):
    model = resume.model("current")
    st = resume.meta["state"]
    state = _LoopState(st["epoch"], st["lr"], st["best"], st["bad_epochs"], st["stopped"],
                       list(resume.meta["history"]), list(resume.meta["grad_norms"]))
    adam = AdamState(lr=st["lr"], t=st["adam_t"], m=dict(resume.adam_m), v=dict(resume.adam_v))
    return model, dict(resume.best), adam, state


def _end_epoch(config, state: _LoopState, metric: float, higher_better: bool, model, best_tensors):
    improved = state.best is None or (metric > state.best if higher_better else metric < state.best)
    if improved:
        state.best = float(metric)
        state.bad_epochs = 0
        best_tensors = dict(model.tensors())
    else:
        state.bad_epochs += 1
        if state.bad_epochs % max(1, config.patience // 2) == 0:
            state.lr *= config.lr_decay
        if state.bad_epochs >= config.patience:
            state.stopped = True
    state.epoch += 1
    return best_tensors


def evaluate_classifier(model: SequenceModel, ds: SequenceDataset, batch_size: int = 512) -> dict:
    total_loss, correct = 0.0, 0
    for xb, yb in batches(ds, batch_size):
        logits = np.asarray(model.forward(xb))
        total_loss += float(cross_entropy_logits(logits, yb)) * len(yb)
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
    return {"loss": total_loss / len(ds), "accuracy": correct / len(ds)}


def _classifier_grads(model, xb, yb, shards, pool):
    parts = [idx for idx in np.array_split(np.arange(len(xb)), shards) if len(idx)]

    def work(idx):
        tape = ag.Tape()
        taped = model.with_tensors(tape.watch(model.tensors()))
        logits = taped.forward(xb[idx])
        loss = ag.mul(cross_entropy_logits(logits, yb[idx]), len(idx) / len(xb))
        return float(loss.value), tape.backward(loss), logits.value

    results = list(pool.map(work, parts) if pool else map(work, parts))
    loss = sum(r[0] for r in results)
    grads = dict(results[0][1])
    for r in results[1:]:
        for k in grads:
            grads[k] = grads[k] + r[1][k]
    logits = np.concatenate([r[2] for r in results])
    return loss, grads, logits


def train_classifier(config: RunConfig, train: SequenceDataset, val: SequenceDataset, *,
                     out_dir=None, resume: Checkpoint | None = None) -> TrainResult:
    """Mini-batch Adam on cross-entropy with early stopping on validation accuracy."""
    if resume is not None:
        model, best_tensors, adam, state = _resume(config, resume)
    else:
        model = build_model(config)
        best_tensors = dict(model.tensors())
        adam = AdamState(lr=config.lr)
        state = _LoopState(lr=config.lr)
    if model.task != "classify":
        raise ValueError("train_classifier needs a classification model")
    data_fp = fingerprint(train)
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        while state.epoch < config.epochs and not state.stopped:
            epoch = state.epoch
            t0 = time.perf_counter()
            adam = replace(adam, lr=state.lr)
            norms, loss_sum, correct, seen = [], 0.0, 0, 0
            for step, (xb, yb) in enumerate(batches(train, config.batch_size, shuffle_seed=(config.seed, epoch))):
                loss, grads, logits = _classifier_grads(model, xb, yb, config.shards, pool)
                norms.append(global_grad_norm(grads))
                _check_finite(loss, epoch, step, norms)
                params, adam = adam_step(model.tensors(), grads, adam)
                model = model.with_tensors(params)
                loss_sum += loss * len(yb)
                correct += int(np.sum(np.argmax(logits, axis=1) == yb))
                seen += len(yb)
            state.grad_norms.extend(norms)
            val_metrics = evaluate_classifier(model, val)
            wall = (time.perf_counter() - t0) * 1e3
            state.history.append(_row(epoch, adam.t, "train", loss_sum / seen, correct / seen, norms, state.lr, wall))
            state.history.append(_row(epoch, adam.t, "val", val_metrics["loss"], val_metrics["accuracy"],
                                      norms, state.lr, wall))
            log.info("epoch %d train_loss=%.4f val_acc=%.4f", epoch, loss_sum / seen, val_metrics["accuracy"])
            best_tensors = _end_epoch(config, state, val_metrics["accuracy"], True, model, best_tensors)
            ckpt = _make_checkpoint(config, model, best_tensors, adam, state, data_fp)
            if out_dir:
                write_run_outputs(out_dir, ckpt, data_fp)
    finally:
        if pool:
            pool.shutdown()
    ckpt = _make_checkpoint(config, model, best_tensors, adam, state, data_fp)
    best_model = model.with_tensors(best_tensors)
    return TrainResult(best_model, state.history, ckpt, state.grad_norms, {"val_accuracy": state.best})


def ge2e_eval_loss(model: SequenceModel, ds: SpeakerDataset, n_speakers: int, n_utts: int,
                   n_batches: int = 8, seed: int = 12345) -> float:
    """Mean per-utterance GE2E loss over fixed-seed batches of a fixed composition."""
    rng = np.random.default_rng(seed)
    w, b = (float(np.asarray(ag.value_of(t))) for t in model.ge2e_head())
    losses = []
    for _ in range(n_batches):
        utts, _ = speaker_batch(ds, n_speakers, n_utts, rng)
        emb = model.embed_speakers(utts)
        losses.append(float(ge2e_loss(emb, w, b)) / (utts.shape[0] * utts.shape[1]))
    return float(np.mean(losses))


def evaluate_verifier(model: SequenceModel, ds: SpeakerDataset, n_speakers: int = 8, n_utts: int = 4) -> dict:
    emb = np.asarray(model.embed_speakers(ds.utterances))
    same, diff = verification_scores(emb)
    return {"eer": eer(same, diff), "loss": ge2e_eval_loss(model, ds, n_speakers, n_utts)}


def select_fraction(ds: SpeakerDataset, fraction: float, min_speakers: int = 2) -> SpeakerDataset:
    """Keep the first ``fraction`` of training speakers (at least ``min_speakers``)."""
    if fraction >= 1.0:
        return ds
    keep = max(min_speakers, int(round(fraction * ds.n_speakers)))
    return ds.subset(speakers=np.arange(min(keep, ds.n_speakers)))


def train_verifier(config: RunConfig, train: SpeakerDataset, val: SpeakerDataset, *,
                   out_dir=None, resume: Checkpoint | None = None) -> TrainResult:
    """GE2E training of an utterance encoder with early stopping on validation EER."""
    if train.n_speakers < 2:
        raise ValueError("GE2E training needs at least 2 speakers")
    train = select_fraction(train, config.data_fraction)
    if resume is not None:
        model, best_tensors, adam, state = _resume(config, resume)
    else:
        model = build_model(config)
        best_tensors = dict(model.tensors())
        adam = AdamState(lr=config.lr)
        state = _LoopState(lr=config.lr)
    if model.task != "verify":
        raise ValueError("train_verifier needs a verification model")
    data_fp = fingerprint(train)
    n_spk = min(config.ge2e_speakers, train.n_speakers)
    n_utt = min(config.ge2e_utterances, train.n_utterances)
    while state.epoch < config.epochs and not state.stopped:
        epoch = state.epoch
        t0 = time.perf_counter()
        rng = np.random.default_rng((config.seed, epoch))
        adam = replace(adam, lr=state.lr)
        norms, losses = [], []
        for step in range(config.steps_per_epoch):
            utts, _ = speaker_batch(train, n_spk, n_utt, rng)
            tape = ag.Tape()
            taped = model.with_tensors(tape.watch(model.tensors()))
            w, b = taped.ge2e_head()
            loss = ge2e_loss(taped.embed_speakers(utts), w, b)
            grads = tape.backward(loss)
            norms.append(global_grad_norm(grads))
            _check_finite(float(loss.value), epoch, step, norms)
            params, adam = adam_step(model.tensors(), grads, adam)
            params["ge2e.w"] = np.maximum(params["ge2e.w"], 1e-6)
            model = model.with_tensors(params)
            losses.append(float(loss.value) / (n_spk * n_utt))
        state.grad_norms.extend(norms)
        train_emb = np.asarray(model.embed_speakers(train.utterances))
        train_eer = eer(*verification_scores(train_emb))
        val_metrics = evaluate_verifier(model, val, n_spk, n_utt)
        wall = (time.perf_counter() - t0) * 1e3
        state.history.append(_row(epoch, adam.t, "train", np.mean(losses), train_eer, norms, state.lr, wall))
        state.history.append(_row(epoch, adam.t, "val", val_metrics["loss"], val_metrics["eer"], norms, state.lr, wall))
        log.info("epoch %d train_loss=%.4f val_eer=%.4f", epoch, np.mean(losses), val_metrics["eer"])
        best_tensors = _end_epoch(config, state, val_metrics["eer"], False, model, best_tensors)
        ckpt = _make_checkpoint(config, model, best_tensors, adam, state, data_fp)
        if out_dir:
            write_run_outputs(out_dir, ckpt, data_fp)
    ckpt = _make_checkpoint(config, model, best_tensors, adam, state, data_fp)
    best_model = model.with_tensors(best_tensors)
    final = {
        "val_eer": state.best,
        "train_loss": ge2e_eval_loss(best_model, train, n_spk, n_utt),
        "val_loss": ge2e_eval_loss(best_model, val, n_spk, n_utt),
    }
    return TrainResult(best_model, state.history, ckpt, state.grad_norms, final)


def data_fraction_sweep(config: RunConfig, train: SpeakerDataset, val: SpeakerDataset,
                        fractions=(0.2, 0.4, 0.6, 0.8, 1.0)) -> list[dict]:
    """Retrain at several training-set fractions and report final metrics."""
    rows = []
    for frac in fractions:
        result = train_verifier(config.replace(data_fraction=frac), train, val)
        rows.append({"fraction": frac, **result.final})
    return rows


# ---------------------------------------------------------------------------
# run outputs

def metrics_csv(history: list, data_fp: str) -> str:
    buf = io.StringIO()
    buf.write(f"# dataset: {data_fp}\n")
    writer = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in history:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def write_run_outputs(out_dir, ckpt: Checkpoint, data_fp: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(ckpt.meta["history"], data_fp))
    norms = ckpt.meta["grad_norms"]
    (out / "grad_norms.csv").write_text("step,grad_norm\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(norms)))
    save_checkpoint(ckpt, out / "checkpoint.ttrnn")
