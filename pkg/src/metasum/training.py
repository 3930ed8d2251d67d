"""Adam training loop with linear warmup and validation-ROUGE epoch selection.

A run is fully determined by (seed, data, config): initialization draws from
per-tensor named substreams, the per-epoch shuffle derives from (seed, epoch)
and optimizer state is plain arithmetic. Runs write
``seed<k>/epoch<e>.ckpt`` plus an optimizer-state sidecar and append one JSON
line per epoch to ``metrics.jsonl``; resuming picks up after the last epoch
whose files and metrics line are all present.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .evaluation import rouge_n
from .metadata import FeatureAssignment
from .model import (ModelConfig, ModelParams, forward_loss, generate_batch,
                    load_checkpoint, save_checkpoint)
from .text import TagLexicon, Vocab, detokenize, segment_words

# reference-scale optimization constants: batch, learning rate, warmup steps
REFERENCE_TRAIN_SCALE = {"batch_size": 4, "base_lr": 3e-5, "warmup_steps": 1000}

_SHUFFLE_TAG = 0x5A


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    base_lr: float = 3e-3
    warmup_steps: int = 50
    max_epochs: int = 6
    seeds: tuple = (1, 2, 3)
    grad_clip: Optional[float] = None
    valid_chunk: int = 64

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "seeds" in d:
            d["seeds"] = tuple(d["seeds"])
        return cls(**d)


@dataclass
class EncodedCase:
    """One tokenized (source, target, features) example plus the gold text."""

    case_id: int
    src: np.ndarray
    tgt: np.ndarray
    features: FeatureAssignment
    gold_text: str


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_rouge1: float


@dataclass
class TrainRun:
    seed: int
    records: List[EpochRecord] = field(default_factory=list)
    selected_epoch: int = 0
    params: Optional[ModelParams] = None
    run_dir: Optional[Path] = None


def lr_at(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to base_lr over warmup_steps, constant afterwards."""
    if step < 1:
        raise ValueError("steps are 1-based")
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)


def select_best_epoch(scores: Sequence[float]) -> int:
    """1-based index of the earliest maximum validation score."""
    if not scores:
        raise ValueError("no epochs to select from")
    best = max(scores)
    return next(i for i, s in enumerate(scores, start=1) if s == best)


class AdamState:
    """First/second moment estimates plus the shared step counter."""

    def __init__(self, params: ModelParams) -> None:
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.named()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.named()}


def adam_step(params: ModelParams, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              grad_clip: Optional[float] = None) -> None:
    """One bias-corrected Adam update from the gradients stored on params."""
    state.step += 1
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for name, t in params.named()}
    if grad_clip is not None:
        total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > grad_clip:
            scale = grad_clip / total
            grads = {k: g * scale for k, g in grads.items()}
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, t in params.named():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def validation_rouge1(params: ModelParams, valid_set: Sequence[EncodedCase],
                      vocab: Vocab, lexicon: TagLexicon, chunk: int = 64) -> float:
    """Mean per-case ROUGE-1 F1 of greedy generations against gold summaries."""
    if not valid_set:
        return 0.0
    scores = []
    for lo in range(0, len(valid_set), chunk):
        part = valid_set[lo:lo + chunk]
        outs = generate_batch([(c.src, c.features) for c in part], params)
        for case, ids in zip(part, outs):
            cand = segment_words(detokenize(ids, vocab), lexicon)
            ref = segment_words(case.gold_text, lexicon)
            scores.append(rouge_n(cand, ref, 1).f1)
    return float(np.mean(scores))


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng(
        np.random.SeedSequence([seed, epoch, _SHUFFLE_TAG])).permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def _state_path(ckpt_path: Path) -> Path:
    return ckpt_path.with_suffix(".state")


def _save_adam(state: AdamState, path: Path) -> None:
    manifest = [[key, list(arr.shape)]
                for key, arr in _adam_items(state)]
    header = json.dumps({"format_version": 1, "step": state.step,
                         "manifest": manifest}, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        for _, arr in _adam_items(state):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _adam_items(state: AdamState):
    for name, arr in state.m.items():
        yield f"m.{name}", arr
    for name, arr in state.v.items():
        yield f"v.{name}", arr


def _load_adam(path: Path, params: ModelParams) -> AdamState:
    state = AdamState(params)
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        state.step = header["step"]
        for key, shape in header["manifest"]:
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(size * 8), dtype="<f8").astype(np.float64)
            arr = arr.reshape(shape)
            kind, name = key.split(".", 1)
            (state.m if kind == "m" else state.v)[name] = arr
    return state


def _completed_epochs(seed_dir: Path) -> List[dict]:
    """Metrics lines whose checkpoint and optimizer files both exist."""
    metrics_path = seed_dir / "metrics.jsonl"
    if not metrics_path.exists():
        return []
    done = []
    with open(metrics_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                break  # partial trailing write from an interrupted run
            ckpt = seed_dir / f"epoch{rec['epoch']}.ckpt"
            if not (ckpt.exists() and _state_path(ckpt).exists()):
                break
            done.append(rec)
    return done


def _snapshot(params: ModelParams) -> ModelParams:
    return ModelParams(params.config,
                       {k: T.Tensor(t.data.copy()) for k, t in params.named()})


def train_one_seed(config: ModelConfig, train_set: Sequence[EncodedCase],
                   valid_set: Sequence[EncodedCase], tcfg: TrainConfig,
                   seed: int, vocab: Vocab, lexicon: TagLexicon,
                   run_dir: Optional[Path] = None, resume: bool = False,
                   log: Optional[Callable[[str], None]] = None) -> TrainRun:
    """Train one model to max_epochs; keep the best-validation-epoch weights."""
    run = TrainRun(seed=seed)
    records: List[EpochRecord] = []
    seed_dir = None
    if run_dir is not None:
        seed_dir = Path(run_dir) / f"seed{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        run.run_dir = seed_dir
        if not resume:
            (seed_dir / "metrics.jsonl").unlink(missing_ok=True)

    params = ModelParams.init(config, seed)
    state = AdamState(params)
    start_epoch = 1

    if resume and seed_dir is not None:
        done = _completed_epochs(seed_dir)
        if done:
            last = done[-1]["epoch"]
            ckpt = seed_dir / f"epoch{last}.ckpt"
            params = load_checkpoint(ckpt)
            state = _load_adam(_state_path(ckpt), params)
            records = [EpochRecord(**rec) for rec in done]
            start_epoch = last + 1
            with open(seed_dir / "metrics.jsonl", "w", encoding="utf-8") as fh:
                for rec in done:
                    fh.write(json.dumps(rec) + "\n")

    best_score = -np.inf
    best_epoch = 0
    best_params = None
    for rec in records:  # replay selection state over already-completed epochs
        if rec.valid_rouge1 > best_score:
            best_score, best_epoch = rec.valid_rouge1, rec.epoch
    if best_epoch and seed_dir is not None:
        best_params = load_checkpoint(seed_dir / f"epoch{best_epoch}.ckpt")

    for epoch in range(start_epoch, tcfg.max_epochs + 1):
        losses = []
        for batch_idx in _batches(len(train_set), tcfg.batch_size, seed, epoch):
            step = state.step + 1
            lr = lr_at(step, tcfg.base_lr, tcfg.warmup_steps)
            batch = [(train_set[i].src, train_set[i].features, train_set[i].tgt)
                     for i in batch_idx]
            with T.ComputationTape() as tape:
                loss = forward_loss(batch, params)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at step {step} (lr={lr:g})")
            params.zero_grads()
            T.backward(tape, loss)
            adam_step(params, state, lr, grad_clip=tcfg.grad_clip)
            losses.append(value)
        train_loss = float(np.mean(losses)) if losses else 0.0
        score = validation_rouge1(params, valid_set, vocab, lexicon, tcfg.valid_chunk)
        record = EpochRecord(epoch, train_loss, score)
        records.append(record)
        if score > best_score:
            best_score, best_epoch = score, epoch
            best_params = _snapshot(params)
        if seed_dir is not None:
            ckpt = seed_dir / f"epoch{epoch}.ckpt"
            save_checkpoint(params, ckpt)
            _save_adam(state, _state_path(ckpt))
            with open(seed_dir / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(record)) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
        if log:
            log(f"seed {seed} epoch {epoch}: loss {train_loss:.4f} "
                f"valid R1 {score:.4f}")

    run.records = records
    run.selected_epoch = select_best_epoch([r.valid_rouge1 for r in records])
    # best-so-far tracking matches earliest-argmax selection exactly
    assert run.selected_epoch == best_epoch
    run.params = best_params if best_params is not None else _snapshot(params)
    return run


def train(config: ModelConfig, train_set: Sequence[EncodedCase],
          valid_set: Sequence[EncodedCase], tcfg: TrainConfig,
          vocab: Vocab, lexicon: TagLexicon,
          run_dir: Optional[Path] = None, resume: bool = False,
          log: Optional[Callable[[str], None]] = None) -> List[TrainRun]:
    """One TrainRun per configured seed."""
    return [train_one_seed(config, train_set, valid_set, tcfg, seed,
                           vocab, lexicon, run_dir, resume, log)
            for seed in tcfg.seeds]
