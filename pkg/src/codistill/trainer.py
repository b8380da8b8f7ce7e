"""Cooperative distillation training: warm starts, alternating streams, artifacts.

Each co-distillation step runs one denoising update (student trains, teacher
frozen) followed by one diversity update (teacher trains, student frozen).
Runs are deterministic given (config, seed, datasets): batch order, parameter
init, and metrics bytes all reproduce.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from . import tokenizer as tok
from .datagen import CorpusRecord
from .losses import (StreamLossReport, StreamSample, batch_loss_node,
                     cross_entropy_seq, make_sample)

METRICS_COLUMNS = ("step", "stream", "loss", "ce", "kl", "w_mean", "w_min", "w_max", "wall_ms")


@dataclass
class TrainConfig:
    batch_size: int = 8
    steps: int = 200
    alternation: str = "per_batch"  # or "per_epoch"
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 1000
    max_decode_len: int = 24
    warmup_steps: int = 100
    pretrain_steps: int = 500

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        # lr == 0 is allowed (no-op updates, losses still reported)
        if self.lr < 0.0:
            raise ValueError("lr must be non-negative")
        if self.alternation not in ("per_batch", "per_epoch"):
            raise ValueError("alternation must be per_batch or per_epoch")
        for name in ("steps", "checkpoint_every", "max_decode_len", "warmup_steps",
                     "pretrain_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "steps": self.steps,
            "alternation": self.alternation,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "max_decode_len": self.max_decode_len,
            "warmup_steps": self.warmup_steps,
            "pretrain_steps": self.pretrain_steps,
        }


class Adam:
    """Textbook Adam with bias correction; the learning rate is passed per step."""

    def __init__(self, shapes: dict[str, tuple], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            tensors[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _warmup_lr(base: float, update_index: int, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return base
    return base * min(1.0, update_index / warmup_steps)


def _adam_for(params: M.ModelParams, config: TrainConfig) -> Adam:
    return Adam({k: v.shape for k, v in params.tensors.items()},
                beta1=config.beta1, beta2=config.beta2, eps=config.eps)


class _BatchStream:
    """Seed-deterministic epoch shuffling over dataset indices."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self.order: list[int] = []

    def next_batch(self) -> list[int]:
        while len(self.order) < self.batch_size:
            self.order.extend(self.rng.permutation(self.n).tolist())
        batch, self.order = self.order[: self.batch_size], self.order[self.batch_size:]
        return batch


def _child_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence((seed, tag)).generate_state(1, np.uint64)[0])


def samples_from_records(records: Sequence[CorpusRecord], vocab: tok.Vocab,
                         origin: str) -> list[StreamSample]:
    return [make_sample(vocab, r.features, r.caption, origin, sample_id=r.id)
            for r in records]


def pretrain(params: M.ModelParams, dataset: Sequence[StreamSample], config: TrainConfig,
             steps: int | None = None) -> M.ModelParams:
    """Plain cross-entropy training of one model on its own dataset."""
    if not dataset:
        raise ValueError("empty dataset")
    steps = config.steps if steps is None else steps
    params = params.copy()
    if steps == 0:
        return params
    adam = _adam_for(params, config)
    stream = _BatchStream(len(dataset), config.batch_size,
                          np.random.default_rng((config.seed, 11)))
    for step in range(1, steps + 1):
        batch = [dataset[i] for i in stream.next_batch()]

        def loss_fn(p):
            nodes = []
            for sample in batch:
                gt = list(sample.gt_tokens)
                rows = M.forward_graph(p, params.config, sample.features,
                                       np.array([tok.BOS_ID] + gt, dtype=np.intp))
                nodes.append(cross_entropy_seq(rows, gt + [tok.EOS_ID]))
            total = nodes[0]
            for node in nodes[1:]:
                total = total + node
            return total * (1.0 / len(nodes))

        try:
            _, grads = M.loss_grad(params, loss_fn)
        except RuntimeError as err:
            raise RuntimeError(f"diverged at step {step}") from err
        adam.step(params.tensors, grads, _warmup_lr(config.lr, step, config.warmup_steps))
    return params


@dataclass
class TrainState:
    student: M.ModelParams
    teacher: M.ModelParams
    adam_student: Adam
    adam_teacher: Adam
    step: int = 0


def init_state(model_config: M.ModelConfig, config: TrainConfig) -> TrainState:
    student = M.init_params(model_config, _child_seed(config.seed, 1))
    teacher = M.init_params(model_config, _child_seed(config.seed, 2))
    return TrainState(student, teacher,
                      _adam_for(student, config), _adam_for(teacher, config))


def stream_substep(state: TrainState, batch: Sequence[StreamSample], bridge, vocab, config,
             stream: str) -> tuple[float, list[StreamLossReport]]:
    """One update of the trainable model against its frozen partner."""
    if stream == "denoise":
        trainable, frozen, adam = state.student, state.teacher, state.adam_student
    else:
        trainable, frozen, adam = state.teacher, state.student, state.adam_teacher
    decodes = M.greedy_decode_batch(frozen, [s.features for s in batch],
                                    config.max_decode_len)
    reports: list[StreamLossReport] = []

    def loss_fn(p):
        node, reps = batch_loss_node(p, frozen, batch, bridge, vocab,
                                     config.max_decode_len, stream, decodes)
        reports.extend(reps)
        return node

    try:
        loss, grads = M.loss_grad(trainable, loss_fn)
    except RuntimeError as err:
        raise RuntimeError(f"diverged at step {state.step + 1}") from err
    adam.step(trainable.tensors, grads,
              _warmup_lr(config.lr, adam.t + 1, config.warmup_steps))
    return loss, reports


def codistill_step(state: TrainState, noisy_batch: Sequence[StreamSample],
                   clean_batch: Sequence[StreamSample], bridge, vocab: tok.Vocab,
                   config: TrainConfig) -> list[tuple[float, list[StreamLossReport]]]:
    """One denoising update then one diversity update; returns both sub-step results."""
    results = [
        stream_substep(state, noisy_batch, bridge, vocab, config, "denoise"),
        stream_substep(state, clean_batch, bridge, vocab, config, "diversity"),
    ]
    state.step += 1
    return results


def _metrics_row(step: int, stream: str, loss: float,
                 reports: Sequence[StreamLossReport], wall_ms: int) -> dict:
    ws = [r.w for r in reports]
    return {
        "step": step,
        "stream": stream,
        "loss": repr(loss),
        "ce": repr(float(np.mean([r.ce_term for r in reports]))),
        "kl": repr(float(np.mean([r.kl_term for r in reports]))),
        "w_mean": repr(float(np.mean(ws))),
        "w_min": repr(float(np.min(ws))),
        "w_max": repr(float(np.max(ws))),
        "wall_ms": wall_ms,
    }


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _dataset_hash(records: Sequence[StreamSample]) -> str:
    h = hashlib.sha256()
    for s in records:
        h.update(s.gt_caption.encode("utf-8"))
        h.update(np.ascontiguousarray(s.features).tobytes())
    return h.hexdigest()


@dataclass
class TrainResult:
    state: TrainState
    metrics: list[dict]
    sample_reports: list[dict] = field(default_factory=list)


def train_codistill(model_config: M.ModelConfig, config: TrainConfig,
                    noisy_dataset: Sequence[StreamSample],
                    clean_dataset: Sequence[StreamSample],
                    bridge, vocab: tok.Vocab, run_dir: Path | str | None = None,
                    timing: bool = False) -> TrainResult:
    """Warm-start both models, then alternate streams for config.steps updates.

    When `run_dir` is given, writes vocab, resolved config, manifest,
    metrics.csv, per-sample stream reports (samples.jsonl), and checkpoints.
    wall_ms is 0 unless `timing` is set, keeping run artifacts byte-reproducible.
    """
    if not noisy_dataset or not clean_dataset:
        raise ValueError("both datasets must be non-empty")
    run_path = Path(run_dir) if run_dir is not None else None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
        (run_path / "checkpoints").mkdir(exist_ok=True)
        (run_path / "eval").mkdir(exist_ok=True)
        tok.save_vocab(vocab, run_path / "vocab.txt")
        (run_path / "config.json").write_text(
            json.dumps({"model": model_config.to_dict(), "train": config.to_dict()},
                       indent=2, sort_keys=True) + "\n"
        )
        manifest = {
            "seed": config.seed,
            "config": {"model": model_config.to_dict(), "train": config.to_dict()},
            "vocab_sha256": _sha256_bytes(tok.serialize_vocab(vocab).encode("utf-8")),
            "dataset_sha256": {
                "noisy": _dataset_hash(noisy_dataset),
                "clean": _dataset_hash(clean_dataset),
            },
        }
        (run_path / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        )

    state = init_state(model_config, config)
    state.student = pretrain(state.student, noisy_dataset,
                             replace(config, seed=_child_seed(config.seed, 21)),
                             steps=config.pretrain_steps)
    state.teacher = pretrain(state.teacher, clean_dataset,
                             replace(config, seed=_child_seed(config.seed, 22)),
                             steps=config.pretrain_steps)

    def checkpoint(step: int) -> None:
        if run_path is None:
            return
        M.save_checkpoint(state.student, run_path / "checkpoints" / f"student_{step}.ckpt")
        M.save_checkpoint(state.teacher, run_path / "checkpoints" / f"teacher_{step}.ckpt")

    checkpoint(0)

    noisy_stream = _BatchStream(len(noisy_dataset), config.batch_size,
                                np.random.default_rng((config.seed, 31)))
    clean_stream = _BatchStream(len(clean_dataset), config.batch_size,
                                np.random.default_rng((config.seed, 32)))

    metrics: list[dict] = []
    sample_rows: list[dict] = []

    def run_substep(stream_name: str) -> None:
        if stream_name == "denoise":
            batch = [noisy_dataset[i] for i in noisy_stream.next_batch()]
        else:
            batch = [clean_dataset[i] for i in clean_stream.next_batch()]
        t0 = time.perf_counter()
        loss, reports = stream_substep(state, batch, bridge, vocab, config, stream_name)
        wall = int((time.perf_counter() - t0) * 1000.0) if timing else 0
        metrics.append(_metrics_row(state.step, stream_name, loss, reports, wall))
        for sample, report in zip(batch, reports):
            sample_rows.append({
                "step": state.step,
                "stream": stream_name,
                "sample_id": sample.id,
                "caption": sample.gt_caption,
                "total": report.total,
                "ce": report.ce_term,
                "kl": report.kl_term,
                "w": report.w,
                "partner_caption": report.partner_caption,
            })

    if config.alternation == "per_batch":
        for _ in range(config.steps):
            state.step += 1
            run_substep("denoise")
            run_substep("diversity")
            if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                checkpoint(state.step)
    else:  # per_epoch: a full pass of one stream, then the other
        epoch_len = max(1, -(-len(noisy_dataset) // max(1, config.batch_size)))
        done = 0
        while done < config.steps:
            for stream_name in ("denoise", "diversity"):
                for _ in range(min(epoch_len, config.steps - done)):
                    state.step += 1
                    run_substep(stream_name)
                    if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                        checkpoint(state.step)
                done = state.step
                if done >= config.steps:
                    break

    if config.steps > 0:
        checkpoint(state.step)

    if run_path is not None:
        with open(run_path / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
            writer.writeheader()
            writer.writerows(metrics)
        with open(run_path / "samples.jsonl", "w", encoding="utf-8") as fh:
            for row in sample_rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    return TrainResult(state=state, metrics=metrics, sample_reports=sample_rows)
