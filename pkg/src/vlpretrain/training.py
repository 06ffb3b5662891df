"""Training loop: learning-rate schedule, gradient accumulation, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from . import pretraining, retrieval, vcr
from .checkpoint import save_checkpoint
from .data import batch_indices, example_rng
from .encoder import EncoderConfig
from .model import ModelConfig, init_params
from .numerics import ParameterStore
from .pretraining import MaskingConfig
from .retrieval import RetrievalConfig

log = logging.getLogger(__name__)

PRETRAIN = "pretrain"
FINETUNE_RETRIEVAL = "finetune-retrieval"
FINETUNE_VCR = "finetune-vcr"
TASKS = (PRETRAIN, FINETUNE_RETRIEVAL, FINETUNE_VCR)
PROVENANCE = {PRETRAIN: "pretrained", FINETUNE_RETRIEVAL: "finetuned-retrieval", FINETUNE_VCR: "finetuned-vcr"}


class TrainingError(RuntimeError):
    pass


def lr_schedule(step: float, total_steps: int, base_lr: float, warmup_fraction: float = 0.1,
                decay: str = "linear") -> float:
    """Linear warmup from 0 to ``base_lr``, then linear decay to 0 (or constant)."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = warmup_fraction * total_steps
    if step < warmup:
        return base_lr * step / warmup
    if decay == "constant" or step == warmup:
        return base_lr
    return base_lr * (total_steps - step) / (total_steps - warmup)


@dataclass
class TrainConfig:
    task: str = PRETRAIN
    base_lr: float = 1e-4
    epochs: int = 10
    batch_size: int = 16
    accumulation_steps: int = 1
    warmup_fraction: float = 0.10
    decay: str = "linear"
    seed: int = 0
    init_checkpoint: str | None = None
    out_dir: str | None = None
    checkpoint_every_epoch: bool = True
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    region_budget: int = 100
    fraction: float = 1.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.accumulation_steps < 1:
            raise ValueError("accumulation_steps must be at least 1")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.decay not in ("linear", "constant"):
            raise ValueError("decay must be 'linear' or 'constant'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["masking"]["text_split"] = list(d["masking"]["text_split"])
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if "encoder" in raw:
            raw["encoder"] = EncoderConfig(**raw["encoder"])
        if "masking" in raw:
            m = dict(raw["masking"])
            if "text_split" in m:
                m["text_split"] = tuple(m["text_split"])
            raw["masking"] = MaskingConfig(**m)
        if "retrieval" in raw:
            raw["retrieval"] = RetrievalConfig(**raw["retrieval"])
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass
class RunLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def record(self, entry: dict) -> None:
        if self.steps and entry["step"] <= self.steps[-1]["step"]:
            raise ValueError("run log steps must increase")
        self.steps.append(entry)

    def losses(self) -> list[float]:
        return [s["loss"] for s in self.steps]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"steps": self.steps, "epochs": self.epochs}) + "\n")


@dataclass
class TrainResult:
    params: ParameterStore
    log: RunLog
    optimizer_steps: int


def _task_loss(cfg: TrainConfig, model: ModelConfig, data, epoch: int, batch_no: int, idx, params):
    """(loss tensor, component dict) for one micro-batch."""
    drop_rng = example_rng(cfg.seed, epoch, 1_000_000 + batch_no)
    if cfg.task == PRETRAIN:
        pairs, plans = [], []
        for i in idx:
            rng = example_rng(cfg.seed, epoch, int(i))
            pair = pretraining.sample_vlm_pair(data, int(i), rng)
            pairs.append(pair)
            plans.append(pretraining.sample_mask_plan(pair, rng, cfg.masking))
        parts = pretraining.joint_loss(pairs, plans, model, params, drop_rng, True, cfg.masking)
        return parts.total, {"mlm": parts.mlm, "moc": parts.moc, "vlm": parts.vlm}
    if cfg.task == FINETUNE_RETRIEVAL:
        k = cfg.retrieval.negatives_per_positive
        negatives = [retrieval.sample_negatives(data, int(i), example_rng(cfg.seed, epoch, int(i)), k) for i in idx]
        loss = retrieval.retrieval_loss(data, idx, model, params, cfg.retrieval, drop_rng, True, negatives)
        return loss, {"triplet": loss.item()}
    loss = vcr.training_loss([data[int(i)] for i in idx], model, params, drop_rng, True)
    return loss, {"vcr": loss.item()}


def train(cfg: TrainConfig, model: ModelConfig, data: Sequence, params: ParameterStore | None = None,
          on_epoch: Callable[[int, ParameterStore], dict | None] | None = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs over ``data``.

    ``data`` holds PairExample items for pretraining and retrieval, and
    PreparedVcr items for VCR. Each micro-batch gradient is divided by
    ``accumulation_steps`` and one Adam step is taken per
    ``accumulation_steps`` micro-batches; a trailing partial group is applied
    at the end with its own mean. ``on_epoch`` may return a dict with
    ``stop=True`` to end training early. The optimizer state always starts
    fresh, also when ``params`` comes from an earlier stage.
    """
    params = params if params is not None else init_params(model, cfg.seed)
    params.reset_optimizer()
    batches_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total_steps = max(1, math.ceil(batches_per_epoch * cfg.epochs / cfg.accumulation_steps))
    shuffle_rng = np.random.default_rng([cfg.seed, 3])
    run = RunLog()
    acc: dict[str, np.ndarray] | None = None
    pending = 0
    micro = 0
    t0 = time.perf_counter()

    def apply(divisor):
        nonlocal acc, pending
        lr = lr_schedule(params.step_count + 1, total_steps, cfg.base_lr, cfg.warmup_fraction, cfg.decay)
        scale = cfg.accumulation_steps / divisor
        grads = acc if scale == 1 else {k: v * scale for k, v in acc.items()}
        nx.adam_step(params, grads, lr)
        acc, pending = None, 0

    for epoch in range(cfg.epochs):
        for batch_no, idx in enumerate(batch_indices(len(data), cfg.batch_size, shuffle_rng)):
            loss, parts = _task_loss(cfg, model, data, epoch, batch_no, idx, params)
            value = loss.item()
            if not math.isfinite(value):
                bad = [k for k, v in parts.items() if not math.isfinite(v)] or ["total"]
                raise TrainingError(f"non-finite loss at micro-batch {micro} (epoch {epoch}): "
                                    f"component {', '.join(bad)} = {value}")
            grads = nx.backward(loss, params)
            if acc is None:
                acc = {k: g / cfg.accumulation_steps for k, g in grads.items()}
            else:
                for k, g in grads.items():
                    acc[k] += g / cfg.accumulation_steps
            pending += 1
            micro += 1
            run.record({"step": micro, "epoch": epoch, "optimizer_step": params.step_count,
                        "lr": lr_schedule(min(params.step_count + 1, total_steps), total_steps, cfg.base_lr,
                                          cfg.warmup_fraction, cfg.decay),
                        "loss": value, **parts, "wall_time": time.perf_counter() - t0})
            if pending == cfg.accumulation_steps:
                apply(cfg.accumulation_steps)
        summary = {"epoch": epoch, "mean_loss": float(np.mean([s["loss"] for s in run.steps if s["epoch"] == epoch]))}
        stop = False
        if on_epoch is not None:
            extra = on_epoch(epoch, params) or {}
            stop = bool(extra.pop("stop", False))
            summary.update(extra)
        run.epochs.append(summary)
        log.info("epoch %d: %s", epoch, summary)
        if cfg.out_dir and cfg.checkpoint_every_epoch:
            save_checkpoint(params, Path(cfg.out_dir) / f"epoch{epoch}.ckpt", model, PROVENANCE[cfg.task])
        if stop:
            break
    if pending:
        apply(pending)
    if cfg.out_dir:
        save_checkpoint(params, Path(cfg.out_dir) / "final.ckpt", model, PROVENANCE[cfg.task])
        run.save(Path(cfg.out_dir) / "runlog.json")
    return TrainResult(params, run, params.step_count)
