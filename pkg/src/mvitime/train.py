"""Contrastive pre-training, fine-tuning and backbone combination."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import AugmentConfig, view_batch
from .contrastive import build_cross_subject_batch, nt_xent, subject_features
from .errors import ConfigMismatch, DimMismatch, EmptyDataset, ShapeMismatch, StepOutOfRange
from .ingest import EpochDataset
from .model import (
    Checkpoint,
    CombinedModel,
    ModelConfig,
    MViTime,
    build_model,
    init_weights,
    load_checkpoint,
    save_checkpoint,
)
from .seeding import substream, subseed


@dataclass(frozen=True)
class TrainConfig:
    pretrain_batch: int = 128
    finetune_batch: int = 512
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    total_steps: int = 1000
    warmup_steps: int | None = None  # None: 5% of total_steps
    temperature: float = 0.5
    combine_alpha: float = 0.5
    seed: int = 0
    checkpoint_every: int = 0
    max_steps: int | None = None  # stop early (the schedule still spans total_steps)

    def __post_init__(self):
        if self.pretrain_batch < 2 or self.finetune_batch < 2:
            raise ValueError("batch sizes must be >= 2")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0 <= self.warmup <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if not 0.0 <= self.combine_alpha <= 1.0:
            raise ValueError("combine_alpha must lie in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")

    @property
    def warmup(self) -> int:
        if self.warmup_steps is None:
            return int(round(0.05 * self.total_steps))
        return self.warmup_steps

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def finetune_defaults(**overrides) -> TrainConfig:
    return TrainConfig(**{"base_lr": 0.01, **overrides})


@dataclass
class TrainReport:
    phase: str
    losses: list = field(default_factory=list)
    seed: int = 0
    config_digest: str = ""
    wall_clock_s: float = 0.0
    subjects_seen: list = field(default_factory=list)
    pca_subjects: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")

    @property
    def steps(self) -> int:
        return len(self.losses)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["final_loss"] = self.final_loss
        d["steps"] = self.steps
        return d

    def loss_csv(self) -> str:
        return "step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(self.losses))


# ---- schedule and optimiser --------------------------------------------------------

def cosine_warmup_lr(step: int, config: TrainConfig) -> float:
    """Linear ramp to ``base_lr`` over the warm-up, then half-cosine decay to 0."""
    total, warm, base = config.total_steps, config.warmup, config.base_lr
    if not 0 <= step <= total:
        raise StepOutOfRange(f"step {step} outside [0, {total}]")
    if step < warm:
        return base * step / warm
    if total == warm:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / (total - warm)))


def sgd_step(params, grads, lr, momentum, weight_decay, velocity=None):
    """One SGD update on numpy arrays: v <- m v + g + w theta; theta <- theta - lr v."""
    params = [np.asarray(p, dtype=np.float64) for p in params]
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    if not len(params) == len(grads) == len(velocity):
        raise ShapeMismatch("params, grads and velocity differ in count")
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != np.shape(v):
            raise ShapeMismatch(f"shape mismatch {p.shape} / {g.shape} / {np.shape(v)}")
        v = momentum * np.asarray(v) + g + weight_decay * p
        new_v.append(v)
        new_p.append(p - lr * v)
    return new_p, new_v


class SGD:
    """In-place torch version of :func:`sgd_step` over a module's parameters."""

    def __init__(self, params, momentum: float, weight_decay: float):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float):
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            v.mul_(self.momentum).add_(g).add_(p, alpha=self.weight_decay)
            p.sub_(lr * v)


# ---- shared loop ----------------------------------------------------------------------

def _batch_indices(n: int, batch: int, seed: int, step: int) -> np.ndarray:
    """Sampling without replacement, reshuffled every pass over the data."""
    per_pass = n // batch
    order = substream(seed, "batch", step // per_pass).permutation(n)
    j = step % per_pass
    return order[j * batch:(j + 1) * batch]


def _named_params(model: nn.Module):
    return [(name, p) for name, p in model.named_parameters()]


def _save_state(directory: Path, tag: str, model, optimizer: SGD, step: int, report: TrainReport):
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"step": step, "report": report.to_dict()}
    save_checkpoint(directory / f"{tag}.ckpt", Checkpoint.from_model(model, meta))
    names = [n for n, _ in _named_params(model)]
    velocity = {n: v.detach().cpu().numpy() for n, v in zip(names, optimizer.velocity)}
    save_checkpoint(directory / f"{tag}.state", Checkpoint({"type": "sgd-velocity"}, velocity, meta))


def _load_state(resume, model, optimizer: SGD) -> tuple[int, list]:
    resume = Path(resume)
    ckpt = load_checkpoint(resume.with_suffix(".ckpt"))
    trained = ckpt.build(next(model.parameters()).dtype)
    model.load_state_dict(trained.state_dict())
    state = load_checkpoint(resume.with_suffix(".state"))
    for (name, _), v in zip(_named_params(model), optimizer.velocity):
        v.copy_(torch.from_numpy(state.parameters[name]).to(v.dtype))
    return int(state.metadata["step"]), list(state.metadata["report"]["losses"])


def _run(model, config: TrainConfig, loss_fn, report: TrainReport,
         checkpoint_dir=None, resume=None, tag="train"):
    optimizer = SGD(model.parameters(), config.momentum, config.weight_decay)
    start = 0
    if resume is not None:
        start, report.losses = _load_state(resume, model, optimizer)
    stop = config.total_steps if config.max_steps is None else min(config.max_steps, config.total_steps)
    t0 = time.perf_counter()
    model.train()
    for step in range(start, stop):
        optimizer.zero_grad()
        loss = loss_fn(step)
        loss.backward()
        optimizer.step(cosine_warmup_lr(step + 1, config))
        report.losses.append(float(loss.detach()))
        if checkpoint_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            _save_state(Path(checkpoint_dir), f"{tag}-step{step + 1}", model, optimizer, step + 1, report)
    report.wall_clock_s = time.perf_counter() - t0
    if checkpoint_dir:
        _save_state(Path(checkpoint_dir), f"{tag}-final", model, optimizer, stop, report)
    model.eval()
    return model


def _as_tensor(x: np.ndarray, like: nn.Module) -> torch.Tensor:
    dtype = next(like.parameters()).dtype
    return torch.as_tensor(np.asarray(x), dtype=dtype)[:, None, :]


# ---- pre-training ----------------------------------------------------------------------

def pretrain_self(data: EpochDataset, model_config: ModelConfig, config: TrainConfig,
                  augment: AugmentConfig | None = None, model: nn.Module | None = None,
                  checkpoint_dir=None, resume=None):
    """Self-contrast pre-training: two views of the same epoch are positives.

    Returns the trained model and its :class:`TrainReport`.
    """
    if len(data) == 0:
        raise EmptyDataset("no epochs to pre-train on")
    if data.epoch_length != model_config.input_length:
        raise ConfigMismatch(f"epochs have length {data.epoch_length}, model expects {model_config.input_length}")
    augment = augment or AugmentConfig(seed=config.seed)
    batch = min(config.pretrain_batch, len(data))
    if batch < 2:
        raise EmptyDataset("need at least two epochs per batch")
    model = model or build_model(model_config, subseed(config.seed, "init"))
    report = TrainReport("pretrain-self", seed=config.seed, config_digest=config.digest(),
                         subjects_seen=data.subject_ids())

    def loss_fn(step):
        idx = _batch_indices(len(data), batch, config.seed, step)
        views, pairing = view_batch(data.x[idx], augment, substream(augment.seed, "augment", step))
        emb = model.project(model(_as_tensor(views, model)))
        return nt_xent(emb, pairing, config.temperature)

    _run(model, config, loss_fn, report, checkpoint_dir, resume, "pretrain-self")
    return model, report


def pretrain_cross_subject(data: EpochDataset, model_config: ModelConfig, config: TrainConfig,
                           augment: AugmentConfig | None = None, pca_components: int = 1,
                           model: nn.Module | None = None, checkpoint_dir=None, resume=None):
    """Inter-subject contrast: views of the same subject feature are positives.

    Subject features (first epoch of every stage, reduced by a PCA fitted on
    these subjects only) are built once per run.
    """
    subjects = data.subject_ids()
    if len(subjects) < 2:
        raise EmptyDataset("cross-subject pre-training needs at least two subjects")
    features, basis = subject_features(data, subjects, k=pca_components)
    length = len(features[0].vector)
    if length != model_config.input_length:
        raise ConfigMismatch(f"subject features have length {length}, model expects {model_config.input_length}")
    augment = augment or AugmentConfig(seed=config.seed)
    batch = min(config.pretrain_batch, len(features))
    model = model or build_model(model_config, subseed(config.seed, "init-cross"))
    report = TrainReport("pretrain-cross-subject", seed=config.seed, config_digest=config.digest(),
                         subjects_seen=sorted(set(subjects) | set(basis.source_subjects)),
                         pca_subjects=sorted(basis.source_subjects))

    def loss_fn(step):
        idx = _batch_indices(len(features), batch, config.seed, step)
        views, pairing = build_cross_subject_batch(
            [features[i] for i in idx], augment, substream(augment.seed, "augment-cross", step)
        )
        emb = model.project(model(_as_tensor(views, model)))
        return nt_xent(emb, pairing, config.temperature)

    _run(model, config, loss_fn, report, checkpoint_dir, resume, "pretrain-cross")
    return model, report


# ---- fine-tuning -----------------------------------------------------------------------

def _as_model(model_or_ckpt):
    if isinstance(model_or_ckpt, Checkpoint):
        return model_or_ckpt.build()
    if isinstance(model_or_ckpt, (str, Path)):
        return load_checkpoint(model_or_ckpt).build()
    return model_or_ckpt


def finetune(model, data: EpochDataset, config: TrainConfig, checkpoint_dir=None, resume=None):
    """Train the backbone and classifier jointly with 5-class cross-entropy.

    No parameter is frozen; a linear-probe mode is deliberately not offered.
    """
    model = _as_model(model)
    if len(data) == 0:
        raise EmptyDataset("no labelled epochs")
    if data.epoch_length != model.config.input_length:
        raise ConfigMismatch(f"epochs have length {data.epoch_length}, model expects {model.config.input_length}")
    batch = min(config.finetune_batch, len(data))
    report = TrainReport("finetune", seed=config.seed, config_digest=config.digest(),
                         subjects_seen=data.subject_ids())
    labels = torch.as_tensor(data.y)

    def loss_fn(step):
        idx = _batch_indices(len(data), batch, subseed(config.seed, "finetune"), step)
        logits = model.logits(_as_tensor(data.x[idx], model))
        return F.cross_entropy(logits, labels[idx])

    _run(model, config, loss_fn, report, checkpoint_dir, resume, "finetune")
    return model, report


# ---- combination -----------------------------------------------------------------------

def combine_backbones(self_model, cross_model, alpha: float = 0.5, mode: str = "features",
                      seed: int = 0) -> CombinedModel:
    """Join a self-contrast and a cross-subject network.

    ``features`` (MViTime+) mixes backbone outputs and adds a fresh
    classifier; ``full`` (MViTime++) mixes the two complete networks' logits.
    """
    a, b = _as_model(self_model), _as_model(cross_model)
    if not isinstance(a, MViTime) or not isinstance(b, MViTime):
        raise DimMismatch("both branches must be single MViTime networks")
    if a.config.input_length != b.config.input_length:
        raise DimMismatch("branches take different input lengths")
    if mode == "features" and a.feature_dim != b.feature_dim:
        raise DimMismatch(f"feature widths differ: {a.feature_dim} vs {b.feature_dim}")
    if mode == "full" and a.config != b.config:
        raise DimMismatch("full combination needs identical architectures")
    combined = CombinedModel(a, b, alpha, mode)
    if mode == "features":
        init_weights(combined.classifier, seed)
        combined.classifier.to(next(a.parameters()).dtype)
    return combined


def write_report(report: TrainReport, directory, stem: str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for suffix, text in ((".json", json.dumps(report.to_dict(), indent=2)), (".csv", report.loss_csv())):
        path = directory / f"{stem}{suffix}"
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text)
        tmp.replace(path)
