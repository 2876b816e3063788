"""Stage A (backbone + PCAM on finding labels) and Stage B (transformer on disease classes) loops."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import functional as F
from .backbone import BackboneConfig, FeatureCorpus, pretrain_step
from .metrics import EvalReport, evaluate_scores
from .model import ModelState, attach_transformer, default_vit_config, encode, init_model_state
from .optim import SGD, Adam, clip_global_norm, global_norm, lr_at, step_decay_lr
from .preprocess import PrepConfig, fit_normalization, preprocess_batch
from .synth import DatasetSplit
from .tensor import Tensor, backward, no_grad
from .transformer import CLASSES, transformer_forward


def rng_for(seed: int, purpose: str) -> np.random.Generator:
    """Independent generator per purpose, all keyed from one seed."""
    key = int.from_bytes(hashlib.sha256(purpose.encode()).digest()[:4], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


class BatchSampler:
    """Seeded per-epoch shuffling; yields index arrays of ``batch_size`` (the last one of an epoch may be short)."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n <= 0:
            raise ValueError("cannot sample batches from an empty split")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos >= self._order.size:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


class RunManifest:
    """Line-delimited JSON run log, flushed after every record."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8")

    def write(self, kind: str, **payload) -> None:
        self._fh.write(json.dumps({"kind": kind, **payload}, sort_keys=True) + "\n")
        self._fh.flush()

    def step(self, step: int, lr: float, loss: float, **extra) -> None:
        self.write("step", step=step, lr=lr, loss=loss, **extra)

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @staticmethod
    def read(path) -> List[dict]:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


class TrainingAborted(FloatingPointError):
    """Non-finite loss or gradient; the last good state was written out."""


# -- Stage A -----------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    lr: float = 2e-3
    total_steps: int = 600
    batch_size: int = 8
    seed: int = 0
    milestones: Tuple[float, ...] = (0.5, 0.75)
    gamma: float = 0.1

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("pretrain lr and batch size must be positive, steps nonnegative")

    @classmethod
    def full(cls, **kw) -> "PretrainConfig":
        return cls(**{"lr": 1e-4, "total_steps": 160_000, **kw})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


@dataclass
class PretrainResult:
    state: ModelState
    losses: List[float]

    @property
    def reduction(self) -> float:
        """Relative drop from the first-step loss to the mean of the final tenth of steps."""
        if len(self.losses) < 2:
            return 0.0
        tail = self.losses[-max(1, len(self.losses) // 10) :]
        return 1.0 - float(np.mean(tail)) / self.losses[0]


def pretrain(
    data: DatasetSplit,
    backbone_cfg: BackboneConfig,
    cfg: PretrainConfig,
    manifest: Optional[RunManifest] = None,
    prep: Optional[PrepConfig] = None,
) -> PretrainResult:
    """Stage A: fit normalization on ``data``, then train backbone + PCAM heads with Adam and step decay."""
    images = data.images
    prep = fit_normalization(images, prep or PrepConfig(size=backbone_cfg.input_size))
    if manifest:
        manifest.write("prep", **prep.to_dict())
    x = preprocess_batch(images, prep)
    labels = data.findings.astype(np.float64)
    state = init_model_state(backbone_cfg, rng_for(cfg.seed, "backbone-init"), prep=prep)
    opt = Adam(cfg.lr)
    sampler = BatchSampler(len(x), cfg.batch_size, rng_for(cfg.seed, "pretrain-batches"))
    losses = []
    for step in range(cfg.total_steps):
        idx = sampler.next()
        opt.lr = step_decay_lr(step, cfg.lr, cfg.total_steps, cfg.milestones, cfg.gamma)
        loss = pretrain_step(Tensor(x[idx]), labels[idx], state, opt)
        losses.append(loss)
        if manifest:
            manifest.step(step, opt.lr, loss)
    return PretrainResult(state, losses)


# -- Stage B -----------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    max_grad_norm: float = 1.0
    total_steps: int = 2000
    warmup_steps: int = 100
    batch_size: int = 8
    backbone_trainable: bool = True
    seed: int = 0
    class_weighted: bool = False
    val_fraction: float = 0.1
    dim: int = 256
    layers: int = 4
    heads: int = 8
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ValueError("step counts must be nonnegative")
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise ValueError(f"warmup_steps {self.warmup_steps} must be below total_steps {self.total_steps}")
        if min(self.lr, self.max_grad_norm, self.batch_size) <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr, max_grad_norm and batch_size must be positive and momentum in [0, 1)")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")

    @classmethod
    def full(cls, **kw) -> "TrainConfig":
        return cls(**{"total_steps": 10_000, "warmup_steps": 500, **kw})

    def lr_at(self, step: int) -> float:
        return lr_at(step, self.lr, self.total_steps, self.warmup_steps)

    def with_steps(self, steps: int) -> "TrainConfig":
        """Override the step budget, shrinking warm-up to 5% when it no longer fits."""
        warmup = self.warmup_steps if self.warmup_steps < steps else steps // 20
        return replace(self, total_steps=steps, warmup_steps=warmup)

    def to_dict(self) -> dict:
        return asdict(self)


def split_validation(labels: np.ndarray, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Stratified, seeded (train, validation) index split."""
    rng = rng_for(seed, "validation-split")
    train, val = [], []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        idx = idx[rng.permutation(idx.size)]
        n_val = int(round(fraction * idx.size))
        if fraction > 0:
            n_val = max(n_val, 1)
        val.extend(idx[:n_val])
        train.extend(idx[n_val:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(val, dtype=np.int64))


def class_weights(labels: np.ndarray, k: int = len(CLASSES)) -> np.ndarray:
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    return np.where(counts > 0, counts.sum() / (k * np.maximum(counts, 1)), 0.0)


def encode_batches(state: ModelState, x: np.ndarray, chunk: int = 32) -> np.ndarray:
    """No-grad feature corpora for preprocessed inputs, (N, C', H', W')."""
    out = []
    with no_grad():
        for i in range(0, len(x), chunk):
            out.append(encode(state, Tensor(x[i : i + chunk])).feature_map.data)
    return np.concatenate(out)


def probabilities(state: ModelState, x: np.ndarray, features: Optional[np.ndarray] = None, chunk: int = 32) -> np.ndarray:
    feats = encode_batches(state, x, chunk) if features is None else features
    out = []
    with no_grad():
        for i in range(0, len(feats), chunk):
            logits, _ = transformer_forward(FeatureCorpus(Tensor(feats[i : i + chunk])), state.params, state.vit_cfg)
            z = logits.data - logits.data.max(axis=1, keepdims=True)
            e = np.exp(z)
            out.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(out)


def predictor(state: ModelState):
    """images -> class probabilities, using the state's preprocessing."""

    def fn(images):
        return probabilities(state, preprocess_batch(list(images), state.prep))

    return fn


@dataclass
class TrainResult:
    state: ModelState
    losses: List[float]
    grad_norms: List[float]
    validation: Optional[EvalReport] = None


def prepare_stage_b(stage_a: ModelState, cfg: TrainConfig) -> ModelState:
    """Fresh transformer (seeded) on a Stage-A backbone; freezes the backbone when requested."""
    vit_cfg = default_vit_config(stage_a.backbone_cfg, dim=cfg.dim, layers=cfg.layers, heads=cfg.heads, mlp_ratio=cfg.mlp_ratio)
    state = attach_transformer(stage_a.clone(), vit_cfg, rng_for(cfg.seed, "transformer-init"))
    state.freeze("pcam.")  # the finding heads take no part in Stage B
    if not cfg.backbone_trainable:
        state.freeze("backbone.")
    return state


def train(
    state: ModelState,
    data: DatasetSplit,
    cfg: TrainConfig,
    manifest: Optional[RunManifest] = None,
    checkpoint_path=None,
) -> TrainResult:
    """Stage B: momentum SGD on softmax cross-entropy with clipping and cosine warm-up.

    ``state`` must already carry a transformer (see :func:`prepare_stage_b`);
    frozen blocks are never written. On a non-finite loss or gradient the
    pre-step state is saved to ``checkpoint_path`` and :class:`TrainingAborted`
    is raised.
    """
    labels_all = data.labels
    train_idx, val_idx = split_validation(labels_all, cfg.val_fraction, cfg.seed)
    x_all = preprocess_batch(data.images, state.prep)
    x, y = x_all[train_idx], labels_all[train_idx]
    weights = class_weights(y) if cfg.class_weighted else None
    params = state.trainable()
    frozen_backbone = not any(n.startswith("backbone.") for n in params)
    # with a frozen backbone the corpus of each image never changes, so encode once
    feats = encode_batches(state, x) if frozen_backbone and cfg.total_steps > 0 else None
    if manifest:
        manifest.write(
            "split", train=train_idx.tolist(), validation=val_idx.tolist(), frozen=sorted(state.frozen),
            trainable=sorted(params),
        )
    opt = SGD(cfg.lr, cfg.momentum)
    sampler = BatchSampler(len(x), cfg.batch_size, rng_for(cfg.seed, "train-batches"))
    losses, norms = [], []
    for step in range(cfg.total_steps):
        idx = sampler.next()
        for p in params.values():
            p.zero_grad()
        corpus = FeatureCorpus(Tensor(feats[idx])) if feats is not None else encode(state, Tensor(x[idx]), training=True)
        logits, _ = transformer_forward(corpus, state.params, state.vit_cfg)
        loss = F.cross_entropy(logits, y[idx], weights)
        value = loss.item()
        if math.isfinite(value):
            backward(loss)
            grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
        if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            bad = "loss" if not math.isfinite(value) else ", ".join(n for n, g in grads.items() if not np.all(np.isfinite(g)))
            if checkpoint_path is not None:
                state.save(checkpoint_path)
            if manifest:
                manifest.write("abort", step=step, reason=f"non-finite {bad}")
            raise TrainingAborted(f"step {step}: non-finite {bad}; last good state kept")
        names = list(grads)
        clipped, norm = clip_global_norm([grads[n] for n in names], cfg.max_grad_norm)
        post = global_norm(clipped)
        if post > cfg.max_grad_norm + 1e-12:
            raise AssertionError(f"clipped gradient norm {post} exceeds {cfg.max_grad_norm}")
        opt.lr = cfg.lr_at(step)
        opt.step(params, dict(zip(names, clipped)))
        losses.append(value)
        norms.append(norm)
        if manifest:
            manifest.step(step, opt.lr, value, grad_norm=norm)
    for p in state.params.values():
        p.zero_grad()
    validation = None
    if val_idx.size and len(set(labels_all[val_idx].tolist())) == len(CLASSES):
        probs = probabilities(state, x_all[val_idx])
        validation = evaluate_scores(probs, labels_all[val_idx], "validation")
        if manifest:
            manifest.write("validation", macro=validation.macro)
    return TrainResult(state, losses, norms, validation)
