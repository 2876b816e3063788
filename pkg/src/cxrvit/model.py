"""Complete parameter set (backbone + PCAM heads + transformer) and the end-to-end forward."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple, Union

import numpy as np

from .backbone import BackboneConfig, FeatureCorpus, backbone_forward, init_backbone_params, init_pcam_params
from .preprocess import PrepConfig, preprocess_batch
from .relevance import ForwardTrace
from .serialize import FLAG_BUFFER, FLAG_TRAINABLE, Checkpoint
from .tensor import Tensor, backward, no_grad
from .transformer import TransformerConfig, init_transformer_params, transformer_forward


@dataclass
class ModelState:
    backbone_cfg: BackboneConfig
    prep: PrepConfig
    params: Dict[str, Tensor]
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    vit_cfg: Optional[TransformerConfig] = None
    frozen: set = field(default_factory=set)

    # -- partitions --------------------------------------------------------
    def names(self, prefix: Union[str, Tuple[str, ...]] = "") -> list:
        return [n for n in self.params if n.startswith(prefix)]

    def trainable(self) -> Dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if not any(n.startswith(f) for f in self.frozen)}

    def freeze(self, prefix: str) -> None:
        self.frozen.add(prefix)

    def digest(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for name in self.names(prefix):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def clone(self) -> "ModelState":
        params = {n: Tensor(p.data, requires_grad=True) for n, p in self.params.items()}
        buffers = {n: b.copy() for n, b in self.buffers.items()}
        return ModelState(self.backbone_cfg, self.prep, params, buffers, self.vit_cfg, set(self.frozen))

    # -- checkpoints -------------------------------------------------------
    def config_dict(self) -> dict:
        return {
            "backbone": self.backbone_cfg.to_dict(),
            "transformer": None if self.vit_cfg is None else self.vit_cfg.to_dict(),
            "prep": self.prep.to_dict(),
            "frozen": sorted(self.frozen),
        }

    def to_checkpoint(self) -> Checkpoint:
        ckpt = Checkpoint(self.config_dict())
        trainable = self.trainable()
        for name, p in self.params.items():
            ckpt.blocks[name] = p.data
            ckpt.flags[name] = FLAG_TRAINABLE if name in trainable else 0
        for name, b in self.buffers.items():
            ckpt.blocks[name] = b
            ckpt.flags[name] = FLAG_BUFFER
        return ckpt

    def save(self, path) -> str:
        return self.to_checkpoint().save(path)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ModelState":
        cfg = ckpt.config
        bcfg = BackboneConfig(**cfg["backbone"])
        vcfg = TransformerConfig(**cfg["transformer"]) if cfg.get("transformer") else None
        prep = PrepConfig(**cfg["prep"])
        params, buffers = {}, {}
        for name, arr in ckpt.blocks.items():
            if ckpt.flags.get(name, 0) & FLAG_BUFFER:
                buffers[name] = arr.copy()
            else:
                params[name] = Tensor(arr, requires_grad=True)
        state = cls(bcfg, prep, params, buffers, vcfg, set(cfg.get("frozen", [])))
        state.validate()
        return state

    @classmethod
    def load(cls, path) -> "ModelState":
        return cls.from_checkpoint(Checkpoint.load(path))

    def validate(self) -> None:
        """Check parameter shapes against the configs (e.g. positional table vs token grid)."""
        rng = np.random.default_rng(0)
        ref_params, ref_buffers = init_backbone_params(self.backbone_cfg, rng)
        ref_params.update(init_pcam_params(self.backbone_cfg.feature_channels, self.backbone_cfg.num_findings, rng))
        if self.vit_cfg is not None:
            ref_params.update(init_transformer_params(self.vit_cfg, rng))
        for name, ref in ref_params.items():
            if name not in self.params:
                raise ValueError(f"checkpoint is missing parameter block {name}")
            if self.params[name].shape != ref.shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, config implies {ref.shape}")
        extra = set(self.params) - set(ref_params)
        if extra:
            raise ValueError(f"checkpoint has unexpected blocks: {sorted(extra)[:5]}")


def init_model_state(
    backbone_cfg: BackboneConfig,
    rng: np.random.Generator,
    vit_cfg: Optional[TransformerConfig] = None,
    prep: Optional[PrepConfig] = None,
) -> ModelState:
    params, buffers = init_backbone_params(backbone_cfg, rng)
    params.update(init_pcam_params(backbone_cfg.feature_channels, backbone_cfg.num_findings, rng))
    if vit_cfg is not None:
        params.update(init_transformer_params(vit_cfg, rng))
    return ModelState(backbone_cfg, prep or PrepConfig(size=backbone_cfg.input_size), params, buffers, vit_cfg)


def default_vit_config(backbone_cfg: BackboneConfig, **overrides) -> TransformerConfig:
    g = backbone_cfg.grid
    return TransformerConfig(in_channels=backbone_cfg.feature_channels, grid=(g, g), **overrides)


def attach_transformer(state: ModelState, vit_cfg: TransformerConfig, rng: np.random.Generator) -> ModelState:
    """Fresh transformer on top of an existing (Stage-A) backbone."""
    if vit_cfg.in_channels != state.backbone_cfg.feature_channels:
        raise ValueError("transformer input channels do not match backbone feature channels")
    params = {n: p for n, p in state.params.items() if not n.startswith("vit.")}
    params.update(init_transformer_params(vit_cfg, rng))
    return ModelState(state.backbone_cfg, state.prep, params, state.buffers, vit_cfg, set(state.frozen))


def encode(state: ModelState, x: Tensor, training: bool = False) -> FeatureCorpus:
    return backbone_forward(x, state.backbone_cfg, state.params, state.buffers, training)


def as_batch(x, state: ModelState) -> Tensor:
    """Raw image(s) -> preprocessed (N, 1, H, W) tensor; tensors pass through untouched."""
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and x.ndim == 2:
        x = [x]
    return Tensor(preprocess_batch(list(x), state.prep))


def full_forward(
    x, state: ModelState, target_class: Optional[int] = None, training: bool = False
) -> Tuple[Tensor, ForwardTrace]:
    """Image(s) -> logits and a trace of per-layer attention.

    ``x`` is a raw 2-D image, a sequence of images, or an already preprocessed
    (N, 1, H, W) tensor. With ``target_class`` set, the gradient of that logit
    (summed over the batch; samples are independent) is captured for every
    attention map.
    """
    if state.vit_cfg is None:
        raise ValueError("model state has no transformer; attach one first")
    batch = as_batch(x, state)
    cfg = state.vit_cfg
    if target_class is not None and not 0 <= target_class < cfg.num_classes:
        raise ValueError(f"target class {target_class} out of range [0, {cfg.num_classes})")
    if target_class is None:
        with no_grad():
            logits, attn = transformer_forward(encode(state, batch, training), state.params, cfg)
        trace = ForwardTrace([a.data for a in attn], cfg.grid, cfg.num_classes, logits=logits.data)
        return logits, trace
    logits, attn = transformer_forward(encode(state, batch, training), state.params, cfg, retain_attention=True)
    backward(logits[:, target_class].sum())
    for p in state.params.values():
        p.zero_grad()
    trace = ForwardTrace(
        [a.data for a in attn], cfg.grid, cfg.num_classes, [a.grad for a in attn], target_class, logits.data
    )
    return logits.detach(), trace


def predict_proba(state: ModelState, batch: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Softmax class probabilities for preprocessed (N, 1, H, W) inputs."""
    out = []
    with no_grad():
        for i in range(0, len(batch), batch_size):
            logits, _ = transformer_forward(encode(state, Tensor(batch[i : i + batch_size])), state.params, state.vit_cfg)
            z = logits.data - logits.data.max(axis=1, keepdims=True)
            e = np.exp(z)
            out.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(out) if out else np.zeros((0, state.vit_cfg.num_classes))
