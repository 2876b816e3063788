"""DenseNet-style encoder with per-finding PCAM pooling heads.

The feature map taken after the last dense block (norm + ReLU, before the
PCAM heads) is the token corpus handed to the transformer.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import functional as F
from .tensor import Tensor, backward, concat, matmul, reshape, sigmoid, transpose

FINDINGS = (
    "no_finding",
    "cardiomegaly",
    "lung_opacity",
    "edema",
    "consolidation",
    "pneumonia",
    "atelectasis",
    "pneumothorax",
    "pleural_effusion",
    "support_devices",
)

DOWNSAMPLE = 32


@dataclass(frozen=True)
class BackboneConfig:
    growth_rate: int = 16
    block_layers: Tuple[int, ...] = (2, 2, 2, 2)
    num_findings: int = len(FINDINGS)
    input_size: int = 128
    stem_channels: int = 96
    compression: float = 0.75
    bn_size: int = 4
    norm: str = "group"
    groups: int = 128  # upper bound; each norm layer uses gcd(channels, groups)

    def __post_init__(self):
        object.__setattr__(self, "block_layers", tuple(int(n) for n in self.block_layers))
        if len(self.block_layers) != 4:
            raise ValueError("block_layers must list 4 dense blocks")
        if self.norm not in ("group", "batch"):
            raise ValueError(f"norm must be 'group' or 'batch', got {self.norm!r}")
        if self.input_size % DOWNSAMPLE:
            raise ValueError(f"input_size {self.input_size} is not divisible by {DOWNSAMPLE}")

    @classmethod
    def desk(cls, **overrides) -> "BackboneConfig":
        return cls(**overrides)

    @classmethod
    def full(cls, **overrides) -> "BackboneConfig":
        """DenseNet-121 topology at 512x512 (16x16x1024 corpus)."""
        base = dict(
            growth_rate=32, block_layers=(6, 12, 24, 16), input_size=512, stem_channels=64, compression=0.5
        )
        base.update(overrides)
        return cls(**base)

    def channel_plan(self) -> List[Tuple[int, int]]:
        """(input, output) channel counts of each dense block."""
        plan = []
        c = self.stem_channels
        for i, n in enumerate(self.block_layers):
            out = c + n * self.growth_rate
            plan.append((c, out))
            c = int(math.floor(out * self.compression)) if i < 3 else out
        return plan

    @property
    def feature_channels(self) -> int:
        return self.channel_plan()[-1][1]

    @property
    def grid(self) -> int:
        return self.input_size // DOWNSAMPLE

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_layers"] = list(self.block_layers)
        return d


@dataclass
class FeatureCorpus:
    """Backbone feature map (N, C', H', W'), viewed as H'*W' row-major tokens."""

    feature_map: Tensor

    @property
    def grid(self) -> Tuple[int, int]:
        return self.feature_map.shape[2], self.feature_map.shape[3]

    @property
    def channels(self) -> int:
        return self.feature_map.shape[1]

    @property
    def num_tokens(self) -> int:
        h, w = self.grid
        return h * w

    def tokens(self) -> Tensor:
        n, c, h, w = self.feature_map.shape
        return transpose(reshape(self.feature_map, (n, c, h * w)), (0, 2, 1))


@dataclass
class PcamOutput:
    logits: Tensor  # (N, F)
    attention: Tensor  # (N, F, H', W'), each map sums to 1

    @property
    def probabilities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits.data))


def _groups(channels: int, groups: int) -> int:
    return math.gcd(channels, groups)


def init_backbone_params(cfg: BackboneConfig, rng: np.random.Generator):
    """He-initialized conv weights, unit norm gains; returns (params, buffers)."""
    params: Dict[str, Tensor] = {}
    buffers: Dict[str, np.ndarray] = {}

    def conv(name, out_ch, in_ch, k):
        std = math.sqrt(2.0 / (in_ch * k * k))
        params[name] = Tensor(rng.normal(0.0, std, size=(out_ch, in_ch, k, k)), requires_grad=True)

    def norm(name, ch):
        params[f"{name}.gain"] = Tensor(np.ones(ch), requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(ch), requires_grad=True)
        if cfg.norm == "batch":
            buffers[f"{name}.running_mean"] = np.zeros(ch)
            buffers[f"{name}.running_var"] = np.ones(ch)

    conv("backbone.stem.conv", cfg.stem_channels, 1, 7)
    norm("backbone.stem.norm", cfg.stem_channels)
    bottleneck = cfg.bn_size * cfg.growth_rate
    plan = cfg.channel_plan()
    for b, (c_in, c_out) in enumerate(plan, start=1):
        c = c_in
        for layer in range(1, cfg.block_layers[b - 1] + 1):
            p = f"backbone.block{b}.layer{layer}"
            norm(f"{p}.norm1", c)
            conv(f"{p}.conv1", bottleneck, c, 1)
            norm(f"{p}.norm2", bottleneck)
            conv(f"{p}.conv2", cfg.growth_rate, bottleneck, 3)
            c += cfg.growth_rate
        if b < 4:
            norm(f"backbone.trans{b}.norm", c_out)
            conv(f"backbone.trans{b}.conv", plan[b][0], c_out, 1)
    norm("backbone.final_norm", plan[-1][1])
    return params, buffers


def init_pcam_params(channels: int, num_findings: int, rng: np.random.Generator) -> Dict[str, Tensor]:
    std = 1.0 / math.sqrt(channels)
    return {
        "pcam.score.weight": Tensor(rng.normal(0.0, std, size=(num_findings, channels)), requires_grad=True),
        "pcam.score.bias": Tensor(np.zeros(num_findings), requires_grad=True),
        "pcam.classifier.weight": Tensor(rng.normal(0.0, std, size=(num_findings, channels)), requires_grad=True),
        "pcam.classifier.bias": Tensor(np.zeros(num_findings), requires_grad=True),
    }


def _norm(x, name, cfg, params, buffers, training):
    gain, bias = params[f"{name}.gain"], params[f"{name}.bias"]
    if cfg.norm == "batch":
        return F.batch_norm(
            x, gain, bias, buffers[f"{name}.running_mean"], buffers[f"{name}.running_var"], training
        )
    return F.group_norm(x, gain, bias, _groups(x.shape[1], cfg.groups))


def backbone_forward(
    x: Tensor,
    cfg: BackboneConfig,
    params: Dict[str, Tensor],
    buffers: Optional[Dict[str, np.ndarray]] = None,
    training: bool = False,
) -> FeatureCorpus:
    """Encode an (N, 1, H, W) batch into the (H/32) x (W/32) feature corpus."""
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected (N, 1, H, W) input, got {x.shape}")
    h, w = x.shape[2:]
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ValueError(f"input size {h}x{w} is not divisible by {DOWNSAMPLE}")
    buffers = buffers if buffers is not None else {}

    def norm_relu(t, name):
        return _norm(t, name, cfg, params, buffers, training).relu()

    out = F.conv2d(x, params["backbone.stem.conv"], stride=2, padding=3)
    out = F.avg_pool2d(norm_relu(out, "backbone.stem.norm"), 2)
    for b, n_layers in enumerate(cfg.block_layers, start=1):
        for layer in range(1, n_layers + 1):
            p = f"backbone.block{b}.layer{layer}"
            h1 = F.conv2d(norm_relu(out, f"{p}.norm1"), params[f"{p}.conv1"])
            h2 = F.conv2d(norm_relu(h1, f"{p}.norm2"), params[f"{p}.conv2"], padding=1)
            out = concat([out, h2], axis=1)
        if b < 4:
            t = F.conv2d(norm_relu(out, f"backbone.trans{b}.norm"), params[f"backbone.trans{b}.conv"])
            out = F.avg_pool2d(t, 2)
    return FeatureCorpus(norm_relu(out, "backbone.final_norm"))


def pcam_pool(corpus: FeatureCorpus, params: Dict[str, Tensor]) -> PcamOutput:
    """Probability-map attention pooling, one map per finding.

    score = 1x1 conv(f); p = sigmoid(score); w = p / sum(p);
    pooled = sum_loc w * f_loc; logit = <classifier, pooled> + b.
    """
    w_score = params["pcam.score.weight"]
    if w_score.shape[1] != corpus.channels:
        raise ValueError(f"PCAM head expects {w_score.shape[1]} channels, corpus has {corpus.channels}")
    tokens = corpus.tokens()  # (N, T, C)
    scores = matmul(tokens, transpose(w_score, (1, 0))) + params["pcam.score.bias"]  # (N, T, F)
    prob = sigmoid(scores)
    weights = prob / prob.sum(axis=1, keepdims=True)
    weights_ft = transpose(weights, (0, 2, 1))  # (N, F, T)
    pooled = matmul(weights_ft, tokens)  # (N, F, C)
    logits = (pooled * params["pcam.classifier.weight"]).sum(axis=-1) + params["pcam.classifier.bias"]
    n, f, _ = weights_ft.shape
    h, w = corpus.grid
    return PcamOutput(logits, reshape(weights_ft, (n, f, h, w)))


def finding_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Multi-label BCE summed over findings, averaged over the batch."""
    return F.bce_with_logits(logits, labels).sum(axis=1).mean()


def pretrain_step(x: Tensor, labels: np.ndarray, state, optimizer) -> float:
    """One Stage-A update of backbone + PCAM heads; returns the batch loss."""
    names = [n for n in state.params if n.startswith(("backbone.", "pcam."))]
    for n in names:
        state.params[n].zero_grad()
    corpus = backbone_forward(x, state.backbone_cfg, state.params, state.buffers, training=True)
    loss = finding_loss(pcam_pool(corpus, state.params).logits, labels)
    value = loss.item()
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite Stage-A loss {value}")
    backward(loss)
    bad = [n for n in names if state.params[n].grad is not None and not np.all(np.isfinite(state.params[n].grad))]
    if bad:
        raise FloatingPointError(f"non-finite gradients in parameter blocks: {', '.join(bad)}")
    optimizer.step({n: state.params[n] for n in names})
    return value
