"""Encoder-only transformer over the backbone feature corpus."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Tuple

import numpy as np
from scipy import stats

from . import functional as F
from .backbone import FeatureCorpus
from .tensor import Tensor, broadcast_to, concat, matmul, reshape, transpose

CLASSES = ("normal", "other_infection", "covid19")


@dataclass(frozen=True)
class TransformerConfig:
    dim: int = 256
    layers: int = 4
    heads: int = 8
    mlp_ratio: float = 4.0
    num_classes: int = len(CLASSES)
    in_channels: int = 128
    grid: Tuple[int, int] = (4, 4)
    ln_eps: float = 1e-6
    init_std: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by {self.heads} heads")

    @property
    def num_tokens(self) -> int:
        return 1 + self.grid[0] * self.grid[1]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def hidden(self) -> int:
        return int(round(self.mlp_ratio * self.dim))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d


def _trunc_normal(rng: np.random.Generator, std: float, shape) -> np.ndarray:
    # truncated at two standard deviations
    return stats.truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)


def init_transformer_params(cfg: TransformerConfig, rng: np.random.Generator) -> Dict[str, Tensor]:
    d, h = cfg.dim, cfg.hidden
    shapes = {
        "vit.proj.weight": (d, cfg.in_channels, 1, 1),
        "vit.proj.bias": (d,),
        "vit.cls_token": (1, d),
        "vit.pos_embed": (cfg.num_tokens, d),
    }
    for i in range(cfg.layers):
        p = f"vit.layers.{i}"
        shapes.update(
            {
                f"{p}.ln1.gain": (d,),
                f"{p}.ln1.bias": (d,),
                f"{p}.attn.qkv.weight": (d, 3 * d),
                f"{p}.attn.qkv.bias": (3 * d,),
                f"{p}.attn.out.weight": (d, d),
                f"{p}.attn.out.bias": (d,),
                f"{p}.ln2.gain": (d,),
                f"{p}.ln2.bias": (d,),
                f"{p}.mlp.fc1.weight": (d, h),
                f"{p}.mlp.fc1.bias": (h,),
                f"{p}.mlp.fc2.weight": (h, d),
                f"{p}.mlp.fc2.bias": (d,),
            }
        )
    shapes["vit.head.weight"] = (d, cfg.num_classes)
    shapes["vit.head.bias"] = (cfg.num_classes,)

    params = {}
    for name, shape in shapes.items():
        if name.endswith(".gain"):
            value = np.ones(shape)
        elif name.endswith(".weight") or name == "vit.cls_token":
            value = _trunc_normal(rng, cfg.init_std, shape)
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value, requires_grad=True)
    return params


def project(corpus: FeatureCorpus, params: Dict[str, Tensor]) -> Tensor:
    """1x1 convolution C' -> D, flattened row-major to (N, H'*W', D)."""
    weight = params["vit.proj.weight"]
    if weight.shape[1] != corpus.channels:
        raise ValueError(f"projection expects {weight.shape[1]} channels, corpus has {corpus.channels}")
    fp = F.conv2d(corpus.feature_map, weight, params["vit.proj.bias"])
    n, d, h, w = fp.shape
    return transpose(reshape(fp, (n, d, h * w)), (0, 2, 1))


def assemble(tokens: Tensor, cls_token: Tensor, pos_embed: Tensor) -> Tensor:
    """Prepend the class token and add positional embeddings: (N, 1+T, D)."""
    n, t, d = tokens.shape
    if pos_embed.shape != (t + 1, d):
        raise ValueError(f"positional embedding shape {pos_embed.shape} does not fit {t} tokens + class token of dim {d}")
    cls = broadcast_to(reshape(cls_token, (1, 1, d)), (n, 1, d))
    return concat([cls, tokens], axis=1) + pos_embed


def attention(z: Tensor, params: Dict[str, Tensor], prefix: str, heads: int) -> Tuple[Tensor, Tensor]:
    n, t, d = z.shape
    dh = d // heads
    qkv = F.linear(z, params[f"{prefix}.qkv.weight"], params[f"{prefix}.qkv.bias"])
    qkv = transpose(reshape(qkv, (n, t, 3, heads, dh)), (2, 0, 3, 1, 4))  # (3, N, h, T, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = F.softmax(scores, axis=-1)  # (N, h, T, T)
    ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (n, t, d))
    return F.linear(ctx, params[f"{prefix}.out.weight"], params[f"{prefix}.out.bias"]), attn


def encoder_layer(z: Tensor, params: Dict[str, Tensor], index: int, cfg: TransformerConfig) -> Tuple[Tensor, Tensor]:
    """Pre-norm block: z' = MSA(LN(z)) + z; out = MLP(LN(z')) + z'."""
    p = f"vit.layers.{index}"
    msa, attn = attention(F.layer_norm(z, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"], cfg.ln_eps), params, f"{p}.attn", cfg.heads)
    z_mid = msa + z
    h = F.layer_norm(z_mid, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"], cfg.ln_eps)
    h = F.linear(F.linear(h, params[f"{p}.mlp.fc1.weight"], params[f"{p}.mlp.fc1.bias"]).gelu(), params[f"{p}.mlp.fc2.weight"], params[f"{p}.mlp.fc2.bias"])
    return h + z_mid, attn


def classify(z_last: Tensor, params: Dict[str, Tensor]) -> Tensor:
    """Linear head on the class-token state only."""
    return F.linear(z_last[:, 0, :], params["vit.head.weight"], params["vit.head.bias"])


def transformer_forward(
    corpus: FeatureCorpus, params: Dict[str, Tensor], cfg: TransformerConfig, retain_attention: bool = False
) -> Tuple[Tensor, List[Tensor]]:
    """Logits (N, num_classes) and the per-layer attention tensors (N, heads, T, T)."""
    if corpus.grid != cfg.grid:
        raise ValueError(f"corpus grid {corpus.grid} does not match configured grid {cfg.grid}")
    z = assemble(project(corpus, params), params["vit.cls_token"], params["vit.pos_embed"])
    attentions = []
    for i in range(cfg.layers):
        z, attn = encoder_layer(z, params, i, cfg)
        if retain_attention:
            attn.retain_grad()
        attentions.append(attn)
    return classify(z, params), attentions
