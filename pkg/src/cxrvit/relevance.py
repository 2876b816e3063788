"""Token saliency from gradient-weighted attention relevance.

Starting from R = I, every layer contributes R <- R + A_bar @ R with
A_bar = mean_heads(max(grad(A) * A, 0)). Row 0 (class token) of the final R,
restricted to the spatial tokens, is the relevance of each grid cell.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .preprocess import resize


class DegenerateSaliencyWarning(UserWarning):
    """Every spatial token received zero relevance."""


@dataclass
class ForwardTrace:
    """Per-layer attention maps (heads, T, T) and gradients of one target logit.

    Arrays may carry a leading batch axis: (N, heads, T, T).
    """

    attentions: List[np.ndarray]
    grid: Tuple[int, int]
    num_classes: int
    gradients: Optional[List[np.ndarray]] = None
    target_class: Optional[int] = None
    logits: Optional[np.ndarray] = None

    def sample(self, i: int) -> "ForwardTrace":
        grads = None if self.gradients is None else [g[i] for g in self.gradients]
        logits = None if self.logits is None else self.logits[i]
        return ForwardTrace([a[i] for a in self.attentions], self.grid, self.num_classes, grads, self.target_class, logits)


@dataclass
class SaliencyMap:
    values: np.ndarray  # (H', W') in [0, 1]
    raw: np.ndarray  # (H', W') pre-normalization relevance
    degenerate: bool = False
    relevance: np.ndarray = field(default=None, repr=False)  # full (T, T) relevance matrix

    def argmax_cell(self) -> Tuple[int, int]:
        idx = int(np.argmax(self.raw))
        return divmod(idx, self.raw.shape[1])


def aggregate_heads(attention: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """Mean over heads of the positive part of gradient * attention."""
    return np.maximum(gradient * attention, 0.0).mean(axis=-3)


def relevance_matrix(attentions, gradients) -> np.ndarray:
    if not attentions:
        raise ValueError("relevance_matrix needs at least the token count; use relevance_propagate for L=0")
    t = attentions[0].shape[-1]
    lead = attentions[0].shape[:-3]
    r = np.broadcast_to(np.eye(t), lead + (t, t)).copy()
    for a, g in zip(attentions, gradients, strict=True):
        r = r + aggregate_heads(a, g) @ r
    return r


def normalize_map(raw: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant positive map becomes all ones."""
    lo, hi = raw.min(), raw.max()
    if hi > lo:
        return (raw - lo) / (hi - lo)
    if hi > 0:
        return np.ones_like(raw)
    return np.zeros_like(raw)


def relevance_propagate(trace: ForwardTrace, target_class: int) -> SaliencyMap:
    if not 0 <= target_class < trace.num_classes:
        raise ValueError(f"target class {target_class} out of range [0, {trace.num_classes})")
    h, w = trace.grid
    t = 1 + h * w
    if trace.attentions:
        if trace.gradients is None or len(trace.gradients) != len(trace.attentions):
            raise ValueError("trace has no attention gradients; run full_forward with target_class set")
        if trace.target_class != target_class:
            raise ValueError(f"trace gradients were captured for class {trace.target_class}, not {target_class}")
        if trace.attentions[0].ndim != 3:
            raise ValueError("relevance_propagate works on a single-sample trace; use trace.sample(i)")
        r = relevance_matrix(trace.attentions, trace.gradients)
    else:
        r = np.eye(t)
    if r.shape[-1] != t:
        raise ValueError(f"trace token count {r.shape[-1]} does not match grid {h}x{w} + class token")
    raw = r[0, 1:].reshape(h, w)
    raw = np.maximum(raw, 0.0)
    degenerate = not raw.max() > 0
    if degenerate:
        warnings.warn("saliency map is all zero (no positive gradient-weighted attention)", DegenerateSaliencyWarning)
    return SaliencyMap(normalize_map(raw), raw, degenerate, r)


def cell_hits_mask(cell: Tuple[int, int], grid: Tuple[int, int], mask: np.ndarray) -> bool:
    """Does grid cell (row, col) overlap any true pixel of a full-resolution mask?"""
    h, w = mask.shape
    r, c = cell
    rows = slice(r * h // grid[0], -(-(r + 1) * h // grid[0]))
    cols = slice(c * w // grid[1], -(-(c + 1) * w // grid[1]))
    return bool(np.asarray(mask)[rows, cols].any())


def upsample(values: np.ndarray, height: int, width: int) -> np.ndarray:
    return np.clip(resize(values, height, width), 0.0, 1.0)


def render_overlay(saliency: SaliencyMap, img: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend the upsampled map over a grayscale image as RGB (H, W, 3) floats in [0, 1].

    Blending weight is ``alpha * heat`` per pixel, so a zero map returns the image.
    """
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    heat = upsample(saliency.values, *img.shape)
    color = np.stack([np.ones_like(heat), heat, np.zeros_like(heat)], axis=-1)  # yellow-red ramp
    weight = (alpha * heat)[..., None]
    base = np.repeat(img[..., None], 3, axis=-1)
    return base * (1.0 - weight) + color * weight


def write_overlay_png(path, overlay: np.ndarray) -> None:
    from PIL import Image

    q = np.round(np.clip(overlay, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q).save(path, optimize=False)
