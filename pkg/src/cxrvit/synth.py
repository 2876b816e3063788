"""Seeded synthetic chest-radiograph-like corpus with planted findings.

Images are analytic renderings on normalized coordinates: a body silhouette,
two darker lung fields with rib texture, a bright cardiac shadow, smooth
low-frequency texture and pixel noise. Findings are planted primitives and
their labels are a deterministic function of what was planted. Disease
classes use two of those primitives:

* other infection: one dense focal blob in either lung
* covid19: several faint peripheral blobs in the lower zones of both lungs
* normal: background only

External splits re-render the same class-conditional content under shifted
acquisition parameters (contrast curve, noise, blur, field of view).
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .backbone import FINDINGS
from .preprocess import read_image, write_png
from .transformer import CLASSES

MANIFEST_NAME = "manifest.csv"
PRETRAIN_SPLIT = "pretrain"
TRAIN_SPLIT = "train"
EXTERNAL_SPLITS = ("ext1", "ext2", "ext3")

F_INDEX = {name: i for i, name in enumerate(FINDINGS)}


@dataclass(frozen=True)
class Acquisition:
    """Per-split rendering parameters (the distribution shift)."""

    gamma: float = 1.0
    gain: float = 1.0
    offset: float = 0.0
    noise: float = 0.02
    blur: float = 0.0
    zoom: float = 1.0


DEFAULT_SHIFTS = {
    PRETRAIN_SPLIT: Acquisition(),
    TRAIN_SPLIT: Acquisition(),
    "ext1": Acquisition(gamma=1.35, gain=0.85, offset=0.05, noise=0.03),
    "ext2": Acquisition(gamma=0.8, noise=0.045, blur=0.8),
    "ext3": Acquisition(zoom=0.93, offset=-0.04, noise=0.03, gain=1.1),
}

DEFAULT_COUNTS = {
    TRAIN_SPLIT: (250, 40, 50),
    "ext1": (60, 20, 20),
    "ext2": (60, 30, 20),
    "ext3": (60, 40, 25),
}


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 160
    seed: int = 7
    pretrain_count: int = 800
    finding_rate: float = 0.3
    counts: Dict[str, Tuple[int, int, int]] = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    shifts: Dict[str, Acquisition] = field(default_factory=lambda: dict(DEFAULT_SHIFTS))
    # lesion strength ranges (amplitude on the [0, 1] intensity scale)
    covid_amplitude: Tuple[float, float] = (0.2, 0.3)
    covid_sigma: Tuple[float, float] = (0.04, 0.055)
    covid_blobs: Tuple[int, int] = (3, 5)
    focal_amplitude: Tuple[float, float] = (0.35, 0.5)
    focal_sigma: Tuple[float, float] = (0.055, 0.075)
    label_noise: float = 0.0
    pose_jitter: float = 0.08

    def __post_init__(self):
        for split, counts in self.counts.items():
            if len(counts) != len(CLASSES) or min(counts) < 1:
                raise ValueError(f"split {split} needs at least one image per class, got {counts}")
            if split not in self.shifts:
                raise ValueError(f"split {split} has no acquisition parameters")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = {k: list(v) for k, v in self.counts.items()}
        return d


# -- rendering primitives ----------------------------------------------------


@dataclass
class Anatomy:
    lung_centers: Tuple[Tuple[float, float], Tuple[float, float]]  # (y, x) per lung; index 0 is image-left
    lung_radii: Tuple[float, float]  # (ry, rx)
    heart_center: Tuple[float, float]
    heart_radii: Tuple[float, float]
    brightness: float
    rib_phase: float


def _sample_anatomy(rng: np.random.Generator) -> Anatomy:
    cy = 0.5 + rng.uniform(-0.02, 0.02)
    dx = 0.18 + rng.uniform(-0.015, 0.015)
    ry, rx = 0.3 * rng.uniform(0.95, 1.05), 0.14 * rng.uniform(0.95, 1.05)
    return Anatomy(
        ((cy, 0.5 - dx), (cy, 0.5 + dx)),
        (ry, rx),
        (cy + 0.12, 0.5 + rng.uniform(-0.01, 0.02)),
        (0.12, 0.11),
        rng.uniform(-0.05, 0.05),
        rng.uniform(0, 2 * np.pi),
    )


def _soft_ellipse(yy, xx, center, radii, edge=0.08):
    d = np.sqrt(((yy - center[0]) / radii[0]) ** 2 + ((xx - center[1]) / radii[1]) ** 2)
    return 1.0 / (1.0 + np.exp((d - 1.0) / edge))


def _bump(yy, xx, center, sigma):
    return np.exp(-(((yy - center[0]) ** 2 + (xx - center[1]) ** 2) / (2.0 * sigma**2)))


def _point_in_lung(rng, anat: Anatomy, side: int, y_range=(-0.85, 0.85), outer=None) -> Tuple[float, float]:
    """Rejection-sample a point inside a lung; y in units of the lung's vertical radius."""
    cy, cx = anat.lung_centers[side]
    ry, rx = anat.lung_radii
    while True:
        v = rng.uniform(*y_range)
        u = rng.uniform(-0.85, 0.85)
        if u * u + v * v > 0.7:
            continue
        if outer is not None:
            # lateral half of the lung: image-left lung is lateral towards small x
            lateral = -u if side == 0 else u
            if lateral < outer:
                continue
        return cy + v * ry, cx + u * rx


class _Canvas:
    """Normalized scene coordinates of each pixel; ``zoom`` < 1 widens the field of view."""

    def __init__(self, size: int, zoom: float, offset: Tuple[float, float] = (0.0, 0.0)):
        c = (np.arange(size) + 0.5) / size
        c = 0.5 + (c - 0.5) / zoom
        self.yy, self.xx = np.meshgrid(c - offset[0], c - offset[1], indexing="ij")
        self.size = size


def _posed_canvas(cfg: "SynthConfig", shift: Acquisition, rng: np.random.Generator) -> _Canvas:
    # patient size and positioning vary per image in every split
    scale = rng.uniform(1.0 - cfg.pose_jitter, 1.0 + cfg.pose_jitter)
    offset = tuple(rng.uniform(-cfg.pose_jitter, cfg.pose_jitter, size=2) / 2)
    return _Canvas(cfg.image_size, shift.zoom * scale, offset)


def _background(canvas: _Canvas, anat: Anatomy, rng: np.random.Generator, cardiomegaly: bool) -> Tuple[np.ndarray, np.ndarray]:
    yy, xx = canvas.yy, canvas.xx
    body = _soft_ellipse(yy, xx, (0.55, 0.5), (0.6, 0.44), edge=0.03)
    img = 0.08 + body * (0.55 + anat.brightness + 0.08 * (yy - 0.5))
    lungs = _soft_ellipse(yy, xx, anat.lung_centers[0], anat.lung_radii) + _soft_ellipse(
        yy, xx, anat.lung_centers[1], anat.lung_radii
    )
    ribs = 0.02 * np.sin(2 * np.pi * (yy * 9.0 + 0.6 * (xx - 0.5) ** 2) + anat.rib_phase)
    img = img - lungs * (0.3 - ribs)
    heart_r = (anat.heart_radii[0], 0.17) if cardiomegaly else anat.heart_radii
    img = img + 0.22 * _soft_ellipse(yy, xx, anat.heart_center, heart_r, edge=0.06)
    texture = ndimage.gaussian_filter(rng.normal(size=yy.shape), sigma=canvas.size / 25.0, mode="reflect")
    img = img + 0.02 * texture / (texture.std() + 1e-12)
    return img, lungs


def _plant_blobs(canvas, centers, sigmas, amps) -> Tuple[np.ndarray, np.ndarray]:
    signal = np.zeros_like(canvas.yy)
    mask = np.zeros(canvas.yy.shape, dtype=bool)
    for c, s, a in zip(centers, sigmas, amps):
        b = _bump(canvas.yy, canvas.xx, c, s)
        signal += a * b
        mask |= b >= 0.5
    return signal, mask


def _acquire(img: np.ndarray, shift: Acquisition, rng: np.random.Generator) -> np.ndarray:
    if shift.blur > 0:
        img = ndimage.gaussian_filter(img, sigma=shift.blur, mode="nearest")
    img = np.clip(img, 0.0, 1.0) ** shift.gamma
    img = shift.gain * (img - 0.5) + 0.5 + shift.offset
    img = img + shift.noise * rng.normal(size=img.shape)
    return np.clip(img, 0.0, 1.0)


@dataclass
class Rendered:
    image: np.ndarray  # float in [0, 1]
    findings: np.ndarray  # 10 binary labels
    mask: Optional[np.ndarray] = None  # planted lesion mask (disease classes only)


def render_disease(label: int, cfg: SynthConfig, shift: Acquisition, rng: np.random.Generator) -> Rendered:
    canvas = _posed_canvas(cfg, shift, rng)
    anat = _sample_anatomy(rng)
    img, _ = _background(canvas, anat, rng, cardiomegaly=False)
    findings = np.zeros(len(FINDINGS), dtype=np.int64)
    mask = None
    if label == 0:
        findings[F_INDEX["no_finding"]] = 1
    elif label == 1:
        side = int(rng.integers(2))
        center = _point_in_lung(rng, anat, side, outer=-0.4)  # keep clear of the mediastinum
        signal, mask = _plant_blobs(canvas, [center], [rng.uniform(*cfg.focal_sigma)], [rng.uniform(*cfg.focal_amplitude)])
        img = img + signal
        findings[[F_INDEX["consolidation"], F_INDEX["pneumonia"]]] = 1
    else:
        n = int(rng.integers(cfg.covid_blobs[0], cfg.covid_blobs[1] + 1))
        sides = [0, 1] + [int(s) for s in rng.integers(0, 2, size=n - 2)]
        centers = [_point_in_lung(rng, anat, s, y_range=(0.0, 0.85), outer=0.15) for s in sides]
        sigmas = rng.uniform(*cfg.covid_sigma, size=n)
        amps = rng.uniform(*cfg.covid_amplitude, size=n)
        signal, mask = _plant_blobs(canvas, centers, sigmas, amps)
        img = img + signal
        findings[[F_INDEX["lung_opacity"], F_INDEX["pneumonia"]]] = 1
    return Rendered(_acquire(img, shift, rng), findings, mask)


def render_pretrain(cfg: SynthConfig, shift: Acquisition, rng: np.random.Generator) -> Rendered:
    """Random independent findings for backbone pre-training."""
    present = {name: bool(rng.uniform() < cfg.finding_rate) for name in FINDINGS if name not in ("no_finding", "pneumonia")}
    canvas = _posed_canvas(cfg, shift, rng)
    anat = _sample_anatomy(rng)
    yy, xx = canvas.yy, canvas.xx
    img, lungs = _background(canvas, anat, rng, cardiomegaly=present["cardiomegaly"])
    n_opacity = 0
    if present["lung_opacity"]:
        n_opacity = int(rng.integers(1, 5))
        centers = [_point_in_lung(rng, anat, int(rng.integers(2))) for _ in range(n_opacity)]
        img = img + _plant_blobs(canvas, centers, rng.uniform(*cfg.covid_sigma, n_opacity), rng.uniform(*cfg.covid_amplitude, n_opacity))[0]
    if present["consolidation"]:
        c = _point_in_lung(rng, anat, int(rng.integers(2)), outer=-0.4)
        img = img + _plant_blobs(canvas, [c], [rng.uniform(*cfg.focal_sigma)], [rng.uniform(*cfg.focal_amplitude)])[0]
    if present["edema"]:
        for side in (0, 1):
            cy, cx = anat.lung_centers[side]
            hx = cx + (0.35 if side == 0 else -0.35) * anat.lung_radii[1]
            img = img + 0.12 * _bump(yy, xx, (cy - 0.02, hx), 0.08) * lungs
    if present["atelectasis"]:
        side = int(rng.integers(2))
        cy, cx = _point_in_lung(rng, anat, side, y_range=(0.2, 0.7))
        angle = rng.uniform(-0.3, 0.3)
        along = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
        across = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
        img = img + 0.25 * np.exp(-(across**2) / (2 * 0.008**2)) * (np.abs(along) < 0.07)
    if present["pneumothorax"]:
        side = int(rng.integers(2))
        cy, cx = anat.lung_centers[side]
        ry, rx = anat.lung_radii
        apex = (cy - 0.65 * ry, cx + (-0.5 if side == 0 else 0.5) * rx)
        img = img - 0.14 * _soft_ellipse(yy, xx, apex, (0.35 * ry, 0.5 * rx), edge=0.1)
    if present["pleural_effusion"]:
        side = int(rng.integers(2))
        cy, cx = anat.lung_centers[side]
        base = cy + anat.lung_radii[0] * 0.55
        lung = _soft_ellipse(yy, xx, anat.lung_centers[side], anat.lung_radii)
        img = img + 0.28 * lung / (1.0 + np.exp(-(yy - base) / 0.015))
    if present["support_devices"]:
        x0 = 0.5 + rng.uniform(-0.04, 0.04)
        line = np.exp(-((xx - x0 - 0.05 * (yy - 0.1)) ** 2) / (2 * 0.004**2)) * (yy > 0.05) * (yy < 0.55)
        box = (np.abs(yy - 0.22) < 0.03) * (np.abs(xx - (0.2 + rng.uniform(0, 0.05))) < 0.045)
        img = img + 0.35 * line + 0.45 * box
    findings = np.zeros(len(FINDINGS), dtype=np.int64)
    for name, on in present.items():
        findings[F_INDEX[name]] = int(on)
    findings[F_INDEX["pneumonia"]] = int(present["consolidation"] or n_opacity >= 3)
    findings[F_INDEX["no_finding"]] = int(not findings.any())
    return Rendered(_acquire(img, shift, rng), findings)


# -- corpus on disk ------------------------------------------------------------


@dataclass
class Record:
    path: str
    label: int  # disease class, -1 for pretrain images
    findings: np.ndarray
    split: str
    mask: str = ""


@dataclass
class DatasetSplit:
    """Manifest rows with lazily loaded images (paths relative to ``root``)."""

    root: Path
    records: List[Record]
    name: str = ""

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def findings(self) -> np.ndarray:
        return np.array([r.findings for r in self.records], dtype=np.int64).reshape(len(self.records), len(FINDINGS))

    def image(self, i: int) -> np.ndarray:
        return read_image(self.root / self.records[i].path)

    @property
    def images(self) -> List[np.ndarray]:
        return [self.image(i) for i in range(len(self))]

    def mask(self, i: int) -> Optional[np.ndarray]:
        r = self.records[i]
        return read_image(self.root / r.mask) > 0.5 if r.mask else None

    def filter(self, split: str) -> "DatasetSplit":
        return DatasetSplit(self.root, [r for r in self.records if r.split == split], split)

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "DatasetSplit":
        return DatasetSplit(self.root, [self.records[i] for i in indices], self.name if name is None else name)

    def class_counts(self) -> Tuple[int, ...]:
        labels = self.labels
        return tuple(int(np.sum(labels == k)) for k in range(len(CLASSES)))


HEADER = ["path", "split", "label", *FINDINGS, "mask"]


def _split_seed(seed: int, split: str) -> np.random.SeedSequence:
    # independent, order-free stream per split
    key = int.from_bytes(hashlib.sha256(split.encode()).digest()[:4], "little")
    return np.random.SeedSequence([seed, key])


def _maybe_flip(findings: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    if rate <= 0:
        return findings
    flips = rng.uniform(size=findings.shape) < rate
    return np.where(flips, 1 - findings, findings)


def generate(cfg: SynthConfig, out_dir) -> DatasetSplit:
    """Write PNG images, lesion masks and ``manifest.csv`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    records: List[Record] = []

    rng = np.random.default_rng(_split_seed(cfg.seed, PRETRAIN_SPLIT))
    for i in range(cfg.pretrain_count):
        r = render_pretrain(cfg, cfg.shifts[PRETRAIN_SPLIT], rng)
        path = f"images/{PRETRAIN_SPLIT}_{i:05d}.png"
        write_png(out / path, r.image)
        records.append(Record(path, -1, _maybe_flip(r.findings, cfg.label_noise, rng), PRETRAIN_SPLIT))

    for split, counts in cfg.counts.items():
        rng = np.random.default_rng(_split_seed(cfg.seed, split))
        order = np.concatenate([np.full(n, k) for k, n in enumerate(counts)])
        order = order[rng.permutation(order.size)]
        for i, label in enumerate(order):
            r = render_disease(int(label), cfg, cfg.shifts[split], rng)
            stem = f"{split}_{i:05d}"
            path = f"images/{stem}.png"
            write_png(out / path, r.image)
            mask = ""
            if r.mask is not None:
                mask = f"masks/{stem}.png"
                write_png(out / mask, r.mask.astype(np.float64))
            records.append(Record(path, int(label), r.findings, split, mask))

    with open(out / MANIFEST_NAME, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for r in records:
            w.writerow([r.path, r.split, r.label, *r.findings.tolist(), r.mask])
    return DatasetSplit(out, records)


class ManifestError(ValueError):
    pass


def load_manifest(path, split: Optional[str] = None, check_files: bool = True) -> DatasetSplit:
    """Parse a manifest; ``path`` may be the CSV file or the directory holding it."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return DatasetSplit(root, [], split or "")
        if header != HEADER:
            raise ManifestError(f"{path}:1: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(HEADER):
                raise ManifestError(f"{path}:{lineno}: expected {len(HEADER)} fields, got {len(row)}")
            try:
                label = int(row[2])
                findings = np.array([int(v) for v in row[3 : 3 + len(FINDINGS)]], dtype=np.int64)
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            if not -1 <= label < len(CLASSES) or not np.all((findings == 0) | (findings == 1)):
                raise ManifestError(f"{path}:{lineno}: label out of range")
            rec = Record(row[0], label, findings, row[1], row[-1])
            if split is not None and rec.split != split:
                continue
            if check_files:
                for p in (rec.path, rec.mask):
                    if p and not (root / p).exists():
                        raise FileNotFoundError(f"{path}:{lineno}: referenced file missing: {root / p}")
            records.append(rec)
    return DatasetSplit(root, records, split or "")
