"""``cxrvit`` command line: synth, pretrain-backbone, train, eval, saliency."""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .backbone import BackboneConfig
from .config import ConfigError, Option, parse_bool, resolve
from .metrics import evaluate_scores, read_scores_csv, write_report_csv, write_scores_csv
from .model import ModelState, full_forward
from .preprocess import preprocess_batch, read_image
from .relevance import DegenerateSaliencyWarning, cell_hits_mask, relevance_propagate, render_overlay, write_overlay_png
from .serialize import FormatError, save_tensor, sha256_file
from .synth import EXTERNAL_SPLITS, PRETRAIN_SPLIT, TRAIN_SPLIT, ManifestError, SynthConfig, generate, load_manifest
from .tensor import Tensor
from .training import (
    PretrainConfig,
    RunManifest,
    TrainConfig,
    TrainingAborted,
    prepare_stage_b,
    pretrain,
    probabilities,
    train,
)
from .transformer import CLASSES

log = logging.getLogger("cxrvit")

RUN_LOG = "run.jsonl"
BACKBONE_CKPT = "backbone.ckpt"
MODEL_CKPT = "model.ckpt"


class CommandError(RuntimeError):
    pass


def _choice(*allowed):
    def parse(text):
        if text not in allowed:
            raise ValueError(f"expected one of {', '.join(allowed)}, got {text!r}")
        return text

    parse.__name__ = "choice"
    return parse


def _floats(text: str):
    return tuple(float(v) for v in str(text).split(","))


_SYNTH = SynthConfig()

COMMON = [Option("seed", int, 7, "single seed from which all randomness is derived")]

OPTIONS: Dict[str, List[Option]] = {
    "synth": COMMON
    + [
        Option("image_size", int, _SYNTH.image_size, "rendered image side in pixels"),
        Option("pretrain_count", int, _SYNTH.pretrain_count, "number of finding-labelled images for backbone pre-training"),
        Option("finding_rate", float, _SYNTH.finding_rate, "probability of each planted finding in pre-training images"),
        Option("pose_jitter", float, _SYNTH.pose_jitter, "relative per-image scale/position variation"),
        Option("label_noise", float, _SYNTH.label_noise, "probability of flipping each pre-training finding label"),
        Option("covid_amplitude", _floats, _SYNTH.covid_amplitude, "min,max intensity of the multifocal lesions"),
        Option("focal_amplitude", _floats, _SYNTH.focal_amplitude, "min,max intensity of the single focal lesion"),
    ],
    "pretrain-backbone": COMMON
    + [
        Option("preset", _choice("desk", "full"), "desk", "backbone and schedule preset"),
        Option("steps", int, None, "optimization steps (desk 600, full 160000)"),
        Option("lr", float, None, "Adam learning rate (desk 2e-3, full 1e-4)"),
        Option("batch_size", int, 8, "images per step"),
        Option("norm", _choice("group", "batch"), "group", "normalization layers in the backbone"),
        Option("input_size", int, None, "network input side, multiple of 32 (desk 128, full 512)"),
    ],
    "train": COMMON
    + [
        Option("preset", _choice("desk", "full"), "desk", "step budget preset (desk 2000/100, full 10000/500)"),
        Option("steps", int, None, "total optimization steps"),
        Option("warmup_steps", int, None, "linear warm-up steps"),
        Option("lr", float, 1e-3, "peak SGD learning rate"),
        Option("momentum", float, 0.9, "SGD momentum"),
        Option("max_grad_norm", float, 1.0, "global gradient-norm clip"),
        Option("batch_size", int, 8, "images per step"),
        Option("freeze_backbone", parse_bool, False, "keep Stage-A backbone weights fixed", flag_only=True),
        Option("class_weighted", parse_bool, False, "inverse-frequency class weights in the loss", flag_only=True),
        Option("val_fraction", float, 0.1, "fraction of the training split held out for validation"),
        Option("dim", int, 256, "transformer latent dimension"),
        Option("layers", int, 4, "encoder layers"),
        Option("heads", int, 8, "attention heads"),
        Option("mlp_ratio", float, 4.0, "MLP hidden size as a multiple of dim"),
    ],
    "eval": COMMON
    + [
        Option("splits", str, ",".join(EXTERNAL_SPLITS), "comma-separated manifest splits to evaluate"),
        Option("target_sensitivity", float, 0.8, "sensitivity the per-class threshold must reach"),
    ],
    "saliency": COMMON
    + [
        Option("target", str, "covid19", "class name or index to explain"),
        Option("split", str, None, "explain images of this manifest split (with --data)"),
        Option("label", str, None, "with --split: only images of this class name or index"),
        Option("limit", int, None, "with --split: at most this many images"),
        Option("alpha", float, 0.5, "overlay opacity"),
    ],
}

PATHS = {
    "synth": [("out", True, "output directory for images and manifest")],
    "pretrain-backbone": [("data", True, "synthetic corpus directory or manifest"), ("out", True, "output directory")],
    "train": [
        ("data", True, "synthetic corpus directory or manifest"),
        ("backbone", True, "Stage-A checkpoint"),
        ("out", True, "output directory"),
    ],
    "eval": [
        ("checkpoint", False, "Stage-B checkpoint (or use --scores)"),
        ("data", False, "corpus directory or manifest"),
        ("scores", False, "score CSV to evaluate offline instead of running a model"),
        ("out", True, "output directory"),
    ],
    "saliency": [
        ("checkpoint", True, "Stage-B checkpoint"),
        ("data", False, "corpus directory or manifest (with --split)"),
        ("out", True, "output directory"),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cxrvit", description="Feature-corpus vision transformer for chest radiographs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "synth": "generate the synthetic corpus",
        "pretrain-backbone": "Stage A: train backbone + PCAM heads on finding labels",
        "train": "Stage B: train the transformer on disease classes",
        "eval": "per-class AUC / sensitivity / specificity / accuracy report",
        "saliency": "relevance overlays for images",
    }
    for name, options in OPTIONS.items():
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("--config", help="flat key = value file; flags override it")
        for dest, required, text in PATHS[name]:
            p.add_argument("--" + dest, required=required, help=text)
        if name == "saliency":
            p.add_argument("--images", nargs="+", help="image files (PNG or .img) to explain")
        for opt in options:
            default_text = "" if opt.default is None else f" (default {opt.default})"
            if opt.flag_only:
                p.add_argument(opt.flag, dest=opt.name, action="store_const", const=True, default=None, help=opt.help)
            else:
                p.add_argument(opt.flag, dest=opt.name, type=opt.type, default=None, help=opt.help + default_text)
    return parser


def _start_manifest(out: Path, command: str, values: dict, sources: dict, paths: dict) -> RunManifest:
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out / RUN_LOG)
    manifest.write("config", command=command, values=values, sources=sources, paths=paths)
    return manifest


def _class_index(text: str) -> int:
    if text in CLASSES:
        return CLASSES.index(text)
    try:
        k = int(text)
    except ValueError:
        raise CommandError(f"unknown class {text!r}; use one of {', '.join(CLASSES)} or 0-{len(CLASSES) - 1}") from None
    if not 0 <= k < len(CLASSES):
        raise CommandError(f"class index {k} out of range 0-{len(CLASSES) - 1}")
    return k


# -- commands --------------------------------------------------------------------


def cmd_synth(v: dict, paths: dict, manifest: RunManifest) -> None:
    cfg = SynthConfig(
        image_size=v["image_size"], seed=v["seed"], pretrain_count=v["pretrain_count"], finding_rate=v["finding_rate"],
        pose_jitter=v["pose_jitter"], label_noise=v["label_noise"], covid_amplitude=tuple(v["covid_amplitude"]),
        focal_amplitude=tuple(v["focal_amplitude"]),
    )
    ds = generate(cfg, paths["out"])
    manifest.write("dataset", counts={s: list(ds.filter(s).class_counts()) for s in cfg.counts}, images=len(ds),
                   manifest_sha256=sha256_file(Path(paths["out"]) / "manifest.csv"))


def cmd_pretrain(v: dict, paths: dict, manifest: RunManifest) -> None:
    full = v["preset"] == "full"
    bcfg = BackboneConfig.full if full else BackboneConfig.desk
    overrides = {"norm": v["norm"]}
    if v["input_size"] is not None:
        overrides["input_size"] = v["input_size"]
    backbone_cfg = bcfg(**overrides)
    pcfg = (PretrainConfig.full if full else PretrainConfig)(seed=v["seed"], batch_size=v["batch_size"])
    if v["steps"] is not None:
        pcfg = replace(pcfg, total_steps=v["steps"])
    if v["lr"] is not None:
        pcfg = replace(pcfg, lr=v["lr"])
    data = load_manifest(paths["data"], PRETRAIN_SPLIT)
    if not len(data):
        raise CommandError(f"no '{PRETRAIN_SPLIT}' rows in {paths['data']}")
    manifest.write("resolved", backbone=backbone_cfg.to_dict(), pretrain=pcfg.to_dict())
    result = pretrain(data, backbone_cfg, pcfg, manifest)
    digest = result.state.save(Path(paths["out"]) / BACKBONE_CKPT)
    manifest.write("result", first_loss=result.losses[0] if result.losses else None, reduction=result.reduction,
                   checkpoint=BACKBONE_CKPT, sha256=digest)
    log.info("Stage A done: BCE reduction %.1f%%", 100 * result.reduction)


def cmd_train(v: dict, paths: dict, manifest: RunManifest) -> None:
    base = TrainConfig.full() if v["preset"] == "full" else TrainConfig()
    cfg = replace(
        base, lr=v["lr"], momentum=v["momentum"], max_grad_norm=v["max_grad_norm"], batch_size=v["batch_size"],
        backbone_trainable=not v["freeze_backbone"], seed=v["seed"], class_weighted=v["class_weighted"],
        val_fraction=v["val_fraction"], dim=v["dim"], layers=v["layers"], heads=v["heads"], mlp_ratio=v["mlp_ratio"],
    )
    if v["steps"] is not None:
        cfg = cfg.with_steps(v["steps"])
    if v["warmup_steps"] is not None:
        cfg = replace(cfg, warmup_steps=v["warmup_steps"])
    manifest.write("resolved", train=cfg.to_dict())
    stage_a = ModelState.load(paths["backbone"])
    manifest.write("input", backbone_sha256=sha256_file(paths["backbone"]))
    data = load_manifest(paths["data"], TRAIN_SPLIT)
    state = prepare_stage_b(stage_a, cfg)
    out = Path(paths["out"]) / MODEL_CKPT
    result = train(state, data, cfg, manifest, checkpoint_path=out)
    digest = result.state.save(out)
    manifest.write("result", checkpoint=MODEL_CKPT, sha256=digest,
                   backbone_sha256=result.state.digest("backbone."), final_loss=result.losses[-1] if result.losses else None)


def cmd_eval(v: dict, paths: dict, manifest: RunManifest) -> None:
    out = Path(paths["out"])
    splits = [s for s in v["splits"].split(",") if s]
    if paths.get("scores"):
        scored = read_scores_csv(paths["scores"])
        missing = [s for s in splits if s not in scored]
        if missing:
            raise CommandError(f"score file has no rows for split(s) {missing}")
        scored = {s: scored[s] for s in splits}
    else:
        if not paths.get("checkpoint") or not paths.get("data"):
            raise CommandError("eval needs --checkpoint and --data, or --scores")
        state = ModelState.load(paths["checkpoint"])
        manifest.write("input", checkpoint_sha256=sha256_file(paths["checkpoint"]))
        scored = {}
        for split in splits:
            ds = load_manifest(paths["data"], split)
            if not len(ds):
                raise CommandError(f"split {split!r} is empty in {paths['data']}")
            probs = probabilities(state, preprocess_batch(ds.images, state.prep))
            write_scores_csv(out / f"scores_{split}.csv", probs, ds.labels, split, [r.path for r in ds.records])
            scored[split] = (probs, ds.labels)
    reports = [evaluate_scores(p, y, s, target=v["target_sensitivity"]) for s, (p, y) in scored.items()]
    text = "\n\n".join(r.to_text() for r in reports)
    text += "\n\n" + "\n".join(f"macro AUC {r.split}: {r.macro_auc:.4f}" for r in reports) + "\n"
    (out / "report.txt").write_text(text, encoding="utf-8")
    write_report_csv(out / "report.csv", reports)
    for r in reports:
        manifest.write("report", split=r.split, macro=r.macro, per_class={c.name: c.auc for c in r.classes})
    print(text, end="")


def cmd_saliency(v: dict, paths: dict, manifest: RunManifest, images: Optional[Sequence[str]]) -> None:
    out = Path(paths["out"])
    target = _class_index(v["target"])
    state = ModelState.load(paths["checkpoint"])
    manifest.write("input", checkpoint_sha256=sha256_file(paths["checkpoint"]), target=CLASSES[target])
    items = []  # (name, image, mask)
    if images:
        for p in images:
            items.append((Path(p).stem, read_image(p), None))
    elif v["split"] and paths.get("data"):
        ds = load_manifest(paths["data"], v["split"])
        keep = range(len(ds))
        if v["label"] is not None:
            k = _class_index(v["label"])
            keep = [i for i in keep if ds.records[i].label == k]
        keep = list(keep)[: v["limit"]] if v["limit"] is not None else list(keep)
        for i in keep:
            items.append((Path(ds.records[i].path).stem, ds.image(i), ds.mask(i)))
    else:
        raise CommandError("saliency needs --images or --data with --split")
    hits = []
    for start in range(0, len(items), 16):
        chunk = items[start : start + 16]
        batch = Tensor(preprocess_batch([img for _, img, _ in chunk], state.prep))
        _, trace = full_forward(batch, state, target_class=target)
        for j, (name, img, mask) in enumerate(chunk):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegenerateSaliencyWarning)
                sal = relevance_propagate(trace.sample(j), target)
            write_overlay_png(out / f"{name}_overlay.png", render_overlay(sal, img, v["alpha"]))
            save_tensor(out / f"{name}_saliency.img", sal.raw)
            record = {"image": name, "argmax_cell": list(sal.argmax_cell()), "degenerate": sal.degenerate}
            if mask is not None:
                record["hit"] = cell_hits_mask(sal.argmax_cell(), trace.grid, mask)
                hits.append(record["hit"])
            manifest.write("saliency", **record)
    if hits:
        manifest.write("localization", images=len(hits), hit_rate=float(np.mean(hits)))
        print(f"localization hit rate {np.mean(hits):.3f} over {len(hits)} images")


COMMANDS: Dict[str, Callable] = {
    "synth": cmd_synth,
    "pretrain-backbone": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "saliency": cmd_saliency,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    options = OPTIONS[args.command]
    flags = {o.name: getattr(args, o.name) for o in options}
    paths = {dest: getattr(args, dest) for dest, _, _ in PATHS[args.command]}
    try:
        values, sources = resolve(options, flags, args.config)
        # the manifest goes down before any model state is read or written
        manifest = _start_manifest(Path(paths["out"]), args.command, _jsonable(values), sources, paths)
        with manifest:
            if args.command == "saliency":
                cmd_saliency(values, paths, manifest, args.images)
            else:
                COMMANDS[args.command](values, paths, manifest)
    except (ConfigError, CommandError, ManifestError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"cxrvit {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except TrainingAborted as exc:
        print(f"cxrvit {args.command}: training aborted: {exc}", file=sys.stderr)
        return 3
    return 0


def _jsonable(values: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in values.items()}


if __name__ == "__main__":
    sys.exit(main())
