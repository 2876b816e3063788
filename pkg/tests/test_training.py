import numpy as np
import pytest

from cxrvit.model import ModelState
from cxrvit.synth import Acquisition, SynthConfig, generate, load_manifest
from cxrvit.training import (
    BatchSampler,
    PretrainConfig,
    RunManifest,
    TrainConfig,
    TrainingAborted,
    class_weights,
    prepare_stage_b,
    pretrain,
    split_validation,
    train,
)

from conftest import tiny_backbone_config

TINY_TRAIN = dict(dim=16, layers=2, heads=2, batch_size=4, total_steps=6, warmup_steps=2, lr=0.05)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    shifts = {"pretrain": Acquisition(), "train": Acquisition()}
    generate(SynthConfig(image_size=64, pretrain_count=16, counts={"train": (8, 6, 6)}, shifts=shifts, seed=3), root)
    return root


@pytest.fixture(scope="module")
def stage_a(corpus):
    return pretrain(load_manifest(corpus, "pretrain"), tiny_backbone_config(), PretrainConfig(total_steps=4, batch_size=4, seed=1))


def test_sampler_epochs_cover_everything():
    s = BatchSampler(10, 4, np.random.default_rng(0))
    first_epoch = np.concatenate([s.next() for _ in range(3)])
    assert sorted(first_epoch) == list(range(10))
    a, b = BatchSampler(10, 4, np.random.default_rng(0)), BatchSampler(10, 4, np.random.default_rng(0))
    assert all(np.array_equal(a.next(), b.next()) for _ in range(7))


def test_validation_split_stratified():
    labels = np.array([0] * 20 + [1] * 10 + [2] * 10)
    tr, va = split_validation(labels, 0.1, seed=5)
    assert len(set(tr) & set(va)) == 0 and len(tr) + len(va) == 40
    assert sorted(np.bincount(labels[va]).tolist()) == [1, 1, 2]
    assert np.array_equal(va, split_validation(labels, 0.1, seed=5)[1])


def test_class_weights_balance():
    w = class_weights(np.array([0, 0, 0, 1, 2, 2]))
    np.testing.assert_allclose(w * np.bincount([0, 0, 0, 1, 2, 2]), 2.0)


def test_pretrain_records(corpus, tmp_path):
    with RunManifest(tmp_path / "m.jsonl") as m:
        res = pretrain(load_manifest(corpus, "pretrain"), tiny_backbone_config(), PretrainConfig(total_steps=3, batch_size=4), m)
    rows = RunManifest.read(tmp_path / "m.jsonl")
    assert rows[0]["kind"] == "prep" and rows[0]["std"] > 0
    assert [r["step"] for r in rows if r["kind"] == "step"] == [0, 1, 2]
    assert all(np.isfinite(res.losses))
    assert res.state.prep.mean == rows[0]["mean"]


def test_zero_steps_keeps_initial_weights(corpus, stage_a):
    state = prepare_stage_b(stage_a.state, TrainConfig(**{**TINY_TRAIN, "total_steps": 0, "warmup_steps": 0}))
    before = state.digest()
    res = train(state, load_manifest(corpus, "train"), TrainConfig(**{**TINY_TRAIN, "total_steps": 0, "warmup_steps": 0}))
    assert res.state.digest() == before
    assert res.state.digest("backbone.") == stage_a.state.digest("backbone.")


def test_frozen_backbone_untouched(corpus, stage_a):
    cfg = TrainConfig(**TINY_TRAIN, backbone_trainable=False)
    state = prepare_stage_b(stage_a.state, cfg)
    bb, vit = state.digest("backbone."), state.digest("vit.")
    res = train(state, load_manifest(corpus, "train"), cfg)
    assert res.state.digest("backbone.") == bb
    assert res.state.digest("pcam.") == stage_a.state.digest("pcam.")
    assert res.state.digest("vit.") != vit


def test_trainable_backbone_moves_and_clips(corpus, stage_a):
    cfg = TrainConfig(**TINY_TRAIN, max_grad_norm=0.5)
    state = prepare_stage_b(stage_a.state, cfg)
    bb = state.digest("backbone.")
    res = train(state, load_manifest(corpus, "train"), cfg)
    assert res.state.digest("backbone.") != bb
    assert len(res.grad_norms) == 6 and all(np.isfinite(res.grad_norms))


def test_bit_reproducible(corpus, stage_a, tmp_path):
    cfg = TrainConfig(**TINY_TRAIN, seed=11)
    runs = []
    for i in range(2):
        with RunManifest(tmp_path / f"m{i}.jsonl") as m:
            res = train(prepare_stage_b(stage_a.state, cfg), load_manifest(corpus, "train"), cfg, m)
        res.state.save(tmp_path / f"c{i}.ckpt")
        runs.append(res)
    assert runs[0].losses == runs[1].losses
    assert (tmp_path / "m0.jsonl").read_bytes() == (tmp_path / "m1.jsonl").read_bytes()
    assert (tmp_path / "c0.ckpt").read_bytes() == (tmp_path / "c1.ckpt").read_bytes()


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_nonfinite_aborts_with_last_good(corpus, stage_a, tmp_path):
    cfg = TrainConfig(**TINY_TRAIN)
    state = prepare_stage_b(stage_a.state, cfg)
    state.params["vit.head.bias"].data[0] = np.inf
    digest = state.digest()
    with RunManifest(tmp_path / "m.jsonl") as m:
        with pytest.raises(TrainingAborted, match="step 0"):
            train(state, load_manifest(corpus, "train"), cfg, m, checkpoint_path=tmp_path / "last.ckpt")
    assert ModelState.load(tmp_path / "last.ckpt").digest() == digest
    assert RunManifest.read(tmp_path / "m.jsonl")[-1]["kind"] == "abort"
