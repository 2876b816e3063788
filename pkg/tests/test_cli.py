import pytest

from cxrvit.cli import OPTIONS, main
from cxrvit.model import ModelState
from cxrvit.training import RunManifest, TrainConfig, prepare_stage_b

SYNTH = ["--image-size", "64", "--pretrain-count", "24"]
PRETRAIN = ["--input-size", "64", "--steps", "2"]
TINY = ["--dim", "16", "--layers", "1", "--heads", "2", "--batch-size", "4"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--seed", "3", *SYNTH]) == 0
    assert main(["pretrain-backbone", "--data", str(root / "data"), "--out", str(root / "a"), "--seed", "3", *PRETRAIN]) == 0
    args = ["train", "--data", str(root / "data"), "--backbone", str(root / "a" / "backbone.ckpt"), "--seed", "3", *TINY]
    assert main([*args, "--out", str(root / "b"), "--steps", "3"]) == 0
    return root


def run_log(path):
    return RunManifest.read(path / "run.jsonl")


@pytest.mark.parametrize("command", sorted(OPTIONS))
def test_help_lists_every_flag(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for opt in OPTIONS[command]:
        assert opt.flag in text
    assert "--config" in text


def test_unknown_flag_fails(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--out", str(tmp_path), "--no-such-flag"])
    assert exc.value.code == 2
    assert "unrecognized" in capsys.readouterr().err


def test_config_parse_failure(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("image_size = 64\noops\n")
    assert main(["synth", "--out", str(tmp_path / "o"), "--config", str(tmp_path / "bad.cfg")]) == 1
    assert "bad.cfg:2" in capsys.readouterr().err


def test_missing_checkpoint(tmp_path, capsys):
    code = main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tmp_path), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "none.ckpt" in capsys.readouterr().err


def test_manifest_first_and_sources(pipeline, tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("steps = 9\nmomentum = 0.5\n")
    out = tmp_path / "t"
    args = ["train", "--data", str(pipeline / "data"), "--backbone", str(pipeline / "a" / "backbone.ckpt"), *TINY]
    assert main([*args, "--out", str(out), "--config", str(cfg), "--steps", "1"]) == 0
    rows = run_log(out)
    assert rows[0]["kind"] == "config"
    assert rows[0]["values"]["steps"] == 1 and rows[0]["sources"]["steps"] == "flag"
    assert rows[0]["values"]["momentum"] == 0.5 and rows[0]["sources"]["momentum"] == "file"
    assert rows[0]["sources"]["lr"] == "default"


def test_pretrain_outputs(pipeline):
    rows = run_log(pipeline / "a")
    assert [r["kind"] for r in rows][:3] == ["config", "resolved", "prep"]
    assert rows[-1]["kind"] == "result" and rows[-1]["checkpoint"] == "backbone.ckpt"


def test_train_zero_steps(pipeline, tmp_path):
    out = tmp_path / "zero"
    args = ["train", "--data", str(pipeline / "data"), "--backbone", str(pipeline / "a" / "backbone.ckpt"), *TINY]
    assert main([*args, "--out", str(out), "--steps", "0", "--seed", "5"]) == 0
    stage_a = ModelState.load(pipeline / "a" / "backbone.ckpt")
    model = ModelState.load(out / "model.ckpt")
    assert model.digest("backbone.") == stage_a.digest("backbone.")
    fresh = prepare_stage_b(stage_a, TrainConfig(dim=16, layers=1, heads=2, seed=5, total_steps=0, warmup_steps=0))
    assert model.digest("vit.") == fresh.digest("vit.")


def test_freeze_flag(pipeline, tmp_path):
    out = tmp_path / "frozen"
    args = ["train", "--data", str(pipeline / "data"), "--backbone", str(pipeline / "a" / "backbone.ckpt"), *TINY]
    assert main([*args, "--out", str(out), "--steps", "2", "--freeze-backbone"]) == 0
    stage_a = ModelState.load(pipeline / "a" / "backbone.ckpt")
    assert ModelState.load(out / "model.ckpt").digest("backbone.") == stage_a.digest("backbone.")


def test_eval_report(pipeline, tmp_path, capsys):
    out = tmp_path / "eval"
    args = ["eval", "--checkpoint", str(pipeline / "b" / "model.ckpt"), "--data", str(pipeline / "data"), "--out", str(out)]
    assert main(args) == 0
    text = (out / "report.txt").read_text()
    for split in ("ext1", "ext2", "ext3"):
        assert f"macro AUC {split}:" in text
    assert (out / "report.csv").exists() and (out / "scores_ext1.csv").exists()
    # offline evaluation of the exported scores reproduces the report
    out2 = tmp_path / "offline"
    assert main(["eval", "--scores", str(out / "scores_ext1.csv"), "--splits", "ext1", "--out", str(out2)]) == 0
    assert (out2 / "report.csv").read_text().splitlines()[1:] == [
        line for line in (out / "report.csv").read_text().splitlines() if line.startswith("ext1,")
    ]


def test_saliency_outputs(pipeline, tmp_path):
    out = tmp_path / "sal"
    args = ["saliency", "--checkpoint", str(pipeline / "b" / "model.ckpt"), "--data", str(pipeline / "data")]
    assert main([*args, "--split", "ext1", "--label", "covid19", "--limit", "3", "--out", str(out)]) == 0
    assert len(list(out.glob("*_overlay.png"))) == 3
    assert len(list(out.glob("*_saliency.img"))) == 3
    rows = run_log(out)
    assert rows[-1]["kind"] == "localization" and rows[-1]["images"] == 3
    img = next(iter((pipeline / "data" / "images").glob("ext2_*.png")))
    assert main(["saliency", "--checkpoint", str(pipeline / "b" / "model.ckpt"), "--images", str(img),
                 "--target", "1", "--out", str(tmp_path / "one")]) == 0
    assert (tmp_path / "one" / f"{img.stem}_overlay.png").exists()


def test_bad_class_name(pipeline, tmp_path, capsys):
    code = main(["saliency", "--checkpoint", str(pipeline / "b" / "model.ckpt"), "--images", "x.png",
                 "--target", "flu", "--out", str(tmp_path)])
    assert code == 1 and "unknown class" in capsys.readouterr().err
