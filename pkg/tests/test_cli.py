import json
from pathlib import Path

import pytest

from fsrfer.cli import main

TINY = ["--profile", "smoke", "--fer.conv_channels", "8", "--fer.spd_dim", "4", "--fer.embed_dim", "16",
        "--fsr.channels", "4", "--fsr.growth", "2", "--fsr.blocks", "1", "--fsr.critic_channels", "4"]


def only(parent: Path, command: str) -> Path:
    runs = sorted(parent.glob(f"{command}-*"))
    assert len(runs) >= 1
    return runs[-1]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """prepare-data -> train-fer -> train-fsr (on/off) with tiny dims; shared by the tests below."""
    out = tmp_path_factory.mktemp("runs")
    assert main(["prepare-data", "--out", str(out), "--n-per-class", "2", "--scales", "2,5", *TINY]) == 0
    data = only(out, "prepare-data")
    assert main(["train-fer", "--data", str(data), "--out", str(out), "--epochs", "1", *TINY]) == 0
    fer = only(out, "train-fer") / "fer.ckpt"
    common = ["--fer-checkpoint", str(fer), "--data", str(data), "--out", str(out), "--scales", "2,5",
              "--iters", "4", "--batch", "4", "--fsr.val_every", "2", *TINY]
    assert main(["train-fsr", *common, "--reweight", "on"]) == 0
    assert main(["train-fsr", *common, "--reweight", "off"]) == 0
    on, off = sorted(out.glob("train-fsr-*"))
    return {"out": out, "data": data, "fer": fer, "on": on, "off": off}


def test_prepare_data_artifacts(pipeline):
    data = pipeline["data"]
    assert (data / "classes.txt").read_text().split() == sorted(
        ["anger", "disgust", "fear", "happiness", "neutral", "sadness", "surprise"])
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["counts"] == {"train": 14, "val": 14} and manifest["scales"] == [2, 5]
    assert (data / "degradation.png").exists()
    cfg = json.loads((data / "config.json").read_text())
    assert cfg["data"]["n_per_class"] == 2 and cfg["profile"] == "smoke"


def test_prepare_from_existing_root(pipeline, tmp_path):
    root = pipeline["data"] / "dataset"
    assert main(["prepare-data", "--root", str(root), "--out", str(tmp_path), "--canonical", "100"]) == 0
    run = only(tmp_path, "prepare-data")
    assert len(list((run / "dataset" / "val").rglob("*.png"))) == 14


def test_train_artifacts(pipeline):
    fer_dir = pipeline["fer"].parent
    assert (fer_dir / "config.json").exists() and (fer_dir / "fer_log.jsonl").exists()
    for run in (pipeline["on"], pipeline["off"]):
        names = {p.name for p in run.iterdir()}
        assert {"config.json", "fsr.ckpt", "fsr_last.ckpt", "train_log.jsonl", "training.png"} <= names
    assert json.loads((pipeline["on"] / "config.json").read_text())["fsr"]["reweight"] is True
    assert json.loads((pipeline["off"] / "config.json").read_text())["fsr"]["reweight"] is False


def test_eval_and_report(pipeline, capsys):
    out = pipeline["out"]
    args = ["eval", "--fer-checkpoint", str(pipeline["fer"]), "--data", str(pipeline["data"]),
            "--out", str(out), "--scales", "2,5",
            "--fsr-checkpoint", f"off={pipeline['off'] / 'fsr.ckpt'}",
            "--fsr-checkpoint", f"on={pipeline['on'] / 'fsr.ckpt'}", *TINY]
    assert main(args) == 0
    run = only(out, "eval")
    lines = (run / "report.csv").read_text().splitlines()
    assert lines[0] == "method,scale,accuracy,n"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["hr", "hr", "bicubic", "bicubic",
                                                       "fsr-fer:off", "fsr-fer:off", "fsr-fer:on", "fsr-fer:on"]
    assert all(ln.endswith(",14") for ln in lines[1:])
    assert {"report.txt", "report.json", "accuracy.png", "accuracy.csv", "config.json"} <= {p.name for p in run.iterdir()}
    assert "fsr-fer:on" in capsys.readouterr().out

    assert main(["report", "--eval", str(run), "--out", str(out),
                 "--logs", str(pipeline["off"] / "train_log.jsonl"), str(pipeline["on"] / "train_log.jsonl"),
                 "--labels", "off", "on"]) == 0
    rep = only(out, "report")
    conv = json.loads((rep / "convergence.json").read_text())
    assert conv["labels"] == ["off", "on"] and "ratio" in conv
    assert (rep / "report.txt").read_text() == (run / "report.txt").read_text()
    assert (rep / "training_on.png").exists()


def test_eval_without_fsr_for_plain_methods(pipeline):
    out = pipeline["out"]
    assert main(["eval", "--fer-checkpoint", str(pipeline["fer"]), "--data", str(pipeline["data"]),
                 "--out", str(out), "--methods", "hr,bicubic", "--scales", "5"]) == 0


def test_restored_images_mode(pipeline, tmp_path):
    from fsrfer.data import load_dataset, write_image
    from fsrfer.features import degrade
    restored = tmp_path / "restored"
    for img in load_dataset(pipeline["data"] / "dataset", "val"):
        _, cls, name = img.id.split("/")
        (restored / "x2" / cls).mkdir(parents=True, exist_ok=True)
        write_image(restored / "x2" / cls / name, degrade(img, 2).pixels)
    assert main(["eval", "--fer-checkpoint", str(pipeline["fer"]), "--data", str(pipeline["data"]),
                 "--out", str(tmp_path), "--methods", "bicubic,restored-images", "--scales", "2,5",
                 "--restored-dir", str(restored)]) == 0
    rows = (only(tmp_path, "eval") / "report.csv").read_text().splitlines()[1:]
    assert [r.split(",")[:2] for r in rows] == [["bicubic", "2"], ["bicubic", "5"], ["restored-images", "2"]]


def test_run_directories_are_fresh(pipeline, tmp_path):
    for _ in range(2):
        assert main(["eval", "--fer-checkpoint", str(pipeline["fer"]), "--data", str(pipeline["data"]),
                     "--out", str(tmp_path), "--methods", "hr", "--scales", "2"]) == 0
    runs = sorted(tmp_path.glob("eval-*"))
    assert len(runs) == 2 and all((r / "config.json").exists() for r in runs)


class TestErrors:
    def test_no_arguments(self, capsys):
        assert main([]) == 1

    def test_unknown_subcommand(self):
        assert main(["fly", "--out", "x"]) == 1

    def test_unknown_override_names_key(self, tmp_path, capsys):
        assert main(["prepare-data", "--out", str(tmp_path), "--fsr.gamma", "2"]) == 1
        assert "fsr.gamma" in capsys.readouterr().err
        assert not list(tmp_path.iterdir())

    def test_stray_argument(self, tmp_path):
        assert main(["prepare-data", "--out", str(tmp_path), "--bogus"]) == 1

    def test_bad_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text("[fsr]\nsigma = 0.5\n")
        assert main(["prepare-data", "--out", str(tmp_path), "--config", str(cfg)]) == 1
        assert "fsr.sigma" in capsys.readouterr().err

    def test_train_fsr_without_fer(self, tmp_path, capsys):
        code = main(["train-fsr", "--fer-checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tmp_path),
                     "--out", str(tmp_path / "runs")])
        assert code == 1
        assert "run train-fer first" in capsys.readouterr().err
        assert not list((tmp_path / "runs").iterdir())

    def test_train_fer_without_data(self, tmp_path, capsys):
        assert main(["train-fer", "--data", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 1
        assert "run prepare-data first" in capsys.readouterr().err

    def test_fsr_method_needs_checkpoint(self, pipeline, tmp_path, capsys):
        code = main(["eval", "--fer-checkpoint", str(pipeline["fer"]), "--data", str(pipeline["data"]),
                     "--out", str(tmp_path), "--methods", "fsr-fer"])
        assert code == 1 and "run train-fsr first" in capsys.readouterr().err

    def test_runtime_failure_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "data"
        (bad / "train").mkdir(parents=True)
        assert main(["train-fer", "--data", str(bad), "--out", str(tmp_path / "runs")]) == 2
        assert "class directories" in capsys.readouterr().err
