import json
import subprocess
import sys

import pytest

from decompseg.cli import CONFIG_NAME, OUTPUT_ROOT_ENV, main, parse_args


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-synth", "--n", 24, "--size", 16, "--seed", 7, "--out", root / "data") == 0
    assert run("train-classifier", "--train", root / "data/train.jsonl", "--val", root / "data/val.jsonl",
               "--epochs", 1, "--width", 8, "--out", root / "cls") == 0
    assert run("train", "--train", root / "data/train.jsonl", "--val", root / "data/val.jsonl",
               "--classifier", root / "cls", "--epochs", 1, "--out", root / "joint") == 0
    return root


def test_usage_errors_exit_2(tmp_path, capsys):
    for argv in (["gen-synth", "--n", "0"], ["gen-synth"], ["derive-data", "--pos", "a", "--neg", "b"],
                 ["train", "--lr"], ["no-such-command"], ["eval", "--checkpoint", "x"]):
        with pytest.raises(SystemExit) as exc:
            main(argv + ["--out", str(tmp_path)] if argv[0] != "no-such-command" else argv)
        assert exc.value.code == 2, argv
    err = capsys.readouterr().err
    assert "--n" in err and "--manifest" in err


def test_exit_codes_from_a_real_process(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "decompseg.cli", "check-arch", "--scale", "desk",
                         "--out", str(tmp_path)], capture_output=True, text=True)
    assert ok.returncode == 0 and "decoder_x" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "decompseg.cli", "gen-synth", "--n", "0"],
                         capture_output=True, text=True)
    assert bad.returncode == 2
    missing = subprocess.run([sys.executable, "-m", "decompseg.cli", "eval", "--checkpoint", str(tmp_path / "no"),
                              "--manifest", str(tmp_path / "no.jsonl"), "--out", str(tmp_path / "e")],
                             capture_output=True, text=True)
    assert missing.returncode == 1 and "eval" in missing.stderr


def test_check_arch_paper(capsys):
    assert run("check-arch", "--scale", "paper", "--json") == 0
    report = json.loads(capsys.readouterr().out)
    assert report["summary"]["encoder"] == 9_404_992
    assert report["summary"]["decoder_x"] == 12_576_070
    assert report["reference_diff"] == []


def test_gen_synth_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("gen-synth", "--n", 6, "--size", 16, "--seed", 3, "--out", tmp_path / name) == 0
    for rel in ("train.jsonl", "val.jsonl", "images/000004.png", "masks/000004.png"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_derive_data(tmp_path):
    from PIL import Image

    for folder, color in (("pos", (200, 30, 30)), ("neg", (90, 90, 90))):
        (tmp_path / folder).mkdir()
        for i in range(5):
            Image.new("RGB", (20 + i, 18), color).save(tmp_path / folder / f"{i}.png")
    args = ["derive-data", "--pos", tmp_path / "pos", "--neg", tmp_path / "neg", "--n", 5, "--size", 16,
            "--split", 0.8]
    assert run(*args, "--out", tmp_path / "d1") == 0
    assert run(*args, "--out", tmp_path / "d2") == 0
    assert (tmp_path / "d1/train.jsonl").read_text() == (tmp_path / "d2/train.jsonl").read_text()
    assert run(*args[:-4], "--n", 9, "--out", tmp_path / "d3") == 1


def test_default_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    args = parse_args(["check-arch"])
    assert args.out == tmp_path / "root" / "check-arch"


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 3, "lambda_m": 0.5, "train": {"lr": 0.01}, "seed": 4}))
    args = parse_args(["train", "--config", str(cfg), "--train", "t.jsonl", "--epochs", "2"])
    assert (args.epochs, args.lambda_m, args.lr, args.seed) == (2, 0.5, 0.01, 4)
    cfg.write_text(json.dumps({"epocs": 3}))
    with pytest.raises(SystemExit) as exc:
        parse_args(["train", "--config", str(cfg), "--train", "t.jsonl"])
    assert exc.value.code == 2


def test_paper_defaults_are_the_cli_defaults():
    cls = parse_args(["train-classifier", "--train", "t"])
    joint = parse_args(["train", "--train", "t"])
    assert (cls.epochs, cls.batch_size, cls.lr, tuple(cls.betas)) == (10, 32, 1e-4, (0.9, 0.999))
    assert (joint.epochs, joint.batch_size, joint.lambda_m, joint.lambda_c) == (10, 4, 1e-3, 1e-3)


def test_train_needs_classifier_first(tmp_path, pipeline, capsys):
    data = pipeline / "data"
    assert run("train", "--train", data / "train.jsonl", "--out", tmp_path / "j") == 1
    assert "train-classifier must run first" in capsys.readouterr().err
    assert run("train", "--train", data / "train.jsonl", "--classifier", tmp_path / "nothing",
               "--out", tmp_path / "j") == 1
    # the pure-reconstruction ablation needs no classifier
    assert run("train", "--train", data / "train.jsonl", "--lambda-c", 0, "--lambda-m", 0, "--epochs", 1,
               "--max-steps", 2, "--out", tmp_path / "ablation") == 0


def test_run_directory_is_self_describing(pipeline, tmp_path):
    stored = json.loads((pipeline / "joint" / CONFIG_NAME).read_text())
    assert stored["command"] == "train"
    assert stored["train_config"]["learning_rate"] == 1e-4
    assert stored["model_spec"]["name"] == "desk"
    stored["args"]["out"] = str(tmp_path / "again")
    replay = tmp_path / "replay.json"
    replay.write_text(json.dumps(stored))
    assert run("train", "--config", replay) == 0
    first = [json.loads(l) for l in (pipeline / "joint/runlog.jsonl").read_text().splitlines()]
    second = [json.loads(l) for l in (tmp_path / "again/runlog.jsonl").read_text().splitlines()]
    strip = lambda rs: [{k: v for k, v in r.items() if k != "wall_time"} for r in rs]
    assert strip(first) == strip(second)


def test_resume_via_cli(pipeline, tmp_path):
    data = pipeline / "data"
    common = ["--train", data / "train.jsonl", "--classifier", pipeline / "cls", "--epochs", 2]
    assert run("train", *common, "--out", tmp_path / "cut", "--max-steps", 5) == 0
    assert run("train", *common, "--out", tmp_path / "cut", "--resume", tmp_path / "cut/last") == 0
    assert run("train", *common, "--out", tmp_path / "straight") == 0
    read = lambda p: [{k: v for k, v in json.loads(l).items() if k != "wall_time"}
                      for l in p.read_text().splitlines() if json.loads(l)["kind"] == "step"]
    assert read(tmp_path / "cut/runlog.jsonl") == read(tmp_path / "straight/runlog.jsonl")


def test_eval_report_and_figures(pipeline, capsys):
    out = pipeline / "eval"
    assert run("eval", "--checkpoint", pipeline / "joint/last", "--manifest", pipeline / "data/val.jsonl",
               "--out", out, "--n-figure", 4) == 0
    text = capsys.readouterr().out
    assert "class" in text.lower()
    report = json.loads((out / "run_val_metrics.json").read_text())
    assert len(report["segmentation"]["per_class_iou"]) == 2
    for pop in ("present", "absent"):
        for kind in ("inputs", "overlay"):
            assert (out / f"run_val_{pop}_{kind}.png").exists()


def test_predict_single_image(pipeline, capsys):
    from PIL import Image
    import numpy as np

    image = pipeline / "data/images/000001.png"
    assert run("predict", "--checkpoint", pipeline / "joint/last", "--image", image,
               "--out", pipeline / "pred") == 0
    labels = np.asarray(Image.open(pipeline / "pred/000001_labels.png"))
    assert labels.shape == (16, 16) and set(np.unique(labels)) <= {0, 1}
    assert (pipeline / "pred/000001_overlay.png").exists()
    areas = json.loads(capsys.readouterr().out.strip().splitlines()[-1])["areas"]
    assert abs(sum(areas.values()) - 1) < 1e-9
