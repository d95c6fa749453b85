import filecmp
import json

import pytest
import yaml

from glfusion.cli import DEFAULTS, run
from glfusion.detector import save_checkpoint

SMALL = ["--set", "toy_n_train=8", "--set", "toy_n_test=6"]


def _last_json(text):
    return json.loads(text.strip().splitlines()[-1])


def _same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_same_tree(a / d, b / d) for d in cmp.common_dirs)


def test_gen_toy_is_byte_identical(tmp_path):
    assert run(["gen-toy", "--seed", "7", "--output-dir", str(tmp_path / "a"), *SMALL]) == 0
    assert run(["gen-toy", "--seed", "7", "--output-dir", str(tmp_path / "b"), *SMALL]) == 0
    assert _same_tree(tmp_path / "a", tmp_path / "b")
    assert run(["gen-toy", "--seed", "8", "--output-dir", str(tmp_path / "c"), *SMALL]) == 0
    assert not _same_tree(tmp_path / "a", tmp_path / "c")


def test_effective_config_precedence(tmp_path):
    cfg_file = tmp_path / "cfg.yaml"
    cfg_file.write_text("seed: 3\ntoy_n_train: 4\ntoy_n_test: 4\ntoy_checker_cell: 2\n")
    out = tmp_path / "out"
    code = run(["gen-toy", "--config", str(cfg_file), "--set", "toy_checker_cell=8", "--set", "seed=5", "--seed", "9", "--output-dir", str(out)])
    assert code == 0
    snap = yaml.safe_load((out / "effective_config.yaml").read_text())
    assert snap["seed"] == 9  # flag beats --set beats file
    assert snap["toy_checker_cell"] == 8  # --set beats file
    assert snap["toy_n_train"] == 4  # file beats default
    assert set(snap) == set(DEFAULTS)
    toy = json.loads((out / "train" / "toy_config.json").read_text())
    assert toy["seed"] == 9 and toy["checker_cell"] == 8


@pytest.mark.parametrize(
    "argv",
    [
        ["gen-toy", "--set", "no_such_key=1"],
        ["gen-toy", "--set", "epochs=two"],
        ["gen-toy", "--set", "novalue"],
        ["gen-toy", "--bogus-flag"],
        ["frobnicate"],
        ["train"],
    ],
)
def test_usage_errors_exit_2(argv, tmp_path, capsys):
    argv = argv + (["--output-dir", str(tmp_path)] if argv[0] in ("gen-toy", "train") and "--bogus-flag" not in argv else [])
    assert run(argv) == 2


def test_unknown_key_in_config_file(tmp_path, capsys):
    f = tmp_path / "c.yaml"
    f.write_text("learning_rate: 0.1\n")
    assert run(["gen-toy", "--config", str(f), "--output-dir", str(tmp_path / "o")]) == 2
    err = _last_json(capsys.readouterr().err)
    assert err["error"] == "usage" and "learning_rate" in err["message"]


def test_runtime_failure_exit_1(tmp_path, capsys):
    code = run(["detect", "--checkpoint", str(tmp_path / "missing.ckpt"), "--image", "x.png"])
    assert code == 1
    err = _last_json(capsys.readouterr().err)
    assert set(err) == {"error", "message"}


def test_detect_prints_one_line(tmp_path, tiny_model, capsys):
    ckpt = save_checkpoint(tiny_model, tmp_path / "m.ckpt")
    assert run(["gen-toy", "--output-dir", str(tmp_path / "toy"), *SMALL]) == 0
    capsys.readouterr()
    img = tmp_path / "toy" / "test" / "fake" / "00000.png"
    assert run(["detect", "--checkpoint", str(ckpt), "--image", str(img)]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1
    rec = json.loads(out[0])
    assert rec["path"] == str(img)
    assert 0 < rec["fake_probability"] < 1
    assert len(rec["crop_rects"]) == 6 and all(len(r) == 4 for r in rec["crop_rects"])


def test_train_eval_robustness_pipeline(tmp_path, capsys):
    toy = tmp_path / "toy"
    assert run(["gen-toy", "--output-dir", str(toy), *SMALL]) == 0
    tiny = ["--set", "architecture=tiny", "--set", "pretrained=false", "--workers", "1"]
    run_dir = tmp_path / "run"
    code = run(["train", "--manifest", str(toy / "train" / "manifest.jsonl"), "--output-dir", str(run_dir), "--epochs", "2", *tiny])
    assert code == 0
    result = _last_json(capsys.readouterr().out)
    assert (run_dir / "model.ckpt").is_file()
    assert len((run_dir / "train_log.jsonl").read_text().splitlines()) == 4  # one step + one epoch record per epoch
    assert sorted(p.name for p in (run_dir / "checkpoints").iterdir()) == ["epoch_000.ckpt", "epoch_001.ckpt"]
    assert yaml.safe_load((run_dir / "effective_config.yaml").read_text())["epochs"] == 2
    assert 0 <= result["train_accuracy"] <= 1

    ev = tmp_path / "eval"
    test_manifest = str(toy / "test" / "manifest.jsonl")
    assert run(["eval", "--checkpoint", result["checkpoint"], "--manifest", test_manifest, "--output-dir", str(ev)]) == 0
    report = json.loads((ev / "report.json").read_text())
    assert report["n_images"] == 6
    assert (ev / "scores.csv").is_file() and (ev / "effective_config.yaml").is_file()

    rb = tmp_path / "rob"
    sweep = ["--set", "blur_sigmas=[0, 2]", "--set", "jpeg_qualities=100"]
    assert run(["robustness", "--checkpoint", result["checkpoint"], "--manifest", test_manifest, "--output-dir", str(rb), *sweep]) == 0
    curves = _last_json(capsys.readouterr().out)
    assert curves["blur"][0] == [0.0, report["global_ap"]]
    assert (rb / "robustness_blur.csv").is_file() and (rb / "robustness_jpeg.csv").is_file()


def test_train_fixed_seed_reproducible_via_cli(tmp_path):
    toy = tmp_path / "toy"
    assert run(["gen-toy", "--output-dir", str(toy), *SMALL]) == 0
    args = ["train", "--manifest", str(toy / "train" / "manifest.jsonl"), "--set", "architecture=tiny", "--set", "pretrained=false", "--set", "batch_size=4", "--workers", "1"]
    assert run(args + ["--output-dir", str(tmp_path / "r1")]) == 0
    assert run(args + ["--output-dir", str(tmp_path / "r2")]) == 0
    losses = [
        [json.loads(l)["loss"] for l in (tmp_path / r / "train_log.jsonl").read_text().splitlines()]
        for r in ("r1", "r2")
    ]
    assert losses[0] == losses[1]
