import json
import subprocess
import sys

import pytest

from diffmargin.cli import DEFAULTS, ConfigError, build_config, main

FAST_THEOREMS = ["n_affine=2", "ce_iters=2000", "n_one_step=5", "prop1_seeds=1", "prop1_iters=200"]


def _manifest(path):
    return json.loads((path / "manifest.json").read_text())


def test_theorems_smoke(tmp_path):
    code = main(["run", "theorems", "--seed", "0", "--out", str(tmp_path)] + FAST_THEOREMS)
    assert code in (0, 1)
    man = _manifest(tmp_path)
    files = {a["file"] for a in man["artifacts"]}
    assert {"bounds.json", "one_step.csv", "report.json"} <= files
    assert man["status"] in ("ok", "checks-failed")
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["config"]["seed"] == 0


def test_digests_reproducible(tmp_path):
    digests = []
    for name in ("a", "b"):
        main(["run", "theorems", "--seed", "3", "--out", str(tmp_path / name)] + FAST_THEOREMS)
        man = _manifest(tmp_path / name)
        digests.append(({a["file"]: a["sha256"] for a in man["artifacts"]},
                        man["config_hash"]))
    assert digests[0] == digests[1]


def test_synth_margin_svg_has_two_lines(tmp_path):
    code = main(["run", "synth-margin", "--seed", "0", "--out", str(tmp_path), "iters=3000", "shifts=[0,5]"])
    assert code in (0, 1)
    svg = (tmp_path / "scatter.svg").read_text()
    assert svg.count("<polyline") == 2
    assert (tmp_path / "translation.csv").read_text().splitlines()[0] == "shift,svm_margin,ce_margin,ce_B"


def test_missing_seed_is_config_error(tmp_path, capsys):
    assert main(["run", "theorems", "--out", str(tmp_path)]) == 2
    assert "'seed'" in capsys.readouterr().err


def test_unknown_and_mistyped_fields(tmp_path, capsys):
    assert main(["run", "theorems", "--seed", "0", "--out", str(tmp_path), "bogus=1"]) == 2
    assert "'bogus'" in capsys.readouterr().err
    assert main(["run", "theorems", "--seed", "0", "--out", str(tmp_path), "--set", "ce_iters=abc"]) == 2
    assert "'ce_iters'" in capsys.readouterr().err


def test_bad_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    assert main(["run", "theorems", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "'config'" in capsys.readouterr().err


def test_precedence():
    cfg = build_config("train", {"seed": 1, "lr": 0.5, "iters": 10}, seed=2, overrides={"lr": 0.25})
    assert cfg["seed"] == 2 and cfg["lr"] == 0.25 and cfg["iters"] == 10
    assert cfg["n_per_class"] == DEFAULTS["train"]["n_per_class"]
    with pytest.raises(ConfigError, match="'experiment'"):
        build_config("nope", seed=0)


def test_train_roundtrip(tmp_path):
    code = main(["run", "train", "--seed", "0", "--out", str(tmp_path), "iters=50"])
    assert code == 0
    from diffmargin.nn import MlpModel
    model = MlpModel.from_json((tmp_path / "model.json").read_text())
    assert model.input_dim == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "diffmargin", "list"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert set(json.loads(proc.stdout)) == set(DEFAULTS)


def _fake_cifar(root, rng):
    from diffmargin.data import CIFAR_TEST_FILES, CIFAR_TRAIN_FILES, write_cifar10_file
    for name in CIFAR_TRAIN_FILES + CIFAR_TEST_FILES:
        labels = rng.choice([0, 7, 3], size=30)
        pixels = rng.integers(0, 256, size=(30, 3072))
        pixels[labels == 0, :1024] //= 2
        write_cifar10_file(root / name, labels, pixels)


def test_robustness_reads_cifar_files(tmp_path):
    import numpy as np
    root = tmp_path / "cifar"
    root.mkdir()
    _fake_cifar(root, np.random.default_rng(0))
    out = tmp_path / "run"
    code = main(["run", "robustness", "--seed", "0", "--out", str(out), "dataset=cifar", f"cifar_dir={root}",
                 "n_train=40", "n_val=10", "n_test=20", "hidden=[8]", "iters=20", "epsilons=[0,0.5]", "steps=3"])
    assert code in (0, 1)
    report = json.loads((out / "report.json").read_text())
    assert report["results"]["data"]["source"] == "cifar10"
    assert (out / "robustness_bce.csv").exists()


def test_robustness_without_cifar_is_config_error(tmp_path, monkeypatch):
    monkeypatch.delenv("DIFFMARGIN_CIFAR_DIR", raising=False)
    assert main(["run", "robustness", "--seed", "0", "--out", str(tmp_path), "dataset=cifar"]) == 2


def test_stand_in_image_experiments(tmp_path):
    code = main(["run", "rank-spectrum", "--seed", "0", "--out", str(tmp_path / "r"), "n_per_class=20",
                 "hidden=[16,8]", "iters=10", "prop1_iters=50", "prop1_seeds=1"])
    assert code in (0, 1)
    code = main(["run", "robustness", "--seed", "0", "--out", str(tmp_path / "a"), "dataset=synthetic-images",
                 "n_train=40", "n_val=10", "n_test=20", "hidden=[8]", "iters=20", "epsilons=[0,0.5]", "steps=3"])
    assert code in (0, 1)
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["results"]["data"]["stand_in"] is True
