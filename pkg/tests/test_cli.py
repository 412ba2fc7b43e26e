import csv
import hashlib
import json

import pytest

from hctransformer.cli import ABLATION_ROWS, main

TINY = {
    "bench": {"n_cls": 3, "M": 3, "H": 2, "W": 2, "D": 12, "n_source": 18, "n_target": 12, "human_region": [1, 2]},
    "model": {"M": 3, "D": 12, "D_v": 8, "L_e": 1, "L_d": 1, "K": 4},
    "train": {"stage1": {"epochs": 1}, "stage2": {"optimizer": "adam", "lr0": 0.001, "weight_decay": 0.0,
                                                   "epochs": 1},
              "batch_pairs": 6},
    "eval": {"attribution_videos": 4},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["generate", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return root, cfg


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_generate_writes_dataset_files(workspace):
    root, _ = workspace
    names = sorted(p.name for p in (root / "data").iterdir())
    assert names == ["bench.json", "source.bin", "target.bin", "target_labels.eval.json"]


def test_train_twice_gives_identical_checkpoints(workspace):
    root, cfg = workspace
    for run in ("r1", "r2"):
        assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / run)]) == 0
    assert sha(root / "r1" / "checkpoint.bin") == sha(root / "r2" / "checkpoint.bin")
    manifest = json.loads((root / "r1" / "manifest.json").read_text())
    assert manifest["seed"] == 0 and len(manifest["dataset_sha256"]) == 64
    assert manifest["config"]["model"]["D_v"] == 8
    assert (root / "r1" / "loss_trace.csv").read_text().startswith("step,L_hm")


def test_seed_flag_overrides_config(workspace):
    root, cfg = workspace
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "s7"),
                 "--seed", "7"]) == 0
    assert json.loads((root / "s7" / "manifest.json").read_text())["seed"] == 7


def test_eval_and_attribute(workspace, capsys):
    root, cfg = workspace
    run = root / "ev"
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(run)]) == 0
    assert main(["eval", "--config", str(cfg), "--data", str(root / "data"), "--run", str(run)]) == 0
    metrics = json.loads((run / "metrics.json").read_text())
    assert 0.0 <= metrics["target_accuracy"] <= 1.0
    assert (run / "metrics.csv").exists()
    assert main(["attribute", "--config", str(cfg), "--data", str(root / "data"), "--run", str(run)]) == 0
    assert len(list((run / "attribution").iterdir())) == 4
    assert "ratio" in json.loads((run / "human_ratio.json").read_text())


def test_ablate_and_report(workspace, capsys):
    root, cfg = workspace
    out = root / "abl"
    assert main(["ablate", "--config", str(cfg), "--data", str(root / "data"), "--out", str(out)]) == 0
    with open(out / "comparison.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["row"] for r in rows] == [name for name, _ in ABLATION_ROWS]
    assert all(r["target_accuracy"] for r in rows)
    capsys.readouterr()
    assert main(["report", "--config", str(cfg), "--out", str(out)]) == 0
    table = capsys.readouterr().out
    assert "Full-Masking" in table and "Target acc" in table


def test_config_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"depth": 3}}))
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "d")]) == 1
    assert "unknown keys" in capsys.readouterr().err
    bad.write_text("{not json")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "d")]) == 1
    assert main(["generate", "--ablation", "no_everything", "--out", str(tmp_path / "d")]) == 1


def test_io_errors_exit_2(tmp_path, workspace):
    _, cfg = workspace
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 2
    assert main(["generate", "--config", str(tmp_path / "nope.json")]) == 2
