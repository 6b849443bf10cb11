import json
import subprocess
import sys

import pytest

from dodcnn.cli import load_checkpoint, run
from dodcnn.gradcheck import BLOCKED, OPS

TINY_CONFIG = """\
arch.shared_channels = 4, 8
arch.c6 = 8
arch.c7 = 8
arch.roi_pool_size = 3, 3
stage1.iters = 6
stage1.step = 6
stage2.iters = 4
stage2.step = 4
stage3.iters = 4
stage3.step = 4
"""


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run(["gen-data", "--out", str(d), "--n", "8", "--n-test", "6", "--seed", "7"]) == 0
    return d


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return path


def test_gen_data_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["gen-data", "--out", str(a), "--n", "40", "--seed", "7"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["splits"] == {"train": 40, "test": 40} and summary["seed"] == 7
    assert run(["gen-data", "--out", str(b), "--n", "40", "--seed", "7"]) == 0
    assert _tree(a) == _tree(b)


def test_train_all_writes_three_checkpoints(tmp_path, dataset, config, capsys):
    out = tmp_path / "ckpt"
    code = run(["train", "--data", str(dataset), "--config", str(config), "--stage", "all",
                "--out", str(out), "--seed", "3"])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert len(doc["checkpoints"]) == 3 and doc["seed"] == 3 and "config_hash" in doc
    for sid in (1, 2, 3):
        meta = json.loads((out / f"stage{sid}.json").read_text())
        assert meta["stage"] == sid and meta["seed"] == 3 and meta["version"]
        assert meta["dataset_seed"] == 7
        assert load_checkpoint(out / f"stage{sid}.dodc").metadata["stage"] == sid
    assert json.loads((out / "stage3.json").read_text())["arch"]["injection_site"] == "c7"


def test_train_stage_by_stage_matches_all(tmp_path, dataset, config):
    whole, steps = tmp_path / "whole", tmp_path / "steps"
    base = ["--data", str(dataset), "--config", str(config), "--seed", "1"]
    assert run(["train", *base, "--stage", "all", "--out", str(whole)]) == 0
    assert run(["train", *base, "--stage", "1", "--out", str(steps)]) == 0
    assert run(["train", *base, "--stage", "2", "--init", str(steps / "stage1.dodc"), "--out", str(steps)]) == 0
    assert run(["train", *base, "--stage", "3", "--init", str(steps / "stage2.dodc"), "--out", str(steps)]) == 0
    for sid in (1, 2, 3):
        assert (whole / f"stage{sid}.dodc").read_bytes() == (steps / f"stage{sid}.dodc").read_bytes()


def test_train_refuses_wrong_init(tmp_path, dataset, config):
    out = tmp_path / "o"
    base = ["--data", str(dataset), "--config", str(config), "--out", str(out)]
    assert run(["train", *base, "--stage", "1"]) == 0
    assert run(["train", *base, "--stage", "3", "--init", str(out / "stage1.dodc")]) == 1
    assert run(["train", *base, "--stage", "2"]) == 1


def test_eval_emits_records(tmp_path, dataset, config, capsys):
    out = tmp_path / "ckpt"
    assert run(["train", "--data", str(dataset), "--config", str(config), "--out", str(out)]) == 0
    capsys.readouterr()
    report = tmp_path / "report.json"
    assert run(["eval", "--checkpoint", str(out / "stage3.dodc"), "--data", str(dataset), "--fusion",
                "--out", str(report)]) == 0
    records = json.loads(report.read_text())["records"]
    assert [r["task"] for r in records] == ["event", "rigid", "nonrigid", "event_fused"]
    for r in records:
        assert set(r) >= {"task", "split", "ap", "num_pos", "num_images", "config_hash"}
        assert r["num_images"] == 6


def test_ablate_emits_four_rows(dataset, config, capsys):
    code = run(["ablate", "--data", str(dataset), "--config", str(config), "--injection", "none,c6,c7,both"])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    rows = doc["rows"]
    assert [r["injection_site"] for r in rows] == ["none", "c6", "c7", "both"]
    assert [r["event_fc_in"] for r in rows] == [8, 8, 24, 24]
    assert all(0.0 <= r["event_ap"] <= 1.0 for r in rows)


def test_gradcheck_lists_every_op(tmp_path):
    out = tmp_path / "g.json"
    assert run(["gradcheck", "--instances", "2", "--out", str(out)]) == 0
    ops = {r["op"]: r for r in json.loads(out.read_text())["ops"]}
    assert set(ops) == set(OPS) | {"batch_pool"}
    assert ops["batch_pool"]["status"] == BLOCKED
    assert all(r["status"] == "pass" for name, r in ops.items() if name != "batch_pool")


@pytest.mark.parametrize("argv", [
    ["gen-data", "--bogus"],
    ["frobnicate"],
    [],
    ["train", "--stage", "4"],
    ["ablate", "--injection", "c9", "--data", "x"],
    ["eval", "--checkpoint", "missing.dodc", "--data", "x"],
    ["gen-data"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert run(argv) == 1
    assert "error" in capsys.readouterr().err


def test_bad_config_file_exits_1(tmp_path, dataset):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate = 3\n")
    assert run(["train", "--data", str(dataset), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "dodcnn", "gen-data", "--out", str(tmp_path / "d"), "--n", "2"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["command"] == "gen-data"
    res = subprocess.run([sys.executable, "-m", "dodcnn", "nope"], capture_output=True, text=True)
    assert res.returncode == 1 and "usage" in res.stderr
