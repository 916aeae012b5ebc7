import json
import subprocess
import sys

import numpy as np
import pytest

from msvr.cli import ConfigError, load_config, main
from msvr.datakit import load_split
from msvr.evalkit import load_report_json
from msvr.model import read_trace_csv

TINY_CONFIG = """
[data]
seed = 1
n_ids = 6
frames_per_id = 22
base_side = 220

[split]
seed = 2

[model]
seed = 3
train_seed = 4
scales = [24, 16]
max_iterations = 40
batch_size = 4
trace_every = 10
learning_rate = 0.003

[backbone]
channels = [6, 8]
strides = [2, 2]
embed_dim = 8

[eval]
max_rank = 3
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated dataset + split + checkpoint shared by the cli tests."""
    root = tmp_path_factory.mktemp("cliws")
    config = root / "run.toml"
    config.write_text(TINY_CONFIG)
    data = root / "data"
    assert main(["gen-data", "--config", str(config), "--out", str(data)]) == 0
    split = data / "split.json"
    assert (
        main(
            [
                "build-splits",
                "--config",
                str(config),
                "--manifest",
                str(data / "manifest.tsv"),
                "--out",
                str(split),
            ]
        )
        == 0
    )
    ckpt = root / "model.ckpt"
    assert (
        main(
            ["train", "--config", str(config), "--split", str(split), "--out", str(ckpt)]
        )
        == 0
    )
    return {"root": root, "config": config, "data": data, "split": split, "ckpt": ckpt}


def test_gen_data_outputs(workspace):
    data = workspace["data"]
    assert (data / "manifest.tsv").exists()
    assert (data / "stats.csv").exists()
    ppms = list(data.rglob("*.ppm"))
    assert len(ppms) == 6 * 22


def test_gen_data_refuses_dirty_dir_without_force(workspace):
    code = main(
        ["gen-data", "--config", str(workspace["config"]), "--out", str(workspace["data"])]
    )
    assert code == 3


def test_gen_data_force_and_reproducibility(workspace, tmp_path):
    fresh = tmp_path / "fresh"
    assert main(["gen-data", "--config", str(workspace["config"]), "--out", str(fresh)]) == 0
    a = (fresh / "manifest.tsv").read_bytes()
    assert (
        main(
            ["gen-data", "--config", str(workspace["config"]), "--out", str(fresh), "--force"]
        )
        == 0
    )
    assert (fresh / "manifest.tsv").read_bytes() == a
    assert a == (workspace["data"] / "manifest.tsv").read_bytes()


def test_split_invariants(workspace):
    split = load_split(workspace["split"])
    split.validate()
    assert len(split.train_ids) == 3
    assert len(split.probe) == 3
    assert len(split.gallery) == 3


def test_build_splits_corrupt_manifest(workspace, tmp_path):
    bad = tmp_path / "bad.tsv"
    lines = (workspace["data"] / "manifest.tsv").read_text().splitlines()
    lines[5] = "garbage line"
    bad.write_text("\n".join(lines) + "\n")
    code = main(
        [
            "build-splits",
            "--config",
            str(workspace["config"]),
            "--manifest",
            str(bad),
            "--out",
            str(tmp_path / "split.json"),
        ]
    )
    assert code == 3


def test_train_outputs(workspace):
    assert workspace["ckpt"].exists()
    trace = read_trace_csv(workspace["root"] / "model.trace.csv")
    assert trace[0].iteration == 0
    assert trace[-1].iteration == 40


def test_eval_writes_report(workspace, capsys):
    out = workspace["root"] / "report.json"
    code = main(
        [
            "eval",
            "--config",
            str(workspace["config"]),
            "--checkpoint",
            str(workspace["ckpt"]),
            "--split",
            str(workspace["split"]),
            "--out",
            str(out),
        ]
    )
    assert code == 0
    printed = capsys.readouterr().out
    assert "Rank-1" in printed
    report, meta = load_report_json(out)
    assert report.feature_dim == 16
    assert len(report.cmc) == 3
    assert 0.0 <= report.map <= 1.0
    assert "created" in meta
    assert (workspace["root"] / "report.cmc.csv").exists()


def test_eval_ablate_branch_feature_dim(workspace):
    out = workspace["root"] / "branch0.json"
    code = main(
        [
            "eval",
            "--config",
            str(workspace["config"]),
            "--checkpoint",
            str(workspace["ckpt"]),
            "--split",
            str(workspace["split"]),
            "--out",
            str(out),
            "--ablate-branch",
            "0",
        ]
    )
    assert code == 0
    report, meta = load_report_json(out)
    assert report.feature_dim == 8
    assert meta["ablate_branch"] == 0


def test_eval_ablate_branch_out_of_range(workspace):
    code = main(
        [
            "eval",
            "--checkpoint",
            str(workspace["ckpt"]),
            "--split",
            str(workspace["split"]),
            "--out",
            str(workspace["root"] / "x.json"),
            "--ablate-branch",
            "7",
        ]
    )
    assert code == 2


def test_eval_features_only(workspace):
    out = workspace["root"] / "features.json"
    code = main(
        [
            "eval",
            "--checkpoint",
            str(workspace["ckpt"]),
            "--split",
            str(workspace["split"]),
            "--out",
            str(out),
            "--features-only",
        ]
    )
    assert code == 0
    features = np.load(workspace["root"] / "features.npy")
    sidecar = json.loads(out.read_text())
    assert features.shape == (6, 16)  # 3 probe + 3 gallery rows
    assert sidecar["roles"].count("probe") == 3
    assert sidecar["feature_dim"] == 16


def test_eval_missing_checkpoint_is_nonzero(workspace):
    code = main(
        [
            "eval",
            "--checkpoint",
            str(workspace["root"] / "nope.ckpt"),
            "--split",
            str(workspace["split"]),
            "--out",
            str(workspace["root"] / "y.json"),
        ]
    )
    assert code == 3


def test_report_command_prints_table(workspace, capsys):
    out = workspace["root"] / "report.json"
    if not out.exists():
        main(
            [
                "eval",
                "--config",
                str(workspace["config"]),
                "--checkpoint",
                str(workspace["ckpt"]),
                "--split",
                str(workspace["split"]),
                "--out",
                str(out),
            ]
        )
        capsys.readouterr()
    assert main(["report", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "Rank-1" in printed and "mAP" in printed


def test_train_outputs_byte_identical_across_runs(workspace, tmp_path):
    args = lambda out: [
        "train",
        "--config",
        str(workspace["config"]),
        "--split",
        str(workspace["split"]),
        "--out",
        str(out),
    ]
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    assert main(args(a)) == 0
    assert main(args(b)) == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.trace.csv").read_bytes() == (tmp_path / "b.trace.csv").read_bytes()


def test_unknown_config_key_rejected(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nlearning_rat = 0.1\n")
    with pytest.raises(ConfigError, match="learning_rat"):
        load_config(str(bad))


def test_unknown_config_section_rejected(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[optimizer]\nlr = 0.1\n")
    with pytest.raises(ConfigError, match="optimizer"):
        load_config(str(bad))


def test_bad_config_type_rejected(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text('[model]\nlearning_rate = "fast"\n')
    with pytest.raises(ConfigError):
        load_config(str(bad))


def test_config_exit_code_via_main(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[nope]\nx = 1\n")
    code = main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")])
    assert code == 2


def test_console_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "msvr", "--help"],
        capture_output=True,
        text=True,
        env={"PYTHONPATH": "src", "PATH": "/usr/bin:/bin"},
        cwd="/root/pkg",
    )
    assert proc.returncode == 0
    assert "gen-data" in proc.stdout
