import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from whitecrate import cli
from whitecrate.data import IDX_IMAGES, IDX_LABELS, load_dataset, write_idx
from whitecrate.gradcheck import SuiteResult
from whitecrate.linalg import Rng

SYNTH = {"classes": 2, "tokens": 4, "d_in": 8, "subspaces_per_class": 1, "p_data": 2, "samples_per_class": 40}
MODEL = {"d": 8, "heads": 2, "head_dim": 2, "depth": 2}
TRAIN = {"epochs": 2, "batch_size": 16}


def write_cfg(path, data):
    path.write_text(json.dumps(data))
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def dataset(tmp_path):
    cfg = write_cfg(tmp_path / "gen.json", {"synthetic": SYNTH})
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "gen") == 0
    return tmp_path / "gen" / "dataset"


@pytest.fixture
def trained(tmp_path, dataset):
    cfg = write_cfg(tmp_path / "train.json", {"data": str(dataset), "model": MODEL, "train": TRAIN})
    assert run("train", "--config", cfg, "--out", tmp_path / "run") == 0
    return tmp_path / "run"


# --- exit codes ------------------------------------------------------------------------

def test_usage_errors_exit_one(capsys):
    assert run() == 1
    assert run("fly") == 1
    assert run("gradcheck", "--bogus") == 1
    assert run("train", "--variant", "nope") == 1
    assert run("gradcheck", "--threads", "0") == 1
    assert "usage" in capsys.readouterr().err


def test_version_exits_zero(capsys):
    assert run("--version") == 0
    assert "whitecrate" in capsys.readouterr().out


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert run("gradcheck", "--config", missing) == 1
    assert str(missing) in capsys.readouterr().err


def test_invalid_json_exit_one(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    assert run("gradcheck", "--config", tmp_path / "bad.json") == 1
    (tmp_path / "list.json").write_text("[1, 2]")
    assert run("gradcheck", "--config", tmp_path / "list.json") == 1


def test_unknown_keys_rejected(tmp_path, dataset, capsys):
    assert run("gen-data", "--config", write_cfg(tmp_path / "a.json", {"synthetc": {}}), "--out", tmp_path / "x") == 1
    assert run("gen-data", "--config", write_cfg(tmp_path / "b.json", {"synthetic": {"clases": 3}}), "--out", tmp_path / "x") == 1
    bad_model = {"data": str(dataset), "model": {"dept": 2}}
    assert run("train", "--config", write_cfg(tmp_path / "c.json", bad_model), "--out", tmp_path / "x") == 1
    bad_train = {"data": str(dataset), "train": {"learning_rate": 1.0}}
    assert run("train", "--config", write_cfg(tmp_path / "d.json", bad_train), "--out", tmp_path / "x") == 1
    assert "learning_rate" in capsys.readouterr().err


def test_invalid_values_exit_one(tmp_path, dataset):
    derived = {"data": str(dataset), "model": {"patch_dim": 3}}
    assert run("train", "--config", write_cfg(tmp_path / "a.json", derived), "--out", tmp_path / "x") == 1
    bad_lr = {"data": str(dataset), "train": {"lr": -1}}
    assert run("train", "--config", write_cfg(tmp_path / "b.json", bad_lr), "--out", tmp_path / "x") == 1
    missing_data = {"data": str(tmp_path / "nowhere")}
    assert run("train", "--config", write_cfg(tmp_path / "c.json", missing_data), "--out", tmp_path / "x") == 1
    assert run("train", "--out", tmp_path / "x") == 1  # no data configured
    assert run("gen-data") == 1  # --out required


def test_gradcheck_passes_and_reports(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "g.json", {"suites": ["vjp", "params"]})
    assert run("gradcheck", "--config", cfg, "--out", tmp_path / "g") == 0
    assert "max relative error" in capsys.readouterr().out
    with open(tmp_path / "g" / "gradcheck.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(r["passed"] == "1" and float(r["max_rel_err"]) <= 1e-5 for r in rows)


def test_gradcheck_failure_exits_two(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "run_suites", lambda seed, suites: [SuiteResult("x", 1.0, 1e-5, 1)])
    assert run("gradcheck") == 2


def test_runtime_failure_exits_two(tmp_path, monkeypatch, dataset):
    def boom(*a, **k):
        raise ArithmeticError("diverged")

    monkeypatch.setattr(cli, "train", boom)
    cfg = write_cfg(tmp_path / "t.json", {"data": str(dataset), "model": MODEL, "train": TRAIN})
    assert run("train", "--config", cfg, "--out", tmp_path / "r") == 2


# --- behaviour -------------------------------------------------------------------------------

def test_train_then_eval_matches_logged_metrics(tmp_path, dataset, trained):
    with open(trained / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    for split in ("train", "test"):
        cfg = write_cfg(tmp_path / f"e_{split}.json", {"data": str(dataset), "checkpoint": str(trained / "checkpoint"), "split": split})
        assert run("eval", "--config", cfg, "--out", tmp_path / f"e_{split}") == 0
        with open(tmp_path / f"e_{split}" / "eval.csv") as fh:
            got = next(csv.DictReader(fh))
        logged = [r for r in rows if r["split"] == split][-1]
        assert got["accuracy"] == logged["accuracy"] and got["loss"] == logged["loss"]


def test_config_echo_materializes_defaults(trained):
    echoed = json.loads((trained / "config.json").read_text())
    assert echoed["train"]["optimizer"] == "lion" and echoed["train"]["betas"] == [0.9, 0.99]
    assert echoed["train"]["epochs"] == 2 and echoed["model"]["variant"] == "default"
    info = json.loads((trained / "run_info.json").read_text())
    assert info["command"] == "train" and info["threads"] == 1


def test_train_flags_select_variant(tmp_path, dataset):
    cfg = write_cfg(tmp_path / "t.json", {"data": str(dataset), "model": MODEL, "train": {"epochs": 1}})
    assert run("train", "--config", cfg, "--out", tmp_path / "r", "--variant", "mm_prox", "--attention", "tied") == 0
    model = json.loads((tmp_path / "r" / "config.json").read_text())["model"]
    assert model["variant"] == "mm_prox" and model["attention"] == "tied"


def test_checkpoint_cadence_files(tmp_path, dataset):
    cfg = write_cfg(tmp_path / "t.json", {"data": str(dataset), "model": MODEL, "train": {"epochs": 2, "checkpoint_every": 1}})
    assert run("train", "--config", cfg, "--out", tmp_path / "r") == 0
    assert sorted(p.name for p in (tmp_path / "r" / "checkpoints").iterdir()) == ["epoch_0001", "epoch_0002"]


def test_diagnose_outputs(tmp_path, dataset, trained):
    cfg = write_cfg(tmp_path / "d.json", {"data": str(dataset), "checkpoint": str(trained / "checkpoint"), "batch": 10})
    assert run("diagnose", "--config", cfg, "--out", tmp_path / "d") == 0
    out = tmp_path / "d"
    for name in ("compression.csv", "sparsity.csv", "coherence_offdiag.csv", "coherence_l0.csv", "tokens_l1.csv"):
        assert (out / name).is_file()
    lines = (out / "compression.csv").read_text().splitlines()
    assert lines[0] == "layer,value" and len(lines) == 3
    tokens = np.loadtxt(out / "tokens_l0.csv", delimiter=",")
    assert tokens.shape == (8, 5)  # heatmap clamped to d x N


def test_denoise_demo_outputs(tmp_path):
    cfg = write_cfg(tmp_path / "n.json", {"points": 20, "sigmas": [0.1, 0.05]})
    assert run("denoise-demo", "--config", cfg, "--out", tmp_path / "n") == 0
    with open(tmp_path / "n" / "denoise.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8
    tweedie = [r for r in rows if r["method"] == "tweedie"]
    assert all(float(r["median_rel_err"]) <= 1e-10 for r in tweedie)


def test_checkpoint_info(tmp_path, trained, capsys):
    cfg = write_cfg(tmp_path / "c.json", {"checkpoint": str(trained / "checkpoint")})
    assert run("export-checkpoint-info", "--config", cfg, "--out", tmp_path / "c") == 0
    info = json.loads((tmp_path / "c" / "checkpoint_info.json").read_text())
    assert info["meta"]["kind"] == "checkpoint" and info["meta"]["epoch"] == 2
    assert info["parameters"] * 8 == info["blob_bytes"]


def test_gen_data_from_idx(tmp_path):
    rng = Rng(0)
    write_idx(tmp_path / "img", rng.integers(0, 256, size=(10, 4, 4)).astype(np.uint8), IDX_IMAGES)
    write_idx(tmp_path / "lab", np.arange(10, dtype=np.uint8) % 2, IDX_LABELS)
    cfg = {"source": "idx", "images": str(tmp_path / "img"), "labels": str(tmp_path / "lab"),
           "patch": {"height": 4, "width": 4, "patch_height": 2, "patch_width": 2}}
    assert run("gen-data", "--config", write_cfg(tmp_path / "g.json", cfg), "--out", tmp_path / "g") == 0
    ds = load_dataset(tmp_path / "g" / "dataset")
    assert ds.tokens.shape == (10, 4, 4) and ds.num_classes == 2


def test_seed_flag_changes_dataset(tmp_path):
    cfg = write_cfg(tmp_path / "g.json", {"synthetic": SYNTH})
    run("gen-data", "--config", cfg, "--out", tmp_path / "a")
    run("gen-data", "--config", cfg, "--out", tmp_path / "b", "--seed", "9")
    a = (tmp_path / "a" / "dataset" / "blob.bin").read_bytes()
    b = (tmp_path / "b" / "dataset" / "blob.bin").read_bytes()
    assert a != b
    assert json.loads((tmp_path / "b" / "config.json").read_text())["synthetic"]["seed"] == 9


def test_console_script_module_entry(tmp_path):
    res = subprocess.run([sys.executable, "-m", "whitecrate.cli", "gradcheck", "--config", str(tmp_path / "none.json")],
                         capture_output=True, text=True)
    assert res.returncode == 1 and "none.json" in res.stderr


# --- determinism -------------------------------------------------------------------------------

def run_all(tmp_path, tag):
    root = tmp_path / tag
    root.mkdir()
    data = root / "gen" / "dataset"
    ck = root / "train" / "checkpoint"
    configs = {
        "gen-data": {"synthetic": SYNTH},
        "train": {"data": str(data), "model": MODEL, "train": TRAIN},
        "eval": {"data": str(data), "checkpoint": str(ck)},
        "diagnose": {"data": str(data), "checkpoint": str(ck), "batch": 8},
        "denoise-demo": {"points": 10},
        "gradcheck": {"suites": ["vjp"]},
        "export-checkpoint-info": {"checkpoint": str(ck)},
    }
    outs = {"gen-data": "gen", "train": "train"}
    for cmd, cfg in configs.items():
        out = root / outs.get(cmd, cmd)
        assert run(cmd, "--config", write_cfg(root / f"{cmd}.json", cfg), "--out", out, "--seed", "3") == 0
    files = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "run_info.json" and p.parent != root:
            files[str(p.relative_to(root))] = p.read_bytes()
    return files


def normalize(files, tag):
    # paths embedded in echoed configs mention the run directory
    return {k: v.replace(tag.encode(), b"RUN") for k, v in files.items()}


def test_every_subcommand_byte_identical(tmp_path):
    a = normalize(run_all(tmp_path, "first"), "first")
    b = normalize(run_all(tmp_path, "second"), "second")
    assert a.keys() == b.keys()
    assert any(k.endswith(".csv") for k in a) and any(k.endswith("blob.bin") for k in a)
    diff = [k for k in a if a[k] != b[k]]
    assert diff == []
