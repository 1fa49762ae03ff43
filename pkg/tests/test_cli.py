import csv
import json
import shutil
import subprocess
from pathlib import Path

import numpy as np
import pytest

from hrt import cli
from hrt.errors import DivergenceError
from hrt.model import HrtModel, read_checkpoint

ROOT = Path(__file__).resolve().parents[1]
COPY = str(ROOT / "configs" / "copy_micro.json")
GOLDEN = Path(__file__).parent / "golden"


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    assert run("train", "--config", COPY, "--out", out, "--override", "training.steps=150", "--quiet") == 0
    return out


def test_golden_final_loss(trained):
    golden = json.loads((GOLDEN / "demo_copy.json").read_text())
    rows = list(csv.DictReader(open(trained / "train.csv")))
    assert len(rows) == 150
    assert abs(float(rows[-1]["total"]) - golden["final_total_loss"]) < 1e-9
    for name in ("checkpoint.hrt", "train.csv", "summary.json", "config.json", "run.json"):
        assert (trained / name).is_file()


def test_trained_demo_eval(trained, tmp_path):
    assert run("eval", "--config", COPY, "--checkpoint", trained / "checkpoint.hrt", "--out", tmp_path, "--quiet") == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["accuracy"] >= 0.99 and metrics["split"] == "val"


def test_rerun_is_byte_identical(trained, tmp_path):
    assert run("train", "--config", COPY, "--out", tmp_path, "--override", "training.steps=150", "--quiet") == 0
    for name in ("train.csv", "checkpoint.hrt", "summary.json"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()
    a = json.loads((trained / "run.json").read_text())
    b = json.loads((tmp_path / "run.json").read_text())
    assert a["outputs"] == b["outputs"] and a["config"] == b["config"] and a["seed"] == 0


def test_zero_steps_checkpoint_is_init(tmp_path):
    assert run("train", "--config", COPY, "--out", tmp_path, "--override", "training.steps=0", "--quiet") == 0
    cfg_dict, params = read_checkpoint(tmp_path / "checkpoint.hrt")
    from hrt.config import HrtConfig
    init = HrtModel(HrtConfig.from_dict(cfg_dict)).state_dict()
    for name, arr in params:
        assert arr.tobytes() == init[name].tobytes()
    assert (tmp_path / "train.csv").read_text().strip() == "step,task_loss,recon_loss,total,grad_norm,lr"


def test_missing_config_names_path(tmp_path, capsys):
    assert run("train", "--config", tmp_path / "nope.json", "--out", tmp_path) == 1
    assert "nope.json" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path, capsys):
    assert run("train", "--config", COPY, "--out", tmp_path, "--override", "model.levles=2") == 1
    assert "model.levles" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text('{"modle": {}}')
    assert run("train", "--config", bad, "--out", tmp_path) == 1
    assert "modle" in capsys.readouterr().err


def test_divergence_exit_code(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise DivergenceError("non-finite loss at step 1")

    monkeypatch.setattr(cli, "train", boom)
    assert run("train", "--config", COPY, "--out", tmp_path, "--quiet") == 2


def test_untrained_listops_eval_at_chance(tmp_path):
    over = ["--override", "task.kind=\"listops_mini\"", "--override", "task.seq_len=64",
            "--override", "training.eval_batches=16", "--override", "model.dims=[16,32,32]"]
    assert run("train", "--out", tmp_path / "t", "--override", "training.steps=0", *over, "--quiet") == 0
    ckpt = tmp_path / "t" / "checkpoint.hrt"
    for out in ("e1", "e2"):
        assert run("eval", "--checkpoint", ckpt, "--out", tmp_path / out, "--split", "test", *over, "--quiet") == 0
    m1 = (tmp_path / "e1" / "metrics.json").read_bytes()
    assert m1 == (tmp_path / "e2" / "metrics.json").read_bytes()
    assert abs(json.loads(m1)["accuracy"] - 0.1) <= 0.03


def test_dump_attention(trained, tmp_path):
    ckpt = trained / "checkpoint.hrt"
    for out in ("d1", "d2"):
        assert run("dump-attention", "--config", COPY, "--checkpoint", ckpt, "--out", tmp_path / out,
                   "--text", "1 2 3 4 5 6 7 8 9 2 3 4", "--quiet") == 0
    d1 = tmp_path / "d1"
    manifest = json.loads((d1 / "manifest.json").read_text())
    maps = manifest["self"] + manifest["cross"]
    assert len(manifest["self"]) == 3 * 2 and len(manifest["cross"]) == 2 * 2 and len(maps) == 10
    assert len(list(d1.glob("self_*.csv")) + list(d1.glob("cross_*.csv"))) == 10
    assert [p["file"] for p in manifest["pyramid"]] == [f"pyramid_level{i}.csv" for i in (1, 2, 3)]
    for entry in manifest["self"]:
        w = np.loadtxt(d1 / entry["file"], delimiter=",", skiprows=1, ndmin=2)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
    for f in sorted(p.name for p in d1.iterdir() if p.suffix == ".csv"):
        assert (d1 / f).read_bytes() == (tmp_path / "d2" / f).read_bytes()


def test_dump_attention_config_mismatch(trained, tmp_path, capsys):
    rc = run("dump-attention", "--config", COPY, "--checkpoint", trained / "checkpoint.hrt", "--out", tmp_path,
             "--override", "model.heads=4")
    assert rc == 1 and "heads" in capsys.readouterr().err


def test_bench_row_contract(tmp_path):
    assert run("bench", "--n-list", "256,512", "--out", tmp_path, "--quiet") == 0
    rows = list(csv.DictReader(open(tmp_path / "scaling.csv")))
    assert [(r["n"], r["model"]) for r in rows] == [("256", "hrt"), ("256", "flat"), ("512", "hrt"), ("512", "flat")]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["passed"] and summary["checks"]["flop_crossover_le_512"]["crossover_n"] == 256
    assert (tmp_path / "nes.csv").read_text().startswith("model,task,n,accuracy,flops,nes")


def test_bench_gated_failure_exit_3(tmp_path):
    assert run("bench", "--n-list", "1024,2048", "--out", tmp_path, "--quiet") == 3
    checks = json.loads((tmp_path / "summary.json").read_text())["checks"]
    assert checks["hrt_attention_rho_le_2_5"]["failing_n"] == [1024]


def test_console_script(tmp_path):
    exe = shutil.which("hrt")
    if exe is None:
        pytest.skip("console script not installed")
    proc = subprocess.run([exe, "bench", "--n-list", "256", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0 and "PASS param_matched" in proc.stdout
