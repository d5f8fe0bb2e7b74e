import csv
import json

import pytest

from snncert.cli import main
from snncert.data import load_idx
from snncert.network import load_checkpoint

BARS = "bars:n=120,classes=4,height=4,width=4"
ARCH = "X-FC8-FC4"


def run(*argv):
    return main(list(argv))


def test_synth_data_writes_loadable_idx(tmp_path):
    out = tmp_path / "data"
    assert run("synth-data", "--kind", "bars", "--n", "50", "--classes", "5",
               "--out", str(out)) == 0
    ds = load_idx(out / "train-images.idx", out / "train-labels.idx")
    assert len(ds) == 50
    assert set(ds.labels.tolist()) <= set(range(5))
    assert (out / "test-images.idx").exists()


def test_train_writes_metrics_checkpoint_manifest(tmp_path):
    out = tmp_path / "run"
    code = run("train", "--dataset", BARS, "--arch", ARCH, "--epochs", "3",
               "--batch-size", "32", "--lr", "0.05", "--time-steps", "4",
               "--seed", "3", "--out", str(out))
    assert code == 0
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert len(rows) == 3
    net = load_checkpoint(out / "checkpoints" / "final.ckpt")
    assert net.arch == ARCH
    manifest = json.load(open(out / "manifest.json"))
    assert manifest["command"] == "train"
    assert manifest["config"]["epochs"] == 3
    assert manifest["seed"] == 3
    assert "torch" in manifest["versions"]
    assert manifest["rng"] == "philox"


def test_robust_train_manifest_echoes_eps_and_tprime(tmp_path):
    out = tmp_path / "robust"
    code = run("robust-train", "--dataset", BARS, "--arch", ARCH,
               "--epochs-total", "2", "--ramp-epochs", "1", "--eps", "0.07",
               "--tprime", "2", "--time-steps", "4", "--batch-size", "32",
               "--eval-examples", "40", "--out", str(out))
    assert code == 0
    manifest = json.load(open(out / "manifest.json"))
    assert manifest["config"]["eps"] == 0.07
    assert manifest["config"]["tprime"] == 2
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert len(rows) == 2
    assert float(rows[1]["eps"]) == pytest.approx(0.07)


def make_checkpoint(tmp_path):
    out = tmp_path / "base"
    run("train", "--dataset", BARS, "--arch", ARCH, "--epochs", "4",
        "--batch-size", "32", "--lr", "0.05", "--time-steps", "4",
        "--seed", "5", "--out", str(out))
    return out / "checkpoints" / "final.ckpt"


def test_certify_report_row_count_and_eps_zero(tmp_path):
    ckpt = make_checkpoint(tmp_path)
    out = tmp_path / "cert"
    code = run("certify", "--checkpoint", str(ckpt), "--dataset", BARS,
               "--eps", "0.0", "--examples", "30", "--time-steps", "4",
               "--seed", "6", "--out", str(out))
    assert code == 0
    rows = list(csv.DictReader(open(out / "report.csv")))
    assert len(rows) == 30
    report = json.load(open(out / "report.json"))
    # at eps 0 the box is a point: verified error == natural error on the rows
    nat_err = sum(r["label"] != r["prediction"] for r in rows) / 30
    assert report["verified_error"] == pytest.approx(nat_err)


def test_certify_monotone_in_eps(tmp_path):
    ckpt = make_checkpoint(tmp_path)
    errs = []
    for i, eps in enumerate(("0.04", "0.12")):
        out = tmp_path / f"cert{i}"
        assert run("certify", "--checkpoint", str(ckpt), "--dataset", BARS,
                   "--eps", eps, "--examples", "40", "--time-steps", "4",
                   "--seed", "7", "--out", str(out)) == 0
        errs.append(json.load(open(out / "report.json"))["verified_error"])
    assert errs[0] <= errs[1]


def test_attack_csv_rows_and_ordering(tmp_path):
    ckpt = make_checkpoint(tmp_path)
    out = tmp_path / "atk"
    code = run("attack", "--checkpoint", str(ckpt), "--dataset", BARS,
               "--eps-attack", "0.05,0.1,0.2,0.4", "--examples", "15",
               "--time-steps", "4", "--seed", "8", "--out", str(out))
    assert code == 0
    rows = list(csv.DictReader(open(out / "attack.csv")))
    assert len(rows) == 4
    for r in rows:
        assert float(r["attack_err"]) >= float(r["org_err"])


def test_attack_rerun_is_identical(tmp_path):
    ckpt = make_checkpoint(tmp_path)
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run("attack", "--checkpoint", str(ckpt), "--dataset", BARS,
                   "--eps-attack", "0.2", "--examples", "12", "--time-steps", "4",
                   "--seed", "9", "--out", str(out)) == 0
        outputs.append((out / "attack.csv").read_bytes())
    assert outputs[0] == outputs[1]


def test_attack_worker_count_does_not_change_results(tmp_path):
    ckpt = make_checkpoint(tmp_path)
    outputs = []
    for name, workers in (("w1", "1"), ("w2", "2")):
        out = tmp_path / name
        assert run("attack", "--checkpoint", str(ckpt), "--dataset", BARS,
                   "--eps-attack", "0.2", "--examples", "12", "--time-steps", "4",
                   "--seed", "9", "--workers", workers, "--out", str(out)) == 0
        outputs.append((out / "attack.csv").read_bytes())
    assert outputs[0] == outputs[1]


def test_train_on_spike_dataset_spec(tmp_path):
    out = tmp_path / "spikerun"
    code = run("train", "--dataset", "spike-bars:n=60,classes=4,height=4,width=4",
               "--arch", "X-FC8-FC4", "--epochs", "1", "--batch-size", "20",
               "--time-steps", "4", "--out", str(out))
    assert code == 0
    assert (out / "checkpoints" / "final.ckpt").exists()


def test_robust_train_can_start_from_checkpoint(tmp_path):
    ckpt = make_checkpoint(tmp_path)
    out = tmp_path / "warm"
    code = run("robust-train", "--dataset", BARS, "--arch", ARCH,
               "--init", str(ckpt), "--epochs-total", "1", "--ramp-epochs", "1",
               "--eps", "0.05", "--tprime", "2", "--time-steps", "4",
               "--batch-size", "32", "--eval-examples", "40", "--out", str(out))
    assert code == 0
    warm = load_checkpoint(out / "checkpoints" / "final.ckpt")
    assert warm.arch == ARCH


def test_eval_command(tmp_path, capsys):
    ckpt = make_checkpoint(tmp_path)
    assert run("eval", "--checkpoint", str(ckpt), "--dataset", BARS,
               "--examples", "50", "--time-steps", "4", "--seed", "4") == 0
    assert "accuracy" in capsys.readouterr().out


def test_missing_dataset_path_is_usage_error(tmp_path, capsys):
    code = run("train", "--dataset", "idx:/does/not/exist,/nor/this",
               "--out", str(tmp_path / "x"))
    assert code == 1
    assert "not found" in capsys.readouterr().err


def test_missing_checkpoint_is_usage_error(tmp_path, capsys):
    code = run("certify", "--eps", "0.1", "--dataset", BARS,
               "--out", str(tmp_path / "x"))
    assert code == 1
    err = capsys.readouterr().err
    assert "checkpoint" in err


def test_checkpoint_dataset_shape_mismatch_is_runtime_error(tmp_path, capsys):
    ckpt = make_checkpoint(tmp_path)
    code = run("certify", "--checkpoint", str(ckpt),
               "--dataset", "bars:n=20,classes=4,height=6,width=6",
               "--eps", "0.1", "--examples", "5", "--time-steps", "4",
               "--out", str(tmp_path / "y"))
    assert code == 2
    assert "shape" in capsys.readouterr().err


def test_unknown_dataset_spec_is_usage_error(tmp_path):
    assert run("train", "--dataset", "nonsense:x", "--out", str(tmp_path / "x")) == 1


def test_config_file_layering(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(
        "[common]\n"
        f"dataset = {BARS}\n"
        "arch = X-FC8-FC4\n"
        "time-steps = 4\n"
        "seed = 11\n"
        "[train]\n"
        "epochs = 2\n"
        "batch-size = 32\n"
    )
    out = tmp_path / "from_config"
    assert run("--config", str(cfg), "train", "--epochs", "1",
               "--out", str(out)) == 0
    manifest = json.load(open(out / "manifest.json"))
    # flag beats file; file beats default
    assert manifest["config"]["epochs"] == 1
    assert manifest["config"]["batch_size"] == 32
    assert manifest["config"]["seed"] == 11
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert len(rows) == 1


def test_config_file_unknown_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nbogus = 1\n")
    assert run("--config", str(cfg), "train", "--out", str(tmp_path / "x")) == 1
    assert "bogus" in capsys.readouterr().err
