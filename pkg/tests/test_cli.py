import csv
import json

import numpy as np
import pytest

from oracles import sequence_ok
from stage.cli import EXIT_INVALID, EXIT_IO, EXIT_NUMERIC, EXIT_OK, build_parser, main

QUICK = ["--epochs", "3"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--n0", "1000", "--seed", "0", "--out", str(d / "d.csv")]) == EXIT_OK
    return d


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_synth_is_deterministic(workdir, tmp_path):
    assert main(["synth", "--n0", "1000", "--seed", "0", "--out", str(tmp_path / "again.csv")]) == EXIT_OK
    assert (tmp_path / "again.csv").read_bytes() == (workdir / "d.csv").read_bytes()
    assert (workdir / "d.csv.schema.json").exists()
    assert (workdir / "d.csv.labels.csv").exists()


def test_full_pipeline(workdir):
    d = workdir
    data, comp = str(d / "d.csv"), str(d / "c.csv")
    assert main(["train-aemtd", "--data", data, "--out", str(d / "ae.json"), *QUICK]) == EXIT_OK
    assert main(["complete", "--model", str(d / "ae.json"), "--data", data, "--out", comp]) == EXIT_OK
    labels = ["--labels", data + ".labels.csv"]
    assert main(["train-mlssl", "--data", comp, *labels, "--out", str(d / "m.json"), *QUICK]) == EXIT_OK
    assert main(["predict", "--clf", str(d / "m.json"), "--data", comp, "--out", str(d / "p.csv")]) == EXIT_OK
    rows = read_rows(d / "p.csv")
    assert len(rows) == len(read_rows(data))
    preds = [[int(r[k]) for k in r if k.startswith("pred_")] for r in rows]
    assert all(sequence_ok(p) for p in preds)
    # rows come back in the input file's order
    assert [int(r["row"]) for r in rows] == sorted(int(r["row"]) for r in rows)


@pytest.mark.parametrize("setting", ["n-mbt", "aemtd-mbt", "aemtd-imc"])
def test_baselines(workdir, setting):
    d = workdir
    if not (d / "c.csv").exists():
        main(["train-aemtd", "--data", str(d / "d.csv"), "--out", str(d / "ae.json"), *QUICK])
        main(["complete", "--model", str(d / "ae.json"), "--data", str(d / "d.csv"), "--out", str(d / "c.csv")])
    data = str(d / ("d.csv" if setting == "n-mbt" else "c.csv"))
    out = str(d / f"{setting}.json")
    assert main(["baseline", "--setting", setting, "--data", data, "--out", out, "--epochs", "5"]) == EXIT_OK
    assert main(["predict", "--clf", out, "--data", data, "--out", str(d / f"{setting}.csv")]) == EXIT_OK
    assert len(read_rows(d / f"{setting}.csv")) == 1000


def test_schema_mismatch_writes_nothing(workdir, tmp_path):
    assert main(["synth", "--n0", "1000", "--dims", "2,2,2", "--out", str(tmp_path / "other.csv")]) == EXIT_OK
    assert main(["train-aemtd", "--data", str(workdir / "d.csv"), "--out", str(tmp_path / "ae.json"), "--epochs", "1"]) == EXIT_OK
    out = tmp_path / "c.csv"
    code = main(["complete", "--model", str(tmp_path / "ae.json"), "--data", str(tmp_path / "other.csv"), "--out", str(out)])
    assert code == EXIT_INVALID
    assert not out.exists()


def test_usage_errors_exit_one(capsys):
    assert main(["synth", "--bogus"]) == EXIT_INVALID
    assert main([]) == EXIT_INVALID
    assert main(["train-mlssl", "--data", "x", "--out", "y", "--knn", "3", "--hnn", "5"]) == EXIT_INVALID
    assert main(["synth", "--n0", "10", "--out", "unused.csv"]) == EXIT_INVALID


def test_missing_file_exits_three(tmp_path):
    assert main(["train-aemtd", "--data", str(tmp_path / "absent.csv"), "--schema", str(tmp_path / "absent.json"), "--out", str(tmp_path / "m.json")]) == EXIT_IO


def test_divergence_exits_two(workdir, tmp_path):
    args = ["train-aemtd", "--data", str(workdir / "d.csv"), "--out", str(tmp_path / "m.json"), "--lr", "1", "--w-rec", "1e12", "--epochs", "5"]
    with np.errstate(all="ignore"):
        assert main(args) == EXIT_NUMERIC
    assert not (tmp_path / "m.json").exists()


def test_help_shows_classifier_defaults():
    sub = build_parser()._subparsers._group_actions[0].choices["train-mlssl"]
    options = " ".join(sub.format_help().split("options:")[1].split())
    for flag, default in (("--lambda LAM", "0.5"), ("--knn KNN", "20"), ("--hnn HNN", "5")):
        entry = options[options.index(flag):]
        assert entry[: entry.index(")") + 1].endswith(f"(default: {default})")


def test_version(capsys):
    assert main(["--version"]) == EXIT_OK
    assert "0.1.0" in capsys.readouterr().out


def test_config_file_sets_defaults_and_flags_override(workdir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 5, "synth": {"n0": 1000, "dims": [2, 2, 2]}}))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["--config", str(cfg), "synth", "--out", str(a)]) == EXIT_OK
    assert main(["synth", "--n0", "1000", "--dims", "2,2,2", "--seed", "5", "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    assert main(["--config", str(cfg), "synth", "--dims", "4,4,4", "--out", str(a)]) == EXIT_OK
    assert len(json.loads((tmp_path / "a.csv.schema.json").read_text())["columns"]) == 12


def test_bad_config_exits_one(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("{not json")
    assert main(["--config", str(cfg), "synth", "--out", str(tmp_path / "x.csv")]) == EXIT_INVALID


def test_ingest_round_trip(workdir, tmp_path):
    schema = tmp_path / "s.json"
    schema.write_text((workdir / "d.csv.schema.json").read_text())
    out = tmp_path / "e.csv"
    assert main(["ingest", "--data", str(workdir / "d.csv"), "--schema", str(schema), "--out", str(out), "--encoder-out", str(tmp_path / "enc.json")]) == EXIT_OK
    assert len(read_rows(out)) == 1000
    assert (tmp_path / "e.csv.labels.csv").exists()


def test_evaluate_writes_report(tmp_path):
    plan = {
        "source": {"kind": "synthetic", "n0": 240, "survival_rates": [0.6, 0.5, 0.5], "dims_per_stage": [3, 2, 2], "seed": 3},
        "split": {"kind": "kfold", "k": 2},
        "settings": ["n-mbt", "aemtd-iml-ssl"],
        "aemtd": {"max_epochs": 2},
        "mlssl": {"max_epochs": 2},
    }
    (tmp_path / "plan.json").write_text(json.dumps(plan))
    assert main(["evaluate", "--plan", str(tmp_path / "plan.json"), "--out", str(tmp_path / "r")]) == EXIT_OK
    rows = read_rows(tmp_path / "r" / "report.csv")
    assert len(rows) == 6
    assert json.loads((tmp_path / "r" / "manifest.json").read_text())["plan"]["split"]["k"] == 2
