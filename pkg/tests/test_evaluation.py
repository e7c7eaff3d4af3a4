import csv
import io
import json

import numpy as np
import pytest

from oracles import f1_counts
from stage.errors import ShapeError, ValidationError
from stage.evaluation import (
    AEMTD_IML_SSL,
    N_MBT,
    SETTINGS,
    ExperimentPlan,
    RunResult,
    StageReport,
    audit,
    f1_positive,
    load_source,
    plan_jobs,
    run_plan,
    stratified_folds,
    write_report,
)
from stage.funnel import MASK_AFTER_EVENT

SOURCE = {"kind": "synthetic", "n0": 240, "survival_rates": [0.6, 0.5, 0.5], "dims_per_stage": [3, 2, 2], "seed": 3}
QUICK = {"max_epochs": 2}


def quick_plan(**kw):
    doc = {"source": SOURCE, "split": {"kind": "kfold", "k": 3}, "aemtd": QUICK, "mlssl": QUICK, "baseline": {"max_epochs": 5}}
    doc.update(kw)
    return ExperimentPlan.from_json(doc)


# --- F1 -----------------------------------------------------------------------


@pytest.mark.parametrize(
    "pred, truth, expected",
    [
        ([1, 1, -1, -1], [1, 1, -1, -1], 1.0),
        ([1, 1, 1, -1], [1, 1, -1, -1], 0.8),
        ([1, -1, -1], [1, 1, -1], 2 / 3),
        ([-1, -1], [1, 1], 0.0),
        ([-1, -1], [-1, -1], 1.0),
        ([1, 1], [-1, -1], 0.0),
    ],
)
def test_f1_examples(pred, truth, expected):
    assert f1_positive(np.array(pred), np.array(truth)) == pytest.approx(expected)
    assert f1_positive(np.array(pred), np.array(truth)) == pytest.approx(f1_counts(pred, truth))


def test_f1_input_checks():
    with pytest.raises(ShapeError):
        f1_positive(np.array([1, -1]), np.array([1]))
    with pytest.raises(ValidationError):
        f1_positive(np.array([1]), np.array([0]))
    with pytest.raises(ValidationError):
        f1_positive(np.array([]), np.array([]))


def test_f1_matches_counting_oracle(rng):
    for _ in range(50):
        p = rng.choice([-1, 1], 20)
        t = rng.choice([-1, 1], 20)
        assert f1_positive(p, t) == pytest.approx(f1_counts(p, t))


# --- plans --------------------------------------------------------------------


def test_plan_validation():
    with pytest.raises(ValidationError):
        quick_plan(split={"kind": "holdout"})
    with pytest.raises(ValidationError):
        quick_plan(split={"kind": "kfold", "k": 1})
    with pytest.raises(ValidationError):
        quick_plan(settings=["nope"])
    with pytest.raises(ValidationError):
        quick_plan(fill_policy="other")
    with pytest.raises(ValidationError):
        quick_plan(aemtd={"splice": "other"})
    with pytest.raises(ValidationError):
        ExperimentPlan.from_json({"source": SOURCE, "surprise": 1})
    with pytest.raises(ValidationError):
        ExperimentPlan.from_json({"split": {"kind": "kfold"}})


def test_plan_json_round_trip():
    plan = quick_plan(settings=[N_MBT], seed=4)
    assert ExperimentPlan.from_json(json.loads(json.dumps(plan.to_json()))) == plan


def test_unknown_source_kind():
    with pytest.raises(ValidationError):
        load_source({"kind": "ftp"})
    with pytest.raises(ValidationError):
        load_source({"kind": "csv"})
    with pytest.raises(ValidationError):
        load_source({"kind": "synthetic", "n_rows": 5})


def test_folds_are_stratified_and_balanced(rng):
    depth = rng.integers(1, 4, 300)
    outcome = rng.choice([-1, 1], 300)
    folds = stratified_folds(depth, outcome, 5, seed=0)
    assert np.bincount(folds).max() - np.bincount(folds).min() <= 1
    for d in range(1, 4):
        for o in (-1, 1):
            counts = np.bincount(folds[(depth == d) & (outcome == o)], minlength=5)
            assert counts.max() - counts.min() <= 1
    assert np.array_equal(folds, stratified_folds(depth, outcome, 5, seed=0))


def test_kfold_jobs_partition_rows():
    table, _, jobs = plan_jobs(quick_plan())
    seen = np.concatenate([job[2].row_ids for job in jobs])
    assert sorted(seen.tolist()) == sorted(table.row_ids.tolist())
    for job in jobs:
        assert not set(job[1].row_ids.tolist()) & set(job[2].row_ids.tolist())


# --- running --------------------------------------------------------------------


@pytest.fixture(scope="module")
def quick_report():
    return run_plan(quick_plan())


def test_report_has_one_row_per_setting_and_stage(quick_report):
    rows = quick_report.rows()
    assert [(r["setting"], r["stage"]) for r in rows] == [(s, st) for s in SETTINGS for st in (1, 2, 3)]


def test_means_equal_mean_of_raw_scores(quick_report):
    for row in quick_report.rows():
        raw = quick_report.raw_scores(row["setting"], row["stage"])
        assert len(raw) == 3
        assert row["mean_f1"] == pytest.approx(np.mean(raw))
        assert row["std_f1"] == pytest.approx(np.std(raw))
        assert all(0 <= v <= 1 for v in raw)


def test_counts_are_known_evaluation_rows(quick_report):
    table, _, jobs = plan_jobs(quick_plan())
    # propagate_reject: every row that reached stage 1 is known at every stage
    for run, job in zip(quick_report.runs, jobs):
        assert run.counts[1] == (job[2].observed_depth >= 1).sum()
        assert run.counts[3] == run.counts[1]


def test_mask_after_event_counts_match_depth():
    report = run_plan(quick_plan(settings=[N_MBT], fill_policy=MASK_AFTER_EVENT))
    _, _, jobs = plan_jobs(quick_plan(settings=[N_MBT], fill_policy=MASK_AFTER_EVENT))
    for run, job in zip(report.runs, jobs):
        for s in (1, 2, 3):
            assert run.counts[s] == (job[2].observed_depth >= s).sum()


def test_csv_and_manifest(tmp_path, quick_report):
    write_report(quick_report, tmp_path)
    rows = list(csv.DictReader(io.StringIO((tmp_path / "report.csv").read_text())))
    assert list(rows[0]) == ["setting", "stage", "mean_f1", "std_f1", "n"]
    assert len(rows) == len(SETTINGS) * 3
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["plan"]["split"]["k"] == 3
    assert len(manifest["runs"]) == 3
    assert manifest["raw_scores"][N_MBT]["1"] == quick_report.raw_scores(N_MBT, 1)


def test_runs_are_deterministic(quick_report):
    assert run_plan(quick_plan()).to_csv() == quick_report.to_csv()


def test_parallel_matches_serial():
    plan = quick_plan(settings=[N_MBT, AEMTD_IML_SSL])
    assert run_plan(plan, jobs=2).to_csv() == run_plan(plan).to_csv()


def test_audit_catches_leakage():
    run = RunResult(0, 0, 0, 0, train_ids=["src:1", "src:2"], eval_ids=["src:2"])
    with pytest.raises(ValidationError):
        audit(StageReport((N_MBT,), 1, [run]))
    audit(StageReport((N_MBT,), 1, [RunResult(0, 0, 0, 0, train_ids=["a:1"], eval_ids=["b:1"])]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_failing_setting_is_recorded_without_stopping_siblings():
    # a huge learning rate makes the feature model diverge; the raw baseline is unaffected
    plan = quick_plan(settings=[N_MBT, AEMTD_IML_SSL], aemtd={"max_epochs": 3, "learning_rate": 1.0, "w_rec": 1e12})
    report = run_plan(plan)
    assert report.errors and all(e["setting"] == AEMTD_IML_SSL for e in report.errors)
    assert len(report.raw_scores(N_MBT, 1)) == 3


def test_longitudinal_split_scores_on_validation_source():
    other = dict(SOURCE, seed=8)
    plan = quick_plan(settings=[N_MBT], split={"kind": "longitudinal", "k": 2, "validation": {**other}})
    report = run_plan(plan)
    val = load_source(other)
    assert all(len(r.eval_ids) == val.n_rows for r in report.runs)
    audit(report)


@pytest.mark.slow
def test_pima_plan_runs_ten_folds():
    plan = ExperimentPlan.from_json(
        {"source": {"kind": "pima"}, "settings": [N_MBT], "fill_policy": MASK_AFTER_EVENT, "baseline": {"max_epochs": 20}}
    )
    report = run_plan(plan)
    assert len(report.runs) == 10
    assert sum(len(r.eval_ids) for r in report.runs) == 729
