"""Acceptance checks. Each test prints one PASS/FAIL line, collected and
repeated in the terminal summary. Run directly with ``python tests/test_acceptance.py``
to get just those lines."""

import hashlib
import itertools
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import gradients  # noqa: E402
from oracles import sequence_ok  # noqa: E402
from stage.aemtd import DEFAULT_LEARNING_RATE, KEEP_OBSERVED, complete, stage_embeddings, train_aemtd  # noqa: E402
from stage.baselines import train_imc, stages_passed  # noqa: E402
from stage.datasets import load_pima  # noqa: E402
from stage.evaluation import AEMTD_IML_SSL, AEMTD_MBT, N_MBT, SETTINGS, ExperimentPlan, run_plan, write_report  # noqa: E402
from stage.funnel import (  # noqa: E402
    MASK_AFTER_EVENT,
    FeatureEncoder,
    SynthFunnelConfig,
    synth_funnel,
    synth_funnel_with_truth,
    to_label_matrix,
)
from stage.mlssl import build_graph, default_sgd, predict, sls_loss, tc_loss, train_mlssl  # noqa: E402
from stage.nn import SgdConfig  # noqa: E402

RESULTS = []

# final stage keeps 40 rows: 200 -> 90 -> 40 -> 20 approved
LADDER_SOURCE = {"kind": "synthetic", "n0": 200, "survival_rates": [0.45, 0.45, 0.5]}
LADDER_SEEDS = range(10)


def report(number, ok, detail, elapsed, limit=None):
    within = limit is None or elapsed < limit
    status = "PASS" if ok and within else "FAIL"
    timing = f"{elapsed:.1f}s" + ("" if limit is None else f" (limit {limit:.0f}s)")
    line = f"{status} criterion {number}: {detail}; {timing}"
    print(line)
    RESULTS.append(line)
    return ok and within


# ---------------------------------------------------------------------------


def criterion_1():
    t = time.perf_counter()
    mismatches = 0
    total = 0
    for S in range(1, 7):
        for row in itertools.product((-1.0, 1.0), repeat=S):
            total += 1
            mismatches += (tc_loss(np.array([row])) == 0) != sequence_ok(row)
    return report(1, mismatches == 0, f"tc zero-set vs brute force, {mismatches} mismatches over {total} rows", time.perf_counter() - t, 1)


def criterion_2():
    t = time.perf_counter()
    worst = {name: max(check(seed) for seed in range(5)) for name, check in gradients.CHECKS.items()}
    top = max(worst.values())
    detail = "max relative gradient error " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    return report(2, top < 1e-4, detail, time.perf_counter() - t, 30)


def criterion_3():
    t = time.perf_counter()
    rng = np.random.default_rng(2024)
    bad = []
    min_eig = np.inf
    worst_null = 0.0
    for i in range(50):
        n = int(rng.integers(25, 201))
        d = int(rng.integers(2, 13))
        x = rng.standard_normal((n, d)) * rng.uniform(0.2, 3.0, d)
        g = build_graph(x, k_nn=20, h_nn=5)
        eig = np.linalg.eigvalsh(g.laplacian).min()
        y = rng.uniform(-1, 1, size=(n, 3))
        null = sls_loss(np.sqrt(g.degrees)[:, None], g)
        min_eig, worst_null = min(min_eig, eig), max(worst_null, null)
        if not (np.array_equal(g.laplacian, g.laplacian.T) and eig >= -1e-8 and sls_loss(y, g) >= 0 and null < 1e-8):
            bad.append(i)
    detail = f"{50 - len(bad)}/50 graphs ok, min eigenvalue {min_eig:.1e}, max null-vector sls {worst_null:.1e}"
    return report(3, not bad, detail, time.perf_counter() - t, 60)


def criterion_4():
    t = time.perf_counter()
    ds, _ = synth_funnel(SynthFunnelConfig())
    model = train_aemtd(ds, SgdConfig(learning_rate=DEFAULT_LEARNING_RATE, max_epochs=200, seed=0))
    e = stage_embeddings(model, ds, seed=1)
    mean, var = np.abs(e.mean(axis=0)).max(), e.var(axis=0)
    ok = mean < 0.2 and var.min() >= 0.5 and var.max() <= 1.5
    detail = f"embedding max |mean| {mean:.3f}, variance range [{var.min():.3f}, {var.max():.3f}]"
    return report(4, ok, detail, time.perf_counter() - t, 300)


def criterion_5():
    t = time.perf_counter()
    ds, _, truth = synth_funnel_with_truth(SynthFunnelConfig(dependency_noise_sigma=0.0))
    model = train_aemtd(ds, SgdConfig(learning_rate=DEFAULT_LEARNING_RATE, max_epochs=400, seed=0))
    cd = complete(model, ds)
    generated = ~cd.provenance_mask
    rmse = float(np.sqrt(np.mean((cd.features[generated] - truth[generated]) ** 2)))
    return report(5, rmse < 0.15, f"future-cell RMSE {rmse:.4f} over {generated.sum()} cells", time.perf_counter() - t, 300)


def ladder_plan(seed):
    return ExperimentPlan(
        source={**LADDER_SOURCE, "seed": seed},
        split={"kind": "kfold", "k": 5},
        settings=(N_MBT, AEMTD_MBT, AEMTD_IML_SSL),
        seed=seed,
        aemtd={"splice": KEEP_OBSERVED},
    )


def criterion_6():
    t = time.perf_counter()
    scores = {s: [] for s in (N_MBT, AEMTD_MBT, AEMTD_IML_SSL)}
    for seed in LADDER_SEEDS:
        rep = run_plan(ladder_plan(seed))
        for s in scores:
            scores[s].append(rep.mean_f1(s, 3))
    m = {s: float(np.mean(v)) for s, v in scores.items()}
    gain = m[AEMTD_IML_SSL] / m[N_MBT] - 1
    ok = m[N_MBT] <= m[AEMTD_MBT] <= m[AEMTD_IML_SSL] and gain >= 0.2
    detail = "final-stage F1 " + ", ".join(f"{k}={v:.3f}" for k, v in m.items()) + f", relative gain {100 * gain:.1f}%"
    return report(6, ok, detail, time.perf_counter() - t, 1800)


def criterion_7():
    t = time.perf_counter()
    plan = ExperimentPlan(
        source={"kind": "pima"},
        split={"kind": "kfold", "k": 10},
        settings=(N_MBT, AEMTD_IML_SSL),
        fill_policy=MASK_AFTER_EVENT,
        aemtd={"splice": KEEP_OBSERVED},
    )
    rep = run_plan(plan)
    base, ours = rep.mean_f1(N_MBT, 2), rep.mean_f1(AEMTD_IML_SSL, 2)
    detail = f"Pima stage-2 F1 {AEMTD_IML_SSL}={ours:.3f} vs {N_MBT}={base:.3f}"
    return report(7, ours >= base, detail, time.perf_counter() - t, 1200)


def _prediction_sets():
    yield "small synthetic", synth_funnel(SynthFunnelConfig(n0=120, survival_rates=(0.6, 0.5, 0.5), dims_per_stage=(3, 2, 2), seed=11))
    yield "default synthetic", synth_funnel(SynthFunnelConfig())
    yield "ladder synthetic", synth_funnel(SynthFunnelConfig(n0=200, survival_rates=(0.45, 0.45, 0.5)))
    yield "noiseless synthetic", synth_funnel(SynthFunnelConfig(dependency_noise_sigma=0.0))
    table = load_pima()
    ds = FeatureEncoder().fit(table).transform(table)
    yield "pima", (ds, to_label_matrix(ds, MASK_AFTER_EVENT))


def criterion_8():
    t = time.perf_counter()
    checked = invalid = 0
    names = []
    for name, (ds, labels) in _prediction_sets():
        names.append(name)
        for z in (
            predict(train_mlssl(ds, labels, cfg=default_sgd(max_epochs=20)), ds),
            predict(train_mlssl(ds.features, labels, cfg=default_sgd(max_epochs=5), depth=ds.observed_depth), np.zeros_like(ds.features)),
            train_imc(ds.features, stages_passed(labels), ds.n_stages, cfg=SgdConfig(max_epochs=5)).predict(ds.features),
        ):
            checked += len(z)
            invalid += sum(not sequence_ok(r) for r in z)
    detail = f"{checked - invalid}/{checked} predicted rows valid across {', '.join(names)}"
    return report(8, invalid == 0, detail, time.perf_counter() - t)


def _pipeline_digest(out_dir):
    plan = ExperimentPlan(
        source={"kind": "synthetic", "n0": 400, "survival_rates": [0.5, 0.5, 0.5], "seed": 7},
        split={"kind": "kfold", "k": 3},
        settings=SETTINGS,
        seed=7,
        aemtd={"max_epochs": 20},
        mlssl={"max_epochs": 20},
    )
    write_report(run_plan(plan), out_dir)
    return hashlib.sha256((Path(out_dir) / "report.csv").read_bytes()).hexdigest()


def criterion_9(tmp_dir):
    t = time.perf_counter()
    a = _pipeline_digest(Path(tmp_dir) / "a")
    b = _pipeline_digest(Path(tmp_dir) / "b")
    return report(9, a == b, f"report.csv digests {a[:12]} / {b[:12]}", time.perf_counter() - t, 600)


# ---------------------------------------------------------------------------


def test_criterion_1_sequence_oracle():
    assert criterion_1()


def test_criterion_2_gradients():
    assert criterion_2()


def test_criterion_3_laplacian():
    assert criterion_3()


@pytest.mark.slow
def test_criterion_4_prior_matching():
    assert criterion_4()


@pytest.mark.slow
def test_criterion_5_feature_fidelity():
    assert criterion_5()


@pytest.mark.slow
def test_criterion_6_setting_ladder():
    assert criterion_6()


@pytest.mark.slow
def test_criterion_7_pima_direction():
    assert criterion_7()


def test_criterion_8_prediction_validity():
    assert criterion_8()


@pytest.mark.slow
def test_criterion_9_determinism(tmp_path):
    assert criterion_9(tmp_path)


if __name__ == "__main__":
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        checks = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8, lambda: criterion_9(tmp)]
        passed = sum(bool(c()) for c in checks)
    print(f"{passed}/{len(checks)} criteria passed")
    sys.exit(0 if passed == len(checks) else 1)
