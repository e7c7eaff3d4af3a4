"""Experiment harness: splits, per-stage F1 on the positive class, and
setting-by-setting reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from ._io import atomic_open, read_json, write_json
from .aemtd import DEFAULT_LEARNING_RATE, PAPER_FAITHFUL, SPLICE_POLICIES, AemtdConfig, complete, train_aemtd
from .baselines import COMPLETED, RAW, stages_passed, train_bank, train_imc
from .errors import ShapeError, StageError, ValidationError
from .funnel import (
    FILL_POLICIES,
    PASS,
    PROPAGATE_REJECT,
    FeatureEncoder,
    RawTable,
    StageSchema,
    SynthFunnelConfig,
    read_table,
    synth_funnel,
    to_label_matrix,
)
from .mlssl import DEFAULT_BATCH_SIZE, DEFAULT_VALIDATION_FRACTION, MlsslClassifier, predict, train_mlssl
from .nn import SgdConfig

log = logging.getLogger(__name__)

N_MBT = "n-mbt"
AEMTD_MBT = "aemtd-mbt"
AEMTD_IMC = "aemtd-imc"
AEMTD_IML_SSL = "aemtd-iml-ssl"
SETTINGS = (N_MBT, AEMTD_MBT, AEMTD_IMC, AEMTD_IML_SSL)
REPORT_COLUMNS = ("setting", "stage", "mean_f1", "std_f1", "n")


def f1_positive(predictions, truth):
    """F1 of the +1 class. 0 when nothing positive was hit but something was
    missed or falsely flagged; 1 when there is nothing to find and nothing
    was flagged."""
    p = np.asarray(predictions)
    t = np.asarray(truth)
    if p.shape != t.shape or p.ndim != 1:
        raise ShapeError("predictions and truth must be vectors of equal length")
    if len(p) == 0:
        raise ValidationError("F1 needs at least one row")
    if np.any(t == 0):
        raise ValidationError("truth contains missing (0) entries")
    tp = int(np.sum((p == PASS) & (t == PASS)))
    fp = int(np.sum((p == PASS) & (t != PASS)))
    fn = int(np.sum((p != PASS) & (t == PASS)))
    if tp == fp == fn == 0:
        return 1.0
    return 2.0 * tp / (2 * tp + fp + fn)


# ---------------------------------------------------------------------------
# plans and data sources


def _sgd(doc, default_lr, seed, **defaults):
    keys = ("learning_rate", "batch_size", "max_epochs", "patience", "validation_fraction")
    merged = {"learning_rate": default_lr, **defaults}
    merged.update({k: doc[k] for k in keys if k in doc})
    return SgdConfig(seed=seed, **merged)


@dataclass(frozen=True)
class ExperimentPlan:
    """What to run: a data source, a split, settings and model settings.

    ``split`` is ``{"kind": "kfold", "k": 10}`` or
    ``{"kind": "longitudinal", "k": 10, "validation": <source>}``; in the
    longitudinal case the held-out fold of the training source picks the
    best epoch and scores come from the validation source.
    """

    source: dict
    split: dict = field(default_factory=lambda: {"kind": "kfold", "k": 10})
    settings: tuple = SETTINGS
    repetitions: int = 1
    seed: int = 0
    fill_policy: str = PROPAGATE_REJECT
    aemtd: dict = field(default_factory=dict)
    mlssl: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "settings", tuple(self.settings))
        kind = self.split.get("kind")
        if kind not in ("kfold", "longitudinal"):
            raise ValidationError("split kind must be 'kfold' or 'longitudinal'")
        if int(self.split.get("k", 10)) < 2:
            raise ValidationError("k must be >= 2")
        if kind == "longitudinal" and "validation" not in self.split:
            raise ValidationError("longitudinal split needs a validation source")
        if self.repetitions < 1:
            raise ValidationError("repetitions must be >= 1")
        unknown = [s for s in self.settings if s not in SETTINGS]
        if unknown or not self.settings:
            raise ValidationError(f"unknown or empty settings {unknown}; choose from {SETTINGS}")
        if self.fill_policy not in FILL_POLICIES:
            raise ValidationError(f"fill_policy must be one of {FILL_POLICIES}")
        AemtdConfig(**self._aemtd_fields())
        if self.aemtd.get("splice", PAPER_FAITHFUL) not in SPLICE_POLICIES:
            raise ValidationError(f"aemtd splice must be one of {SPLICE_POLICIES}")

    @property
    def k(self):
        return int(self.split.get("k", 10))

    def _aemtd_fields(self):
        names = AemtdConfig.__dataclass_fields__
        out = {k: v for k, v in self.aemtd.items() if k in names}
        for k in ("encoder_hidden", "decoder_hidden", "discriminator_hidden"):
            if k in out:
                out[k] = tuple(out[k])
        return out

    def to_json(self):
        return {
            "source": self.source,
            "split": self.split,
            "settings": list(self.settings),
            "repetitions": self.repetitions,
            "seed": self.seed,
            "fill_policy": self.fill_policy,
            "aemtd": self.aemtd,
            "mlssl": self.mlssl,
            "baseline": self.baseline,
        }

    @classmethod
    def from_json(cls, doc):
        allowed = set(cls.__dataclass_fields__)
        extra = set(doc) - allowed
        if extra:
            raise ValidationError(f"unknown plan keys: {sorted(extra)}")
        if "source" not in doc:
            raise ValidationError("plan needs a 'source'")
        return cls(**{k: doc[k] for k in doc})

    @classmethod
    def load(cls, path):
        return cls.from_json(read_json(path))


def load_source(source, base_dir=None):
    """Load a data source into a :class:`RawTable`.

    Kinds: ``synthetic`` (generator fields), ``csv`` (``path``, optional
    ``schema`` path or document defaulting to ``<path>.schema.json``,
    optional ``onehot_columns``) and ``pima``.
    """
    kind = source.get("kind")
    if kind == "synthetic":
        fields = {k: v for k, v in source.items() if k not in ("kind", "standardize")}
        unknown = set(fields) - set(SynthFunnelConfig.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown synthetic source fields: {sorted(unknown)}")
        return RawTable.from_dataset(synth_funnel(SynthFunnelConfig(**fields))[0])
    if kind == "pima":
        from .datasets import load_pima

        return load_pima(source.get("path"))
    if kind == "csv":

        def resolve(p):
            return p if base_dir is None or os.path.isabs(p) else os.path.join(base_dir, p)

        if "path" not in source:
            raise ValidationError("csv source needs a 'path'")
        schema = source.get("schema", source["path"] + ".schema.json")
        schema = StageSchema.from_json(read_json(resolve(schema)) if isinstance(schema, str) else schema)
        return read_table(resolve(source["path"]), schema, tuple(source.get("onehot_columns", ())))
    raise ValidationError(f"unknown source kind {kind!r}")


def table_digest(table):
    h = hashlib.sha256()
    h.update(json.dumps(table.schema.to_json(), sort_keys=True).encode())
    for a in (table.numeric, table.observed_depth, table.outcome_at_depth, table.row_ids):
        h.update(np.ascontiguousarray(a).tobytes())
    if table.stage_outcomes is not None:
        h.update(np.ascontiguousarray(table.stage_outcomes).tobytes())
    for j in sorted(table.categorical):
        h.update("\x1f".join("" if v is None else str(v) for v in table.categorical[j]).encode())
    return h.hexdigest()


def stratified_folds(depth, outcome, k, seed):
    """Fold index per row, stratified by (depth, outcome)."""
    depth = np.asarray(depth)
    outcome = np.asarray(outcome)
    rng = np.random.default_rng(seed)
    folds = np.empty(len(depth), dtype=np.int64)
    offset = 0
    for key in sorted(set(zip(depth.tolist(), outcome.tolist()))):
        rows = np.flatnonzero((depth == key[0]) & (outcome == key[1]))
        rows = rows[rng.permutation(len(rows))]
        # continue the round-robin across strata so fold sizes stay balanced
        folds[rows] = (offset + np.arange(len(rows))) % k
        offset += len(rows)
    return folds


def _strata_outcome(table):
    if table.stage_outcomes is not None:
        return stages_passed(np.asarray(table.stage_outcomes))
    return table.outcome_at_depth


# ---------------------------------------------------------------------------
# one run


@dataclass
class RunResult:
    index: int
    repetition: int
    fold: int
    seed: int
    scores: dict = field(default_factory=dict)  # setting -> {stage: f1}
    counts: dict = field(default_factory=dict)  # stage -> evaluated rows
    errors: dict = field(default_factory=dict)  # setting -> message
    train_ids: list = field(default_factory=list)
    eval_ids: list = field(default_factory=list)


def _run_seed(plan_seed, repetition, fold):
    return int(np.random.SeedSequence([plan_seed, repetition, fold + 1]).generate_state(1)[0])


def _evaluate_predictions(z, labels, result, setting):
    per_stage = {}
    for s in range(labels.shape[1]):
        known = labels[:, s] != 0
        if known.any():
            per_stage[s + 1] = f1_positive(z[known, s], labels[known, s])
            result.counts[s + 1] = int(known.sum())
    result.scores[setting] = per_stage


def execute_run(plan, train_table, eval_table, stop_table, index, repetition, fold, seed, source_tags=("a", "b")):
    """Fit every setting on ``train_table`` and score it on ``eval_table``."""
    result = RunResult(index, repetition, fold, seed)
    result.train_ids = [f"{source_tags[0]}:{i}" for i in train_table.row_ids.tolist()]
    result.eval_ids = [f"{source_tags[1]}:{i}" for i in eval_table.row_ids.tolist()]
    encoder = FeatureEncoder(standardize=plan.source.get("standardize", True)).fit(train_table)
    train = encoder.transform(train_table)
    test = encoder.transform(eval_table)
    stop = None if stop_table is None else encoder.transform(stop_table)
    y_train = to_label_matrix(train, plan.fill_policy)
    y_test = to_label_matrix(test, plan.fill_policy).values
    schema = train.schema
    base = plan.baseline
    base_cfg = _sgd(base, 1e-2, seed, max_epochs=100)
    l2 = float(base.get("l2", 1e-3))

    completed = None
    if any(s != N_MBT for s in plan.settings):
        try:
            model = train_aemtd(
                train,
                _sgd(plan.aemtd, DEFAULT_LEARNING_RATE, seed),
                validation=stop,
                config=AemtdConfig(**plan._aemtd_fields()),
            )
            splice = plan.aemtd.get("splice", PAPER_FAITHFUL)
            completed = (complete(model, train, splice).features, complete(model, test, splice).features)
        except StageError as exc:
            completed = exc

    for setting in plan.settings:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                if setting == N_MBT:
                    bank = train_bank(train.features, y_train, train.observed_depth, schema, RAW, l2, base_cfg)
                    z = bank.predict(test.features)
                else:
                    if isinstance(completed, Exception):
                        raise completed
                    x_train, x_test = completed
                    if setting == AEMTD_MBT:
                        bank = train_bank(x_train, y_train, train.observed_depth, schema, COMPLETED, l2, base_cfg)
                        z = bank.predict(x_test)
                    elif setting == AEMTD_IMC:
                        m = train_imc(x_train, stages_passed(y_train), schema.n_stages, l2, base_cfg)
                        z = m.predict(x_test)
                    else:
                        clf = _fit_mlssl(plan.mlssl, x_train, y_train, train.observed_depth, seed)
                        z = predict(clf, x_test)
            _evaluate_predictions(z, y_test, result, setting)
        except StageError as exc:
            result.errors[setting] = f"{type(exc).__name__}: {exc}"
            log.warning("run %d setting %s failed: %s", index, setting, exc)
    return result


def _fit_mlssl(doc, x, y, depth, seed):
    fields = {"lam", "k_nn", "h_nn", "term_weights", "mask_missing", "graph_mode"}
    kwargs = {k: doc[k] for k in fields if k in doc}
    if "lambda" in doc:
        kwargs["lam"] = doc["lambda"]
    hidden = tuple(doc.get("hidden", (64, 32)))
    clf = MlsslClassifier.initialize(x.shape[1], y.shape[1], hidden=hidden, seed=seed, **kwargs)
    cfg = _sgd(doc, 1e-3, seed, batch_size=DEFAULT_BATCH_SIZE, validation_fraction=DEFAULT_VALIDATION_FRACTION)
    return train_mlssl(x, y, clf, cfg, depth=depth)


def _run_job(args):
    return execute_run(*args)


# ---------------------------------------------------------------------------
# whole plans


@dataclass
class StageReport:
    settings: tuple
    n_stages: int
    runs: list

    def raw_scores(self, setting, stage):
        return [r.scores[setting][stage] for r in self.runs if setting in r.scores and stage in r.scores[setting]]

    def rows(self):
        out = []
        for setting in self.settings:
            for stage in range(1, self.n_stages + 1):
                vals = self.raw_scores(setting, stage)
                counts = [r.counts[stage] for r in self.runs if setting in r.scores and stage in r.scores[setting]]
                mean = float(np.mean(vals)) if vals else math.nan
                std = float(np.std(vals)) if vals else math.nan
                n = float(np.mean(counts)) if counts else 0.0
                out.append({"setting": setting, "stage": stage, "mean_f1": mean, "std_f1": std, "n": n})
        return out

    def mean_f1(self, setting, stage):
        vals = self.raw_scores(setting, stage)
        return float(np.mean(vals)) if vals else math.nan

    @property
    def errors(self):
        return [
            {"run": r.index, "repetition": r.repetition, "fold": r.fold, "setting": s, "error": msg}
            for r in self.runs
            for s, msg in sorted(r.errors.items())
        ]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in self.rows():
            w.writerow([row["setting"], row["stage"], repr(row["mean_f1"]), repr(row["std_f1"]), repr(row["n"])])
        return buf.getvalue()


def audit(report):
    """Raise if any evaluated row also appears in its run's training data."""
    for r in report.runs:
        leaked = set(r.train_ids) & set(r.eval_ids)
        if leaked:
            raise ValidationError(f"run {r.index}: {len(leaked)} evaluation rows also used for training")


def plan_jobs(plan, base_dir=None):
    table = load_source(plan.source, base_dir)
    digests = {"source": table_digest(table)}
    jobs = []
    k = plan.k
    if plan.split["kind"] == "kfold":
        for rep in range(plan.repetitions):
            folds = stratified_folds(table.observed_depth, _strata_outcome(table), k, _run_seed(plan.seed, rep, -1))
            for f in range(k):
                seed = _run_seed(plan.seed, rep, f)
                train = table.subset(np.flatnonzero(folds != f))
                test = table.subset(np.flatnonzero(folds == f))
                jobs.append((plan, train, test, None, len(jobs), rep, f, seed, ("src", "src")))
    else:
        val_table = load_source(plan.split["validation"], base_dir)
        digests["validation"] = table_digest(val_table)
        for rep in range(plan.repetitions):
            folds = stratified_folds(table.observed_depth, _strata_outcome(table), k, _run_seed(plan.seed, rep, -1))
            for f in range(k):
                seed = _run_seed(plan.seed, rep, f)
                train = table.subset(np.flatnonzero(folds != f))
                stop = table.subset(np.flatnonzero(folds == f))
                jobs.append((plan, train, val_table, stop, len(jobs), rep, f, seed, ("src", "val")))
    return table, digests, jobs


def run_plan(plan, base_dir=None, jobs=1):
    """Execute every (repetition, fold) run; failures are recorded per
    setting and never abort sibling runs."""
    table, digests, job_args = plan_jobs(plan, base_dir)
    if jobs > 1 and len(job_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_job, job_args))
    else:
        runs = [_run_job(a) for a in job_args]
    runs.sort(key=lambda r: r.index)
    report = StageReport(plan.settings, table.schema.n_stages, runs)
    audit(report)
    report.manifest = {
        "format_version": "1.0",
        "package_version": __version__,
        "plan": plan.to_json(),
        "dataset_digests": digests,
        "runs": [
            {"index": r.index, "repetition": r.repetition, "fold": r.fold, "seed": r.seed,
             "n_train": len(r.train_ids), "n_eval": len(r.eval_ids)}
            for r in runs
        ],
        "raw_scores": {
            s: {str(st): report.raw_scores(s, st) for st in range(1, report.n_stages + 1)} for s in plan.settings
        },
        "errors": report.errors,
        "evaluation": (
            f"per-stage F1 of the positive class over evaluation rows whose stage label is known "
            f"(labels filled with {plan.fill_policy}); n is the mean number of such rows per run"
        ),
    }
    return report


def write_report(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with atomic_open(os.path.join(out_dir, "report.csv"), newline="") as fh:
        fh.write(report.to_csv())
    write_json(os.path.join(out_dir, "manifest.json"), report.manifest)
