"""Multi-stage funnel data: schemas, datasets, label matrices, CSV ingestion
and a synthetic dual-funnel generator.

Stages are 1-indexed. A row with ``observed_depth == k`` reached stage ``k``:
the feature columns of stages ``1..k`` are observed and the decision of stage
``k`` is its last recorded outcome. Depth 0 means the row never entered the
process (no observed features, no labels).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_open
from .errors import ParseError, ShapeError, ValidationError

CONTINUOUS = "continuous"
BINARY = "binary"
CATEGORICAL = "categorical"
COLUMN_KINDS = (CONTINUOUS, BINARY, CATEGORICAL)

PASS = 1
REJECT = -1
MISSING = 0

DEPTH_COLUMN = "__depth"
OUTCOME_COLUMN = "__outcome"
STAGE_OUTCOME_PREFIX = "__outcome_"

PROPAGATE_REJECT = "propagate_reject"
MASK_AFTER_EVENT = "mask_after_event"
FILL_POLICIES = (PROPAGATE_REJECT, MASK_AFTER_EVENT)


@dataclass(frozen=True)
class StageSchema:
    """Ordered stages with cumulative feature widths and per-column kinds.

    ``stages`` holds ``(name, cumulative_width)`` pairs; the width of stage
    ``s`` counts every column observable once a row has reached ``s``.
    """

    stages: tuple
    column_kinds: tuple
    column_names: tuple = ()
    positive_label_name: str = "pass"

    def __post_init__(self):
        stages = tuple((str(name), int(width)) for name, width in self.stages)
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "column_kinds", tuple(self.column_kinds))
        names = tuple(self.column_names) or tuple(f"x{j}" for j in range(len(self.column_kinds)))
        object.__setattr__(self, "column_names", names)
        if not stages:
            raise ValidationError("schema needs at least one stage")
        widths = [w for _, w in stages]
        if widths[0] < 1:
            raise ValidationError("first stage must have at least one feature")
        if any(b <= a for a, b in zip(widths, widths[1:])):
            raise ValidationError(f"cumulative stage widths must strictly increase, got {widths}")
        if len(self.column_kinds) != widths[-1]:
            raise ValidationError(
                f"schema declares {widths[-1]} columns but {len(self.column_kinds)} column kinds"
            )
        if len(names) != widths[-1]:
            raise ValidationError(f"expected {widths[-1]} column names, got {len(names)}")
        if len(set(names)) != len(names):
            raise ValidationError("duplicate column names in schema")
        bad = [k for k in self.column_kinds if k not in COLUMN_KINDS]
        if bad:
            raise ValidationError(f"unknown column kind(s): {sorted(set(bad))}")

    @property
    def n_stages(self):
        return len(self.stages)

    @property
    def stage_names(self):
        return tuple(name for name, _ in self.stages)

    @property
    def widths(self):
        return tuple(w for _, w in self.stages)

    @property
    def total_width(self):
        return self.stages[-1][1]

    def width(self, depth):
        """Number of observed columns for a row at ``depth`` (0 for depth 0)."""
        return 0 if depth <= 0 else self.stages[min(depth, self.n_stages) - 1][1]

    def column_stage(self):
        """1-based stage index of every column."""
        out = np.empty(self.total_width, dtype=np.int64)
        lo = 0
        for s, (_, hi) in enumerate(self.stages, start=1):
            out[lo:hi] = s
            lo = hi
        return out

    @property
    def binary_mask(self):
        return np.array([k == BINARY for k in self.column_kinds], dtype=bool)

    @property
    def is_encoded(self):
        return CATEGORICAL not in self.column_kinds

    def to_json(self):
        col_stage = self.column_stage()
        prev = 0
        stages = []
        for name, width in self.stages:
            stages.append({"name": name, "num_features": width - prev})
            prev = width
        columns = [
            {"name": n, "kind": k, "stage": self.stages[s - 1][0]}
            for n, k, s in zip(self.column_names, self.column_kinds, col_stage)
        ]
        return {"stages": stages, "columns": columns, "positive_label": self.positive_label_name}

    @classmethod
    def from_json(cls, doc):
        try:
            stage_docs = doc["stages"]
            column_docs = doc["columns"]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"schema document missing {exc}") from None
        names = [str(s["name"]) for s in stage_docs]
        lookup = {name: i for i, name in enumerate(names)}
        grouped = [[] for _ in names]
        for col in column_docs:
            st = col.get("stage")
            if isinstance(st, int) and not isinstance(st, bool):
                idx = st - 1
            elif str(st) in lookup:
                idx = lookup[str(st)]
            else:
                raise ValidationError(f"column {col.get('name')!r} references unknown stage {st!r}")
            if not 0 <= idx < len(names):
                raise ValidationError(f"column {col.get('name')!r} stage index {st} out of range")
            grouped[idx].append((str(col["name"]), col.get("kind", CONTINUOUS)))
        stages, kinds, cols = [], [], []
        for sdoc, name, group in zip(stage_docs, names, grouped):
            declared = sdoc.get("num_features", len(group))
            if declared != len(group):
                raise ValidationError(
                    f"stage {name!r} declares {declared} features but {len(group)} columns reference it"
                )
            cols += [c for c, _ in group]
            kinds += [k for _, k in group]
            stages.append((name, len(cols)))
        return cls(tuple(stages), tuple(kinds), tuple(cols), doc.get("positive_label", "pass"))


def _readonly(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FunnelDataset:
    """Feature matrix of a funnel, rows sorted ascending by observed depth.

    Unobserved cells hold 0; :meth:`observed_mask` says which cells are real.
    """

    features: np.ndarray
    observed_depth: np.ndarray
    outcome_at_depth: np.ndarray
    schema: StageSchema
    row_ids: np.ndarray | None = None
    stage_outcomes: np.ndarray | None = None

    def __post_init__(self):
        schema = self.schema
        x = np.array(self.features, dtype=np.float64, copy=True)
        if x.ndim != 2 or x.shape[1] != schema.total_width:
            raise ShapeError(f"features must be n x {schema.total_width}, got {x.shape}")
        n = x.shape[0]
        depth = np.asarray(self.observed_depth, dtype=np.int64).copy()
        outcome = np.asarray(self.outcome_at_depth, dtype=np.int8).copy()
        if depth.shape != (n,) or outcome.shape != (n,):
            raise ShapeError("observed_depth and outcome_at_depth need one entry per row")
        if n and (depth.min() < 0 or depth.max() > schema.n_stages):
            raise ValidationError(f"observed_depth outside [0, {schema.n_stages}]")
        if np.any(np.diff(depth) < 0):
            raise ValidationError("rows must be sorted ascending by observed_depth")
        if not np.isin(outcome, (PASS, REJECT, MISSING)).all():
            raise ValidationError("outcome_at_depth values must be +1, -1 or 0")
        mask = schema.column_stage()[None, :] <= depth[:, None]
        x[~mask] = 0.0
        if not np.isfinite(x).all():
            raise ValidationError("observed features must be finite")
        ids = np.arange(n) if self.row_ids is None else np.asarray(self.row_ids, dtype=np.int64).copy()
        if ids.shape != (n,):
            raise ShapeError("row_ids needs one entry per row")
        object.__setattr__(self, "features", _readonly(x))
        object.__setattr__(self, "observed_depth", _readonly(depth))
        object.__setattr__(self, "outcome_at_depth", _readonly(outcome))
        object.__setattr__(self, "row_ids", _readonly(ids))
        if self.stage_outcomes is not None:
            so = np.asarray(self.stage_outcomes, dtype=np.int8).copy()
            if so.shape != (n, schema.n_stages):
                raise ShapeError(f"stage_outcomes must be n x {schema.n_stages}")
            object.__setattr__(self, "stage_outcomes", _readonly(so))

    @classmethod
    def from_unsorted(cls, features, observed_depth, outcome_at_depth, schema, row_ids=None, stage_outcomes=None):
        depth = np.asarray(observed_depth, dtype=np.int64)
        order = np.argsort(depth, kind="stable")
        ids = np.arange(len(depth)) if row_ids is None else np.asarray(row_ids)
        so = None if stage_outcomes is None else np.asarray(stage_outcomes)[order]
        return cls(
            np.asarray(features, dtype=np.float64)[order],
            depth[order],
            np.asarray(outcome_at_depth)[order],
            schema,
            ids[order],
            so,
        )

    @property
    def n_rows(self):
        return self.features.shape[0]

    @property
    def n_stages(self):
        return self.schema.n_stages

    def observed_mask(self):
        return self.schema.column_stage()[None, :] <= self.observed_depth[:, None]

    def stage_counts(self):
        """n^s for s = 1..S: rows that reached at least stage s."""
        return np.array([(self.observed_depth >= s).sum() for s in range(1, self.n_stages + 1)])

    def rows_at_least(self, stage):
        return np.flatnonzero(self.observed_depth >= stage)

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        so = None if self.stage_outcomes is None else self.stage_outcomes[idx]
        return FunnelDataset.from_unsorted(
            self.features[idx], self.observed_depth[idx], self.outcome_at_depth[idx], self.schema, self.row_ids[idx], so
        )

    def with_features(self, features):
        return FunnelDataset(
            features, self.observed_depth, self.outcome_at_depth, self.schema, self.row_ids, self.stage_outcomes
        )


def stage_populations(ds):
    """Head counts down the funnel: rows reaching stages 1..S, then rows approved at S."""
    counts = list(ds.stage_counts())
    approved = int(((ds.observed_depth == ds.n_stages) & (ds.outcome_at_depth == PASS)).sum())
    return tuple(int(c) for c in counts) + (approved,)


# ---------------------------------------------------------------------------
# labels


def sequence_violations(values):
    """Per row: True when some -1 precedes some +1 (breaks both sequence rules)."""
    v = np.atleast_2d(np.asarray(values))
    n, S = v.shape
    neg = v == REJECT
    pos = v == PASS
    first_neg = np.where(neg.any(axis=1), neg.argmax(axis=1), S)
    last_pos = np.where(pos.any(axis=1), S - 1 - pos[:, ::-1].argmax(axis=1), -1)
    return last_pos > first_neg


@dataclass(frozen=True, eq=False)
class LabelMatrix:
    """n x S matrix over {+1, 0, -1}: approve / missing / reject."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.int8, copy=True)
        if v.ndim != 2:
            raise ShapeError("label matrix must be 2-D")
        if not np.isin(v, (PASS, MISSING, REJECT)).all():
            raise ValidationError("labels must be in {+1, 0, -1}")
        bad = np.flatnonzero(sequence_violations(v)) if v.size else []
        if len(bad):
            raise ValidationError(f"label rows violate the stage sequence rules: {bad[:10].tolist()}")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def known_mask(self):
        return self.values != MISSING

    @property
    def shape(self):
        return self.values.shape

    def subset(self, indices):
        return LabelMatrix(self.values[np.asarray(indices, dtype=np.int64)])


def _apply_fill(values, fill_policy):
    if fill_policy not in FILL_POLICIES:
        raise ValidationError(f"fill_policy must be one of {FILL_POLICIES}")
    if fill_policy == PROPAGATE_REJECT:
        after_reject = np.cumsum(values == REJECT, axis=1) > 0
        values = np.where(after_reject & (values == MISSING), REJECT, values)
    return values.astype(np.int8)


def to_label_matrix(ds, fill_policy=PROPAGATE_REJECT):
    """Multi-label matrix of a funnel dataset.

    Depth k + pass gives k leading +1s then missing; depth k + reject gives
    k-1 leading +1s, a -1 at stage k, then -1s (propagate_reject) or missing
    (mask_after_event). Explicit per-stage outcomes, when the dataset carries
    them, replace the depth-derived encoding.
    """
    S = ds.n_stages
    if ds.stage_outcomes is not None:
        return LabelMatrix(_apply_fill(np.array(ds.stage_outcomes, dtype=np.int8), fill_policy))
    depth = ds.observed_depth
    outcome = ds.outcome_at_depth
    missing = (depth >= 1) & (outcome == MISSING)
    if missing.any():
        raise ValidationError(f"rows {np.flatnonzero(missing)[:10].tolist()} reached a stage but have no outcome")
    stages = np.arange(1, S + 1)[None, :]
    d = depth[:, None]
    values = np.zeros((ds.n_rows, S), dtype=np.int8)
    passed = outcome[:, None] == PASS
    values[(stages <= d) & passed] = PASS
    rejected = ~passed & (d >= 1)
    values[(stages < d) & rejected] = PASS
    values[(stages == d) & rejected] = REJECT
    return LabelMatrix(_apply_fill(values, fill_policy))


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass(eq=False)
class RawTable:
    """Parsed CSV before encoding: numeric cells plus raw categorical strings."""

    schema: StageSchema
    numeric: np.ndarray
    categorical: dict
    observed_depth: np.ndarray
    outcome_at_depth: np.ndarray
    row_ids: np.ndarray
    stage_outcomes: np.ndarray | None = None

    @property
    def n_rows(self):
        return len(self.observed_depth)

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return RawTable(
            self.schema,
            self.numeric[idx],
            {j: v[idx] for j, v in self.categorical.items()},
            self.observed_depth[idx],
            self.outcome_at_depth[idx],
            self.row_ids[idx],
            None if self.stage_outcomes is None else self.stage_outcomes[idx],
        )

    @classmethod
    def from_dataset(cls, ds):
        return cls(
            ds.schema,
            np.array(ds.features),
            {},
            np.array(ds.observed_depth),
            np.array(ds.outcome_at_depth),
            np.array(ds.row_ids),
            None if ds.stage_outcomes is None else np.array(ds.stage_outcomes),
        )


def _parse_outcome(text, row, column, positive_label):
    t = text.strip().lower()
    if t in ("pass", positive_label.lower(), "1", "+1"):
        return PASS
    if t in ("reject", "-1"):
        return REJECT
    if t in ("", "0"):
        return MISSING
    raise ParseError(f"unrecognised outcome {text!r}", row=row, column=column)


def read_table(path, schema, onehot_columns=()):
    """Parse a funnel CSV against ``schema`` without encoding or scaling."""
    kinds = list(schema.column_kinds)
    for j, name in enumerate(schema.column_names):
        if name in onehot_columns:
            kinds[j] = CATEGORICAL
    schema = StageSchema(schema.stages, tuple(kinds), schema.column_names, schema.positive_label_name)
    S = schema.n_stages
    col_stage = schema.column_stage()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty file: no header row", row=1)
        header = [h.strip() for h in header]
        position = {h: i for i, h in enumerate(header)}
        for name in (*schema.column_names, DEPTH_COLUMN):
            if name not in position:
                raise ParseError("missing required column", column=name)
        stage_cols = [f"{STAGE_OUTCOME_PREFIX}{s}" for s in range(1, S + 1)]
        explicit = all(c in position for c in stage_cols)
        if not explicit and OUTCOME_COLUMN not in position:
            raise ParseError("missing required column", column=OUTCOME_COLUMN)
        feat_pos = [position[c] for c in schema.column_names]
        numeric_rows, cat_rows, depths, outcomes, stage_out = [], [], [], [], []
        cat_idx = [j for j, k in enumerate(kinds) if k == CATEGORICAL]
        for line, rec in enumerate(reader, start=2):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", row=line)
            try:
                depth = int(rec[position[DEPTH_COLUMN]].strip())
            except ValueError:
                raise ParseError("depth is not an integer", row=line, column=DEPTH_COLUMN) from None
            if not 0 <= depth <= S:
                raise ValidationError(f"depth {depth} outside [0, {S}] at row {line}")
            if explicit:
                so = [_parse_outcome(rec[position[c]], line, c, schema.positive_label_name) for c in stage_cols]
                stage_out.append(so)
                outcome = so[depth - 1] if depth >= 1 else MISSING
            else:
                outcome = _parse_outcome(rec[position[OUTCOME_COLUMN]], line, OUTCOME_COLUMN, schema.positive_label_name)
                if depth >= 1 and outcome == MISSING:
                    raise ParseError("row reached a stage but has no outcome", row=line, column=OUTCOME_COLUMN)
            vals = np.zeros(len(kinds))
            cats = {}
            for j, p in enumerate(feat_pos):
                if col_stage[j] > depth:
                    continue
                cell = rec[p].strip()
                if kinds[j] == CATEGORICAL:
                    cats[j] = cell
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"non-numeric {kinds[j]} cell {cell!r}", row=line, column=schema.column_names[j]) from None
                if not math.isfinite(v):
                    raise ParseError(f"non-finite cell {cell!r}", row=line, column=schema.column_names[j])
                if kinds[j] == BINARY and v not in (0.0, 1.0):
                    raise ParseError(f"binary cell must be 0 or 1, got {cell!r}", row=line, column=schema.column_names[j])
                vals[j] = v
            numeric_rows.append(vals)
            cat_rows.append(cats)
            depths.append(depth)
            outcomes.append(outcome)
    n = len(depths)
    if n == 0:
        raise ParseError("no data rows")
    categorical = {j: np.array([r.get(j) for r in cat_rows], dtype=object) for j in cat_idx}
    return RawTable(
        schema,
        np.array(numeric_rows),
        categorical,
        np.array(depths, dtype=np.int64),
        np.array(outcomes, dtype=np.int8),
        np.arange(n),
        np.array(stage_out, dtype=np.int8) if explicit else None,
    )


class FeatureEncoder:
    """One-hot expansion and standardization, fit on one table and reusable on others.

    Category vocabularies and scaling statistics come from the fitted table's
    observed cells; categories unseen at fit time encode as all zeros.
    """

    def __init__(self, standardize=True):
        self.standardize = standardize
        self.raw_schema = None
        self.schema = None
        self.vocab = {}
        self.mean = None
        self.std = None

    def fit(self, table):
        raw = table.schema
        self.raw_schema = raw
        col_stage = raw.column_stage()
        self.vocab = {}
        for j, col in table.categorical.items():
            seen = col[table.observed_depth >= col_stage[j]]
            self.vocab[j] = sorted({str(v) for v in seen if v is not None})
        names, kinds, stages = [], [], []
        for s, (stage_name, _) in enumerate(raw.stages, start=1):
            for j in np.flatnonzero(col_stage == s):
                if raw.column_kinds[j] == CATEGORICAL:
                    for cat in self.vocab[j]:
                        names.append(f"{raw.column_names[j]}={cat}")
                        kinds.append(BINARY)
                else:
                    names.append(raw.column_names[j])
                    kinds.append(raw.column_kinds[j])
            stages.append((stage_name, len(names)))
        self.schema = StageSchema(tuple(stages), tuple(kinds), tuple(names), raw.positive_label_name)
        encoded = self._expand(table)
        mask = self.schema.column_stage()[None, :] <= table.observed_depth[:, None]
        self.mean = np.zeros(self.schema.total_width)
        self.std = np.ones(self.schema.total_width)
        if self.standardize:
            for j, kind in enumerate(self.schema.column_kinds):
                if kind != CONTINUOUS:
                    continue
                vals = encoded[mask[:, j], j]
                if len(vals) == 0:
                    continue
                self.mean[j] = vals.mean()
                sd = vals.std()
                self.std[j] = sd if sd > 0 else 1.0
        return self

    def _expand(self, table):
        raw = self.raw_schema
        col_stage = raw.column_stage()
        blocks = []
        for s in range(1, raw.n_stages + 1):
            for j in np.flatnonzero(col_stage == s):
                if raw.column_kinds[j] == CATEGORICAL:
                    vocab = self.vocab[j]
                    col = table.categorical[j]
                    block = np.zeros((table.n_rows, len(vocab)))
                    lookup = {c: i for i, c in enumerate(vocab)}
                    for r, v in enumerate(col):
                        k = lookup.get(None if v is None else str(v))
                        if k is not None:
                            block[r, k] = 1.0
                    blocks.append(block)
                else:
                    blocks.append(table.numeric[:, j : j + 1])
        return np.hstack(blocks) if blocks else np.zeros((table.n_rows, 0))

    def transform(self, table):
        if self.schema is None:
            raise ValidationError("encoder is not fitted")
        if table.schema.column_names != self.raw_schema.column_names:
            raise ValidationError("table columns do not match the fitted schema")
        x = (self._expand(table) - self.mean) / self.std
        return FunnelDataset.from_unsorted(
            x, table.observed_depth, table.outcome_at_depth, self.schema, table.row_ids, table.stage_outcomes
        )

    def to_json(self):
        return {
            "raw_schema": self.raw_schema.to_json(),
            "raw_kinds": list(self.raw_schema.column_kinds),
            "vocab": {str(j): v for j, v in self.vocab.items()},
            "standardize": self.standardize,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
        }

    @classmethod
    def from_json(cls, doc):
        enc = cls(doc["standardize"])
        raw = StageSchema.from_json(doc["raw_schema"])
        enc.raw_schema = StageSchema(raw.stages, tuple(doc["raw_kinds"]), raw.column_names, raw.positive_label_name)
        enc.vocab = {int(j): v for j, v in doc["vocab"].items()}
        # rebuild the encoded schema from the vocabularies
        names, kinds, stages = [], [], []
        col_stage = enc.raw_schema.column_stage()
        for s, (stage_name, _) in enumerate(enc.raw_schema.stages, start=1):
            for j in np.flatnonzero(col_stage == s):
                if enc.raw_schema.column_kinds[j] == CATEGORICAL:
                    names += [f"{enc.raw_schema.column_names[j]}={c}" for c in enc.vocab[j]]
                    kinds += [BINARY] * len(enc.vocab[j])
                else:
                    names.append(enc.raw_schema.column_names[j])
                    kinds.append(enc.raw_schema.column_kinds[j])
            stages.append((stage_name, len(names)))
        enc.schema = StageSchema(tuple(stages), tuple(kinds), tuple(names), raw.positive_label_name)
        enc.mean = np.array(doc["mean"])
        enc.std = np.array(doc["std"])
        return enc


def ingest_csv(path, schema, onehot_columns=(), standardize=True, encoder=None):
    """Read a funnel CSV into a :class:`FunnelDataset`.

    With ``encoder=None`` a fresh :class:`FeatureEncoder` is fit on this file;
    pass a fitted one to apply training-split statistics to other data.
    """
    table = read_table(path, schema, onehot_columns)
    if encoder is None:
        encoder = FeatureEncoder(standardize=standardize).fit(table)
    return encoder.transform(table)


def _format_outcome(v):
    return {PASS: "pass", REJECT: "reject"}.get(int(v), "")


def write_csv(ds, path):
    """Serialize a dataset in the ingestible CSV layout (unobserved cells blank)."""
    S = ds.n_stages
    header = list(ds.schema.column_names) + [DEPTH_COLUMN, OUTCOME_COLUMN]
    if ds.stage_outcomes is not None:
        header += [f"{STAGE_OUTCOME_PREFIX}{s}" for s in range(1, S + 1)]
    mask = ds.observed_mask()
    with atomic_open(path, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.n_rows):
            row = [repr(float(v)) if m else "" for v, m in zip(ds.features[i], mask[i])]
            row += [str(int(ds.observed_depth[i])), _format_outcome(ds.outcome_at_depth[i])]
            if ds.stage_outcomes is not None:
                row += [_format_outcome(v) for v in ds.stage_outcomes[i]]
            w.writerow(row)


def write_labels_csv(labels, schema, path):
    with atomic_open(path, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(schema.stage_names))
        for row in labels.values:
            w.writerow([int(v) for v in row])


def read_labels_csv(path, n_stages=None):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty label file", row=1)
    header, body = rows[0], [r for r in rows[1:] if r]
    if n_stages is not None and len(header) != n_stages:
        raise ValidationError(f"label file has {len(header)} stage columns, expected {n_stages}")
    try:
        values = [[int(float(v)) for v in r] for r in body]
    except ValueError as exc:
        raise ParseError(f"bad label value: {exc}") from None
    if any(len(r) != len(header) for r in body):
        raise ParseError("label row arity does not match header")
    return LabelMatrix(np.array(values, dtype=np.int8).reshape(len(body), len(header)))


# ---------------------------------------------------------------------------
# synthetic funnels


@dataclass(frozen=True)
class SynthFunnelConfig:
    n0: int = 1000
    survival_rates: tuple = (0.5, 0.2, 0.1)
    dims_per_stage: tuple = (4, 4, 4)
    dependency_noise_sigma: float = 0.5
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "survival_rates", tuple(float(r) for r in self.survival_rates))
        object.__setattr__(self, "dims_per_stage", tuple(int(d) for d in self.dims_per_stage))
        if len(self.survival_rates) != len(self.dims_per_stage) or not self.survival_rates:
            raise ValidationError("survival_rates and dims_per_stage need one entry per stage")
        if any(not 0 < r <= 1 for r in self.survival_rates):
            raise ValidationError("survival rates must lie in (0, 1]")
        if any(d < 1 for d in self.dims_per_stage):
            raise ValidationError("every stage needs at least one feature")
        if self.dependency_noise_sigma < 0:
            raise ValidationError("dependency_noise_sigma must be >= 0")
        if not 0 <= self.label_noise < 0.5:
            raise ValidationError("label_noise must lie in [0, 0.5)")
        if self.populations()[-1] < 4:
            raise ValidationError("final stage would approve fewer than 4 rows")

    @property
    def n_stages(self):
        return len(self.survival_rates)

    def populations(self):
        pops = [int(self.n0)]
        for r in self.survival_rates:
            pops.append(int(round(r * pops[-1])))
        return tuple(pops)


def synth_schema(dims_per_stage):
    widths = np.cumsum(dims_per_stage)
    stages = tuple((f"stage{s}", int(w)) for s, w in enumerate(widths, start=1))
    names = []
    for s, d in enumerate(dims_per_stage, start=1):
        names += [f"s{s}_f{j}" for j in range(d)]
    return StageSchema(stages, (CONTINUOUS,) * int(widths[-1]), tuple(names))


# loading of stage-1 columns on the latent score, and the share of the latent
# score in each later column's noise term
_LATENT_LOADING = (0.5, 0.9)
_NOISE_LATENT_SHARE = 0.8


def synth_funnel_with_truth(cfg):
    """Like :func:`synth_funnel` but also returns the full n x d^S ground truth,
    aligned with the dataset's row order."""
    rng = np.random.default_rng(cfg.seed)
    dims = cfg.dims_per_stage
    schema = synth_schema(dims)
    n, sigma = cfg.n0, cfg.dependency_noise_sigma
    d1 = dims[0]
    loading = rng.uniform(*_LATENT_LOADING, size=d1) * rng.choice((-1.0, 1.0), size=d1)
    # fixed linear structure; each future column has unit variance before noise
    cov = np.outer(loading, loading)
    np.fill_diagonal(cov, 1.0)
    maps = []
    for d in dims[1:]:
        a = rng.standard_normal((d, cov.shape[0]))
        a /= np.sqrt(np.einsum("ij,jk,ik->i", a, cov, a))[:, None]
        maps.append(a)
        top = cov @ a.T
        cov = np.block([[cov, top], [top.T, a @ cov @ a.T + sigma**2 * np.eye(d)]])

    latent = rng.standard_normal(n)
    x = latent[:, None] * loading + rng.standard_normal((n, d1)) * np.sqrt(1.0 - loading**2)
    rho = _NOISE_LATENT_SHARE
    for a in maps:
        noise = rho * latent[:, None] + np.sqrt(1.0 - rho**2) * rng.standard_normal((n, a.shape[0]))
        x = np.hstack([x, x @ a.T + sigma * noise])

    depth = np.zeros(n, dtype=np.int64)
    outcome = np.zeros(n, dtype=np.int8)
    alive = np.arange(n)
    for s, rate in enumerate(cfg.survival_rates, start=1):
        depth[alive] = s
        order = alive[np.argsort(-latent[alive], kind="stable")]
        m = int(round(rate * len(alive)))
        passed, failed = order[:m].copy(), order[m:].copy()
        flips = int(round(cfg.label_noise * min(len(passed), len(failed))))
        if flips:
            pi = rng.choice(len(passed), flips, replace=False)
            fi = rng.choice(len(failed), flips, replace=False)
            passed[pi], failed[fi] = failed[fi], passed[pi].copy()
        outcome[failed] = REJECT
        alive = np.sort(passed)
    outcome[alive] = PASS

    ds = FunnelDataset.from_unsorted(x, depth, outcome, schema)
    truth = x[ds.row_ids]
    return ds, to_label_matrix(ds), truth


def synth_funnel(cfg):
    """Seeded dual-funnel sample: (dataset, propagate_reject labels)."""
    ds, labels, _ = synth_funnel_with_truth(cfg)
    return ds, labels
