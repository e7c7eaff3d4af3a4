"""Bundled public data laid out as a two-stage diagnostic funnel.

Pima Indians Diabetes: stage 1 holds the cheap measurements and is reached
when blood pressure and BMI were recorded; stage 2 adds the lab tests and is
reached when glucose, skin thickness and insulin were all recorded. The
diagnosis is the outcome at every stage a patient reached.
"""

from __future__ import annotations

from importlib import resources

import numpy as np

from .errors import ParseError
from .funnel import CONTINUOUS, MISSING, PASS, REJECT, RawTable, StageSchema

PIMA_STAGE1 = ("Preg", "Pres", "Mass", "Pedi", "Age")
PIMA_STAGE2 = ("Skin", "Insu", "Plas")


def pima_schema():
    names = PIMA_STAGE1 + PIMA_STAGE2
    return StageSchema(
        (("simple", len(PIMA_STAGE1)), ("lab", len(names))),
        (CONTINUOUS,) * len(names),
        names,
        "positive",
    )


def _read_arff(text):
    attrs, rows, in_data = [], [], False
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("%"):
            continue
        low = line.lower()
        if low.startswith("@attribute"):
            attrs.append(line.split()[1])
        elif low.startswith("@data"):
            in_data = True
        elif in_data:
            cells = [c.strip() for c in line.split(",")]
            if len(cells) != len(attrs):
                raise ParseError(f"expected {len(attrs)} values, got {len(cells)}", row=lineno)
            rows.append(cells)
    return attrs, rows


def load_pima(path=None, drop_unreached=True):
    """Pima as a :class:`RawTable` with explicit per-stage outcomes.

    Rows lacking blood pressure or BMI never reach stage 1; they are dropped
    unless ``drop_unreached`` is false (then they stay as depth-0 rows).
    """
    if path is None:
        text = resources.files("stage").joinpath("data/pima.dat").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    attrs, rows = _read_arff(text)
    col = {name: i for i, name in enumerate(attrs)}
    values = np.array([[float(r[col[a]]) for a in attrs[:-1]] for r in rows])
    diagnosis = np.array([PASS if r[col["Class"]] == "positive" else REJECT for r in rows], dtype=np.int8)

    def recorded(*names):
        return np.all([values[:, col[n]] > 0 for n in names], axis=0)

    stage1 = recorded("Pres", "Mass")
    stage2 = stage1 & recorded("Plas", "Skin", "Insu")
    depth = stage1.astype(np.int64) + stage2
    schema = pima_schema()
    numeric = values[:, [col[n] for n in schema.column_names]]
    numeric[schema.column_stage()[None, :] > depth[:, None]] = 0.0
    stage_outcomes = np.where(np.arange(1, 3)[None, :] <= depth[:, None], diagnosis[:, None], MISSING)
    outcome = np.where(depth > 0, diagnosis, MISSING).astype(np.int8)
    keep = depth > 0 if drop_unreached else np.ones(len(depth), dtype=bool)
    return RawTable(
        schema,
        numeric[keep],
        {},
        depth[keep],
        outcome[keep],
        np.flatnonzero(keep).astype(np.int64),
        stage_outcomes[keep].astype(np.int8),
    )
