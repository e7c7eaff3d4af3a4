"""Reference classifiers: one linear hinge model per stage, and a single
softmax model over "number of stages passed" classes."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ClassImbalanceWarning, DegenerateClassError, ShapeError, ValidationError
from .funnel import MISSING, PASS, REJECT, LabelMatrix, StageSchema
from .nn import FORMAT_VERSION, SgdConfig, check_finite_grads

RAW = "raw"
COMPLETED = "completed"
BANK_MODES = (RAW, COMPLETED)
DEFAULT_L2 = 1e-3
IMBALANCE_SHARE = 0.05


def _default_cfg(cfg):
    return cfg or SgdConfig(learning_rate=1e-2, max_epochs=100)


def _signs(scores):
    return np.where(np.asarray(scores) > 0, PASS, REJECT).astype(np.int8)


@dataclass(frozen=True)
class LinearModel:
    weights: np.ndarray
    bias: float

    def decision_function(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != len(self.weights):
            raise ShapeError(f"expected {len(self.weights)} columns, got shape {x.shape}")
        return x @ self.weights + self.bias

    def predict(self, x):
        return _signs(self.decision_function(x))

    def to_json(self):
        return {"weights": np.asarray(self.weights).tolist(), "bias": float(self.bias)}

    @classmethod
    def from_json(cls, doc):
        return cls(np.array(doc["weights"], dtype=np.float64), float(doc["bias"]))


def train_stage_binary(x, y, stage=None, l2=DEFAULT_L2, cfg=None):
    """Linear hinge-loss classifier fit by minibatch SGD.

    Rows labeled 0 are ignored. Raises :class:`DegenerateClassError` when one
    class is absent and warns when the minority class is very small.
    """
    cfg = _default_cfg(cfg)
    if l2 < 0:
        raise ValidationError("l2 must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ShapeError("need an n x d matrix and n labels")
    keep = y != MISSING
    x, y = x[keep], y[keep].astype(np.float64)
    n_pos, n_neg = int((y > 0).sum()), int((y < 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClassError(stage if stage is not None else "?")
    minority = min(n_pos, n_neg)
    if minority < 2 or minority < IMBALANCE_SHARE * len(y):
        warnings.warn(
            f"stage {stage}: {minority} minority-class samples out of {len(y)}",
            ClassImbalanceWarning,
            stacklevel=2,
        )
    rng = np.random.default_rng(cfg.seed)
    w = np.zeros(x.shape[1])
    b = 0.0
    for _ in range(cfg.max_epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            active = yb * (xb @ w + b) < 1.0
            gw = -(yb[active, None] * xb[active]).sum(axis=0) / len(idx) + 2.0 * l2 * w
            gb = -yb[active].sum() / len(idx)
            check_finite_grads([gw, np.array([gb])])
            w -= cfg.learning_rate * gw
            b -= cfg.learning_rate * gb
    return LinearModel(w, float(b))


@dataclass(frozen=True)
class StageBinaryBank:
    """One linear model per stage. In raw mode model ``s`` reads the first
    ``d^s`` columns; in completed mode every model reads all ``d^S``."""

    models: tuple
    widths: tuple
    mode: str = RAW
    schema: StageSchema | None = None

    def __post_init__(self):
        if self.mode not in BANK_MODES:
            raise ValidationError(f"mode must be one of {BANK_MODES}")
        if len(self.models) != len(self.widths):
            raise ShapeError("one width per stage model")
        for m, w in zip(self.models, self.widths):
            if len(m.weights) != w:
                raise ShapeError("model width does not match its declared input width")

    @property
    def n_stages(self):
        return len(self.models)

    def decision_function(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] < max(self.widths):
            raise ShapeError(f"expected at least {max(self.widths)} columns, got shape {x.shape}")
        return np.column_stack([m.decision_function(x[:, :w]) for m, w in zip(self.models, self.widths)])

    def predict(self, x):
        """Independent per-stage decisions; no sequence repair is applied."""
        return _signs(self.decision_function(x))

    def to_json(self):
        return {
            "format_version": FORMAT_VERSION,
            "kind": "stage_bank",
            "mode": self.mode,
            "widths": list(self.widths),
            "models": [m.to_json() for m in self.models],
            "schema": None if self.schema is None else self.schema.to_json(),
        }

    @classmethod
    def from_json(cls, doc):
        if doc.get("kind") != "stage_bank":
            raise ValidationError("not a stage-bank document")
        schema = doc.get("schema")
        return cls(
            tuple(LinearModel.from_json(m) for m in doc["models"]),
            tuple(doc["widths"]),
            doc["mode"],
            None if schema is None else StageSchema.from_json(schema),
        )


def _label_values(labels):
    return np.asarray(labels.values if isinstance(labels, LabelMatrix) else labels)


def train_bank(x, labels, depth, schema, mode=RAW, l2=DEFAULT_L2, cfg=None):
    """Stage ``s`` model trained on the rows that reached stage ``s``."""
    if mode not in BANK_MODES:
        raise ValidationError(f"mode must be one of {BANK_MODES}")
    x = np.asarray(getattr(x, "features", x), dtype=np.float64)
    y = _label_values(labels)
    depth = np.asarray(depth)
    S = schema.n_stages
    if y.shape != (x.shape[0], S) or depth.shape != (x.shape[0],):
        raise ShapeError("labels must be n x S and depth length n")
    models, widths = [], []
    for s in range(1, S + 1):
        width = schema.width(s) if mode == RAW else schema.total_width
        rows = np.flatnonzero(depth >= s)
        models.append(train_stage_binary(x[rows, :width], y[rows, s - 1], stage=s, l2=l2, cfg=cfg))
        widths.append(width)
    return StageBinaryBank(tuple(models), tuple(widths), mode, schema)


# ---------------------------------------------------------------------------
# multiclass


def stages_passed(labels):
    """Class per row = number of stages passed, or -1 when it cannot be told
    (the row's last known label is a pass short of the final stage)."""
    y = _label_values(labels)
    n, S = y.shape
    rejected = y == REJECT
    first_reject = np.where(rejected.any(axis=1), rejected.argmax(axis=1), -1)
    all_pass = (y == PASS).all(axis=1)
    return np.where(first_reject >= 0, first_reject, np.where(all_pass, S, -1))


def thermometer_expand(classes, n_stages):
    """Class ``c`` -> +1 for the first ``c`` stages, -1 afterwards."""
    c = np.asarray(classes, dtype=np.int64)
    if c.size and (c.min() < 0 or c.max() > n_stages):
        raise ValidationError(f"classes must lie in [0, {n_stages}]")
    return np.where(np.arange(n_stages)[None, :] < c[:, None], PASS, REJECT).astype(np.int8)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class MulticlassModel:
    """Linear softmax over ``S + 1`` classes (stages passed)."""

    weights: np.ndarray
    bias: np.ndarray
    schema: StageSchema | None = None

    @property
    def n_stages(self):
        return self.weights.shape[1] - 1

    def predict_proba(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.weights.shape[0]:
            raise ShapeError(f"expected {self.weights.shape[0]} columns, got shape {x.shape}")
        return _softmax(x @ self.weights + self.bias)

    def predict_class(self, x):
        return self.predict_proba(x).argmax(axis=1)

    def predict(self, x):
        return thermometer_expand(self.predict_class(x), self.n_stages)

    def to_json(self):
        return {
            "format_version": FORMAT_VERSION,
            "kind": "multiclass",
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "schema": None if self.schema is None else self.schema.to_json(),
        }

    @classmethod
    def from_json(cls, doc):
        if doc.get("kind") != "multiclass":
            raise ValidationError("not a multiclass model document")
        schema = doc.get("schema")
        return cls(
            np.array(doc["weights"], dtype=np.float64),
            np.array(doc["bias"], dtype=np.float64),
            None if schema is None else StageSchema.from_json(schema),
        )


def train_imc(x, classes, n_stages, l2=DEFAULT_L2, cfg=None, schema=None):
    """Cross-entropy SGD for a linear softmax model. Rows whose class is
    negative (undeterminable) are skipped."""
    cfg = _default_cfg(cfg)
    x = np.asarray(getattr(x, "features", x), dtype=np.float64)
    c = np.asarray(classes, dtype=np.int64)
    if c.shape != (x.shape[0],):
        raise ShapeError("one class per row")
    keep = c >= 0
    x, c = x[keep], c[keep]
    if len(c) == 0:
        raise ValidationError("no rows with a determinable class")
    if c.max() > n_stages:
        raise ValidationError(f"classes must lie in [0, {n_stages}]")
    K = n_stages + 1
    onehot = np.eye(K)[c]
    rng = np.random.default_rng(cfg.seed)
    w = np.zeros((x.shape[1], K))
    b = np.zeros(K)
    for _ in range(cfg.max_epochs):
        order = rng.permutation(len(c))
        for start in range(0, len(c), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            p = _softmax(x[idx] @ w + b)
            g = (p - onehot[idx]) / len(idx)
            gw = x[idx].T @ g + 2.0 * l2 * w
            gb = g.sum(axis=0)
            check_finite_grads([gw, gb])
            w -= cfg.learning_rate * gw
            b -= cfg.learning_rate * gb
    return MulticlassModel(w, b, schema)
