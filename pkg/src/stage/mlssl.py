"""Multi-label semi-supervised stage classifier.

One network scores every stage at once. Training combines a label-consistency
term on known labels, a graph smoothness term that ties similar rows to
similar scores (labeled or not), and a sequence penalty on reject-then-accept
patterns. Predictions are thresholded and repaired into thermometer strings.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, GraphError, ShapeError, ValidationError
from .funnel import MISSING, PASS, PROPAGATE_REJECT, REJECT, LabelMatrix, StageSchema, _apply_fill
from .nn import FORMAT_VERSION, DenseNet, SgdConfig, check_finite_grads

log = logging.getLogger(__name__)

DEGREE_FLOOR = 1e-8
SIGMA_FLOOR = 1e-8
GLOBAL_GRAPH_LIMIT = 5000
GRAPH_MODES = ("batch", "global")
# batches well above k_nn keep the per-batch graph local; with few labeled
# rows at late stages, every row is used for fitting and the best epoch is
# picked on the training objective
DEFAULT_BATCH_SIZE = 128
DEFAULT_VALIDATION_FRACTION = 0.0


def default_sgd(**overrides):
    base = {"batch_size": DEFAULT_BATCH_SIZE, "validation_fraction": DEFAULT_VALIDATION_FRACTION}
    base.update(overrides)
    return SgdConfig(**base)


# ---------------------------------------------------------------------------
# labels


def tml(labels, n_stages=None, fill_policy=PROPAGATE_REJECT):
    """Multi-label stage matrix from either a :class:`LabelMatrix` (returned as
    is) or multiclass codes: ``c`` in ``1..S`` means rejected at stage ``c``,
    ``S + 1`` means approved at every stage."""
    if isinstance(labels, LabelMatrix):
        return labels
    codes = np.asarray(labels)
    if n_stages is None or n_stages < 1:
        raise ValidationError("n_stages is required for multiclass labels")
    if codes.ndim != 1:
        raise ShapeError("multiclass labels must be a vector")
    if codes.size and (not np.all(codes == np.round(codes)) or codes.min() < 1 or codes.max() > n_stages + 1):
        raise ValidationError(f"multiclass labels must be integers in [1, {n_stages + 1}]")
    codes = codes.astype(np.int64)
    stages = np.arange(1, n_stages + 1)[None, :]
    c = codes[:, None]
    values = np.where(stages < c, PASS, MISSING)
    values = np.where(stages == c, REJECT, values)
    return LabelMatrix(_apply_fill(values.astype(np.int8), fill_policy))


def repair_thermometer(signs):
    """Keep the +1s before the first -1 of each row and set the rest to -1."""
    z = np.atleast_2d(np.asarray(signs))
    keep = np.cumprod(z > 0, axis=1).astype(bool)
    return np.where(keep, PASS, REJECT).astype(np.int8)


# ---------------------------------------------------------------------------
# similarity graph


@dataclass(frozen=True, eq=False)
class SimilarityGraph:
    weights: np.ndarray
    degrees: np.ndarray
    laplacian: np.ndarray

    @property
    def n(self):
        return self.weights.shape[0]

    def restrict(self, rows):
        """Principal sub-block of the Laplacian for a subset of nodes."""
        rows = np.asarray(rows, dtype=np.int64)
        block = np.ix_(rows, rows)
        return SimilarityGraph(self.weights[block], self.degrees[rows], self.laplacian[block])


def _features(x):
    if hasattr(x, "features"):
        x = x.features
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("graph input must be a 2-D feature matrix")
    return x


def pairwise_sq_distances(x):
    sq = np.einsum("ij,ij->i", x, x)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def build_graph(x, k_nn=20, h_nn=5):
    """k-nearest-neighbour graph with locally scaled Gaussian weights and its
    normalized Laplacian ``I - D^-1/2 V D^-1/2``.

    ``sigma_i`` is the distance from row ``i`` to its ``h_nn``-th neighbour.
    The graph is symmetrized with an elementwise max.
    """
    x = _features(x)
    n = x.shape[0]
    if n < 2:
        raise GraphError("a similarity graph needs at least 2 rows")
    if not 1 <= k_nn <= n - 1:
        raise GraphError(f"k_nn must lie in [1, {n - 1}] for {n} rows, got {k_nn}")
    if not 1 <= h_nn <= k_nn:
        raise GraphError(f"h_nn must lie in [1, k_nn={k_nn}], got {h_nn}")
    d2 = pairwise_sq_distances(x)
    ranked = d2.copy()
    np.fill_diagonal(ranked, np.inf)
    order = np.argsort(ranked, axis=1, kind="stable")[:, :k_nn]
    rows = np.arange(n)[:, None]
    sigma = np.maximum(np.sqrt(d2[np.arange(n), order[:, h_nn - 1]]), SIGMA_FLOOR)
    v = np.zeros((n, n))
    v[rows, order] = np.exp(-d2[rows, order] / (sigma[:, None] * sigma[order]))
    v = np.maximum(v, v.T)
    np.fill_diagonal(v, 0.0)
    deg = v.sum(axis=1)
    inv = 1.0 / np.sqrt(np.maximum(deg, DEGREE_FLOOR))
    lap = np.eye(n) - inv[:, None] * v * inv[None, :]
    lap = 0.5 * (lap + lap.T)
    return SimilarityGraph(v, deg, lap)


# ---------------------------------------------------------------------------
# losses


def _pair(yhat, y):
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y.values if isinstance(y, LabelMatrix) else y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ShapeError(f"score shape {yhat.shape} does not match label shape {y.shape}")
    return yhat, y


def lc_loss(yhat, y, mask_missing=True):
    """Squared Frobenius distance to the labels; missing cells are skipped
    unless ``mask_missing`` is false."""
    yhat, y = _pair(yhat, y)
    diff = yhat - y
    if mask_missing:
        diff = np.where(y != MISSING, diff, 0.0)
    return float(np.sum(diff * diff))


def lc_grad(yhat, y, mask_missing=True):
    yhat, y = _pair(yhat, y)
    diff = yhat - y
    if mask_missing:
        diff = np.where(y != MISSING, diff, 0.0)
    return 2.0 * diff


def _laplacian(graph):
    return graph.laplacian if isinstance(graph, SimilarityGraph) else np.asarray(graph, dtype=np.float64)


def sls_loss(yhat, graph):
    """Sum over stages of ``y_s^T L y_s``."""
    yhat = np.asarray(yhat, dtype=np.float64)
    lap = _laplacian(graph)
    if lap.shape[0] != yhat.shape[0]:
        raise ShapeError(f"graph has {lap.shape[0]} nodes but scores have {yhat.shape[0]} rows")
    return float(np.sum(yhat * (lap @ yhat)))


def sls_grad(yhat, graph):
    lap = _laplacian(graph)
    return (lap + lap.T) @ np.asarray(yhat, dtype=np.float64)


def _tc_parts(yhat):
    y = np.atleast_2d(np.asarray(yhat, dtype=np.float64))
    neg = 1.0 - y
    pos = 1.0 + y
    # before[:, j] = sum_{i<j} (1 - y_i); after[:, k] = sum_{j>k} (1 + y_j)
    before = np.cumsum(neg, axis=1) - neg
    after = np.cumsum(pos[:, ::-1], axis=1)[:, ::-1] - pos
    return before, after, pos


def tc_loss(yhat):
    """``1/4 * sum over rows and ordered stage pairs i<j of (1 - y_i)(1 + y_j)``."""
    before, _, pos = _tc_parts(yhat)
    return float(0.25 * np.sum(before * pos))


def tc_grad(yhat):
    before, after, _ = _tc_parts(yhat)
    return 0.25 * (before - after)


# ---------------------------------------------------------------------------
# classifier


@dataclass(frozen=True)
class MlsslClassifier:
    net: DenseNet
    lam: float = 0.5
    k_nn: int = 20
    h_nn: int = 5
    term_weights: tuple = (1.0, 1.0, 1.0)
    mask_missing: bool = True
    graph_mode: str = "batch"
    schema: StageSchema | None = None

    def __post_init__(self):
        object.__setattr__(self, "term_weights", tuple(float(w) for w in self.term_weights))
        if self.net.activations[-1] != "tanh":
            raise ValidationError("classifier output layer must be tanh")
        if self.lam < 0:
            raise ValidationError("lambda must be non-negative")
        if self.k_nn < 1 or self.h_nn < 1:
            raise ValidationError("k_nn and h_nn must be positive")
        if self.h_nn > self.k_nn:
            raise ValidationError("h_nn must not exceed k_nn")
        if len(self.term_weights) != 3 or min(self.term_weights) < 0:
            raise ValidationError("term_weights needs three non-negative entries (lc, sls, tc)")
        if self.graph_mode not in GRAPH_MODES:
            raise ValidationError(f"graph_mode must be one of {GRAPH_MODES}")
        if self.schema is not None and (
            self.schema.total_width != self.net.input_width or self.schema.n_stages != self.net.output_width
        ):
            raise ShapeError("schema does not match the classifier's input/output widths")

    @classmethod
    def initialize(cls, n_features, n_stages, hidden=(64, 32), seed=0, hidden_activation="tanh", **kwargs):
        widths = [n_features, *hidden, n_stages]
        acts = [hidden_activation] * len(hidden) + ["tanh"]
        net = DenseNet.initialize(widths, acts, np.random.default_rng(seed))
        return cls(net, **kwargs)

    @property
    def n_stages(self):
        return self.net.output_width

    @property
    def n_features(self):
        return self.net.input_width

    def with_net(self, net):
        return MlsslClassifier(
            net, self.lam, self.k_nn, self.h_nn, self.term_weights, self.mask_missing, self.graph_mode, self.schema
        )

    def scores(self, x):
        return self.net.forward(_features(x))

    def to_json(self):
        return {
            "format_version": FORMAT_VERSION,
            "kind": "mlssl",
            "lambda": self.lam,
            "k_nn": self.k_nn,
            "h_nn": self.h_nn,
            "term_weights": list(self.term_weights),
            "mask_missing": self.mask_missing,
            "graph_mode": self.graph_mode,
            "schema": None if self.schema is None else self.schema.to_json(),
            "net": self.net.to_json(),
        }

    @classmethod
    def from_json(cls, doc):
        if doc.get("kind") != "mlssl":
            raise ValidationError("not an MLSSL classifier document")
        schema = doc.get("schema")
        return cls(
            DenseNet.from_json(doc["net"]),
            doc["lambda"],
            doc["k_nn"],
            doc["h_nn"],
            tuple(doc["term_weights"]),
            doc["mask_missing"],
            doc.get("graph_mode", "batch"),
            None if schema is None else StageSchema.from_json(schema),
        )


def mlssl_objective(clf, x, y, graph=None, params=None):
    """Weighted label, smoothness and sequence terms plus the L2 penalty on
    weight matrices, for one batch. Returns ``(value, grads, parts)`` with
    ``grads`` ordered like ``clf.net.params()``; ``graph=None`` drops the
    smoothness term."""
    net = clf.net if params is None else clf.net.with_params(params)
    x = np.asarray(x, dtype=np.float64)
    yhat, cache = net.forward_train(x)
    w_lc, w_sls, w_tc = clf.term_weights
    parts = {
        "lc": lc_loss(yhat, y, clf.mask_missing),
        "sls": 0.0 if graph is None else sls_loss(yhat, graph),
        "tc": tc_loss(yhat),
        "l2": float(sum(np.sum(w * w) for w in net.weights)),
    }
    g = w_lc * lc_grad(yhat, y, clf.mask_missing) + w_tc * tc_grad(yhat)
    if graph is not None:
        g = g + w_sls * sls_grad(yhat, graph)
    grads, _ = net.backward(cache, g, input_grad=False)
    for i, w in enumerate(net.weights):
        grads[2 * i] = grads[2 * i] + 2.0 * clf.lam * w
    value = w_lc * parts["lc"] + w_sls * parts["sls"] + w_tc * parts["tc"] + clf.lam * parts["l2"]
    return value, grads, parts


def _batch_graph(clf, x):
    n = x.shape[0]
    if n < 2:
        return None
    k = min(clf.k_nn, n - 1)
    return build_graph(x, k, min(clf.h_nn, k))


def _validation_score(clf, x, y):
    """Per-row label and sequence terms on held-out rows.

    The smoothness term is left out: on a small held-out set its graph is
    nearly complete and it rewards flat predictions.
    """
    yhat = clf.scores(x)
    w_lc, _, w_tc = clf.term_weights
    total = w_lc * lc_loss(yhat, y, clf.mask_missing) + w_tc * tc_loss(yhat)
    return total / max(len(x), 1)


def _depth_split(depth, fraction, rng):
    if fraction <= 0:
        idx = np.arange(len(depth))
        return idx, idx[:0]
    train, val = [], []
    for d in np.unique(depth):
        rows = np.flatnonzero(depth == d)
        rows = rows[rng.permutation(len(rows))]
        m = min(int(round(fraction * len(rows))), len(rows) - 1)
        val.append(rows[:m])
        train.append(rows[m:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def _training_inputs(xhat, labels, depth):
    x = _features(xhat)
    if labels is None:
        raise ValidationError("labels are required")
    y = tml(labels) if isinstance(labels, LabelMatrix) else LabelMatrix(np.asarray(labels))
    if y.shape[0] != x.shape[0]:
        raise ShapeError(f"{y.shape[0]} label rows for {x.shape[0]} feature rows")
    if depth is None:
        depth = getattr(xhat, "observed_depth", None)
    if depth is None:
        # depth implied by the labels: number of leading known entries
        depth = np.cumprod(y.values != MISSING, axis=1).sum(axis=1)
    depth = np.asarray(depth, dtype=np.int64)
    if depth.shape != (x.shape[0],):
        raise ShapeError("depth needs one entry per row")
    if hasattr(xhat, "provenance_mask") and not np.isfinite(x).all():
        raise ValidationError("completed features contain non-finite values")
    return x, y.values.astype(np.float64), depth


def train_mlssl(xhat, labels, clf=None, cfg=None, depth=None):
    """Minibatch SGD on the classifier objective, sweeping ``s = S..0`` each
    epoch over rows that reached at least stage ``s``; returns the classifier
    with the best held-out score. ``clf.history`` and ``clf.warnings`` record
    the run."""
    cfg = cfg or default_sgd()
    x, y, depth = _training_inputs(xhat, labels, depth)
    n, S = y.shape
    if n == 0:
        raise ValidationError("training data is empty")
    if clf is None:
        clf = MlsslClassifier.initialize(x.shape[1], S, seed=cfg.seed)
    if clf.n_features != x.shape[1] or clf.n_stages != S:
        raise ShapeError(
            f"classifier expects {clf.n_features} features / {clf.n_stages} stages, data has {x.shape[1]} / {S}"
        )
    if clf.graph_mode == "global" and n > GLOBAL_GRAPH_LIMIT:
        raise ValidationError(f"global graph mode supports at most {GLOBAL_GRAPH_LIMIT} rows")
    history, notes = [], []
    if cfg.max_epochs == 0:
        object.__setattr__(clf, "history", history)
        object.__setattr__(clf, "warnings", notes)
        return clf

    rng = np.random.default_rng(cfg.seed)
    tr, va = _depth_split(depth, cfg.validation_fraction, rng)
    if len(va) == 0:
        va = tr
    global_graph = _batch_graph(clf, x[tr]) if clf.graph_mode == "global" else None
    position = np.full(n, -1)
    position[tr] = np.arange(len(tr))

    net = clf.net.copy()
    work = clf.with_net(net)
    best = _validation_score(work, x[va], y[va])
    history.append({"epoch": 0, "val_objective": best})
    best_net, best_epoch, stale = net.copy(), 0, 0
    lr, k = cfg.learning_rate, cfg.batch_size
    for epoch in range(1, cfg.max_epochs + 1):
        total, batches = 0.0, 0
        for s in range(S, -1, -1):
            rows = tr[depth[tr] >= s]
            if len(rows) == 0:
                continue
            rows = rng.permutation(rows)
            for start in range(0, len(rows), k):
                b = rows[start : start + k]
                if global_graph is not None:
                    graph = global_graph.restrict(position[b]) if len(b) > 1 else None
                else:
                    graph = _batch_graph(work, x[b])
                if graph is None and work.term_weights[1] > 0:
                    msg = f"epoch {epoch} stage {s}: single-row batch, smoothness term skipped"
                    if msg not in notes:
                        notes.append(msg)
                value, grads, _ = mlssl_objective(work, x[b], y[b], graph)
                if not math.isfinite(value):
                    raise DivergenceError("non-finite loss", epoch=epoch, stage=s)
                try:
                    check_finite_grads(grads)
                except DivergenceError as exc:
                    raise DivergenceError("classifier diverged", epoch=epoch, stage=s, layer=exc.layer) from None
                for p, g in zip(net.params(), grads):
                    p -= lr * g
                total += value
                batches += 1
        val = _validation_score(work, x[va], y[va])
        if not math.isfinite(val):
            raise DivergenceError("non-finite validation objective", epoch=epoch)
        history.append({"epoch": epoch, "val_objective": val, "train_objective": total / max(batches, 1)})
        if val < best:
            best, best_net, best_epoch, stale = val, net.copy(), epoch, 0
        else:
            stale += 1
            if stale > cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    for msg in notes:
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    out = clf.with_net(best_net)
    object.__setattr__(out, "history", history)
    object.__setattr__(out, "warnings", notes)
    object.__setattr__(out, "best_epoch", best_epoch)
    return out


def predict_scores(clf, xhat):
    x = _features(xhat)
    if x.shape[1] != clf.n_features:
        raise ShapeError(f"classifier expects {clf.n_features} features, got {x.shape[1]}")
    return clf.scores(x)


def predict(clf, xhat):
    """Signed stage decisions (ties go to -1), repaired into thermometer strings."""
    scores = predict_scores(clf, xhat)
    return repair_thermometer(np.where(scores > 0, PASS, REJECT))
