"""Adversarial encoder / multi-task decoder.

The encoder maps a stage prefix (zero-padded to full width) to a Gaussian
embedding; the decoder trunk feeds a reconstruction head and a future-feature
head; the discriminator tells prior draws from encoded draws. A trained model
completes a funnel dataset by predicting every row's unobserved columns.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_open
from .errors import CompletionError, DivergenceError, NumericError, ParseError, ShapeError, ValidationError
from .funnel import (
    BINARY,
    DEPTH_COLUMN,
    OUTCOME_COLUMN,
    STAGE_OUTCOME_PREFIX,
    FunnelDataset,
    StageSchema,
    _format_outcome,
    _parse_outcome,
)
from .nn import FORMAT_VERSION, LOG_FLOOR, DenseNet, SgdConfig, check_finite_grads, sigmoid

log = logging.getLogger(__name__)

PAPER_FAITHFUL = "paper_faithful"
KEEP_OBSERVED = "keep_observed"
SPLICE_POLICIES = (PAPER_FAITHFUL, KEEP_OBSERVED)
GENERATED_COLUMN = "__generated_cols"
DEFAULT_LEARNING_RATE = 3e-3


@dataclass(frozen=True)
class AemtdConfig:
    embed_dim: int = 16
    encoder_hidden: tuple = (64, 32)
    decoder_hidden: tuple = (32, 64)
    discriminator_hidden: tuple = (32,)
    hidden_activation: str = "tanh"
    w_rec: float = 1.0
    w_fn: float = 1.0
    w_gan: float = 1.0
    binary_loss: str = "bernoulli"
    # the discriminator gets a larger step and several updates per batch so
    # it keeps pace with the encoder under plain SGD
    disc_lr_scale: float = 30.0
    disc_steps: int = 3

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ValidationError("embed_dim must be >= 1")
        if min(self.w_rec, self.w_fn, self.w_gan) < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.disc_lr_scale <= 0 or self.disc_steps < 1:
            raise ValidationError("disc_lr_scale must be positive and disc_steps >= 1")
        if self.binary_loss not in ("bernoulli", "literal"):
            raise ValidationError("binary_loss must be 'bernoulli' or 'literal'")


# ---------------------------------------------------------------------------
# losses


def _binary_mask(kinds, width):
    if isinstance(kinds, np.ndarray) and kinds.dtype == bool:
        return kinds
    kinds = tuple(kinds)
    if len(kinds) != width:
        raise ShapeError(f"{len(kinds)} column kinds for {width} columns")
    return np.array([k == BINARY for k in kinds], dtype=bool)


def _lf_terms(x, xhat, binary, mask, binary_loss="bernoulli"):
    """Per-cell L_f values and d/dxhat, zero outside ``mask``.

    Continuous cells: squared error. Binary cells: cross-entropy with the
    log argument clamped to >= LOG_FLOOR.
    """
    x = np.where(mask, x, 0.0)
    xhat = np.asarray(xhat, dtype=np.float64)
    binm = mask & binary[None, :]
    contm = mask & ~binary[None, :]
    safe_hat = np.where(mask, xhat, 0.5)
    if binm.any():
        b = safe_hat[binm]
        if not np.all((b >= 0) & (b <= 1)):
            raise NumericError("binary-column prediction outside [0, 1]")
    diff = safe_hat - x
    val = np.where(contm, diff * diff, 0.0)
    grad = np.where(contm, 2.0 * diff, 0.0)
    if binm.any():
        p = np.maximum(safe_hat, LOG_FLOOR)
        val = val + np.where(binm, -x * np.log(p), 0.0)
        grad = grad + np.where(binm & (safe_hat > LOG_FLOOR), -x / p, 0.0)
        if binary_loss == "bernoulli":
            q = np.maximum(1.0 - safe_hat, LOG_FLOOR)
            val = val + np.where(binm, -(1.0 - x) * np.log(q), 0.0)
            grad = grad + np.where(binm & (1.0 - safe_hat > LOG_FLOOR), (1.0 - x) / q, 0.0)
    return val, grad


def rec_loss(x_batch, xhat_batch, kinds, mask, binary_loss="bernoulli"):
    """Reconstruction error summed over the masked cells."""
    x_batch = np.asarray(x_batch, dtype=np.float64)
    if x_batch.shape != np.shape(xhat_batch) or x_batch.shape != np.shape(mask):
        raise ShapeError("x, xhat and mask must share a shape")
    binary = _binary_mask(kinds, x_batch.shape[1])
    val, _ = _lf_terms(x_batch, xhat_batch, binary, np.asarray(mask, dtype=bool), binary_loss)
    return float(val.sum())


def future_mask(observed_mask, stage_width):
    """Cells the feature nets are supervised on: observed columns at or past ``stage_width``."""
    m = np.array(observed_mask, dtype=bool, copy=True)
    m[:, :stage_width] = False
    return m


def fn_loss(x_batch, future_output, kinds, observed_mask, stage_width, binary_loss="bernoulli"):
    """Feature-net error over observed cells in columns ``stage_width`` onward."""
    return rec_loss(x_batch, future_output, kinds, future_mask(observed_mask, stage_width), binary_loss)


def _gan_parts(p_prior, p_encoded):
    """Values and d/dp of the discriminator and generator losses."""
    if len(p_prior) == 0 or len(p_encoded) == 0:
        raise ValidationError("adversarial losses need non-empty batches")
    lp = np.maximum(p_prior, LOG_FLOOR)
    le = np.maximum(1.0 - p_encoded, LOG_FLOOR)
    ge = np.maximum(p_encoded, LOG_FLOOR)
    d_loss = -np.mean(np.log(lp)) - np.mean(np.log(le))
    g_loss = -np.mean(np.log(ge))
    d_grad_prior = np.where(p_prior > LOG_FLOOR, -1.0 / lp, 0.0) / len(p_prior)
    d_grad_enc = np.where(1.0 - p_encoded > LOG_FLOOR, 1.0 / le, 0.0) / len(p_encoded)
    g_grad_enc = np.where(p_encoded > LOG_FLOOR, -1.0 / ge, 0.0) / len(p_encoded)
    return d_loss, g_loss, d_grad_prior, d_grad_enc, g_grad_enc


def gan_losses(prior_samples, encoded_samples, discriminator):
    """(discriminator loss, non-saturating generator loss).

    The discriminator minimises ``-mean[log D(prior)] - mean[log(1 - D(encoded))]``;
    the encoder minimises ``-mean[log D(encoded)]``.
    """
    prior_samples = np.atleast_2d(prior_samples)
    encoded_samples = np.atleast_2d(encoded_samples)
    if prior_samples.shape[0] == 0 or encoded_samples.shape[0] == 0:
        raise ValidationError("adversarial losses need non-empty batches")
    p_prior = discriminator.forward(prior_samples)[:, 0]
    p_enc = discriminator.forward(encoded_samples)[:, 0]
    d_loss, g_loss, *_ = _gan_parts(p_prior, p_enc)
    return float(d_loss), float(g_loss)


# ---------------------------------------------------------------------------
# model


class AemtdModel:
    def __init__(self, schema, encoder, decoder_trunk, rec_head, future_head, discriminator, config=None):
        self.schema = schema
        self.config = config or AemtdConfig(embed_dim=decoder_trunk.input_width)
        self.encoder = encoder
        self.decoder_trunk = decoder_trunk
        self.rec_head = rec_head
        self.future_head = future_head
        self.discriminator = discriminator
        self.binary = schema.binary_mask
        self.history = []
        d, de = schema.total_width, self.embed_dim
        if encoder.input_width != d or encoder.output_width != 2 * de:
            raise ShapeError("encoder must map the full width to mean and log-variance")
        if rec_head.output_width != d or future_head.output_width != d:
            raise ShapeError("decoder heads must emit the full width")
        if discriminator.input_width != de or discriminator.output_width != 1:
            raise ShapeError("discriminator must map the embedding to one probability")

    @classmethod
    def initialize(cls, schema, config=None, seed=0):
        config = config or AemtdConfig()
        rng = np.random.default_rng(seed)
        d, de, act = schema.total_width, config.embed_dim, config.hidden_activation
        enc_w = [d, *config.encoder_hidden, 2 * de]
        encoder = DenseNet.initialize(enc_w, [act] * len(config.encoder_hidden) + ["identity"], rng)
        dec_w = [de, *config.decoder_hidden]
        trunk = DenseNet.initialize(dec_w, [act] * len(config.decoder_hidden), rng)
        rec = DenseNet.initialize([dec_w[-1], d], ["identity"], rng)
        fut = DenseNet.initialize([dec_w[-1], d], ["identity"], rng)
        disc_w = [de, *config.discriminator_hidden, 1]
        disc = DenseNet.initialize(disc_w, [act] * len(config.discriminator_hidden) + ["sigmoid"], rng)
        return cls(schema, encoder, trunk, rec, fut, disc, config)

    @property
    def embed_dim(self):
        return self.config.embed_dim

    def theta(self):
        return [self.encoder]

    def phi(self):
        return [self.decoder_trunk, self.rec_head, self.future_head]

    def gamma(self):
        return [self.discriminator]

    def copy(self):
        other = copy.copy(self)
        for name in ("encoder", "decoder_trunk", "rec_head", "future_head", "discriminator"):
            setattr(other, name, getattr(self, name).copy())
        other.history = list(self.history)
        return other

    def encode(self, x):
        out = self.encoder.forward(x)
        return out[:, : self.embed_dim], out[:, self.embed_dim :]

    def _squash(self, z):
        return np.where(self.binary[None, :], sigmoid(z), z)

    def decode(self, e):
        h = self.decoder_trunk.forward(e)
        return self._squash(self.rec_head.forward(h)), self._squash(self.future_head.forward(h))

    def discriminate(self, e):
        return self.discriminator.forward(e)[:, 0]

    def to_json(self):
        c = self.config
        return {
            "format_version": FORMAT_VERSION,
            "kind": "aemtd",
            "schema": self.schema.to_json(),
            "config": {
                "embed_dim": c.embed_dim,
                "encoder_hidden": list(c.encoder_hidden),
                "decoder_hidden": list(c.decoder_hidden),
                "discriminator_hidden": list(c.discriminator_hidden),
                "hidden_activation": c.hidden_activation,
                "w_rec": c.w_rec,
                "w_fn": c.w_fn,
                "w_gan": c.w_gan,
                "binary_loss": c.binary_loss,
                "disc_lr_scale": c.disc_lr_scale,
                "disc_steps": c.disc_steps,
            },
            "encoder": self.encoder.to_json(),
            "decoder_trunk": self.decoder_trunk.to_json(),
            "rec_head": self.rec_head.to_json(),
            "future_head": self.future_head.to_json(),
            "discriminator": self.discriminator.to_json(),
        }

    @classmethod
    def from_json(cls, doc):
        if doc.get("kind") != "aemtd":
            raise ValidationError("not an AEMTD model document")
        cfg = dict(doc["config"])
        for k in ("encoder_hidden", "decoder_hidden", "discriminator_hidden"):
            cfg[k] = tuple(cfg[k])
        return cls(
            StageSchema.from_json(doc["schema"]),
            DenseNet.from_json(doc["encoder"]),
            DenseNet.from_json(doc["decoder_trunk"]),
            DenseNet.from_json(doc["rec_head"]),
            DenseNet.from_json(doc["future_head"]),
            DenseNet.from_json(doc["discriminator"]),
            AemtdConfig(**cfg),
        )


def prefix_input(x, schema, stage):
    """Zero every column past the stage-``stage`` prefix."""
    out = np.array(x, dtype=np.float64, copy=True)
    out[:, schema.width(stage) :] = 0.0
    return out


def reconstruction_objective(model, x, observed, stage, noise):
    """Encoder/decoder side of the objective on one batch.

    Returns ``(value, grads, parts)`` where ``grads`` covers the encoder then
    the decoder trunk, reconstruction head and future head (``params`` order),
    and ``parts`` holds the unnormalised loss terms.
    """
    cfg = model.config
    k = x.shape[0]
    width = model.schema.width(stage)
    pm = np.zeros_like(observed)
    pm[:, :width] = observed[:, :width]
    fm = future_mask(observed, width)
    x_in = np.where(pm, x, 0.0)
    de = model.embed_dim

    enc_out, enc_cache = model.encoder.forward_train(x_in)
    mu, logvar = enc_out[:, :de], enc_out[:, de:]
    std = np.exp(0.5 * logvar)
    e = mu + std * noise
    h, trunk_cache = model.decoder_trunk.forward_train(e)
    r_lin, r_cache = model.rec_head.forward_train(h)
    f_lin, f_cache = model.future_head.forward_train(h)
    rec = model._squash(r_lin)
    fut = model._squash(f_lin)
    p, d_cache = model.discriminator.forward_train(e)
    p = p[:, 0]

    rec_val, rec_grad = _lf_terms(x, rec, model.binary, pm, cfg.binary_loss)
    fn_val, fn_grad = _lf_terms(x, fut, model.binary, fm, cfg.binary_loss)
    _, g_loss, _, _, g_grad = _gan_parts(np.full(1, 0.5), p)
    l_rec, l_fn = rec_val.sum(), fn_val.sum()
    value = cfg.w_rec * l_rec / k + cfg.w_fn * l_fn / k + cfg.w_gan * g_loss

    sq = model.binary[None, :]
    g_r = cfg.w_rec / k * rec_grad
    g_r = np.where(sq, g_r * rec * (1.0 - rec), g_r)
    g_f = cfg.w_fn / k * fn_grad
    g_f = np.where(sq, g_f * fut * (1.0 - fut), g_f)
    grads_r, gh_r = model.rec_head.backward(r_cache, g_r)
    grads_f, gh_f = model.future_head.backward(f_cache, g_f)
    grads_t, g_e = model.decoder_trunk.backward(trunk_cache, gh_r + gh_f)
    _, g_e_gan = model.discriminator.backward(d_cache, cfg.w_gan * g_grad[:, None])
    g_e = g_e + g_e_gan
    g_enc_out = np.hstack([g_e, g_e * noise * 0.5 * std])
    grads_enc, _ = model.encoder.backward(enc_cache, g_enc_out, input_grad=False)
    parts = {"rec": float(l_rec), "fn": float(l_fn), "gen": float(g_loss)}
    return float(value), grads_enc + grads_t + grads_r + grads_f, parts


def discriminator_objective(model, prior, encoded):
    """Discriminator loss on (prior, encoded) draws and its gradient w.r.t. gamma."""
    n_p = prior.shape[0]
    both = np.vstack([prior, encoded])
    p, cache = model.discriminator.forward_train(both)
    p = p[:, 0]
    d_loss, _, gp, ge, _ = _gan_parts(p[:n_p], p[n_p:])
    grads, _ = model.discriminator.backward(cache, np.concatenate([gp, ge])[:, None], input_grad=False)
    return float(d_loss), grads


def sample_embedding(model, x_in, noise):
    mu, logvar = model.encode(x_in)
    return mu + np.exp(0.5 * logvar) * noise


def aemtd_objective(model, x, observed, stage, noise, prior):
    """Full minimax objective on one batch: reconstruction + feature nets +
    generator term, plus the discriminator's loss on the same draws."""
    value, _, parts = reconstruction_objective(model, x, observed, stage, noise)
    x_in = prefix_input(x * observed, model.schema, stage)
    enc = sample_embedding(model, x_in, noise)
    d_loss, _ = discriminator_objective(model, prior, enc)
    return value, d_loss, parts


# ---------------------------------------------------------------------------
# training


def _flat_params(nets):
    out = []
    for n in nets:
        out += n.params()
    return out


def _apply(nets, grads, lr):
    params = _flat_params(nets)
    check_finite_grads(grads)
    for p, g in zip(params, grads):
        p -= lr * g


def split_validation(ds, fraction, rng):
    """Depth-stratified (train_idx, val_idx) split."""
    if fraction <= 0:
        idx = np.arange(ds.n_rows)
        return idx, idx[:0]
    train, val = [], []
    for d in np.unique(ds.observed_depth):
        rows = np.flatnonzero(ds.observed_depth == d)
        rows = rows[rng.permutation(len(rows))]
        m = int(round(fraction * len(rows)))
        if m >= len(rows):
            m = len(rows) - 1
        val.append(rows[:m])
        train.append(rows[m:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def _evaluate(model, x, observed, depth, noise_rng_seed):
    """Per-row reconstruction + feature-net error summed over the stage sweep.

    The adversarial term is left out: its value depends on the discriminator
    of the moment and does not compare across epochs.
    """
    rng = np.random.default_rng(noise_rng_seed)
    cfg = model.config
    total = 0.0
    for s in range(model.schema.n_stages, 0, -1):
        rows = np.flatnonzero(depth >= s)
        if len(rows) == 0:
            continue
        noise = rng.standard_normal((len(rows), model.embed_dim))
        _, _, parts = reconstruction_objective(model, x[rows], observed[rows], s, noise)
        total += (cfg.w_rec * parts["rec"] + cfg.w_fn * parts["fn"]) / len(rows)
    return total


def train_aemtd(ds, cfg=None, model=None, validation=None, config=None):
    """Alternate discriminator and encoder/decoder SGD steps, sweeping stages S..1
    every epoch; return the model with the best validation objective."""
    cfg = cfg or SgdConfig(learning_rate=DEFAULT_LEARNING_RATE)
    if ds.n_rows == 0 or (ds.observed_depth >= 1).sum() == 0:
        raise ValidationError("training data has no rows with observed features")
    if model is None:
        model = AemtdModel.initialize(ds.schema, config, seed=cfg.seed)
    elif model.schema.column_names != ds.schema.column_names or model.schema.widths != ds.schema.widths:
        raise ValidationError("model schema does not match the dataset")
    if cfg.max_epochs == 0:
        return model
    rng = np.random.default_rng(cfg.seed)
    model = model.copy()
    x_all = np.array(ds.features)
    obs_all = ds.observed_mask()
    if validation is None:
        tr, va = split_validation(ds, cfg.validation_fraction, rng)
        if len(va) == 0:
            va = tr
        x_val, obs_val, depth_val = x_all[va], obs_all[va], ds.observed_depth[va]
    else:
        tr = np.arange(ds.n_rows)
        x_val, obs_val, depth_val = np.array(validation.features), validation.observed_mask(), validation.observed_depth
    depth = ds.observed_depth
    k, lr, de = cfg.batch_size, cfg.learning_rate, model.embed_dim
    S = ds.n_stages
    eval_seed = cfg.seed + 7919

    best = _evaluate(model, x_val, obs_val, depth_val, eval_seed)
    model.history = [{"epoch": 0, "val_objective": best}]
    best_model, best_epoch, stale = model.copy(), 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        train_sum, train_batches = 0.0, 0
        for s in range(S, 0, -1):
            rows = tr[depth[tr] >= s]
            if len(rows) == 0:
                continue
            perm_d = rng.permutation(rows)
            perm_g = rng.permutation(rows)
            width = ds.schema.width(s)
            for start in range(0, len(rows), k):
                bd = perm_d[start : start + k]
                x_in = x_all[bd].copy()
                x_in[:, width:] = 0.0
                enc = sample_embedding(model, x_in, rng.standard_normal((len(bd), de)))
                prior = rng.standard_normal((len(bd), de))
                for _ in range(model.config.disc_steps):
                    d_loss, g_gamma = discriminator_objective(model, prior, enc)
                    try:
                        _apply(model.gamma(), g_gamma, lr * model.config.disc_lr_scale)
                    except DivergenceError as exc:
                        raise DivergenceError("discriminator diverged", epoch=epoch, stage=s, layer=exc.layer) from None

                bg = perm_g[start : start + k]
                noise = rng.standard_normal((len(bg), de))
                value, grads, _ = reconstruction_objective(model, x_all[bg], obs_all[bg], s, noise)
                if not (math.isfinite(value) and math.isfinite(d_loss)):
                    raise DivergenceError("non-finite loss", epoch=epoch, stage=s)
                try:
                    _apply(model.theta() + model.phi(), grads, lr)
                except DivergenceError as exc:
                    raise DivergenceError("encoder/decoder diverged", epoch=epoch, stage=s, layer=exc.layer) from None
                train_sum += value
                train_batches += 1
        val = _evaluate(model, x_val, obs_val, depth_val, eval_seed)
        if not math.isfinite(val):
            raise DivergenceError("non-finite validation objective", epoch=epoch)
        model.history.append({"epoch": epoch, "val_objective": val, "train_objective": train_sum / max(train_batches, 1)})
        if val < best:
            best, best_model, best_epoch, stale = val, model.copy(), epoch, 0
        else:
            stale += 1
            if stale > cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    best_model.history = model.history
    best_model.best_epoch = best_epoch
    return best_model


def stage_embeddings(model, ds, seed=0, sample=True):
    """Embeddings of every stage input the model trains on: for s = S..1, the
    stage-s prefix of each row that reached s."""
    rng = np.random.default_rng(seed)
    out = []
    x = np.array(ds.features)
    for s in range(ds.n_stages, 0, -1):
        rows = ds.rows_at_least(s)
        if len(rows) == 0:
            continue
        x_in = prefix_input(x[rows], ds.schema, s)
        if sample:
            out.append(sample_embedding(model, x_in, rng.standard_normal((len(rows), model.embed_dim))))
        else:
            out.append(model.encode(x_in)[0])
    return np.vstack(out)


# ---------------------------------------------------------------------------
# completion


@dataclass(frozen=True, eq=False)
class CompletedDataset:
    """Full-width features for every row plus which cells were originally observed."""

    features: np.ndarray
    provenance_mask: np.ndarray
    source: FunnelDataset

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64, copy=True)
        pm = np.array(self.provenance_mask, dtype=bool, copy=True)
        if x.shape != self.source.features.shape or pm.shape != x.shape:
            raise ShapeError("completed features must match the source dataset shape")
        if not np.isfinite(x).all():
            bad = int(np.flatnonzero(~np.isfinite(x).all(axis=1))[0])
            raise CompletionError(bad, "non-finite completed features")
        if not np.array_equal(pm, self.source.observed_mask()):
            raise ValidationError("provenance mask must match the source observation mask")
        x.setflags(write=False)
        pm.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "provenance_mask", pm)

    @property
    def n_rows(self):
        return self.features.shape[0]

    @property
    def schema(self):
        return self.source.schema

    @property
    def observed_depth(self):
        return self.source.observed_depth

    @property
    def row_ids(self):
        return self.source.row_ids

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        sub = self.source.subset(idx)
        order = np.argsort(self.source.observed_depth[idx], kind="stable")
        return CompletedDataset(self.features[idx][order], sub.observed_mask(), sub)


def complete(model, ds, splice_policy=PAPER_FAITHFUL):
    """Fill every row's unobserved columns from the future head.

    Each row is encoded at the embedding mean of its own observed prefix.
    ``paper_faithful`` replaces observed cells by their reconstruction,
    ``keep_observed`` leaves them as they were.
    """
    if splice_policy not in SPLICE_POLICIES:
        raise ValidationError(f"splice_policy must be one of {SPLICE_POLICIES}")
    if model.schema.column_names != ds.schema.column_names or model.schema.widths != ds.schema.widths:
        raise ValidationError("model schema does not match the dataset")
    x = np.array(ds.features)
    observed = ds.observed_mask()
    out = x.copy()
    for d in np.unique(ds.observed_depth):
        rows = np.flatnonzero(ds.observed_depth == d)
        mu, _ = model.encode(prefix_input(x[rows], ds.schema, int(d)))
        rec, fut = model.decode(mu)
        bad = ~np.isfinite(rec).all(axis=1) | ~np.isfinite(fut).all(axis=1)
        if bad.any():
            raise CompletionError(int(ds.row_ids[rows[np.flatnonzero(bad)[0]]]))
        obs = observed[rows]
        filled = np.where(obs, rec if splice_policy == PAPER_FAITHFUL else x[rows], fut)
        out[rows] = filled
    return CompletedDataset(out, observed, ds)


def write_completed_csv(cd, path):
    ds = cd.source
    S = ds.n_stages
    header = list(ds.schema.column_names) + [DEPTH_COLUMN, OUTCOME_COLUMN]
    if ds.stage_outcomes is not None:
        header += [f"{STAGE_OUTCOME_PREFIX}{s}" for s in range(1, S + 1)]
    header.append(GENERATED_COLUMN)
    with atomic_open(path, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(cd.n_rows):
            row = [repr(float(v)) for v in cd.features[i]]
            row += [str(int(ds.observed_depth[i])), _format_outcome(ds.outcome_at_depth[i])]
            if ds.stage_outcomes is not None:
                row += [_format_outcome(v) for v in ds.stage_outcomes[i]]
            row.append(";".join(str(j) for j in np.flatnonzero(~cd.provenance_mask[i])))
            w.writerow(row)


def read_completed_csv(path, schema):
    """Load a completed CSV; the generated-column list must match ``schema``'s
    observation pattern for each row's depth."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file: no header row", row=1)
    header = [h.strip() for h in rows[0]]
    pos = {h: i for i, h in enumerate(header)}
    for name in (*schema.column_names, DEPTH_COLUMN, GENERATED_COLUMN):
        if name not in pos:
            raise ValidationError(f"completed data is missing column {name!r}")
    S = schema.n_stages
    stage_cols = [f"{STAGE_OUTCOME_PREFIX}{s}" for s in range(1, S + 1)]
    explicit = all(c in pos for c in stage_cols)
    feats, depth, outcome, stage_out, generated = [], [], [], [], []
    for line, rec in enumerate(rows[1:], start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(rec)}", row=line)
        try:
            feats.append([float(rec[pos[c]]) for c in schema.column_names])
            d = int(rec[pos[DEPTH_COLUMN]])
        except ValueError as exc:
            raise ParseError(str(exc), row=line) from None
        if not 0 <= d <= S:
            raise ValidationError(f"depth {d} outside [0, {S}] at row {line}")
        depth.append(d)
        if explicit:
            so = [_parse_outcome(rec[pos[c]], line, c, schema.positive_label_name) for c in stage_cols]
            stage_out.append(so)
            outcome.append(so[d - 1] if d else 0)
        else:
            outcome.append(_parse_outcome(rec[pos[OUTCOME_COLUMN]], line, OUTCOME_COLUMN, schema.positive_label_name))
        gen = rec[pos[GENERATED_COLUMN]].strip()
        generated.append([int(j) for j in gen.split(";")] if gen else [])
    if not feats:
        raise ParseError("no data rows")
    x = np.array(feats)
    depth = np.array(depth)
    so = np.array(stage_out, dtype=np.int8) if explicit else None
    order = np.argsort(depth, kind="stable")
    src = FunnelDataset(x[order], depth[order], np.array(outcome, dtype=np.int8)[order], schema, order, None if so is None else so[order])
    expected = src.observed_mask()
    prov = np.ones_like(expected)
    for new_i, old_i in enumerate(order):
        prov[new_i, generated[old_i]] = False
    if not np.array_equal(prov, expected):
        raise ValidationError("generated-column provenance does not match the schema and depths")
    return CompletedDataset(x[order], prov, src)
