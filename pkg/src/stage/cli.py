"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or usage, 2 training divergence or
other numeric failure, 3 file-system errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings

import numpy as np

from . import __version__
from ._io import atomic_open, read_json, write_json
from .aemtd import (
    DEFAULT_LEARNING_RATE,
    KEEP_OBSERVED,
    PAPER_FAITHFUL,
    AemtdConfig,
    AemtdModel,
    complete,
    read_completed_csv,
    train_aemtd,
    write_completed_csv,
)
from .baselines import (
    COMPLETED,
    RAW,
    MulticlassModel,
    StageBinaryBank,
    stages_passed,
    train_bank,
    train_imc,
)
from .errors import NumericError, StageError, ValidationError
from .evaluation import AEMTD_IMC, AEMTD_MBT, N_MBT, ExperimentPlan, run_plan, write_report
from .funnel import (
    FILL_POLICIES,
    PROPAGATE_REJECT,
    FeatureEncoder,
    LabelMatrix,
    StageSchema,
    SynthFunnelConfig,
    ingest_csv,
    read_labels_csv,
    read_table,
    synth_funnel,
    to_label_matrix,
    write_csv,
    write_labels_csv,
)
from .mlssl import DEFAULT_BATCH_SIZE, MlsslClassifier, predict, predict_scores, train_mlssl
from .nn import FORMAT_VERSION, SgdConfig

log = logging.getLogger("stage")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
SCHEMA_SUFFIX = ".schema.json"
LABELS_SUFFIX = ".labels.csv"


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        if action.default is None or "default:" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _bool(text):
    t = str(text).strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


# ---------------------------------------------------------------------------
# file helpers


def schema_path_for(data_path):
    return data_path + SCHEMA_SUFFIX


def labels_path_for(data_path):
    return data_path + LABELS_SUFFIX


def _load_schema(args):
    path = args.schema or schema_path_for(args.data)
    if not os.path.exists(path):
        raise FileNotFoundError(f"schema file not found: {path} (pass --schema)")
    return StageSchema.from_json(read_json(path))


def _write_schema(schema, data_path):
    write_json(schema_path_for(data_path), schema.to_json())


def _load_funnel(args):
    """An already encoded funnel CSV (as written by ``ingest`` or ``synth``)."""
    return ingest_csv(args.data, _load_schema(args), standardize=False)


def _load_labels(args, ds):
    """Labels aligned to ``ds``'s row order. An explicit file is matched by
    file row position; otherwise labels come from the data's outcomes."""
    if getattr(args, "labels", None):
        labels = read_labels_csv(args.labels, ds.n_stages)
        if labels.shape[0] != ds.n_rows:
            raise ValidationError(f"label file has {labels.shape[0]} rows, data has {ds.n_rows}")
        return labels.subset(ds.row_ids)
    return to_label_matrix(ds, args.fill_policy)


def _check_schema(model_schema, data_schema):
    if model_schema is None:
        return
    if model_schema.column_names != data_schema.column_names or model_schema.widths != data_schema.widths:
        raise ValidationError("model schema does not match the data schema")


def _sgd(args, **extra):
    fields = dict(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        patience=args.patience,
        seed=args.seed,
        validation_fraction=args.validation_fraction,
    )
    fields.update(extra)
    return SgdConfig(**fields)


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args):
    schema = StageSchema.from_json(read_json(args.schema))
    table = read_table(args.data, schema, tuple(args.onehot))
    encoder = FeatureEncoder(standardize=args.standardize).fit(table)
    ds = encoder.transform(table)
    write_csv(ds, args.out)
    _write_schema(ds.schema, args.out)
    write_labels_csv(to_label_matrix(ds, args.fill_policy), ds.schema, labels_path_for(args.out))
    if args.encoder_out:
        write_json(args.encoder_out, encoder.to_json())
    log.info("ingested %d rows, stage counts %s", ds.n_rows, ds.stage_counts().tolist())


def cmd_synth(args):
    S = args.stages
    rates = args.survival_rates or ((0.5, 0.2, 0.1) if S == 3 else (0.5,) * S)
    dims = args.dims or (4,) * S
    if len(rates) != S or len(dims) != S:
        raise ValidationError(f"--survival-rates and --dims need {S} entries")
    cfg = SynthFunnelConfig(args.n0, rates, dims, args.sigma, args.label_noise, args.seed)
    ds, labels = synth_funnel(cfg)
    write_csv(ds, args.out)
    _write_schema(ds.schema, args.out)
    write_labels_csv(labels, ds.schema, labels_path_for(args.out))


def cmd_train_aemtd(args):
    ds = _load_funnel(args)
    config = AemtdConfig(
        embed_dim=args.embed_dim,
        w_rec=args.w_rec,
        w_fn=args.w_fn,
        w_gan=args.w_gan,
        binary_loss=args.binary_loss,
        disc_lr_scale=args.disc_lr_scale,
        disc_steps=args.disc_steps,
    )
    model = train_aemtd(ds, _sgd(args), config=config)
    write_json(args.out, model.to_json())
    log.info("best epoch %d", model.best_epoch)


def cmd_complete(args):
    model = AemtdModel.from_json(read_json(args.model))
    ds = _load_funnel(args)
    _check_schema(model.schema, ds.schema)
    cd = complete(model, ds, PAPER_FAITHFUL if args.splice == "paper" else KEEP_OBSERVED)
    write_completed_csv(cd, args.out)
    _write_schema(ds.schema, args.out)


def _load_completed(args):
    schema = _load_schema(args)
    return read_completed_csv(args.data, schema)


def cmd_train_mlssl(args):
    cd = _load_completed(args)
    labels = _load_labels(args, cd.source)
    clf = MlsslClassifier.initialize(
        cd.schema.total_width,
        cd.schema.n_stages,
        hidden=args.hidden,
        seed=args.seed,
        lam=args.lam,
        k_nn=args.knn,
        h_nn=args.hnn,
        term_weights=(args.w_lc, args.w_sls, args.w_tc),
        mask_missing=args.mask_missing,
        graph_mode=args.graph_mode,
        schema=cd.schema,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        clf = train_mlssl(cd, labels, clf, _sgd(args))
    for note in clf.warnings:
        log.warning(note)
    write_json(args.out, clf.to_json())


def cmd_baseline(args):
    if args.setting == N_MBT:
        ds = _load_funnel(args)
        x, depth = ds.features, ds.observed_depth
    else:
        cd = _load_completed(args)
        ds, x, depth = cd.source, cd.features, cd.observed_depth
    labels = _load_labels(args, ds)
    cfg = _sgd(args)
    if args.setting == AEMTD_IMC:
        model = train_imc(x, stages_passed(labels), ds.n_stages, args.l2, cfg, schema=ds.schema)
    else:
        mode = RAW if args.setting == N_MBT else COMPLETED
        model = train_bank(x, labels, depth, ds.schema, mode, args.l2, cfg)
    write_json(args.out, model.to_json())


def _load_model(doc):
    kind = doc.get("kind")
    if kind == "mlssl":
        return MlsslClassifier.from_json(doc)
    if kind == "stage_bank":
        return StageBinaryBank.from_json(doc)
    if kind == "multiclass":
        return MulticlassModel.from_json(doc)
    raise ValidationError(f"unsupported model kind {kind!r}")


def cmd_predict(args):
    model = _load_model(read_json(args.clf))
    schema = _load_schema(args)
    completed_input = False
    with open(args.data, encoding="utf-8") as fh:
        completed_input = "__generated_cols" in fh.readline()
    if args.aemtd:
        aemtd = AemtdModel.from_json(read_json(args.aemtd))
        ds = ingest_csv(args.data, schema, standardize=False)
        _check_schema(aemtd.schema, ds.schema)
        x = complete(aemtd, ds).features
    elif completed_input:
        cd = read_completed_csv(args.data, schema)
        ds, x = cd.source, cd.features
    else:
        ds = ingest_csv(args.data, schema, standardize=False)
        x = np.array(ds.features)
    _check_schema(model.schema, ds.schema)
    if isinstance(model, MlsslClassifier):
        z, scores = predict(model, x), predict_scores(model, x)
        score_names = [f"score_{s}" for s in ds.schema.stage_names]
    elif isinstance(model, StageBinaryBank):
        z, scores = model.predict(x), model.decision_function(x)
        score_names = [f"score_{s}" for s in ds.schema.stage_names]
    else:
        z, scores = model.predict(x), model.predict_proba(x)
        score_names = [f"prob_passed_{c}" for c in range(scores.shape[1])]
    # back to the input file's row order
    order = np.argsort(ds.row_ids, kind="stable")
    with atomic_open(args.out, newline="") as fh:
        fh.write(",".join(["row"] + [f"pred_{s}" for s in ds.schema.stage_names] + score_names) + "\n")
        for i in order:
            cells = [str(int(ds.row_ids[i]))] + [str(int(v)) for v in z[i]] + [repr(float(v)) for v in scores[i]]
            fh.write(",".join(cells) + "\n")


def cmd_evaluate(args):
    plan = ExperimentPlan.load(args.plan)
    report = run_plan(plan, base_dir=os.path.dirname(os.path.abspath(args.plan)), jobs=args.jobs)
    write_report(report, args.out)
    for err in report.errors:
        log.warning("run %s setting %s: %s", err["run"], err["setting"], err["error"])


# ---------------------------------------------------------------------------
# parser


def _sgd_flags(p, lr, batch_size=32, epochs=200, validation_fraction=0.1):
    p.add_argument("--lr", type=float, default=lr, help="SGD learning rate")
    p.add_argument("--batch-size", type=int, default=batch_size, help="minibatch size")
    p.add_argument("--epochs", type=int, default=epochs, help="maximum training epochs")
    p.add_argument("--patience", type=int, default=20, help="epochs without improvement before stopping")
    p.add_argument("--validation-fraction", type=float, default=validation_fraction, help="share of rows held out to pick the best epoch")
    p.add_argument("--seed", type=int, default=0, help="random seed")


def _data_flags(p, schema_help="stage schema JSON (default: <data>.schema.json)"):
    p.add_argument("--data", required=True, help="input CSV")
    p.add_argument("--schema", default=None, help=schema_help)


def _label_flags(p):
    p.add_argument("--labels", default=None, help="label CSV; derived from the data's outcomes when omitted")
    p.add_argument("--fill-policy", choices=FILL_POLICIES, default=PROPAGATE_REJECT, help="label encoding after a rejection")


def build_parser():
    fmt = _HelpFormatter
    parser = _Parser(prog="stage", description="Multi-stage funnel completion and classification.", formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__} (model format {FORMAT_VERSION})")
    parser.add_argument("--config", default=None, help="JSON file of flag defaults (flags override it)")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="encode and standardize a raw funnel CSV", formatter_class=fmt)
    p.add_argument("--data", required=True, help="raw CSV")
    p.add_argument("--schema", required=True, help="stage schema JSON")
    p.add_argument("--out", required=True, help="encoded CSV (schema and labels written beside it)")
    p.add_argument("--onehot", type=lambda s: tuple(c for c in s.split(",") if c), default=(), help="comma-separated categorical columns")
    p.add_argument("--standardize", type=_bool, default=True, help="standardize continuous columns")
    p.add_argument("--fill-policy", choices=FILL_POLICIES, default=PROPAGATE_REJECT, help="label encoding after a rejection")
    p.add_argument("--encoder-out", default=None, help="save the fitted encoder as JSON")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic funnel", formatter_class=fmt)
    p.add_argument("--n0", type=int, default=1000, help="initial population")
    p.add_argument("--stages", type=int, default=3, help="number of stages")
    p.add_argument("--survival-rates", type=_floats, default=None, help="per-stage pass rates (default 0.5,0.2,0.1 for 3 stages, else 0.5 each)")
    p.add_argument("--dims", type=_ints, default=None, help="features added per stage (default 4 each)")
    p.add_argument("--sigma", type=float, default=0.5, help="noise on later-stage features")
    p.add_argument("--label-noise", type=float, default=0.0, help="share of swapped decisions per stage")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", required=True, help="output CSV (schema and labels written beside it)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-aemtd", help="train the feature-completion autoencoder", formatter_class=fmt)
    _data_flags(p)
    p.add_argument("--out", required=True, help="model JSON")
    p.add_argument("--embed-dim", type=int, default=16, help="embedding width")
    p.add_argument("--w-rec", type=float, default=1.0, help="reconstruction weight")
    p.add_argument("--w-fn", type=float, default=1.0, help="future-feature weight")
    p.add_argument("--w-gan", type=float, default=1.0, help="adversarial weight")
    p.add_argument("--binary-loss", choices=("bernoulli", "literal"), default="bernoulli", help="loss on binary columns")
    p.add_argument("--disc-lr-scale", type=float, default=AemtdConfig.disc_lr_scale, help="discriminator learning-rate multiplier")
    p.add_argument("--disc-steps", type=int, default=AemtdConfig.disc_steps, help="discriminator updates per batch")
    _sgd_flags(p, DEFAULT_LEARNING_RATE)
    p.set_defaults(func=cmd_train_aemtd)

    p = sub.add_parser("complete", help="fill unobserved columns with a trained autoencoder", formatter_class=fmt)
    p.add_argument("--model", required=True, help="autoencoder model JSON")
    _data_flags(p)
    p.add_argument("--out", required=True, help="completed CSV")
    p.add_argument("--splice", choices=("paper", "keep"), default="paper", help="observed cells: reconstructed (paper) or original (keep)")
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("train-mlssl", help="train the multi-label stage classifier", formatter_class=fmt)
    _data_flags(p, "stage schema JSON (default: <data>.schema.json)")
    _label_flags(p)
    p.add_argument("--out", required=True, help="classifier JSON")
    p.add_argument("--lambda", dest="lam", type=float, default=0.5, help="L2 penalty on weights")
    p.add_argument("--knn", type=int, default=20, help="neighbours per row in the similarity graph")
    p.add_argument("--hnn", type=int, default=5, help="neighbour rank that sets each row's kernel width")
    p.add_argument("--mask-missing", type=_bool, default=True, help="skip missing labels in the label term")
    p.add_argument("--w-lc", type=float, default=1.0, help="label-consistency weight")
    p.add_argument("--w-sls", type=float, default=1.0, help="smoothness weight")
    p.add_argument("--w-tc", type=float, default=1.0, help="sequence-consistency weight")
    p.add_argument("--graph-mode", choices=("batch", "global"), default="batch", help="similarity graph per minibatch or over all rows")
    p.add_argument("--hidden", type=_ints, default=(64, 32), help="hidden layer widths")
    _sgd_flags(p, 1e-3, batch_size=DEFAULT_BATCH_SIZE, validation_fraction=0.0)
    p.set_defaults(func=cmd_train_mlssl)

    p = sub.add_parser("baseline", help="train a reference classifier", formatter_class=fmt)
    p.add_argument("--setting", choices=(N_MBT, AEMTD_MBT, AEMTD_IMC), required=True, help="n-mbt reads raw data, the others completed data")
    _data_flags(p)
    _label_flags(p)
    p.add_argument("--out", required=True, help="model JSON")
    p.add_argument("--l2", type=float, default=1e-3, help="L2 penalty")
    _sgd_flags(p, 1e-2, epochs=100)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("predict", help="per-stage decisions for every row", formatter_class=fmt)
    p.add_argument("--clf", required=True, help="classifier JSON (mlssl, stage bank or multiclass)")
    _data_flags(p)
    p.add_argument("--aemtd", default=None, help="autoencoder JSON used to complete raw data first")
    p.add_argument("--out", required=True, help="prediction CSV")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="run an experiment plan", formatter_class=fmt)
    p.add_argument("--plan", required=True, help="plan JSON")
    p.add_argument("--out", required=True, help="output directory for report.csv and manifest.json")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _apply_config(parser, argv):
    """Load ``--config`` (top-level keys apply everywhere, a section named
    after the subcommand overrides them) as parser defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    doc = read_json(known.config)
    if not isinstance(doc, dict):
        raise ValidationError("config file must hold a JSON object")
    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, sp in sub_action.choices.items():
        dests = {a.dest for a in sp._actions}
        values = {k.replace("-", "_"): v for k, v in doc.items() if not isinstance(v, dict)}
        values.update({k.replace("-", "_"): v for k, v in doc.get(name, {}).items()})
        if "lambda" in values:
            values["lam"] = values.pop("lambda")
        known_values = {}
        for k, v in values.items():
            if k not in dests:
                continue
            action = next(a for a in sp._actions if a.dest == k)
            if isinstance(v, list):
                v = tuple(v)
            elif action.type is not None and isinstance(v, str):
                v = action.type(v)
            known_values[k] = v
            action.required = False
        sp.set_defaults(**known_values)


def _validate(args):
    checks = {
        "epochs": lambda v: v >= 0,
        "batch_size": lambda v: v >= 1,
        "patience": lambda v: v >= 0,
        "lr": lambda v: 0 < v <= 1,
        "jobs": lambda v: v >= 1,
        "knn": lambda v: v >= 1,
        "hnn": lambda v: v >= 1,
        "lam": lambda v: v >= 0,
        "l2": lambda v: v >= 0,
        "n0": lambda v: v >= 1,
        "stages": lambda v: v >= 1,
        "embed_dim": lambda v: v >= 1,
    }
    for name, ok in checks.items():
        if hasattr(args, name) and not ok(getattr(args, name)):
            raise ValidationError(f"invalid value for --{name.replace('_', '-')}: {getattr(args, name)}")
    if hasattr(args, "knn") and args.hnn > args.knn:
        raise ValidationError("--hnn must not exceed --knn")


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except StageError as exc:
        print(f"stage: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"stage: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (json.JSONDecodeError, argparse.ArgumentTypeError) as exc:
        print(f"stage: error: invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:
        return EXIT_INVALID if exc.code not in (0, None) else EXIT_OK
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        _validate(args)
        args.func(args)
    except NumericError as exc:
        print(f"stage: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except StageError as exc:
        print(f"stage: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        print(f"stage: error: malformed input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"stage: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
