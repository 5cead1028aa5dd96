"""Command line interface: train, predict, evaluate, hpo, flops.

Every run directory receives the fully resolved configuration, so a run can
be replayed exactly from its artifacts. All commands are deterministic for a
fixed --seed.

Exit codes (also shown in --help):
  0  all outputs written
  2  bad command line (argparse)
  3  configuration error (bad hyperparameter, metric, config/space file)
  4  CSV ingestion error (unreadable, ragged, empty)
  5  schema error (missing/mismatched columns, bad target)
  6  preprocessing fit error (e.g. an all-missing column)
  7  training diverged (non-finite loss or validation metric)
  8  checkpoint error (truncated, wrong version, fingerprint mismatch)
  9  study error (every trial failed)
 10  internal contract violation (library bug; please report)
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from typing import Optional

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import TASK_CLASSIFICATION, encode, prepare, read_table
from .ensemble import predict_ensemble, predict_point
from .errors import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    FitError,
    IngestionError,
    RuleNetError,
    SchemaError,
    StudyError,
)
from .hpo import (
    DEFAULT_RUNGS,
    AblationSwitches,
    SearchSpace,
    run_study,
    sensitivity,
    write_study_files,
)
from .model import RuleNetConfig, encoder_only_flops, estimate_flops
from .training import default_metric, evaluate, train

EXIT_OK = 0
_EXIT_CODES = (
    (ConfigError, 3),
    (IngestionError, 4),
    (SchemaError, 5),
    (FitError, 6),
    (DivergenceError, 7),
    (CheckpointError, 8),
    (StudyError, 9),
)
EXIT_INTERNAL = 10

_EPILOG = """\
exit codes:
  0   all outputs written
  2   bad command line
  3   configuration error     4   CSV ingestion error
  5   schema error            6   preprocessing fit error
  7   training diverged       8   checkpoint error
  9   study error (all trials failed)
  10  internal error
"""


def exit_code_for(err: RuleNetError) -> int:
    for cls, code in _EXIT_CODES:
        if isinstance(err, cls):
            return code
    return EXIT_INTERNAL


# ---------------------------------------------------------------------------
# run configuration file

# model hyperparameters that may appear in a run config file; n_features,
# task and n_classes always come from the data
MODEL_KEYS = tuple(
    f.name
    for f in dataclasses.fields(RuleNetConfig)
    if f.name not in ("n_features", "task", "n_classes")
)

RUN_DEFAULTS = {
    "data": None,  # CSV path; --data overrides
    "target": None,  # target column name; default: last column
    "task": None,  # "regression" / "classification"; default: inferred
    "fractions": (0.6, 0.2, 0.2),  # train/val/test
    "seed": 0,
    "ensemble_k": 16,  # rollouts for prediction with --ensemble
    "metric": None,  # "rmse" / "accuracy"; default: by task
    "dtype": "float32",
}

_DTYPES = {"float32": np.float32, "float64": np.float64}


def resolve_run_config(config_path=None, **flag_overrides) -> dict:
    """Defaults < config file < command-line flags; unknown keys rejected."""
    resolved = dict(RUN_DEFAULTS)
    for f in dataclasses.fields(RuleNetConfig):
        if f.name in MODEL_KEYS:
            resolved[f.name] = f.default

    if config_path is not None:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                obj = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config file {config_path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {config_path} is not valid JSON: {e}") from e
        if not isinstance(obj, dict):
            raise ConfigError(f"config file {config_path} must hold a JSON object")
        unknown = set(obj) - set(resolved)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(obj)

    for key, value in flag_overrides.items():
        if value is not None:
            resolved[key] = value

    if resolved["dtype"] not in _DTYPES:
        raise ConfigError(
            f"dtype must be one of {sorted(_DTYPES)}, got {resolved['dtype']!r}"
        )
    fr = resolved["fractions"]
    if not isinstance(fr, (list, tuple)):
        raise ConfigError(f"fractions must be a list of 3 numbers, got {fr!r}")
    resolved["fractions"] = tuple(float(x) for x in fr)
    return resolved


def _prepare_from(cfg: dict):
    if not cfg["data"]:
        raise ConfigError('no dataset: pass --data or set "data" in the config file')
    hint = {cfg["target"]: "target"} if cfg["target"] else None
    return prepare(
        cfg["data"],
        n_quantiles=cfg["n_quantiles"],
        fractions=cfg["fractions"],
        seed=cfg["seed"],
        schema_hint=hint,
        task=cfg["task"],
    )


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _echo_config(out_dir, cfg: dict, config: Optional[RuleNetConfig] = None, **extra):
    """The resolved-run record: everything needed to replay the run."""
    echo = {k: cfg[k] for k in sorted(cfg)}
    if config is not None:
        echo.update(config.to_json())  # adds the data-derived fields too
    echo.update(extra)
    path = os.path.join(out_dir, "config.json")
    _write_json(path, echo)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = resolve_run_config(args.config, data=args.data, seed=args.seed)
    prepared = _prepare_from(cfg)
    prep, splits = prepared.prep, prepared.splits
    config = RuleNetConfig.for_schema(prep.schema, **{k: cfg[k] for k in MODEL_KEYS})

    os.makedirs(args.out, exist_ok=True)
    history_path = os.path.join(args.out, "history.jsonl")
    model, history = train(
        prep,
        splits["train"],
        splits["val"],
        config,
        seed=cfg["seed"],
        dtype=_DTYPES[cfg["dtype"]],
        metrics_path=history_path,
    )

    ckpt_path = os.path.join(args.out, "checkpoint.rnc")
    save_checkpoint(model, ckpt_path)
    config_path = _echo_config(args.out, cfg, config)

    metric = cfg["metric"] or default_metric(config.task)
    final = {
        "metric": metric,
        "best_epoch": history.best_epoch,
        "epochs_run": history.epochs_run,
        "val_score": evaluate(model, splits["val"], metric),
        "test_score": evaluate(model, splits["test"], metric),
    }
    metrics_path = os.path.join(args.out, "metrics.json")
    _write_json(metrics_path, final)

    for path in (ckpt_path, history_path, config_path, metrics_path):
        print(f"wrote {path}")
    print(f"{metric}: val {final['val_score']:.6g}, test {final['test_score']:.6g}")
    return EXIT_OK


def _format_cell(value) -> str:
    if isinstance(value, str):
        return value
    return repr(float(value))


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    table = read_table(args.data)
    split_ = encode(model.prep, table)

    if args.ensemble is not None:
        ens = predict_ensemble(model, split_, k=args.ensemble, seed=args.seed)
        probs_or_values, std = ens.mean, ens.std
        header = ["row_id", "prediction", "uncertainty"]
    else:
        probs_or_values, std = predict_point(model, split_), None
        header = ["row_id", "prediction"]

    if model.config.task == TASK_CLASSIFICATION:
        vocab = model.prep.schema.target.vocab
        winners = np.argmax(probs_or_values, axis=1)
        predictions = [vocab[int(i)] for i in winners]
    else:
        predictions = list(probs_or_values)

    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, pred in enumerate(predictions):
            row = [str(i), _format_cell(pred)]
            if std is not None:
                row.append(_format_cell(std[i]))
            writer.writerow(row)

    print(f"wrote {args.out} ({split_.n_rows} rows)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    table = read_table(args.data)
    target_name = model.prep.schema.target.name
    if target_name not in table.columns:
        raise SchemaError(f"column {target_name!r} is required for evaluation")
    split_ = encode(model.prep, table)

    metric = args.metric or default_metric(model.config.task)
    record = {"metric": metric, "score": evaluate(model, split_, metric)}
    if args.out:
        _write_json(args.out, record)
    print(json.dumps(record))  # contract: the last line is the JSON record
    return EXIT_OK


def _parse_rungs(text: str) -> tuple:
    try:
        rungs = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"rungs must be comma-separated integers, got {text!r}") from None
    return rungs


def cmd_hpo(args) -> int:
    cfg = resolve_run_config(args.config, data=args.data, seed=args.seed)
    prepared = _prepare_from(cfg)
    prep, splits = prepared.prep, prepared.splits

    if args.space:
        try:
            with open(args.space, "r", encoding="utf-8") as fh:
                space_obj = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read space file {args.space}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"space file {args.space} is not valid JSON: {e}") from e
        space = SearchSpace.from_json(space_obj, batch_size=cfg["batch_size"])
        if "epochs" not in space_obj:
            space = space.pin("epochs", cfg["epochs"])
    else:
        space = SearchSpace.table_default(batch_size=cfg["batch_size"], epochs=cfg["epochs"])

    switches = AblationSwitches(
        disable_masking="no-mask" in args.ablation,
        bypass_decoder="no-dec" in args.ablation,
        fix_nq_to_2="no-quant" in args.ablation,
    )
    space = space.constrained(switches)
    rungs = _parse_rungs(args.rungs) if args.rungs else DEFAULT_RUNGS

    best, records = run_study(
        space,
        prep,
        splits["train"],
        splits["val"],
        n_trials=args.trials,
        seed=cfg["seed"],
        rungs=rungs,
        workers=args.workers,
    )

    os.makedirs(args.out, exist_ok=True)
    write_study_files(args.out, best, records, space)
    _echo_config(
        args.out,
        cfg,
        trials=args.trials,
        workers=args.workers,
        rungs=list(rungs),
        ablation=sorted(args.ablation),
    )

    searched = sorted(n for n, d in space.domains.items() if d.kind != "fixed")
    tables = {
        name: [
            {"bucket": bucket, "mean_score": mean, "count": count}
            for bucket, mean, count in sensitivity(records, name)
        ]
        for name in searched
    }
    sens_path = os.path.join(args.out, "sensitivity.json")
    _write_json(sens_path, tables)

    statuses = {}
    for r in records:
        statuses[r.status] = statuses.get(r.status, 0) + 1
    print(f"wrote {os.path.join(args.out, 'trials.jsonl')}")
    print(f"wrote {os.path.join(args.out, 'best.json')}")
    print(f"wrote {sens_path}")
    print(
        f"best trial {best.trial_id}: {best.metric} score {best.score:.6g} "
        f"({', '.join(f'{k}={v}' for k, v in sorted(statuses.items()))})"
    )
    return EXIT_OK


def cmd_flops(args) -> int:
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config file {args.config}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {args.config} is not valid JSON: {e}") from e
    if "n_features" not in obj:
        raise ConfigError('flops config needs "n_features"')
    # accept a train run's echoed config.json: run-level keys are fine here,
    # anything else is still a typo worth failing on
    model_fields = {f.name for f in dataclasses.fields(RuleNetConfig)}
    unknown = set(obj) - model_fields - set(RUN_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    config = RuleNetConfig.from_json({k: v for k, v in obj.items() if k in model_fields})
    config.validate()

    est = estimate_flops(config)
    eq = encoder_only_flops(config)
    print(f"encoder        : {est.encoder_flops}")
    print(f"decoder        : {est.decoder_flops}")
    print(f"total          : {est.total}")
    print(f"encoder-only equivalent ({config.encoder_layers}+{config.decoder_layers} layers): {eq}")
    print(
        json.dumps(
            {
                "encoder": est.encoder_flops,
                "decoder": est.decoder_flops,
                "total": est.total,
                "encoder_only_equivalent": eq,
            }
        )
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rulenet",
        description="Tabular transformer toolkit: train, predict, evaluate, search.",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model and write a run directory")
    p.add_argument("--data", help="training CSV (last column is the target unless configured)")
    p.add_argument("--config", help="JSON run config; flags override it")
    p.add_argument("--out", required=True, help="run directory for the four artifacts")
    p.add_argument("--seed", type=int, help="seed for split/init/masking (default 0)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write a predictions CSV from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="CSV; the target column may be absent")
    p.add_argument(
        "--ensemble",
        type=int,
        metavar="K",
        help="K stochastic rollouts -> adds an uncertainty column; omit for a point prediction",
    )
    p.add_argument("--seed", type=int, default=0, help="ensemble seed (default 0)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a checkpoint on a labelled CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="CSV with the target column present")
    p.add_argument("--metric", choices=("rmse", "accuracy"), help="default: by task")
    p.add_argument("--out", help="also write the JSON record here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("hpo", help="random search with successive-halving pruning")
    p.add_argument("--data", help="training CSV")
    p.add_argument("--config", help="JSON run config (seed, fractions, batch size reference)")
    p.add_argument("--space", help="JSON search-space overlay on the default box")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument(
        "--rungs",
        help="comma-separated pruning epochs (default 11,33,100)",
    )
    p.add_argument(
        "--ablation",
        action="append",
        default=[],
        choices=("no-mask", "no-dec", "no-quant"),
        help="constrain the space; repeatable",
    )
    p.add_argument("--seed", type=int, help="study seed (default 0)")
    p.add_argument("--out", required=True, help="study directory")
    p.set_defaults(func=cmd_hpo)

    p = sub.add_parser("flops", help="print the attention cost breakdown for a config")
    p.add_argument("--config", required=True, help="JSON with RuleNetConfig fields incl. n_features")
    p.set_defaults(func=cmd_flops)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RuleNetError as e:
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
