"""Command-line entry point: train, eval, gradcheck, synth, flops, ablate.

Exit codes: 0 success, 1 configuration error, 2 data/file error, 3 numeric
failure (NaN loss or failed gradient check).  Commands never modify their
input files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from .data import (PreprocessConfig, load_emgb, save_emgb, split_ratio,
                   synth_generate)
from .errors import ConfigError, DataError, GradientError, NumericError
from .model import (AblationFlags, ModelConfig, StreamAConfig, StreamBConfig,
                    StreamCConfig, build, count_flops, load_checkpoint,
                    save_checkpoint)
from .rng import RngState
from .train import (ABLATION_ROWS, PRESETS, TrainConfig, ablate,
                    ablation_table, cross_validate, evaluate, fit,
                    gradcheck_model, make_train_config)


# ---------------------------------------------------------------------------
# config file handling
# ---------------------------------------------------------------------------

_SECTION_TYPES = {"model": ModelConfig, "train": TrainConfig,
                  "preprocess": PreprocessConfig, "ablation": AblationFlags}
_NESTED_MODEL = {"stream_a": StreamAConfig, "stream_b": StreamBConfig,
                 "stream_c": StreamCConfig}


def _check_keys(given: dict, cls, where: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(given) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)} "
                          f"(known: {sorted(known)})")


def load_cli_config(path) -> dict:
    """Schema-checked JSON config {model, train, preprocess, ablation};
    unknown keys anywhere are rejected."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError("config file must be a JSON object")
    unknown = set(doc) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)} "
                          f"(known: {sorted(_SECTION_TYPES)})")
    for section, cls in _SECTION_TYPES.items():
        if section in doc:
            _check_keys(doc[section], cls, f"section '{section}'")
    model = doc.get("model", {})
    for name, cls in _NESTED_MODEL.items():
        if name in model:
            _check_keys(model[name], cls, f"model.{name}")
    return doc


def _model_config_from(doc: dict, channels: int, window: int,
                       num_classes: int) -> ModelConfig:
    """ModelConfig from the config-file section, with the data-determined
    extents filled in unless the file pins them explicitly."""
    section = dict(doc.get("model", {}))
    streams = {}
    for name, cls in _NESTED_MODEL.items():
        sub = dict(section.pop(name, {}))
        if "dilations" in sub:
            sub["dilations"] = tuple(sub["dilations"])
        streams[name] = cls(**sub)
    section.setdefault("channels", channels)
    section.setdefault("window", window)
    section.setdefault("num_classes", num_classes)
    return ModelConfig(**section, **streams)


def _train_config_from(doc: dict, preset: str | None, seed: int | None,
                       epochs: int | None) -> TrainConfig:
    overrides = dict(doc.get("train", {}))
    if seed is not None:  # explicit flag beats the config file
        overrides["seed"] = seed
    if epochs is not None:
        overrides["epochs"] = epochs
    return make_train_config(preset, **overrides)


def _flags_from(doc: dict) -> AblationFlags:
    return AblationFlags(**doc.get("ablation", {}))


def _preprocess_from(doc: dict) -> PreprocessConfig:
    section = dict(doc.get("preprocess", {}))
    for key in ("ratios", "train_reps", "test_reps"):
        if key in section:
            section[key] = tuple(section[key])
    return PreprocessConfig(**section)


def _check_data_matches(config: ModelConfig, ds, what: str) -> None:
    problems = []
    if len(ds) and ds.windows.shape[1] != config.channels:
        problems.append(f"channels {ds.windows.shape[1]} != {config.channels}")
    if len(ds) and ds.windows.shape[2] != config.window:
        problems.append(f"window {ds.windows.shape[2]} != {config.window}")
    if ds.num_classes != config.num_classes:
        problems.append(f"classes {ds.num_classes} != {config.num_classes}")
    if problems:
        raise DataError(f"{what} does not match the model: " + "; ".join(problems))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    doc = load_cli_config(args.config) if args.config else {}
    train_ds = load_emgb(args.data)
    if len(train_ds) == 0:
        raise DataError(f"dataset {args.data} is empty")
    C, W = train_ds.windows.shape[1], train_ds.windows.shape[2]
    config = _model_config_from(doc, C, W, train_ds.num_classes)
    flags = _flags_from(doc)
    tcfg = _train_config_from(doc, args.preset, args.seed, args.epochs)
    pre = _preprocess_from(doc)
    _check_data_matches(config, train_ds, f"training data {args.data}")

    if args.folds:
        return _train_cross_validated(args, config, flags, train_ds, tcfg)

    if args.val:
        val_ds = load_emgb(args.val)
        _check_data_matches(config, val_ds, f"validation data {args.val}")
    else:
        train_ds, val_ds, held_out = split_ratio(train_ds, pre.ratios,
                                                 RngState(tcfg.seed).fork(17))
        print(f"no --val given: split {args.data} {pre.ratios[0]}:"
              f"{pre.ratios[1]}:{pre.ratios[2]}; {len(held_out)} test windows "
              "held out unused")

    params = build(config, flags, RngState(tcfg.seed))
    print(f"model: {params.count()} parameters, training {len(train_ds)} / "
          f"validating {len(val_ds)} windows, {tcfg.epochs} epochs")
    result = fit(params, config, flags, train_ds, val_ds, tcfg)

    save_checkpoint(result.params, config, args.out)
    log_path = args.log or (str(args.out) + ".log.jsonl")
    with open(log_path, "w") as f:
        for record in result.log:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    if result.log:
        last = result.log[-1]
        best = max(r["val_accuracy"] for r in result.log)
        print(f"final val_accuracy={last['val_accuracy']:.2f}% "
              f"(best {best:.2f}% at epoch {result.best_epoch}); "
              f"checkpoint -> {args.out}, log -> {log_path}")
    else:
        print(f"no epochs run; initial parameters saved -> {args.out}")
    return 0


def _train_cross_validated(args, config, flags, ds, tcfg) -> int:
    if args.val:
        raise ConfigError("--folds and --val are mutually exclusive")
    outcomes = cross_validate(config, flags, ds, args.folds, tcfg)
    accs = [o.val_accuracy for o in outcomes]
    for o in outcomes:
        print(f"fold {o.fold}: best val_accuracy={o.val_accuracy:.2f}%")
    print(f"{args.folds}-fold mean val_accuracy={np.mean(accs):.2f}%")
    winner = max(outcomes, key=lambda o: o.val_accuracy)
    save_checkpoint(winner.result.params, config, args.out)
    log_path = args.log or (str(args.out) + ".log.jsonl")
    with open(log_path, "w") as f:
        for o in outcomes:
            for record in o.result.log:
                f.write(json.dumps({"fold": o.fold, **record},
                                   sort_keys=True) + "\n")
    print(f"best fold {winner.fold} checkpoint -> {args.out}, "
          f"log -> {log_path}")
    return 0


def _subject_table(params, config, flags, ds) -> str:
    lines = [f"{'Subject':<8} {'Accuracy':>9} {'Precision':>10} "
             f"{'Recall':>8} {'F1':>8}"]
    for subject in np.unique(ds.subjects):
        sub = ds.subset(np.flatnonzero(ds.subjects == subject))
        m = evaluate(params, config, flags, sub)
        lines.append(f"{int(subject):<8} {m.accuracy:>9.2f} {m.precision:>10.2f} "
                     f"{m.recall:>8.2f} {m.f1:>8.2f}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    params, config, flags = load_checkpoint(args.model)
    ds = load_emgb(args.data)
    if len(ds) == 0:
        raise DataError(f"dataset {args.data} is empty")
    _check_data_matches(config, ds, f"evaluation data {args.data}")
    metrics = evaluate(params, config, flags, ds)
    print(f"accuracy={metrics.accuracy:.2f}% precision={metrics.precision:.2f}% "
          f"recall={metrics.recall:.2f}% f1={metrics.f1:.2f}% "
          f"loss={metrics.loss:.4f}")
    if len(np.unique(ds.subjects)) > 1:
        print(_subject_table(params, config, flags, ds))
    if args.report:
        with open(args.report, "w") as f:
            json.dump(metrics.to_dict(), f, sort_keys=True, indent=2)
        print(f"report -> {args.report}")
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck_model(seed=args.seed, tol=args.tol)
    print(report.summary())
    return 0 if report.passed else 3


def cmd_synth(args) -> int:
    ds = synth_generate(args.classes, args.channels, args.window,
                        args.per_class, RngState(args.seed),
                        noise_std=args.noise_std)
    save_emgb(ds, args.out)
    print(f"wrote {len(ds)} windows ({args.classes} classes x {args.per_class}, "
          f"{args.channels} channels, W={args.window}) -> {args.out}")
    return 0


def cmd_flops(args) -> int:
    if args.config:
        doc = load_cli_config(args.config)
        config = _model_config_from(doc, args.channels, args.input_len,
                                    args.classes)
        flags = _flags_from(doc)
    else:
        config = ModelConfig(channels=args.channels, window=args.input_len,
                             num_classes=args.classes)
        flags = AblationFlags()
    report = count_flops(config, flags, args.input_len)
    print(report.table())
    return 0


def cmd_ablate(args) -> int:
    doc = load_cli_config(args.config) if args.config else {}
    ds = load_emgb(args.data)
    if len(ds) == 0:
        raise DataError(f"dataset {args.data} is empty")
    C, W = ds.windows.shape[1], ds.windows.shape[2]
    config = _model_config_from(doc, C, W, ds.num_classes)
    tcfg = _train_config_from(doc, args.preset, args.seed, args.epochs)
    pre = _preprocess_from(doc)
    _check_data_matches(config, ds, f"data {args.data}")
    train_ds, val_ds, test_ds = split_ratio(ds, pre.ratios,
                                            RngState(tcfg.seed).fork(17))
    rows = ablate(config, ABLATION_ROWS, train_ds, val_ds, test_ds, tcfg)
    print(ablation_table(rows))
    if args.out:
        with open(args.out, "w") as f:
            json.dump([r.to_dict() for r in rows], f, sort_keys=True, indent=2)
        print(f"table -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="tristream",
        description="Three-stream sEMG gesture classifier: training, "
                    "evaluation, ablation, FLOPs accounting, and gradient "
                    "checking.  TRISTREAM_THREADS caps evaluation workers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", formatter_class=fmt,
                       help="train a model on an EMGB dataset")
    p.add_argument("--data", required=True, help="training EMGB file")
    p.add_argument("--val", default=None,
                   help="validation EMGB file (default: carve from --data)")
    p.add_argument("--out", required=True, help="output TSW1 checkpoint path")
    p.add_argument("--log", default=None,
                   help="JSONL training log path (default: <out>.log.jsonl)")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--preset", default=None, choices=sorted(PRESETS),
                   help="named hyperparameter preset")
    p.add_argument("--seed", type=int, default=None,
                   help="random seed (overrides the config file; 0 if neither)")
    p.add_argument("--epochs", type=int, default=None,
                   help="override epoch count")
    p.add_argument("--folds", type=int, default=None,
                   help="stratified k-fold cross-validation over --data "
                        "(reports per-fold accuracy, saves the best fold)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", formatter_class=fmt,
                       help="evaluate a checkpoint on an EMGB dataset")
    p.add_argument("--model", required=True, help="TSW1 checkpoint")
    p.add_argument("--data", required=True, help="EMGB dataset")
    p.add_argument("--report", default=None, help="write JSON metrics report")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", formatter_class=fmt,
                       help="finite-difference audit of the full model")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--tol", type=float, default=1e-4,
                   help="max relative error tolerance")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("synth", formatter_class=fmt,
                       help="generate the synthetic oracle dataset")
    p.add_argument("--classes", type=int, default=6, help="number of classes")
    p.add_argument("--channels", type=int, default=12, help="channels")
    p.add_argument("--window", type=int, default=500, help="window length")
    p.add_argument("--per-class", type=int, default=40, dest="per_class",
                   help="windows per class")
    p.add_argument("--noise-std", type=float, default=0.1, dest="noise_std",
                   help="additive noise std")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", required=True, help="output EMGB path")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("flops", formatter_class=fmt,
                       help="analytic FLOPs for a configuration")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--input-len", type=int, default=1000, dest="input_len",
                   help="input window length T")
    p.add_argument("--channels", type=int, default=16, help="input channels")
    p.add_argument("--classes", type=int, default=52, help="number of classes")
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("ablate", formatter_class=fmt,
                       help="run the five-row component ablation study")
    p.add_argument("--data", required=True, help="EMGB dataset")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--out", default=None, help="write JSON results")
    p.add_argument("--preset", default=None, choices=sorted(PRESETS),
                   help="named hyperparameter preset")
    p.add_argument("--seed", type=int, default=None,
                   help="random seed (overrides the config file; 0 if neither)")
    p.add_argument("--epochs", type=int, default=None,
                   help="override epoch count")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"data error: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, GradientError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
