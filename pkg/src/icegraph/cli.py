"""Batch command-line pipelines: synth, prepare, train, evaluate, compare,
gradcheck.

Configuration precedence is defaults < config file (--config, flat JSON)
< environment (ICEGRAPH_<KEY>) < command-line flags. Every command echoes
its effective configuration to stdout and, when it has an output
directory, to run_config.json inside it, so a run can be audited and
reproduced from one file. One master seed fans out to every random choice.

Exit codes: 0 success, 1 I/O or data error, 2 usage or contract error.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import os
import sys
from pathlib import Path

from . import data, evaluate, models, train, verify
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    GeoDomainError,
    IcegraphError,
    NumericalError,
    ShapeError,
)

ENV_PREFIX = "ICEGRAPH_"

DEFAULTS = {
    "seed": 0,
    "out": "runs",
    "records": 20,
    "layers": 16,
    "columns": 256,
    "corpus": "",
    "data": "",
    "checkpoint": "",
    "distance_mode": "standard",
    "norm_scope": "all",
    "format": "json",
    "model": "gat_lstm",
    "hidden": 48,
    "head_widths": [32, 24, 10],
    "dropout_p": 0.2,
    "attention_heads": 1,
    "leaky_slope": 0.2,
    "edge_bias": "none",
    "epochs": 500,
    "lr0": 0.01,
    "halve_every": 125,
    "weight_decay": 0.0001,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "checkpoint_policy": "best_val",
    "decoupled_weight_decay": False,
    "trial": "all",
    "workers": 1,
    "svg": True,
}


def _coerce(key, raw):
    """Coerce a string override to the type of the default for `key`."""
    default = DEFAULTS[key]
    if isinstance(raw, str):
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int) and not isinstance(default, bool):
            if key == "trial" and raw == "all":
                return raw
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return json.loads(raw)
    return raw


def effective_config(args) -> dict:
    cfg = dict(DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {config_path}: {exc}") from exc
        for key, value in loaded.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r} in {config_path}")
            cfg[key] = _coerce(key, value)
    for key in DEFAULTS:
        env_val = os.environ.get(ENV_PREFIX + key.upper())
        if env_val is not None:
            cfg[key] = _coerce(key, env_val)
    for key in DEFAULTS:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            cfg[key] = _coerce(key, flag_val)
    return cfg


def _echo_config(cfg, out_dir=None):
    text = json.dumps(cfg, indent=2, sort_keys=True)
    print(text)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "run_config.json").write_text(text + "\n")


def _model_config(cfg, kind=None) -> models.ModelConfig:
    return models.ModelConfig(
        kind=kind or cfg["model"],
        hidden=cfg["hidden"],
        head_widths=tuple(cfg["head_widths"]),
        dropout_p=cfg["dropout_p"],
        attention_heads=cfg["attention_heads"],
        leaky_slope=cfg["leaky_slope"],
        edge_bias=cfg["edge_bias"],
    )


def _train_config(cfg) -> train.TrainConfig:
    return train.TrainConfig(
        epochs=cfg["epochs"],
        lr0=cfg["lr0"],
        halve_every=cfg["halve_every"],
        weight_decay=cfg["weight_decay"],
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        eps=cfg["eps"],
        master_seed=cfg["seed"],
        checkpoint_policy=cfg["checkpoint_policy"],
        decoupled_weight_decay=cfg["decoupled_weight_decay"],
    )


def _prepared_path(data_dir, trial, fmt):
    ext = "json" if fmt == "json" else "flat"
    return Path(data_dir) / f"prepared-trial-{trial}.{ext}"


def _find_prepared(data_dir, trial):
    for ext in ("json", "flat"):
        path = Path(data_dir) / f"prepared-trial-{trial}.{ext}"
        if path.exists():
            return path
    raise DataError(
        f"no prepared dataset for trial {trial} under {data_dir} "
        "(expected prepared-trial-<t>.json or .flat; run `icegraph prepare`)"
    )


def _checkpoint_path(out_dir, kind, trial, fmt):
    ext = "json" if fmt == "json" else "flat"
    return Path(out_dir) / f"checkpoint-{kind}-trial{trial}.{ext}"


def _trials_requested(cfg):
    if cfg["trial"] == "all":
        return list(range(5))
    t = int(cfg["trial"])
    if not 0 <= t <= 4:
        raise ConfigError(f"trial must be 0..4 or 'all', got {t}")
    return [t]


# ---------------------------------------------------------------------------
# commands


def command_synth(args):
    cfg = effective_config(args)
    out = Path(cfg["out"])
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"output directory {out} is not empty (use --force)")
    _echo_config(cfg, out)
    synth_cfg = data.SyntheticConfig(
        n_records=cfg["records"],
        n_layers=cfg["layers"],
        n_columns=cfg["columns"],
        seed=cfg["seed"],
    )
    records = data.generate_synthetic(synth_cfg)
    manifest = data.write_corpus(records, out)
    print(f"wrote {len(records)} records to {manifest}")
    return 0


def command_prepare(args):
    cfg = effective_config(args)
    if not cfg["corpus"]:
        raise ConfigError("prepare needs --corpus pointing at a manifest.json")
    out = Path(cfg["out"])
    _echo_config(cfg, out)
    records = data.load_corpus(cfg["corpus"])
    trials, report = data.prepare_trials(
        records,
        master_seed=cfg["seed"],
        distance_mode=cfg["distance_mode"],
        norm_scope=cfg["norm_scope"],
    )
    for pt in trials:
        path = _prepared_path(out, pt.trial, cfg["format"])
        data.save_prepared_trial(pt, path, fmt=cfg["format"])
    report_path = out / "prepare_report.json"
    report_path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    splits = trials[0].split
    print(
        f"usable {report.usable}/{report.total_records}; "
        f"splits {len(splits.train)}/{len(splits.val)}/{len(splits.test)}; "
        f"{len(trials)} prepared trials in {out}"
    )
    return 0


def _run_one_trial(job):
    """Worker for train/compare: fully self-contained per (kind, trial)."""
    kind, trial, data_dir, cfg = job
    prepared = data.load_prepared_trial(_find_prepared(data_dir, trial))
    result = train.run_trial(_model_config(cfg, kind), prepared, _train_config(cfg))
    model = train.restore_model(_model_config(cfg, kind), result.checkpoint)
    report = train.evaluate_on_test(model, prepared)
    baseline = _mean_predictor_total(prepared)
    return kind, trial, result, report, baseline


def _mean_predictor_total(prepared):
    import numpy as np

    train_targets = np.concatenate(
        [prepared.sequences[rid].targets for rid in prepared.split.train]
    )
    test_targets = np.concatenate(
        [prepared.sequences[rid].targets for rid in prepared.split.test]
    )
    return evaluate.mean_predictor_rmse(train_targets, test_targets)


def command_train(args):
    cfg = effective_config(args)
    if not cfg["data"]:
        raise ConfigError("train needs --data pointing at a prepared dataset directory")
    out = Path(cfg["out"])
    _echo_config(cfg, out)
    for trial in _trials_requested(cfg):
        kind, _, result, report, _ = _run_one_trial((cfg["model"], trial, cfg["data"], cfg))
        model = train.restore_model(_model_config(cfg, kind), result.checkpoint)
        ckpt = _checkpoint_path(out, kind, trial, cfg["format"])
        models.save_checkpoint(model, seed=cfg["seed"], path=ckpt, fmt=cfg["format"])
        train.write_training_log(out / f"trainlog-{kind}-trial{trial}.csv", result)
        print(
            f"{kind} trial {trial}: {result.steps} steps, "
            f"best val RMSE {min(result.val_rmse):.4f} px at epoch "
            f"{result.selected_epoch}, test total {report.total_px:.4f} px -> {ckpt}"
        )
    return 0


def command_evaluate(args):
    cfg = effective_config(args)
    if not cfg["data"]:
        raise ConfigError("evaluate needs --data pointing at a prepared dataset directory")
    if not cfg["checkpoint"]:
        raise ContractError("evaluate needs --checkpoint pointing at a trained model")
    ckpt_path = Path(cfg["checkpoint"])
    if not ckpt_path.exists():
        raise ContractError(f"checkpoint {ckpt_path} does not exist")
    out = Path(cfg["out"])
    _echo_config(cfg, out)
    model, _ = models.load_checkpoint(ckpt_path)
    trial = _trials_requested(cfg)[0] if cfg["trial"] != "all" else 0
    prepared = data.load_prepared_trial(_find_prepared(cfg["data"], trial))
    report = train.evaluate_on_test(model, prepared)
    payload = {
        "model": report.model_kind,
        "trial": report.trial,
        "total_rmse_px": report.total_px,
        "total_rmse_cm": report.total_cm,
        "per_year_rmse_px": list(report.per_year_px),
        "years": list(evaluate.TARGET_YEARS),
    }
    path = out / f"eval-{report.model_kind}-trial{trial}.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"{report.model_kind} trial {trial}: total RMSE {report.total_px:.4f} px -> {path}")
    return 0


def command_compare(args):
    cfg = effective_config(args)
    if not cfg["data"]:
        raise ConfigError("compare needs --data pointing at a prepared dataset directory")
    out = Path(cfg["out"])
    _echo_config(cfg, out)
    jobs = [
        (kind, trial, cfg["data"], cfg)
        for kind in models.MODEL_KINDS
        for trial in range(5)
    ]
    workers = max(1, int(cfg["workers"]))
    if workers > 1:
        with multiprocessing.get_context("fork").Pool(workers) as pool:
            outcomes = pool.map(_run_one_trial, jobs)
    else:
        outcomes = [_run_one_trial(job) for job in jobs]
    outcomes.sort(key=lambda item: (item[0], item[1]))

    reports = []
    baselines = {}
    for kind, trial, result, report, baseline in outcomes:
        reports.append(report)
        baselines[trial] = baseline
        train.write_training_log(out / f"trainlog-{kind}-trial{trial}.csv", result)
    paths = evaluate.emit_report(reports, out, svg=cfg["svg"])

    lines = ["trial,mean_predictor_total_rmse_px"]
    for trial in sorted(baselines):
        lines.append(f"{trial},{baselines[trial]!r}")
    (out / "baseline.csv").write_text("\n".join(lines) + "\n")

    by_kind = {}
    for r in reports:
        by_kind.setdefault(r.model_kind, []).append(r)
    print("model comparison (total RMSE over 5 trials, pixels):")
    for kind in models.MODEL_KINDS:
        agg = evaluate.aggregate(by_kind[kind])
        print(f"  {kind:9s} {agg.formatted_total()}")
    mean_baseline = sum(baselines.values()) / len(baselines)
    print(f"  {'mean-pred':9s} {mean_baseline:.3f} (constant per-year train mean)")
    print(f"reports in {paths['summary'].parent}")
    return 0


def command_gradcheck(args):
    cfg = effective_config(args)
    _echo_config(cfg)
    results = verify.run_suite()
    width = max(len(r.name) for r in results)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}s}  {r.max_rel_error:12.4e}  (tol {r.tolerance:g})  {status}")
        failed += not r.passed
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return 0 if failed == 0 else 1


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p):
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--seed", type=int, help="master seed (fans out to every rng)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", choices=("json", "flat"), help="artifact file format")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="icegraph",
        description="Temporal graph attention pipelines for ice-layer forecasting",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic corpus")
    _add_common(p)
    p.add_argument("--records", type=int, help="number of records")
    p.add_argument("--layers", type=int, help="thickness layers per record")
    p.add_argument("--columns", type=int, help="columns (nodes) per record")
    p.add_argument("--force", action="store_true", help="overwrite non-empty out dir")
    p.set_defaults(func=command_synth)

    p = sub.add_parser("prepare", help="extract, filter, split, and normalize a corpus")
    _add_common(p)
    p.add_argument("--corpus", help="path to corpus manifest.json")
    p.add_argument("--distance-mode", dest="distance_mode",
                   choices=("standard", "paper_verbatim"))
    p.add_argument("--norm-scope", dest="norm_scope", choices=("all", "train"))
    p.set_defaults(func=command_prepare)

    p = sub.add_parser("train", help="train one model on one or all trials")
    _add_common(p)
    p.add_argument("--data", help="prepared dataset directory")
    p.add_argument("--model", choices=models.MODEL_KINDS)
    p.add_argument("--trial", help="0..4 or 'all'")
    p.add_argument("--epochs", type=int, help="override epoch count")
    p.add_argument("--checkpoint-policy", dest="checkpoint_policy",
                   choices=train.CHECKPOINT_POLICIES)
    p.set_defaults(func=command_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a test split")
    _add_common(p)
    p.add_argument("--data", help="prepared dataset directory")
    p.add_argument("--checkpoint", help="checkpoint file to score")
    p.add_argument("--trial", help="trial whose test split to use")
    p.set_defaults(func=command_evaluate)

    p = sub.add_parser("compare", help="run all three models x five trials")
    _add_common(p)
    p.add_argument("--data", help="prepared dataset directory")
    p.add_argument("--epochs", type=int, help="override epoch count")
    p.add_argument("--workers", type=int, help="parallel trial workers")
    p.add_argument("--checkpoint-policy", dest="checkpoint_policy",
                   choices=train.CHECKPOINT_POLICIES)
    p.set_defaults(func=command_compare)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    _add_common(p)
    p.set_defaults(func=command_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, NumericalError, GeoDomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except IcegraphError as exc:  # any remaining package error is a data problem
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
