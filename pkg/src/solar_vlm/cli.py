"""Command-line entry point: ``solar-vlm <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path


from . import __version__
from . import prompt as prompt_lib
from .config import ConfigError, ExperimentConfig, load_config
from .data import DataError, NumericWindow, load_dataset, make_synthetic_dataset, save_dataset
from .graph import GraphError
from .providers import ProviderError
from .training import (
    SWEEP_GRIDS,
    NumericalDivergence,
    TraceWriter,
    build_model,
    config_hash,
    evaluate,
    load_checkpoint,
    predict_split,
    prepare_data,
    run_ablation,
    run_sweep,
    save_checkpoint,
    train,
    write_rows_csv,
    write_rows_jsonl,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

logger = logging.getLogger("solar_vlm")


class CliError(Exception):
    def __init__(self, code, kind, message):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(getattr(args, "config", None))
    updates = {}
    if getattr(args, "horizon", None) is not None:
        updates["horizon"] = args.horizon
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if updates:
        try:
            cfg.training = replace(cfg.training, **updates)
        except ValueError as exc:
            raise ConfigError([str(exc)]) from None
    return cfg


def _out_dir(args, cfg: ExperimentConfig, command: str) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else cfg.output_root() / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(cfg: ExperimentConfig):
    if cfg.data.path:
        return load_dataset(cfg.data.path)
    return make_synthetic_dataset(cfg.data.sites, cfg.data.days, cfg.data.seed)


def _emit(obj):
    print(json.dumps(obj, default=str))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(EXIT_DATA, "data", f"output directory {out} is not empty (use --force)")
    ds = make_synthetic_dataset(args.sites, args.days, args.seed)
    manifest = save_dataset(ds, out, seed=args.seed)
    _emit(
        {
            "out": str(out),
            "sites": manifest["num_sites"],
            "steps": manifest["num_steps"],
            "splits": manifest["splits"],
        }
    )


def cmd_prompt(args):
    cfg = _resolve(args)
    ds = _dataset(cfg)
    L, T = cfg.model.seq_len, cfg.training.horizon
    ctx = max(L, prompt_lib.CONTEXT_LONG_STEPS)
    from .data import chronological_split

    bounds = chronological_split(ds.num_steps, cfg.training.split_ratios)
    bins = prompt_lib.fit_bins(ds.series[:, bounds.train[0] : bounds.train[1]], ds.feature_names)
    lines = []
    stride = args.stride or cfg.training.window_stride
    for origin in range(ctx, ds.num_steps - T + 1, stride):
        win = NumericWindow(ds.series[:, origin - ctx : origin], ds.timestamps[origin - ctx : origin], list(ds.feature_names))
        now = int(ds.timestamps[origin - 1])
        for i, site in enumerate(ds.sites):
            fields = prompt_lib.extract_fields(win, site, now, T, bins, site_index=i)
            lines.append(prompt_lib.render_prompt(fields))
        if args.limit and len(lines) >= args.limit:
            lines = lines[: args.limit]
            break
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _write_common(out: Path, cfg: ExperimentConfig):
    cfg.dump(out / "config.toml")


def cmd_train(args):
    cfg = _resolve(args)
    out = _out_dir(args, cfg, "train")
    _write_common(out, cfg)
    ds = _dataset(cfg)
    data = prepare_data(ds, cfg.model, cfg.training, cfg.ablation)
    model = build_model(cfg.model, ds.sites, cfg.training.horizon, cfg.ablation, cfg.training.seed)
    (out / "graph.json").write_text(model.graph_learner.graph.to_json())
    trace = TraceWriter(out / "trace.jsonl") if args.trace else None
    try:
        result = train(model, data, cfg.training, trace)
        meta = {"config_hash": config_hash(cfg.to_dict()), "seed": cfg.training.seed, "wall_time": result.wall_time}
        reports = {}
        for split in ("val", "test"):
            if data.num_windows(split):
                reports[split] = evaluate(result.model, data, split, trace=trace, **meta).to_dict()
    finally:
        if trace is not None:
            trace.close()
    save_checkpoint(out / "checkpoint.pt", result.model, cfg.training, ds.sites, data.stats, {"config": cfg.to_dict()})
    (out / "history.json").write_text(json.dumps(result.history, indent=2))
    (out / "metrics.json").write_text(json.dumps(reports, indent=2, default=str))
    _emit({"out": str(out), "best_epoch": result.best_epoch, **{k: v["mse"] for k, v in reports.items()}})


def cmd_eval(args):
    cfg = _resolve(args)
    out = _out_dir(args, cfg, "eval")
    _write_common(out, cfg)
    ds = _dataset(cfg)
    if args.checkpoint:
        if not Path(args.checkpoint).exists():
            raise CliError(EXIT_DATA, "data", f"checkpoint not found: {args.checkpoint}")
        model, payload = load_checkpoint(args.checkpoint)
        from .model import ModelConfig

        model_cfg = ModelConfig(**payload["model_config"])
        if args.horizon is not None and args.horizon != model.horizon:
            raise CliError(EXIT_CONFIG, "config", f"checkpoint horizon {model.horizon} != --horizon {args.horizon}")
        train_cfg = replace(cfg.training, horizon=model.horizon)
        flags = model.flags
    else:
        # untrained model from the configuration
        model_cfg, train_cfg, flags = cfg.model, cfg.training, cfg.ablation
        model = build_model(model_cfg, ds.sites, train_cfg.horizon, flags, train_cfg.seed)
        model.eval()
    data = prepare_data(ds, model_cfg, train_cfg, flags)
    trace = TraceWriter(out / "trace.jsonl") if args.trace else None
    try:
        report = evaluate(model, data, args.split, trace=trace, config_hash=config_hash(cfg.to_dict()))
    finally:
        if trace is not None:
            trace.close()
    pred, true = predict_split(model, data, args.split)
    _write_predictions(out / "predictions.csv", pred, true)
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, default=str))
    _emit({"out": str(out), "mse": report.mse, "mae": report.mae, "r2": report.r2})


def _write_predictions(path, pred, true):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window", "site", "step", "prediction", "truth"])
        for n in range(pred.shape[0]):
            for i in range(pred.shape[1]):
                for t in range(pred.shape[2]):
                    w.writerow([n, i, t, f"{pred[n, i, t]:.6g}", f"{true[n, i, t]:.6g}"])


def cmd_ablate(args):
    cfg = _resolve(args)
    out = _out_dir(args, cfg, "ablate")
    _write_common(out, cfg)
    ds = _dataset(cfg)
    rows, reports = run_ablation(ds, cfg.model, cfg.training)
    write_rows_csv(out / "ablation.csv", rows, ["setting", "config_hash", "mse", "mae", "r2", "runtime", "provider_calls"])
    write_rows_jsonl(out / "ablation.jsonl", [dict(r, report=rep.to_dict()) for r, rep in zip(rows, reports)])
    _emit({"out": str(out / "ablation.csv"), "rows": len(rows)})


def cmd_sweep(args):
    cfg = _resolve(args)
    out = _out_dir(args, cfg, "sweep")
    _write_common(out, cfg)
    ds = _dataset(cfg)
    values = [int(v) for v in args.values.split(",")] if args.values else None
    rows = run_sweep(ds, cfg.model, cfg.training, args.axis, values, cfg.ablation)
    path = out / f"sweep_{args.axis}.csv"
    write_rows_csv(path, rows, ["axis", "value", "status", "config_hash", "mse", "mae", "r2", "runtime", "reason"])
    write_rows_jsonl(out / f"sweep_{args.axis}.jsonl", rows)
    _emit({"out": str(path), "rows": len(rows)})


def cmd_plot(args):
    from .plots import plot_results

    path = Path(args.results)
    if not path.exists():
        raise CliError(EXIT_DATA, "data", f"results file not found: {path}")
    try:
        files = plot_results(path, Path(args.out))
    except ValueError as exc:  # includes pandas' EmptyDataError
        raise CliError(EXIT_DATA, "data", f"{path}: {exc}") from None
    _emit({"files": [str(f) for f in files]})


# ---------------------------------------------------------------------------


def _add_run_options(p, horizon=True):
    p.add_argument("--config", help="TOML experiment file")
    if horizon:
        p.add_argument("--horizon", type=int, help="forecast horizon T (steps)")
    p.add_argument("--seed", type=int, help="override training.seed")
    p.add_argument("--trace", action="store_true", help="write per-batch diagnostics to trace.jsonl")
    p.add_argument("--out", help="output directory (default: $SOLARVLM_OUT/<command> or runs/<command>)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="solar-vlm", description="Multimodal multi-site PV forecasting")
    parser.add_argument("--version", action="version", version=f"solar-vlm {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic multi-site dataset")
    p.add_argument("--sites", type=int, default=8)
    p.add_argument("--days", type=int, default=30)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("prompt", help="render one prompt per site per window")
    p.add_argument("--config")
    p.add_argument("--horizon", type=int)
    p.add_argument("--stride", type=int, default=0, help="window stride (default: training.window_stride)")
    p.add_argument("--limit", type=int, default=0, help="stop after this many prompts")
    p.add_argument("--out", help="text file (default: stdout)")
    p.set_defaults(func=cmd_prompt)

    p = sub.add_parser("train", help="train and evaluate one configuration")
    _add_run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or a fresh model) on a split")
    _add_run_options(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the six ablation settings")
    _add_run_options(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sensitivity sweep over one hyperparameter")
    _add_run_options(p)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_GRIDS))
    p.add_argument("--values", help="comma-separated values (default: the standard grid)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="plot sweep/ablation results or prediction traces")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc))
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", "; ".join(exc.problems))
    except NumericalDivergence as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc))
    except (DataError, ProviderError, GraphError, prompt_lib.PromptError, OSError, ValueError) as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    return EXIT_OK


def _fail(code, kind, message) -> int:
    print(json.dumps({"error": kind, "code": code, "message": message}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
