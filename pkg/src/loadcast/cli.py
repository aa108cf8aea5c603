"""Operator command surface.

Subcommands: ``synth`` (synthetic data), ``pretrain`` (phase 1),
``finetune`` (phase 2), ``predict`` (phase 3), ``evaluate``, ``ablate``,
and ``ranksweep``.  Every flag can also be supplied through an
environment variable named ``LOADCAST_<FLAG>`` (upper-case, dashes as
underscores); explicit flags win.  Each run writes its fully resolved
configuration next to its primary output, and training emits
line-delimited JSON records on standard error.

Exit codes: 0 success, 2 input/config error, 3 data error,
4 compatibility error, 1 internal error.
"""

import argparse
import csv
import json
import os
import sys
import traceback
from datetime import timedelta
from pathlib import Path

from .data import (GroupSpec, context_arrays, generate_synthetic, load_csv,
                   make_windows, preset_specs, split_chronological, write_csv)
from .errors import (CompatibilityError, ContractError, DataError, InputError,
                     LoadcastError)
from .lora import TARGETS
from .persistence import load_adapter, load_backbone, param_hash, save_adapter, save_backbone
from .pipeline import (ForecasterFamily, TrainConfig, TrainLog, ablate_targets,
                       evaluate_family, finetune_many, improvement, pretrain,
                       rank_sweep)

ENV_PREFIX = "LOADCAST_"


def _env_default(flag: str, cast, fallback):
    raw = os.environ.get(ENV_PREFIX + flag.upper().replace("-", "_"))
    if raw is None:
        return fallback
    if cast is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return cast(raw)


def _flag(parser, name: str, cast, default, help_text: str, **kwargs):
    resolved = _env_default(name, cast, default)
    if cast is bool:
        parser.add_argument(f"--{name}", action="store_true", default=resolved,
                            help=help_text)
    else:
        parser.add_argument(f"--{name}", type=cast, default=resolved,
                            help=f"{help_text} (default: {resolved})", **kwargs)


def _train_flags(parser):
    _flag(parser, "seed", int, 0, "root seed for all random sub-streams")
    _flag(parser, "epochs", int, 50, "pre-training epoch cap")
    _flag(parser, "finetune-epochs", int, 30, "fine-tuning epoch cap")
    _flag(parser, "batch-size", int, 8, "windows per gradient step")
    _flag(parser, "learning-rate", float, 1e-3, "pre-training learning rate")
    _flag(parser, "finetune-rate", float, 1e-3, "fine-tuning learning rate")
    _flag(parser, "kl-weight", float, 0.1, "weight of the KL regularizer")
    _flag(parser, "optimizer", str, "adam", "adam or sgd", choices=("adam", "sgd"))
    _flag(parser, "normalization", str, "per_group", "z-score mode",
          choices=("per_group", "global"))
    _flag(parser, "context-hours", int, 168, "context window length")
    _flag(parser, "horizon-hours", int, 24, "forecast horizon")
    _flag(parser, "stride-hours", int, 24, "window stride")
    _flag(parser, "patience", int, 5, "early-stopping patience (validation epochs)")
    _flag(parser, "balanced-batches", bool, False, "sample batches balanced per group")


def _config_from(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs, finetune_epochs=args.finetune_epochs,
        batch_size=args.batch_size, learning_rate=args.learning_rate,
        finetune_rate=args.finetune_rate, kl_weight=args.kl_weight,
        seed=args.seed, optimizer=args.optimizer,
        context_hours=args.context_hours, horizon_hours=args.horizon_hours,
        stride_hours=args.stride_hours, patience=args.patience,
        normalization=args.normalization, balanced_batches=args.balanced_batches,
    )


def _write_resolved(out_path, payload: dict):
    path = Path(str(out_path) + ".config.json")
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _split_groups(series_map, config: TrainConfig, groups=None):
    groups = sorted(series_map) if groups is None else list(groups)
    splits = {}
    for gid in groups:
        if gid not in series_map:
            raise InputError(f"group {gid!r} not present in the data "
                             f"(available: {sorted(series_map)})")
        ds = make_windows(series_map[gid], config.context_hours,
                          config.horizon_hours, config.stride_hours)
        splits[gid] = split_chronological(ds)
    return splits


def _load_family(backbone_path, adapters_dir=None, override=False):
    model, table, manifest = load_backbone(backbone_path)
    family = ForecasterFamily(model, table)
    if adapters_dir:
        expected = param_hash(model)
        for path in sorted(Path(adapters_dir).glob("*.adapter")):
            adapter = load_adapter(path, backbone_hash=expected, override=override)
            family.adapters[adapter.group_id] = adapter
    return family, manifest


def _write_report(report_text: str, path):
    Path(path).write_text(report_text, encoding="utf-8")


# -- subcommands --------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.spec:
        raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        if not isinstance(raw, list):
            raise InputError(f"{args.spec}: expected a JSON list of group specs")
        try:
            specs = [GroupSpec(**entry) for entry in raw]
        except TypeError as exc:
            raise InputError(f"{args.spec}: bad group spec: {exc}") from None
    else:
        specs = preset_specs(args.preset)
    series = generate_synthetic(specs, args.days, args.seed)
    write_csv(series, args.out)
    _write_resolved(args.out, {
        "command": "synth", "preset": None if args.spec else args.preset,
        "spec_file": args.spec, "days": args.days, "seed": args.seed,
        "groups": sorted(series),
    })
    return 0


def cmd_pretrain(args) -> int:
    config = _config_from(args)
    series = load_csv(args.data)
    if not series:
        raise InputError(f"{args.data}: no groups found")
    splits = _split_groups(series, config)
    train_sets = {g: s[0] for g, s in splits.items()}
    val_sets = {g: s[1] for g, s in splits.items() if len(s[1])}
    if args.epochs == 0:
        print("warning: --epochs 0; checkpoint will hold initialized weights",
              file=sys.stderr)
    log = TrainLog(stream=sys.stderr, path=str(args.out) + ".log.jsonl")
    try:
        model, table = pretrain(train_sets, config, val_sets or None, log=log)
    finally:
        log.close()
    save_backbone(model, table, args.out, extra=config.resolved())
    _write_resolved(args.out, {"command": "pretrain", "data": args.data,
                               "groups": sorted(series), **config.resolved()})
    return 0


def cmd_finetune(args) -> int:
    config = _config_from(args)
    model, table, _ = load_backbone(args.backbone)
    series = load_csv(args.data)
    groups = args.group
    splits = _split_groups(series, config, groups)
    if args.finetune_epochs == 0:
        print("warning: --finetune-epochs 0; adapter will be a no-op",
              file=sys.stderr)
    log = TrainLog(stream=sys.stderr)
    pairs = {g: (s[0], s[1] if len(s[1]) else None) for g, s in splits.items()}
    adapters = finetune_many(model, table, pairs, args.target, args.rank, config,
                             alpha=args.alpha, workers=args.parallel_groups,
                             log=log if args.parallel_groups <= 1 else None)
    if len(groups) == 1 and not str(args.out).endswith(os.sep) \
            and not Path(args.out).is_dir():
        save_adapter(adapters[groups[0]], args.out)
        _write_resolved(args.out, {"command": "finetune", "group": groups[0],
                                   "target": args.target, "rank": args.rank,
                                   "alpha": args.alpha, **config.resolved()})
    else:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for gid, adapter in adapters.items():
            save_adapter(adapter, out_dir / f"{gid}.adapter")
        _write_resolved(out_dir / "adapters", {
            "command": "finetune", "groups": sorted(adapters),
            "target": args.target, "rank": args.rank, "alpha": args.alpha,
            **config.resolved()})
    return 0


def cmd_predict(args) -> int:
    family, _ = _load_family(args.backbone, args.adapters, args.override)
    series = load_csv(args.context)
    if args.group not in series:
        raise InputError(f"group {args.group!r} not present in the context data "
                         f"(available: {sorted(series)})")
    model_cfg = family.backbone.config
    ctx, ext, last_time = context_arrays(series[args.group], model_cfg.context_hours)
    steps = -(-args.horizon // model_cfg.input_width)
    fc = family.predict(args.group, ctx, ext, steps, fallback=args.fallback)
    if fc.fallback:
        print(f"warning: no adapter for group {args.group!r}; "
              "served the bare backbone", file=sys.stderr)
    mu = fc.mu[:args.horizon]
    sigma = fc.sigma[:args.horizon]
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "mu", "sigma"])
        for i in range(args.horizon):
            ts = last_time + timedelta(hours=i + 1)
            writer.writerow([ts.isoformat(), repr(float(mu[i])), repr(float(sigma[i]))])
    _write_resolved(args.out, {
        "command": "predict", "group": args.group, "horizon": args.horizon,
        "fallback": args.fallback, "backbone": str(args.backbone),
        "fallback_used": fc.fallback,
    })
    return 0


def _report_out(args, report_text_csv, report_text_json):
    text = report_text_json if args.format == "json" else report_text_csv
    _write_report(text, args.report)
    print(text, end="" if text.endswith("\n") else "\n")


def cmd_evaluate(args) -> int:
    config = _config_from(args)
    family, _ = _load_family(args.backbone, args.adapters, args.override)
    series = load_csv(args.data)
    splits = _split_groups(series, config, [args.group])
    test_set = splits[args.group][2]
    report = evaluate_family(family, test_set)
    if args.group in family.adapters:
        deltas = {f"delta_{m}": improvement(report, m)
                  for m in ("mse", "crps", "quantile_loss", "winkler")}
        print(json.dumps({"phase": "evaluate", "group": args.group, **deltas},
                         sort_keys=True), file=sys.stderr)
    _report_out(args, report.to_csv(), report.to_json())
    _write_resolved(args.report, {"command": "evaluate", "group": args.group,
                                  **config.resolved()})
    return 0


def cmd_ablate(args) -> int:
    config = _config_from(args)
    model, table, _ = load_backbone(args.backbone)
    series = load_csv(args.data)
    splits = _split_groups(series, config, [args.group])
    train_set, val_set, test_set = splits[args.group]
    log = TrainLog(stream=sys.stderr)
    report = ablate_targets(model, table, train_set, val_set or None, test_set,
                            args.rank, config, alpha=args.alpha, log=log)
    _report_out(args, report.to_csv(), report.to_json())
    _write_resolved(args.report, {"command": "ablate", "group": args.group,
                                  "rank": args.rank, **config.resolved()})
    return 0


def cmd_ranksweep(args) -> int:
    config = _config_from(args)
    model, table, _ = load_backbone(args.backbone)
    series = load_csv(args.data)
    splits = _split_groups(series, config, [args.group])
    train_set, val_set, test_set = splits[args.group]
    log = TrainLog(stream=sys.stderr)
    rows = rank_sweep(model, table, train_set, val_set or None, test_set, config,
                      target=args.target, log=log)
    columns = ["rank", "r", "param_count", "adapter_bytes",
               "mse", "crps", "quantile_loss", "winkler"]
    if args.format == "json":
        payload = [dict(zip(columns, [r.label, r.rank, r.param_count, r.adapter_bytes,
                                      r.mse, r.crps, r.quantile_loss, r.winkler]))
                   for r in rows]
        text = json.dumps(payload, indent=2)
    else:
        import io
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(columns)
        for r in rows:
            writer.writerow([r.label, r.rank, r.param_count, r.adapter_bytes,
                             r.mse, r.crps, r.quantile_loss, r.winkler])
        text = buf.getvalue()
    _write_report(text, args.report)
    print(text, end="" if text.endswith("\n") else "\n")
    _write_resolved(args.report, {"command": "ranksweep", "group": args.group,
                                  "target": args.target, **config.resolved()})
    return 0


# -- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loadcast",
        description="Global-to-local probabilistic load forecasting toolchain.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic group data as CSV")
    p.add_argument("--preset", default="feeder3", help="named preset (default: feeder3)")
    p.add_argument("--spec", default=None, help="JSON file of group specs (overrides --preset)")
    _flag(p, "days", int, 60, "days of hourly data per group")
    _flag(p, "seed", int, 0, "generator seed")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="phase 1: train the shared backbone")
    p.add_argument("--data", required=True, help="training CSV")
    p.add_argument("--out", required=True, help="checkpoint output path")
    _train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="phase 2: fit per-group adapters")
    p.add_argument("--backbone", required=True, help="backbone checkpoint")
    p.add_argument("--data", required=True, help="fine-tuning CSV")
    p.add_argument("--group", action="append", required=True,
                   help="group id (repeatable)")
    p.add_argument("--target", default="output_matrix", choices=TARGETS,
                   help="weight matrix to adapt (default: output_matrix)")
    _flag(p, "rank", int, 8, "adapter rank")
    p.add_argument("--alpha", type=float, default=None,
                   help="update scale (default: rank, i.e. unit scale)")
    _flag(p, "parallel-groups", int, 1, "fine-tune groups in N worker processes")
    p.add_argument("--out", required=True,
                   help="adapter file (single group) or directory")
    _train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("predict", help="phase 3: forecast for one group")
    p.add_argument("--backbone", required=True)
    p.add_argument("--adapters", default=None, help="directory of *.adapter files")
    p.add_argument("--group", required=True)
    p.add_argument("--context", required=True, help="CSV holding the context window")
    _flag(p, "horizon", int, 24, "forecast horizon in hours")
    p.add_argument("--fallback", action="store_true",
                   help="serve the bare backbone when the group has no adapter")
    p.add_argument("--override", action="store_true",
                   help="accept adapters tuned against a different backbone")
    p.add_argument("--out", required=True, help="forecast CSV output")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score adapted vs bare backbone on a test split")
    p.add_argument("--backbone", required=True)
    p.add_argument("--adapters", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--group", required=True)
    p.add_argument("--override", action="store_true")
    p.add_argument("--report", required=True, help="report output path")
    p.add_argument("--format", default="csv", choices=("csv", "json"))
    _train_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="compare adapter targets under equal budgets")
    p.add_argument("--backbone", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--group", required=True)
    _flag(p, "rank", int, 8, "adapter rank")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--report", required=True)
    p.add_argument("--format", default="csv", choices=("csv", "json"))
    _train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("ranksweep", help="sweep the adapter rank from 1 to 10 plus full")
    p.add_argument("--backbone", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--group", required=True)
    p.add_argument("--target", default="output_matrix", choices=TARGETS)
    p.add_argument("--report", required=True)
    p.add_argument("--format", default="csv", choices=("csv", "json"))
    _train_flags(p)
    p.set_defaults(func=cmd_ranksweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except (InputError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except CompatibilityError as exc:
        print(f"compatibility error: {exc}", file=sys.stderr)
        return 4
    except LoadcastError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
