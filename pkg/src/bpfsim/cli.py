"""Command-line entry point.

Subcommands: gen-data, run, ablate, analyze-coocc, analyze-recall,
report.  The config file is the single source of truth; flags override
only the seed, method, and paths.  Diagnostics go to stderr, machine
output to files.  Exit codes: 0 success, 1 configuration/usage error,
2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .protocol import MechanismFlags, run_experiment
from .synth import build_stage_datasets, save_dataset


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


GRID_ALIASES = {
    "table5": "components",
    "table4": "teachers",
    "table_s4": "bf_select",
}


def _component_rows() -> list[tuple[str, MechanismFlags]]:
    return [
        ("a", MechanismFlags(False, False, "ukd")),
        ("b", MechanismFlags(True, False, "ukd")),
        ("c", MechanismFlags(False, True, "ukd")),
        ("d", MechanismFlags(True, True, "ukd")),
        ("e", MechanismFlags(True, True, "dwf")),
    ]


def _fmt(v) -> str:
    return "" if v is None else repr(v)


def _cmd_gen_data(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    registry = cfg.registry()
    stages, test = build_stage_datasets(cfg.synth, registry, cfg.seed)
    files = []
    for ds in stages:
        name = f"train_stage_{ds.stage_index}.json"
        save_dataset(ds, out / name, cfg.config_hash())
        files.append(name)
    save_dataset(test, out / "test.json", cfg.config_hash())
    files.append("test.json")
    manifest = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "split": list(cfg.split),
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    print(f"wrote {len(files)} dataset files to {out}", file=sys.stderr)
    return 0


def _cmd_run(args) -> int:
    cfg = _load(args)
    run_experiment(cfg, args.out, dump_bp=args.dump_bp, dump_bf=args.dump_bf)
    print(f"run complete: {args.out}", file=sys.stderr)
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load(args)
    grid = GRID_ALIASES.get(args.grid, args.grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    if grid == "components":
        lines.append("row,bridge_past,bridge_future,distillation,old_map,new_map,all_map,avg_map")
        for label, flags in _component_rows():
            res = run_experiment(cfg, out / f"row_{label}", flags=flags)
            final = res[-1]
            lines.append(
                f"{label},{int(flags.bridge_past)},{int(flags.bridge_future)},{flags.distillation},"
                f"{_fmt(final.old_map)},{_fmt(final.new_map)},{_fmt(final.all_map)},{_fmt(final.avg_map)}"
            )
    elif grid == "teachers":
        lines.append("row,lambda2,box_mode,old_map,new_map,all_map,avg_map")
        for label, lam, mode in [("a", 1.0, "part"), ("b", 0.5, "part"), ("c", 0.5, "all")]:
            sub = dataclasses.replace(
                cfg, distill=dataclasses.replace(cfg.distill, lambda2=lam, box_mode=mode)
            )
            res = run_experiment(sub, out / f"row_{label}", flags=MechanismFlags(True, True, "dwf"))
            final = res[-1]
            lines.append(
                f"{label},{lam},{mode},"
                f"{_fmt(final.old_map)},{_fmt(final.new_map)},{_fmt(final.all_map)},{_fmt(final.avg_map)}"
            )
    elif grid == "bf_select":
        lines.append("row,objectness,attention,old_map,new_map,all_map,avg_map")
        combos = [("a", False, False), ("b", False, True), ("c", True, False), ("d", True, True)]
        for label, use_obj, use_attn in combos:
            sub = dataclasses.replace(
                cfg,
                bf=dataclasses.replace(cfg.bf, use_objectness=use_obj, use_attention=use_attn),
            )
            res = run_experiment(sub, out / f"row_{label}", flags=MechanismFlags(True, True, "dwf"))
            final = res[-1]
            lines.append(
                f"{label},{int(use_obj)},{int(use_attn)},"
                f"{_fmt(final.old_map)},{_fmt(final.new_map)},{_fmt(final.all_map)},{_fmt(final.avg_map)}"
            )
    else:
        raise ConfigError(f"unknown ablation grid: {args.grid}")
    (out / "grid.csv").write_text("\n".join(lines) + "\n")
    print(f"ablation grid written to {out / 'grid.csv'}", file=sys.stderr)
    return 0


def _read_report(run_dir: str | Path) -> dict:
    path = Path(run_dir) / "report.json"
    if not path.exists():
        raise FileNotFoundError(f"missing run artifact: {path}")
    return json.loads(path.read_text())


def _cmd_analyze_coocc(args) -> int:
    report = _read_report(args.run)
    lines = ["stage,past,current,future"]
    for st in report["stages"]:
        co = st["stats"].get("cooccurrence")
        if co is None:
            continue
        lines.append(f"{st['stage_index']},{repr(co['past'])},{repr(co['current'])},{repr(co['future'])}")
    out = Path(args.out) if args.out else Path(args.run) / "cooccurrence.csv"
    out.write_text("\n".join(lines) + "\n")
    print(f"co-occurrence analysis written to {out}", file=sys.stderr)
    return 0


def _cmd_analyze_recall(args) -> int:
    report = _read_report(args.run)
    lines = ["stage,pseudo_old,discard_future,distillprop_old,distillprop_new"]
    for st in report["stages"]:
        stats = st["stats"]
        pseudo = (stats.get("pseudo") or {}).get("recall_old")
        discard = (stats.get("discard") or {}).get("recall_future")
        pool = stats.get("distill_pool") or {}
        lines.append(
            f"{st['stage_index']},{_fmt(pseudo)},{_fmt(discard)},"
            f"{_fmt(pool.get('recall_old'))},{_fmt(pool.get('recall_new'))}"
        )
    out = Path(args.out) if args.out else Path(args.run) / "recall.csv"
    out.write_text("\n".join(lines) + "\n")
    print(f"recall analysis written to {out}", file=sys.stderr)
    return 0


def _cmd_report(args) -> int:
    lines = ["method,seed,stage,old_map,new_map,all_map,avg_map"]
    for run_dir in args.runs:
        rep = _read_report(run_dir)
        for st in rep["stages"]:
            lines.append(
                f"{rep['method']},{rep['seed']},{st['stage_index']},"
                f"{_fmt(st['old_map'])},{_fmt(st['new_map'])},{_fmt(st['all_map'])},{_fmt(st['avg_map'])}"
            )
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"summary written to {args.out}", file=sys.stderr)
    else:
        sys.stdout.write(text)
    return 0


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "method", None) is not None:
        cfg = dataclasses.replace(cfg, method=args.method)
    return cfg


def build_parser() -> _Parser:
    parser = _Parser(prog="bpfsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and serialize the benchmark datasets")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("run", help="run one experiment end to end")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--method")
    p.add_argument("--dump-bp", action="store_true", help="dump per-scene pseudo-label traces")
    p.add_argument("--dump-bf", action="store_true", help="dump attention maps and discarded boxes")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument(
        "--grid",
        default="components",
        help="components|teachers|bf_select (aliases: table5, table4, table_s4)",
    )
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("analyze-coocc", help="emit per-stage class-group co-occurrence fractions")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_analyze_coocc)

    p = sub.add_parser("analyze-recall", help="emit pipeline recall statistics")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_analyze_recall)

    p = sub.add_parser("report", help="summarize one or more run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failures map to exit 2
        print(f"error: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main(sys.argv[1:]))
