"""Command line interface.

Subcommands:
  run     one experiment (method x protocol x seed), emit CSV/table/audit
  ablate  the component ladder over one or more seeds
  report  merge result CSVs, fill joint-reference gaps, re-emit

Exit status is 0 on success and 2 on usage or validation errors.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .config import ExperimentConfig, load_config, save_config
from .eval_report import emit_report, fill_deltas, read_report_csv, reports_from_rows
from .replay_source import export_replay_manifest
from .segmodel import save_head
from .trainer import run_pipeline, write_audit_log, write_filter_audit

ABLATION_ROWS = (
    ("replay", {"adversarial": False, "semantic": "off", "background_inpaint": False, "knowledge_inpaint": "off"}),
    ("replay+al", {"adversarial": True, "semantic": "off", "background_inpaint": False, "knowledge_inpaint": "off"}),
    ("replay+al+cth", {"adversarial": True, "semantic": "cth", "background_inpaint": False, "knowledge_inpaint": "off"}),
    ("replay+al+cth+bi", {"adversarial": True, "semantic": "cth", "background_inpaint": True, "knowledge_inpaint": "off"}),
    ("recall+", {"adversarial": True, "semantic": "cth", "background_inpaint": True, "knowledge_inpaint": "on"}),
)


def _base_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "protocol", None):
        sizes = tuple(int(tok) for tok in args.protocol.split("-"))
        overrides["group_sizes"] = sizes
        overrides["num_classes"] = sum(sizes)
        if len(sizes) != len(cfg.samples_per_step):
            base = cfg.samples_per_step[0] if cfg.samples_per_step else 100
            follow = cfg.samples_per_step[-1] if len(cfg.samples_per_step) > 1 else 60
            overrides["samples_per_step"] = (base,) + (follow,) * (len(sizes) - 1)
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    if getattr(args, "method", None):
        overrides["method"] = args.method
    if getattr(args, "pool", None) is not None:
        overrides["pool_per_class"] = args.pool
    return replace(cfg, **overrides) if overrides else cfg


def _cmd_run(args) -> int:
    cfg = _base_config(args)
    report, state = run_pipeline(cfg)
    reports = fill_deltas([report])
    csv_path, table_path = emit_report(reports, args.out)
    write_audit_log(f"{args.out}/audit.jsonl", state)
    save_config(f"{args.out}/config.yaml", cfg)
    save_head(f"{args.out}/model.ckpt", state.head)
    if state.replay is not None and len(state.replay) > 0:
        write_filter_audit(f"{args.out}/filter_audit.jsonl", state)
        export_replay_manifest(state.replay, f"{args.out}/replay")
    with open(table_path) as f:
        sys.stdout.write(f.read())
    print(f"results: {csv_path}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _base_config(args)
    seeds = [int(tok) for tok in args.seeds.split(",")]
    reports = []
    for seed in seeds:
        for name, toggles in ABLATION_ROWS:
            row_cfg = replace(cfg, method="recall+", seed=seed, **toggles)
            report, _ = run_pipeline(row_cfg)
            report.method = name
            reports.append(report)
        if args.with_joint:
            report, _ = run_pipeline(replace(cfg, method="joint", seed=seed))
            reports.append(report)
    csv_path, table_path = emit_report(fill_deltas(reports), args.out, basename="ablation")
    with open(table_path) as f:
        sys.stdout.write(f.read())
    print(f"results: {csv_path}")
    return 0


def _cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        rows.extend(read_report_csv(path))
    if not rows:
        print("no rows found in the given CSVs", file=sys.stderr)
        return 2
    reports = fill_deltas(reports_from_rows(rows))
    csv_path, table_path = emit_report(reports, args.out, basename=args.basename)
    with open(table_path) as f:
        sys.stdout.write(f.read())
    print(f"results: {csv_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shapereplay", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment")
    run_p.add_argument("--config", help="YAML config file")
    run_p.add_argument("--seed", type=int)
    run_p.add_argument("--protocol", help="group sizes like 4-2-2")
    run_p.add_argument("--mode", choices=["disjoint", "overlapped"])
    run_p.add_argument("--method", choices=["recall+", "ft", "joint", "s&r"])
    run_p.add_argument("--pool", type=int, help="web pool size per class")
    run_p.add_argument("--out", required=True, help="output directory")
    run_p.set_defaults(func=_cmd_run)

    abl_p = sub.add_parser("ablate", help="run the component ladder")
    abl_p.add_argument("--config", help="YAML config file")
    abl_p.add_argument("--seeds", default="1", help="comma-separated seeds")
    abl_p.add_argument("--protocol", help="group sizes like 4-2-2")
    abl_p.add_argument("--mode", choices=["disjoint", "overlapped"])
    abl_p.add_argument("--pool", type=int, help="web pool size per class")
    abl_p.add_argument("--with-joint", action="store_true", help="also run the joint reference per seed")
    abl_p.add_argument("--out", required=True, help="output directory")
    abl_p.set_defaults(func=_cmd_ablate)

    rep_p = sub.add_parser("report", help="merge result CSVs")
    rep_p.add_argument("inputs", nargs="+", help="result CSV files")
    rep_p.add_argument("--out", required=True, help="output directory")
    rep_p.add_argument("--basename", default="merged")
    rep_p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
