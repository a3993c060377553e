"""Command-line entry point.

Subcommands mirror the pipeline stages: `generate`, `train`, `unlearn`,
`eval`, `cobum`, `saliency` run one stage each against a scenario config;
`run` executes the whole pipeline and writes the report table. Exit codes:
0 success, 2 operator error (bad flags, missing files, malformed config),
1 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import biasgen as bg
from . import cobum as cb
from . import fairness_eval as fe
from . import harness as hn
from . import model as md
from . import unlearn as ul


def _out_dir(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("UNLEARNLAB_OUT_ROOT", "runs")
    return Path(root) / default_name


def _config(args) -> hn.ExperimentConfig:
    if not args.config:
        raise hn.UserError("this subcommand needs --config")
    return hn.load_config(args.config)


def _bundle(cfg: hn.ExperimentConfig, args) -> bg.DataBundle:
    return hn.build_bundle(cfg, args.seed)


def _load_or_train_baseline(cfg, bundle, args):
    if args.baseline:
        if not Path(args.baseline).exists():
            raise hn.UserError(f"baseline checkpoint not found: {args.baseline}")
        return md.load_checkpoint(args.baseline)
    model, _, _ = hn.train_baseline(cfg, bundle, args.seed)
    return model


def cmd_generate(args) -> int:
    cfg = _config(args)
    bundle = _bundle(cfg, args)
    out = _out_dir(args, f"{cfg.name}-seed{args.seed}-generate")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bundle.csv"
    bg.save_bundle(bundle, path)
    print(f"bundle: {path} ({len(bundle.train)} train / {len(bundle.val)} val / "
          f"{len(bundle.test)} test, |D_f|={len(bundle.forget_idx)})")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    bundle = _bundle(cfg, args)
    model, wall, units = hn.train_baseline(cfg, bundle, args.seed)
    out = _out_dir(args, f"{cfg.name}-seed{args.seed}-train")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "baseline.ckpt"
    md.save_checkpoint(model, path)
    print(f"baseline checkpoint: {path} ({wall:.2f}s, {units:.0f} units)")
    return 0


def cmd_unlearn(args) -> int:
    cfg = _config(args)
    if args.strategy not in cfg.strategies:
        raise hn.UserError(
            f"strategy {args.strategy!r} is not listed in {cfg.name}'s config "
            f"(has: {', '.join(cfg.strategies)})")
    bundle = _bundle(cfg, args)
    baseline = _load_or_train_baseline(cfg, bundle, args)
    if args.gold:
        if not Path(args.gold).exists():
            raise hn.UserError(f"gold checkpoint not found: {args.gold}")
        gold = md.load_checkpoint(args.gold)
    else:
        gold = ul.hard_unlearn(
            bundle, hn._train_config(cfg, args.seed + hn.SEED_GOLD),
            hn.model_arch(cfg, bundle), head=cfg.head).model
    result = hn.run_strategy(args.strategy, cfg, bundle, baseline, gold, args.seed)
    out = _out_dir(args, f"{cfg.name}-seed{args.seed}-{args.strategy}")
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{args.strategy}.ckpt"
    md.save_checkpoint(result.model, path)
    note = " (truncated by divergence guard)" if result.truncated else ""
    print(f"{args.strategy} checkpoint: {path} ({result.wall_time_seconds:.2f}s, "
          f"{result.cost_units:.0f} units){note}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    if not Path(args.checkpoint).exists():
        raise hn.UserError(f"checkpoint not found: {args.checkpoint}")
    bundle = _bundle(cfg, args)
    model = md.load_checkpoint(args.checkpoint)
    baseline = hn.load_report(args.baseline_report) if args.baseline_report else None
    report = fe.evaluate_model(model, bundle, baseline=baseline)
    out = _out_dir(args, f"{cfg.name}-seed{args.seed}-eval")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(json.dumps(hn.report_to_dict(report), indent=2) + "\n",
                    encoding="utf-8")
    print(f"report: {path} (FA={report.fa:.4f} RA={report.ra:.4f} "
          f"TA={report.ta:.4f} DP={report.dp_gap:.4f} EO={report.eo_gap:.4f} "
          f"MIA={report.mia_auc:.4f})")
    return 0


def cmd_cobum(args) -> int:
    params = _config(args).cobum_params if args.config else cb.CoBumParams()
    unlearned = hn.load_report(args.unlearned)
    gold = hn.load_report(args.gold_report)
    baseline = hn.load_report(args.baseline_report)
    scored = cb.score_reports(unlearned, gold, baseline, params,
                              fa_floor=params.epsilon)
    parts = " ".join(f"{k}={scored.clamped[k]:.4f}" for k in cb.COMPONENTS)
    print(f"{parts} Co-BUM={scored.composite:.4f}")
    out = _out_dir(args, "cobum")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "cobum.json"
    path.write_text(json.dumps({"raw": scored.raw, "clamped": scored.clamped,
                                "composite": scored.composite}, indent=2) + "\n",
                    encoding="utf-8")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, f"{cfg.name}-seed{args.seed}")
    manifest = hn.run_experiment(cfg, args.seed, out, config_path=args.config)
    failed = (f", failed: {', '.join(manifest.failed_strategies)}"
              if manifest.failed_strategies else "")
    print(f"run complete: {manifest.reports['csv']}{failed}")
    return 0


def cmd_saliency(args) -> int:
    cfg = _config(args)
    if not Path(args.checkpoint).exists():
        raise hn.UserError(f"checkpoint not found: {args.checkpoint}")
    bundle = _bundle(cfg, args)
    model = md.load_checkpoint(args.checkpoint)
    samples = bundle.split(args.split)
    if args.limit is not None:
        if args.limit < 1:
            raise hn.UserError("--limit must be >= 1")
        samples = samples[: args.limit]
    rows = np.stack([fe.saliency(model, smp) for smp in samples])
    out = _out_dir(args, f"{cfg.name}-seed{args.seed}-saliency")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "saliency.csv"
    cols = ([f"s_{i}" for i in range(bundle.d_s)]
            + [f"b_{i}" for i in range(bundle.d_b)])
    lines = [",".join(["index", "label", "group"] + cols)]
    for i, (smp, sal) in enumerate(zip(samples, rows)):
        lines.append(",".join([str(i), str(smp.label), str(smp.group)]
                              + [f"{v:.6f}" for v in sal]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"saliency: {path} ({len(samples)} rows from {args.split})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unlearnlab",
        description="Desk-scale machine-unlearning laboratory")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="scenario config file (.cfg)")
        p.add_argument("--seed", type=int, default=1, help="master seed")
        p.add_argument("--out", help="output directory "
                       "(default: $UNLEARNLAB_OUT_ROOT or ./runs, per-command subdir)")
        p.set_defaults(func=fn)
        return p

    add("generate", cmd_generate, "write a data bundle")
    add("train", cmd_train, "train the biased baseline")
    p = add("unlearn", cmd_unlearn, "run one unlearning strategy")
    p.add_argument("--strategy", required=True,
                   choices=sorted(hn.STRATEGY_LABELS))
    p.add_argument("--baseline", help="baseline checkpoint to start from "
                   "(default: retrain in place)")
    p.add_argument("--gold", help="gold checkpoint for scrub's teacher "
                   "(default: retrain in place)")
    p = add("eval", cmd_eval, "evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline-report", help="baseline report.json for drop columns")
    p = add("cobum", cmd_cobum, "composite score from three report files")
    p.add_argument("--unlearned", required=True, help="unlearned model report.json")
    p.add_argument("--gold-report", required=True, help="gold model report.json")
    p.add_argument("--baseline-report", required=True, help="baseline report.json")
    add("run", cmd_run, "full pipeline: generate, train, unlearn, evaluate, report")
    p = add("saliency", cmd_saliency, "per-sample input attribution dump")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=list(bg.SPLITS))
    p.add_argument("--limit", type=int, help="only the first N samples")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except hn.UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
