"""Command-line entry point: train / eval / sweep / oracle-tests."""

from __future__ import annotations

import argparse
import os
import sys

from . import autodiff as ad
from . import harness
from .harness import ConfigError


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowpick")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted config override, repeatable")
        p.add_argument("--out-dir", default="runs")
        p.add_argument("--regime", choices=["sde", "flow", "scan"], default=None)
        p.add_argument("--reward", choices=["sparse", "dense"], default=None)
        p.add_argument("--ablate", action="append", default=[],
                       choices=["fusion", "dr", "scan"],
                       help="disable a component, repeatable")

    p_train = sub.add_parser("train", help="pretrain + RL fine-tune one policy")
    common(p_train)
    p_eval = sub.add_parser("eval", help="held-out evaluation of a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--episodes", type=int, default=None)
    p_sweep = sub.add_parser("sweep", help="ablation grid + regime comparison")
    common(p_sweep)
    p_oracle = sub.add_parser("oracle-tests", help="print derived-value provenance")
    common(p_oracle)
    return parser


def _apply_flags(cfg: dict, args) -> dict:
    if args.regime:
        cfg["train"]["regime"] = args.regime
    if args.reward:
        cfg["train"]["reward_mode"] = args.reward
    for item in args.ablate:
        if item == "fusion":
            cfg["train"]["fusion_enabled"] = False
        elif item == "dr":
            cfg["train"]["reward_mode"] = "sparse"
        elif item == "scan" and cfg["train"]["regime"] == "scan":
            cfg["train"]["regime"] = "flow"
    return cfg


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = harness.load_config(args.config, args.override)
    except (ConfigError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    cfg = _apply_flags(cfg, args)
    os.makedirs(args.out_dir, exist_ok=True)

    if args.command == "train":
        harness.run_training(cfg, args.seed, args.out_dir)
        print(f"training complete; artifacts in {args.out_dir}")
        return 0

    if args.command == "eval":
        model = harness.build_model(cfg, args.seed)
        try:
            ad.load_into(args.checkpoint, model.params())
        except (ValueError, OSError) as e:
            print(f"checkpoint error: {e}", file=sys.stderr)
            return 3
        _, _, _, _, sched = harness.build_parts(cfg)
        episodes = args.episodes or cfg["experiment"]["eval_episodes"]
        report = harness.evaluate(model, cfg, sched, episodes,
                                  [args.seed], cfg["experiment"]["sampling_epochs"])
        out = os.path.join(args.out_dir, "eval_report.json")
        with open(out, "w") as fh:
            fh.write(report.to_json())
        print(report.to_json())
        return 0

    if args.command == "sweep":
        results = harness.run_sweep(cfg, args.out_dir)
        for section, cells in results.items():
            for label, rates in cells.items():
                vals = ", ".join(f"s{seed}={rate:.3f}" for seed, rate in rates.items())
                print(f"{section:9s} {label:16s} {vals}")
        return 0

    if args.command == "oracle-tests":
        rows = harness.oracle_table()
        rows.append({"name": "scripted controller success (no perturbation)",
                     "method": "20 rollouts",
                     "value": harness.scripted_success_rate(
                         harness.build_parts(cfg)[0]),
                     "reference": 1.0, "ok": None})
        width = max(len(r["name"]) for r in rows)
        ok_all = True
        for r in rows:
            status = "ok" if r["ok"] in (True, None) else "FAIL"
            ok_all = ok_all and r["ok"] is not False
            print(f"{r['name']:{width}s}  {r['value']:+.10f}  "
                  f"ref {r['reference']:+.10f}  [{r['method']}]  {status}")
        return 0 if ok_all else 1

    return 1


if __name__ == "__main__":
    raise SystemExit(main())
