"""``bdlab`` command line: each subcommand runs the pipeline up to its stage, reusing checkpoints."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .harness import ConfigError, ExperimentConfig, LockedError, StageError, run_experiment

EXIT_OK, EXIT_INVALID, EXIT_COMPUTE = 0, 2, 3

# subcommand -> pipeline stage it finishes with
COMMANDS = {
    "synth": ("data", "synthesize the train/test corpus"),
    "poison": ("poison", "craft the poisoned training set and pattern"),
    "train": ("train", "train the benchmark and attacked models"),
    "detect": ("detect", "MAMF scan of the attacked and clean models"),
    "nc": ("nc", "reverse-engineering baseline over the lambda grid"),
    "fp": ("fp", "fine-pruning sweep of the attacked model"),
    "blur": ("blur", "blurring label-change detector"),
    "robustness": ("robustness", "noise, crop and fixed-location suites"),
    "report": ("report", "run every enabled stage and write report.json and figure CSVs"),
    "run": ("report", "full pipeline (same as report)"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bdlab", description="Perceptible backdoor attacks and MAMF detection.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--threads", type=int, help="worker processes for the MAMF scan")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        if args.threads is not None:
            overrides["workers"] = args.threads
        if overrides:
            cfg = cfg.replace(**overrides)
    except (ConfigError, OSError, TypeError, ValueError) as exc:
        print(f"bdlab: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    stage = COMMANDS[args.command][0]
    try:
        report = run_experiment(cfg, upto=stage)
    except (StageError, LockedError) as exc:
        print(f"bdlab: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    if report is not None:
        m = report["metrics"]
        summary = {
            "report": os.path.join(cfg.out, "report.json"),
            "attack_success_rate": m["attack_success_rate"],
            "rho_star_attacked": m["mamf_attacked"]["rho_star"],
            "rho_star_clean": m["mamf_clean"]["rho_star"],
            "decision_attacked": m["mamf_attacked"]["decision"],
            "decision_clean": m["mamf_clean"]["decision"],
        }
        print(json.dumps(summary, indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
