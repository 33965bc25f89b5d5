#!/usr/bin/env python3
"""Run the whole experiment: train, attack grid, all dissection stages, report.

    python scripts/run_pipeline.py [--config cfg.json] [--output-dir out]

Without --config this uses the pinned desk-scale protocol (8 shape
classes, 50 images each, seed 42). Expect a few minutes of runtime.
"""

import argparse
import json
import sys
import time

from advdissect import cli


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON experiment config")
    parser.add_argument("--output-dir", help="override the config's output_dir")
    args = parser.parse_args()

    raw = cli.default_config() if args.config is None else json.load(open(args.config))
    if args.output_dir:
        raw["output_dir"] = args.output_dir
    cfg = cli.parse_config(raw)

    t0 = time.time()
    metrics = cli.cmd_train(cfg)
    print(f"[train] clean accuracy {metrics['clean_accuracy']:.4f} ({time.time() - t0:.0f}s)")

    t1 = time.time()
    manifest = cli.cmd_attack(cfg)
    for kind, rate in manifest["success_rate_by_kind"].items():
        print(f"[attack] {kind}: success {rate:.3f}")
    print(f"[attack] done ({time.time() - t1:.0f}s)")

    for stage in cli.STAGES:
        t2 = time.time()
        cli.cmd_dissect(cfg, stage)
        print(f"[dissect/{stage}] done ({time.time() - t2:.0f}s)")

    summary = cli.cmd_report(cfg)
    print(json.dumps(summary, sort_keys=True, indent=1))
    print(f"[total] {time.time() - t0:.0f}s; outputs in {cfg.output_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
