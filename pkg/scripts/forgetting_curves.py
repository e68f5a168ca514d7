"""Forgetting curves of the masked memory against the dense and codebook comparators.

    python3 scripts/forgetting_curves.py --out runs/forgetting [--edits 1000]

Writes one CSV row per (strategy, window) and the full metric reports.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from _common import desk_inputs, setup

from resmem.editor import EditorStrategy, run_session
from resmem.eval import evaluate, write_csv
from resmem.memory import EditTrainConfig, RoutingConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("runs/forgetting"))
    ap.add_argument("--edits", type=int, default=1000)
    ap.add_argument("--window", type=int, default=100)
    ap.add_argument("--k", type=int, default=256)
    args = ap.parse_args()
    setup(args.out)
    bench, model = desk_inputs(args.out)
    bench = bench.truncated(args.edits)
    rows, reports = [], {}
    for kind in ("memoir", "dense", "codebook"):
        strat = EditorStrategy(kind, RoutingConfig(k=args.k), EditTrainConfig())
        state, _ = run_session(model, bench, strat)
        rep = evaluate(state, bench, window=args.window)
        reports[kind] = rep.to_dict()
        rows += [{"strategy": kind, "window": w, "reliability": r} for w, r in rep.windows]
        print(kind, rep.row())
    write_csv(args.out / "forgetting.csv", rows, ("strategy", "window", "reliability"))
    (args.out / "reports.json").write_text(json.dumps(reports, indent=1), encoding="utf-8")


if __name__ == "__main__":
    main()
