"""Sweeps over k, tau, mask strategy, centering size and activation gating.

    python3 scripts/ablations.py --out runs/ablations --axis k --values 32 256 1024
    python3 scripts/ablations.py --out runs/ablations --all
"""

from __future__ import annotations

import argparse
from pathlib import Path

from _common import desk_inputs, setup

from resmem.cli import parse_axis_value
from resmem.editor import EditorStrategy
from resmem.eval import ablate, write_ablation
from resmem.memory import EditTrainConfig, RoutingConfig

DEFAULT_SWEEPS = {
    "k": ["32", "256", "1024"],
    "tau": ["0.2", "0.4", "0.6"],
    "strategy": ["tophash", "hash", "random"],
    "centering_n": ["0", "10", "100"],
    "conditional": ["true", "false"],
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("runs/ablations"))
    ap.add_argument("--edits", type=int, default=1000)
    ap.add_argument("--axis", choices=sorted(DEFAULT_SWEEPS))
    ap.add_argument("--values", nargs="+")
    ap.add_argument("--all", action="store_true")
    args = ap.parse_args()
    if not args.all and not args.axis:
        ap.error("give --axis or --all")
    setup(args.out)
    bench, model = desk_inputs(args.out)
    bench = bench.truncated(args.edits)
    base = EditorStrategy("memoir", RoutingConfig(k=256), EditTrainConfig())
    sweeps = DEFAULT_SWEEPS if args.all else {args.axis: args.values or DEFAULT_SWEEPS[args.axis]}
    for axis, texts in sweeps.items():
        values = [parse_axis_value(axis, t) for t in texts]
        table = ablate(axis, values, model, bench, base)
        write_ablation(table, axis, args.out / f"ablate_{axis}.csv", args.out / f"ablate_{axis}.jsonl")
        for v, rep in table.items():
            print(f"{axis}={v}: rel {rep.reliability:.3f} gen {rep.generalization:.3f} loc {rep.locality:.3f} avg {rep.average:.3f}")


if __name__ == "__main__":
    main()
