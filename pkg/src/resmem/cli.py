"""Command-line entry point: ``resmem <subcommand> ...``.

Every run writes ``manifest.json`` (resolved arguments, library versions,
seed) next to its outputs.  Precedence is flag > ``--config`` JSON > default.
Failures print a single ``error: <kind>: <message>`` line and exit 1; usage
errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .backbone import BackboneConfig, BackboneModel, pretrain
from .datagen import generate_benchmark, load_records, save_records
from .editor import EditorStrategy, StrategyKind, read_state_header, restore, run_session
from .eval import AXES, ablate, evaluate, write_ablation, write_report
from .memory import EditTrainConfig, RoutingConfig
from .tophash import MaskDatabase, Strategy

OUTPUT_ROOT_ENV = "RESMEM_OUTPUT_ROOT"

log = logging.getLogger("resmem")


def _out_dir(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / default_name


def write_manifest(path: Path, args: argparse.Namespace, extra: Optional[dict] = None) -> None:
    config = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "subcommand": args.command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "versions": {
            "resmem": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
        **(extra or {}),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- subcommands -------------------------------------------------------------


def cmd_gen_data(args) -> int:
    bench = generate_benchmark(args.facts, args.rephrases, args.irrelevant, args.seed)
    out = Path(args.out) if args.out else _out_dir(args, "benchmark") / "benchmark.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_records(bench, out)
    write_manifest(out.with_name(out.name + ".manifest.json"), args)
    print(f"wrote {len(bench.edits)} edits to {out}")
    return 0


def cmd_pretrain(args) -> int:
    bench = load_records(args.data, args.max_seq_len)
    cfg = BackboneConfig(
        d_model=args.d_model,
        n_layers=args.layers,
        n_heads=args.heads,
        d_ffn=args.d_ffn,
        ffn=args.ffn,
        max_seq_len=args.max_seq_len,
        rng_seed=args.seed,
    )
    result = pretrain(cfg, bench.pretrain_corpus, args.steps, batch_size=args.batch_size, lr=args.lr)
    out = Path(args.out) if args.out else _out_dir(args, "backbone") / "backbone.bin"
    out.parent.mkdir(parents=True, exist_ok=True)
    result.model.save(out)
    write_manifest(out.with_name(out.name + ".manifest.json"), args, {"losses": result.losses})
    print(f"loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}; wrote {out}")
    return 0


def _strategy(args) -> EditorStrategy:
    return EditorStrategy(
        StrategyKind(args.strategy),
        RoutingConfig(args.tau, args.k, Strategy(args.mask_strategy), not args.no_ka),
        EditTrainConfig(steps_per_edit=args.steps, learning_rate=args.lr, rng_seed=args.seed),
        perm_seed=args.seed,
        centering_n=args.centering_n,
    )


def _load_inputs(args):
    model = BackboneModel.load(args.backbone)
    bench = load_records(args.benchmark, model.cfg.max_seq_len)
    if getattr(args, "limit", None):
        bench = bench.truncated(args.limit)
    return model, bench


def cmd_edit(args) -> int:
    model, bench = _load_inputs(args)
    out = _out_dir(args, "edit")
    out.mkdir(parents=True, exist_ok=True)
    state, session = run_session(model, bench, _strategy(args), args.snapshot_every, out)
    session.write_jsonl(out / "session.jsonl")
    write_manifest(out / "manifest.json", args, {"final_state": session.final_state})
    print(f"applied {state.n_edits} edits; state {session.final_state}; collisions {state.db.collisions}")
    return 0


def cmd_eval(args) -> int:
    model, bench = _load_inputs(args)
    state = restore(args.state, model)
    out = _out_dir(args, "eval")
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(state, bench, args.up_to, args.window, conditional=False if args.no_ka else None)
    write_report(report, out / "report.csv", out / "report.jsonl")
    write_manifest(out / "manifest.json", args)
    print(
        f"rel {report.reliability:.3f} gen {report.generalization:.3f} loc {report.locality:.3f} "
        f"avg {report.average:.3f} ({report.locality_rule} locality)"
    )
    return 0


def parse_axis_value(axis: str, text: str):
    if axis in ("k", "centering_n"):
        return int(text)
    if axis == "tau":
        return float(text)
    if axis == "conditional":
        return text.lower() in ("1", "true", "on", "yes")
    return Strategy(text).value


def cmd_ablate(args) -> int:
    model, bench = _load_inputs(args)
    values = [parse_axis_value(args.axis, v) for v in args.values.split(",") if v]
    out = _out_dir(args, f"ablate-{args.axis}")
    out.mkdir(parents=True, exist_ok=True)
    table = ablate(args.axis, values, model, bench, _strategy(args), args.window)
    write_ablation(table, args.axis, out / "ablation.csv", out / "ablation.jsonl")
    write_manifest(out / "manifest.json", args)
    for v, rep in table.items():
        print(f"{args.axis}={v}: rel {rep.reliability:.3f} gen {rep.generalization:.3f} loc {rep.locality:.3f} avg {rep.average:.3f}")
    return 0


def inspect_state(path) -> dict:
    header, arrays = read_state_header(path)
    db = MaskDatabase.from_arrays(header["db"], arrays)
    W = arrays["W_mem"]
    zero_cols = float((W == 0).all(axis=0).mean())
    summary = {
        "D": int(W.shape[1]),
        "k": int(header["db"]["k"]),
        "tau": header["strategy"]["routing"]["tau"],
        "strategy": header["strategy"]["kind"],
        "mask_strategy": header["strategy"]["routing"]["strategy"],
        "edits": int(header["n_edits"]),
        "masks": len(db),
        "collisions": db.collisions,
        "dirty_column_fraction": float(arrays["dirty"].astype(bool).mean()),
        "zero_column_fraction": zero_cols,
        "centering_n": header["centering_n"],
    }
    if len(db) > 1:
        bits = db.packed
        ov = np.array([np.bitwise_count(bits[i] & bits[i + 1 :]).sum(axis=1) for i in range(min(len(db), 200) - 1)], dtype=object)
        flat = np.concatenate([o for o in ov if len(o)]) / db.k
        summary["pairwise_overlap"] = {"mean": float(flat.mean()), "max": float(flat.max()), "sampled_masks": min(len(db), 200)}
    return summary


def cmd_inspect(args) -> int:
    summary = inspect_state(args.state)
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        for key, value in summary.items():
            print(f"{key}: {value}")
    return 0


# -- parser ----------------------------------------------------------------


def _edit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backbone", required=True)
    p.add_argument("--benchmark", required=True)
    p.add_argument("--strategy", choices=[s.value for s in StrategyKind], default="memoir")
    p.add_argument("--mask-strategy", choices=[s.value for s in Strategy], default="tophash")
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--tau", type=float, default=0.4)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--centering-n", type=int, default=100)
    p.add_argument("--no-ka", action="store_true", help="disable conditional activation")
    p.add_argument("--limit", type=int, default=None, help="use only the first N edits")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resmem", description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=None, help="JSON file of flag defaults")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    p.add_argument("--facts", type=int, default=1000)
    p.add_argument("--rephrases", type=int, default=3)
    p.add_argument("--irrelevant", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pre-train the backbone on a benchmark's corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--d-ffn", type=int, default=256)
    p.add_argument("--ffn", choices=("gelu", "swiglu"), default="gelu")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--max-seq-len", type=int, default=96)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("edit", help="run a sequential edit session")
    _edit_flags(p)
    p.add_argument("--snapshot-every", type=int, default=100)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="evaluate an editor state")
    p.add_argument("--backbone", required=True)
    p.add_argument("--benchmark", required=True)
    p.add_argument("--state", required=True)
    p.add_argument("--up-to", type=int, default=None)
    p.add_argument("--window", type=int, default=100)
    p.add_argument("--no-ka", action="store_true", help="score with conditional activation disabled")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one configuration axis")
    _edit_flags(p)
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--window", type=int, default=100)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="summarise an editor state file")
    p.add_argument("--state", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = json.loads(Path(known.config).read_text(encoding="utf-8"))
    if not isinstance(values, dict):
        raise ValueError(f"{known.config}: config must be a JSON object")
    for action in parser._subparsers._group_actions:  # one subparsers action
        for sp in action.choices.values():
            sp.set_defaults(**{k.replace("-", "_"): v for k, v in values.items()})


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except (OSError, ValueError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except OSError as exc:
        where = f" {exc.filename}" if getattr(exc, "filename", None) else ""
        print(f"error: io:{where}: {exc.strerror or exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - single-line contract
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
