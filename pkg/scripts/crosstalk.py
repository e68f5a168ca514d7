"""Crosstalk between edits that share mask columns.

For edits i and j the memory write of j reaches prompt i through the columns the two
masks share.  c_ij = <(M_i & M_j) * a_j, a_i> / <M_i * a_i, a_i> over last-token
edited-layer activations, where 0 means no interference.  Reported per centering
choice used to build the masks, plus the dense (all columns) reference.

    python3 scripts/crosstalk.py --out runs/crosstalk [--edits 300]
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from _common import desk_inputs, setup

from resmem.backbone import ffn_input_activations


def mean_crosstalk(last: np.ndarray, masks: np.ndarray) -> float:
    x = last * masks
    num = x @ (last * masks).T  # entry (i, j) sums over columns in both masks
    c = num / np.diag(num)[:, None]
    np.fill_diagonal(c, np.nan)
    return float(np.nanmean(c))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("runs/crosstalk"))
    ap.add_argument("--edits", type=int, default=300)
    ap.add_argument("--k", type=int, default=256)
    args = ap.parse_args()
    setup(args.out)
    bench, model = desk_inputs(args.out)
    D = model.cfg.d_ffn

    def acts(p):
        return ffn_input_activations(model, p).astype(np.float64)

    edits = bench.edits[: args.edits]
    A = [acts(e.prompt) for e in edits]
    last = np.stack([a[-1] for a in A])
    keys = np.stack([a.mean(0) for a in A])
    facts = np.stack([acts(e.prompt).mean(0) for e in bench.edits[-100:]])
    irr = np.stack([acts(e.irrelevant_prompt).mean(0) for e in bench.edits[-100:]])
    centers = {
        "none": np.zeros(D),
        "facts": facts.mean(0),
        "mixed": (facts.mean(0) + irr.mean(0)) / 2,
        "irrelevant": irr.mean(0),
    }
    for name, mu in centers.items():
        idx = np.argsort(-(keys - mu), axis=1, kind="stable")[:, : args.k]
        masks = np.zeros((len(edits), D))
        np.put_along_axis(masks, idx, 1.0, axis=1)
        print(f"centering {name:10s} crosstalk {mean_crosstalk(last, masks):.3f}")
    print(f"dense               crosstalk {mean_crosstalk(last, np.ones_like(last)):.3f}")


if __name__ == "__main__":
    main()
