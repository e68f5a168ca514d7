"""Best-match overlap of edited, rephrased and irrelevant prompts against the stored masks.

No training is needed: masks of all edit prompts are inserted into a database and
every prompt class is queried against it, for each centering corpus size.

    python3 scripts/overlap_geometry.py --out runs/geometry [--k 256]
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from _common import desk_inputs, setup

from resmem.backbone import ffn_input_activations
from resmem.eval import histogram
from resmem.tophash import MaskDatabase, Permutation, compute_centering, pooled_key, tophash_mask


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("runs/geometry"))
    ap.add_argument("--k", type=int, default=256)
    ap.add_argument("--tau", type=float, default=0.4)
    args = ap.parse_args()
    setup(args.out)
    bench, model = desk_inputs(args.out)
    D = model.cfg.d_ffn
    perm = Permutation.from_seed(0, D)
    for n in (0, 10, 100):
        c = compute_centering(model, bench.centering_corpus[:n])

        def mask(p):
            return tophash_mask(pooled_key(ffn_input_activations(model, p), c), args.k, perm)

        db = MaskDatabase(D, args.k)
        for e in bench.edits:
            db.add(e.edit_id, mask(e.prompt))
        groups = {
            "edited": [e.prompt for e in bench.edits[:200]],
            "rephrased": [x for e in bench.edits[:200] for x in e.rephrases],
            "irrelevant": [e.irrelevant_prompt for e in bench.edits],
        }
        for name, prompts in groups.items():
            rs = np.array([db.best_match(mask(p)).overlap_ratio for p in prompts])
            print(f"centering_n={n} {name:10s} max {rs.max():.3f} mean {rs.mean():.3f} "
                  f"above tau {np.mean(rs >= args.tau):.3f} hist {histogram(rs)}")


if __name__ == "__main__":
    main()
