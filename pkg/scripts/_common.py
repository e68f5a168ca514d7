"""Shared setup for the experiment scripts: the desk benchmark and a cached backbone."""

from __future__ import annotations

import logging
from pathlib import Path

import torch

from resmem.backbone import BackboneConfig, BackboneModel, pretrain
from resmem.datagen import generate_benchmark

DESK = BackboneConfig(d_model=128, n_layers=2, n_heads=4, d_ffn=1024, rng_seed=0)
DESK_STEPS = 3000


def setup(out: Path):
    torch.set_num_threads(1)
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    out.mkdir(parents=True, exist_ok=True)


def desk_inputs(out: Path, n_facts: int = 1000, seed: int = 0, cfg: BackboneConfig = DESK, steps: int = DESK_STEPS):
    """Benchmark plus a backbone pre-trained on it, reused from ``out`` when present."""
    bench = generate_benchmark(n_facts, 3, 100, seed=seed)
    path = out / f"backbone_d{cfg.d_model}_D{cfg.d_ffn}_{cfg.ffn}_{steps}.bin"
    if path.exists():
        return bench, BackboneModel.load(path)
    model = pretrain(cfg, bench.pretrain_corpus, steps, log_every=500).model
    model.save(path)
    return bench, model
