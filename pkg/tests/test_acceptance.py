"""Desk-scale acceptance checks, one test per criterion.

Backbones and 1,000-edit sessions are cached on disk (``RESMEM_TEST_CACHE``,
default ``tests/.cache``) keyed by backbone digest, benchmark seed and editor
configuration, so only the first run pays for training.  Each test prints a
single ``CRITERION <n> PASS|FAIL`` line; the lines are repeated in the pytest
terminal summary.
"""

from __future__ import annotations

import hashlib
from fractions import Fraction
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from resmem.backbone import BackboneConfig, BackboneModel, decode, ffn_input_activations, pretrain
from resmem.datagen import generate_benchmark
from resmem.editor import EditorState, EditorStrategy, backbone_digest, restore, run_session, snapshot
from resmem.eval import evaluate, forgetting_curve
from resmem.memory import (
    EditTrainConfig,
    RoutingConfig,
    _EditBatch,
    _target_loss,
    mask_vector,
    memory_hook,
    routed_forward_infer,
)
from resmem.tophash import MaskDatabase, SparseMask, hamming, scan_best_match

CACHE = Path(os.environ.get("RESMEM_TEST_CACHE", Path(__file__).parent / ".cache"))
RESULTS: list[str] = []

T = 1000
BENCH_SEED = 0
# The trend criteria run on the wider backbone; column confinement uses the default D=256 one.
DESK = BackboneConfig(d_model=128, n_layers=2, n_heads=4, d_ffn=1024, rng_seed=0)
DESK_STEPS = 3000
SMALL = BackboneConfig(rng_seed=0)
SMALL_STEPS = 2000
D = DESK.d_ffn
K = D // 4


def record(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n:>2} {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    RESULTS.append(line)
    (CACHE / "acceptance_results.txt").parent.mkdir(parents=True, exist_ok=True)
    with open(CACHE / "acceptance_results.txt", "a", encoding="utf-8") as fh:
        fh.write(line + "\n")


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


def cached_backbone(cfg: BackboneConfig, steps: int, corpus) -> BackboneModel:
    CACHE.mkdir(parents=True, exist_ok=True)
    path = CACHE / f"backbone_{_key(cfg, steps, BENCH_SEED)}.bin"
    if path.exists():
        return BackboneModel.load(path)
    model = pretrain(cfg, corpus, steps, log_every=500).model
    model.save(path)
    return model


def cached_session(model, bench, strategy: EditorStrategy) -> EditorState:
    path = CACHE / f"state_{_key(backbone_digest(model), BENCH_SEED, len(bench.edits), strategy.to_dict())}.bin"
    if path.exists():
        return restore(path, model)
    t0 = time.perf_counter()
    state, _ = run_session(model, bench, strategy)
    print(f"session {strategy.kind.value} {strategy.routing} took {time.perf_counter() - t0:.0f}s")
    snapshot(state, path)
    return state


def memoir(**kw) -> EditorStrategy:
    centering_n = kw.pop("centering_n", 100)
    return EditorStrategy("memoir", RoutingConfig(**{"k": K, **kw}), EditTrainConfig(), centering_n=centering_n)


_REPORTS: dict = {}


def report_for(state, bench, **kw):
    key = (id(state), tuple(sorted(kw.items())))
    if key not in _REPORTS:
        _REPORTS[key] = evaluate(state, bench, **kw)
    return _REPORTS[key]


@pytest.fixture(scope="module")
def bench():
    return generate_benchmark(T, 3, 100, seed=BENCH_SEED)


@pytest.fixture(scope="module")
def desk(bench):
    return cached_backbone(DESK, DESK_STEPS, bench.pretrain_corpus)


@pytest.fixture(scope="module")
def base_state(desk, bench):
    return cached_session(desk, bench, memoir())


# -- exact invariants ---------------------------------------------------------


def test_c01_zero_init_identity(desk, bench):
    state = EditorState.fresh(desk, memoir(), bench)
    rng = np.random.default_rng(101)
    bad = 0
    zero = torch.zeros_like(state.memory.W)
    for _ in range(1000):
        prompt = tuple(int(t) for t in rng.integers(32, 127, size=int(rng.integers(1, 48))))
        base = desk(prompt)
        routed = state.logits(prompt, state.route(prompt))
        forced = desk(prompt, memory_hook(zero, SparseMask.from_indices(rng.choice(D, K, replace=False), D)))
        bad += not (torch.equal(base[0], routed) and torch.equal(base, forced))
    record(1, bad == 0, f"{1000 - bad}/1000 random prompts bit-identical before any edit")
    assert bad == 0


def test_c02_column_confinement(bench):
    model = cached_backbone(SMALL, SMALL_STEPS, bench.pretrain_corpus)
    assert model.cfg.d_ffn == 256
    strat = EditorStrategy("memoir", RoutingConfig(k=64), EditTrainConfig(), centering_n=100)
    state = EditorState.fresh(model, strat, bench)
    W0 = model.W0.clone()
    violations = 0
    for e in bench.edits:
        before = state.memory.W.clone()
        state.apply(e)
        changed = set(torch.nonzero((state.memory.W != before).any(0)).flatten().tolist())
        violations += not changed <= set(state.db.mask_of(e.edit_id).indices)
    ok = violations == 0 and torch.equal(model.W0, W0)
    record(2, ok, f"{T} edits at D=256 k=64, {violations} edits touched columns outside their mask; W0 unchanged")
    assert ok


def test_c03_bypass_exact_locality(base_state, bench):
    state, tau = base_state, base_state.strategy.routing.tau
    bypassed = not_equal = 0
    for e in bench.edits:
        r = state.route(e.irrelevant_prompt)
        if r.match.overlap_ratio < tau:
            bypassed += 1
            path, _ = decode(state.model, e.irrelevant_prompt, len(e.irrelevant_target))
            seq = e.irrelevant_prompt + path
            not_equal += not torch.equal(state.logits(seq, r), state.model(seq)[0])
            # the routed layer output equals the frozen projection alone
            a = ffn_input_activations(state.model, e.irrelevant_prompt)
            out, _ = routed_forward_infer(state.model.W0, state.memory.W, a, state.db, state.centering, state.perm, state.strategy.routing)
            not_equal += not torch.equal(out, torch.nn.functional.linear(torch.as_tensor(a), state.model.W0))
    loc = report_for(state, bench).locality
    ok = not_equal == 0 and loc == 1.0
    record(3, ok, f"{bypassed}/{T} irrelevant prompts bypassed, {not_equal} logit mismatches, locality {loc:.3f}")
    assert not_equal == 0
    assert loc == 1.0


def test_c04_exact_match_retrieval(base_state, bench):
    wrong = 0
    for e in bench.edits:
        m = base_state.route(e.prompt).match
        wrong += not (m.overlap_ratio == 1.0 and m.matched_edit_id == e.edit_id)
    record(4, wrong == 0, f"{T - wrong}/{T} edited prompts retrieve their own edit with R=1.0")
    assert wrong == 0


def test_c05_hamming_overlap_identity():
    rng = np.random.default_rng(5)
    bad = 0
    for _ in range(10_000):
        Dm = int(rng.integers(1, 600))
        k = int(rng.integers(1, Dm + 1))
        a = SparseMask.from_indices(rng.choice(Dm, k, replace=False), Dm)
        b = SparseMask.from_indices(rng.choice(Dm, k, replace=False), Dm)
        db = MaskDatabase(Dm, k)
        db.add(0, a)
        r = db.best_match(b)
        R = Fraction(r.overlap, k)  # exact rational form of the stored ratio
        bad += not (r.overlap_ratio == r.overlap / k and hamming(a, b) == r.hamming_distance == 2 * k * (1 - R))
    record(5, bad == 0, f"d_H = 2k(1-R) on {10_000 - bad}/10000 random equal-weight pairs")
    assert bad == 0


def test_c06_gradient_check():
    cfg = BackboneConfig(d_model=8, n_heads=2, d_ffn=16, max_seq_len=40, dtype="float64", rng_seed=4)
    model = BackboneModel(cfg).freeze()
    mask = SparseMask.from_indices([0, 3, 6, 7, 12], 16)
    batch = _EditBatch(model, [tuple(range(70, 80)) + (90, 91)], 2, mask_vector(mask, 16, torch.float64))
    W = torch.randn(8, 16, generator=torch.Generator().manual_seed(1), dtype=torch.float64) * 0.5
    Wv = W.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(_target_loss(model, Wv, batch, [0]), Wv)
    eps, worst = 1e-6, 0.0
    for i in range(8):
        for j in mask.indices:
            Wp, Wn = W.clone(), W.clone()
            Wp[i, j] += eps
            Wn[i, j] -= eps
            with torch.no_grad():
                fd = (_target_loss(model, Wp, batch, [0]) - _target_loss(model, Wn, batch, [0])).item() / (2 * eps)
            worst = max(worst, abs(fd - g[i, j].item()) / max(abs(fd), abs(g[i, j].item()), 1e-12))
    record(6, worst <= 1e-4, f"max relative error {worst:.2e} on active columns (d_model=8, D=16)")
    assert worst <= 1e-4


# -- trend criteria -------------------------------------------------------------


def test_c07_forgetting_contrast(desk, base_state, bench):
    dense = cached_session(desk, bench, EditorStrategy("dense", RoutingConfig(k=K), EditTrainConfig(), centering_n=100))
    m = forgetting_curve(base_state, bench, 100)[0][1]
    d = forgetting_curve(dense, bench, 100)[0][1]
    ok = m - d >= 0.15 and m >= 0.85
    record(7, ok, f"first-window reliability memoir {m:.3f} vs dense {d:.3f} (gap {m - d:+.3f})")
    assert m >= 0.85
    assert m - d >= 0.15


def test_c08_strategy_ordering(desk, base_state, bench):
    gens = {"tophash": report_for(base_state, bench).generalization}
    for s in ("hash", "random"):
        gens[s] = report_for(cached_session(desk, bench, memoir(strategy=s)), bench).generalization
    ok = gens["tophash"] - gens["hash"] >= 0.10 and gens["tophash"] - gens["random"] >= 0.10
    record(8, ok, "generalization " + ", ".join(f"{k} {v:.3f}" for k, v in gens.items()))
    assert gens["tophash"] - gens["hash"] >= 0.10
    assert gens["tophash"] - gens["random"] >= 0.10


def test_c09_conditional_activation_ablation(base_state, bench):
    on = report_for(base_state, bench).locality
    off = report_for(base_state, bench, conditional=False).locality
    record(9, on - off >= 0.10, f"locality with activation gating {on:.3f}, without {off:.3f}")
    assert on - off >= 0.10


def test_c10_k_sweep(desk, base_state, bench):
    avg = {K: report_for(base_state, bench).average}
    for k in (D // 32, D):
        avg[k] = report_for(cached_session(desk, bench, memoir(k=k)), bench).average
    ok = avg[K] > avg[D // 32] and avg[K] > avg[D]
    record(10, ok, "average " + ", ".join(f"k={k} {v:.3f}" for k, v in sorted(avg.items())))
    assert avg[K] > avg[D // 32]
    assert avg[K] > avg[D]


def test_c11_centering_robustness(desk, base_state, bench):
    reps = {100: report_for(base_state, bench)}
    for n in (0, 10):
        reps[n] = report_for(cached_session(desk, bench, memoir(centering_n=n)), bench)
    avgs = [r.average for r in reps.values()]
    spread = max(avgs) - min(avgs)
    locs_ok = all(r.locality == 1.0 for r in reps.values())
    ok = locs_ok and spread <= 0.05
    detail = ", ".join(f"n={n} loc {r.locality:.3f} avg {r.average:.3f}" for n, r in sorted(reps.items()))
    record(11, ok, f"{detail}; spread {spread:.3f}")
    assert locs_ok
    assert spread <= 0.05


def test_c12_index_matches_scan():
    rng = np.random.default_rng(12)
    bad = 0
    for _ in range(1000):
        Dm = int(rng.integers(8, 400))
        k = int(rng.integers(1, Dm + 1))
        n = int(rng.integers(1, 501))
        db, entries = MaskDatabase(Dm, k), []
        for i in range(n):
            m = SparseMask.from_indices(rng.choice(Dm, k, replace=False), Dm)
            db.add(i, m)
            entries.append((i, m))
        for _ in range(3):
            q = entries[int(rng.integers(n))][1] if rng.random() < 0.3 else SparseMask.from_indices(rng.choice(Dm, k, replace=False), Dm)
            bad += db.best_match(q) != scan_best_match(entries, q)
    record(12, bad == 0, f"{3000 - bad}/3000 queries over 1000 databases equal the exhaustive scan")
    assert bad == 0


def test_c13_round_trip(tmp_path, desk, bench):
    b = bench.truncated(200)
    strat = memoir()
    full, _ = run_session(desk, b, strat)
    half, _ = run_session(desk, b, strat, stop_after=100)
    snapshot(half, tmp_path / "half.bin")
    resumed, _ = run_session(desk, b, strat, state=restore(tmp_path / "half.bin", desk))
    same_w = torch.equal(full.memory.W, resumed.memory.W)
    same_db = np.array_equal(full.db.packed, resumed.db.packed) and full.db.edit_ids == resumed.db.edit_ids
    same_rep = evaluate(full, b) == evaluate(resumed, b)
    ok = same_w and same_db and same_rep
    record(13, ok, f"resume at 100 of 200 edits: W_mem equal {same_w}, mask db equal {same_db}, report equal {same_rep}")
    assert ok
