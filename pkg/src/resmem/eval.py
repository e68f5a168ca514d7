"""Editing metrics, forgetting curves and ablation sweeps.

Reliability and generalization are exact-match greedy decoding of the target.
Greedy decoding reproduces the target exactly iff every teacher-forced argmax
along the target agrees with it, so one forward pass per prompt suffices.

Locality compares against the unedited model's greedy continuation of the
irrelevant prompt.  With conditional activation on, an irrelevant prompt
counts as preserved only when every logit along that path is bit-equal to the
unedited model's.  Strategies that never bypass (dense, codebook, masks
without activation gating) are scored by token match of the continuation.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import BackboneModel, decode
from .datagen import BenchmarkSet
from .editor import EditorState, EditorStrategy, Route, StrategyKind, run_session
from .tophash import Strategy

log = logging.getLogger(__name__)

SUCCESS_DELTA = -math.log(0.8)
N_BINS = 11  # ten bins of width 0.1 on [0, 1) plus one bin holding exactly 1.0
PROMPT_CLASSES = ("edited", "rephrased", "irrelevant")


@dataclass
class MetricsReport:
    strategy: str
    n_edits: int
    reliability: float
    generalization: float
    locality: float
    average: float
    reliability_token: float
    generalization_token: float
    perplexity: Optional[float]
    locality_rule: str
    windows: list[tuple[int, float]] = field(default_factory=list)
    histograms: dict[str, list[int]] = field(default_factory=dict)

    @classmethod
    def build(cls, strategy, n_edits, rel, gen, loc, **kw) -> "MetricsReport":
        return cls(strategy, n_edits, rel, gen, loc, (rel + gen + loc) / 3, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def row(self) -> dict:
        d = self.to_dict()
        return {k: d[k] for k in CSV_COLUMNS}


CSV_COLUMNS = (
    "strategy",
    "n_edits",
    "reliability",
    "generalization",
    "locality",
    "average",
    "reliability_token",
    "generalization_token",
    "perplexity",
    "locality_rule",
)


def overlap_bin(r: float) -> int:
    return min(int(math.floor(r * 10 + 1e-9)), N_BINS - 1) if r < 1.0 else N_BINS - 1


def histogram(ratios: Iterable[float]) -> list[int]:
    counts = [0] * N_BINS
    for r in ratios:
        counts[overlap_bin(r)] += 1
    return counts


# -- per-prompt scoring ------------------------------------------------------


@dataclass(frozen=True)
class TargetScore:
    exact: bool
    token_accuracy: float
    loss: float


def _target_slice(prompt, target):
    n = len(target)
    L = len(prompt) + n
    return slice(L - n - 1, L - 1)


def score_target(state: EditorState, prompt, target, r: Route) -> TargetScore:
    """Exact match, teacher-forced token accuracy and mean cross-entropy of ``target`` after ``prompt``."""
    prompt, target = tuple(prompt), tuple(target)
    if not target:
        raise ValueError("target must be non-empty")
    if r.override is not None:
        hit = r.override[: len(target)] == target
        acc = sum(a == b for a, b in zip(r.override, target)) / len(target)
        return TargetScore(hit, acc, 0.0 if hit else math.inf)
    logits = state.logits(prompt + target, r)[_target_slice(prompt, target)]
    labels = torch.tensor(target)
    pred = logits.argmax(-1)
    loss = float(F.cross_entropy(logits.double(), labels))
    return TargetScore(bool(torch.equal(pred, labels)), float((pred == labels).double().mean()), loss)


def perplexity(state: EditorState, prompt, target, rng=None) -> float:
    return math.exp(score_target(state, prompt, target, state.route(prompt, rng)).loss)


def threshold_success(state: EditorState, prompt, target, delta: float = SUCCESS_DELTA, rng=None) -> bool:
    if delta <= 0:
        raise ValueError("delta must be positive")
    return score_target(state, prompt, target, state.route(prompt, rng)).loss < delta


_BASE_CACHE: dict[tuple[str, tuple[int, ...], int], tuple[tuple[int, ...], torch.Tensor]] = {}


def unedited_path(model: BackboneModel, digest: str, prompt, n: int) -> tuple[tuple[int, ...], torch.Tensor]:
    """Greedy continuation of the unedited model and its logits along that path (cached)."""
    key = (digest, tuple(prompt), n)
    if key not in _BASE_CACHE:
        path, _ = decode(model, prompt, n)
        with torch.no_grad():
            logits = model(tuple(prompt) + path)[0][_target_slice(prompt, path)]
        _BASE_CACHE[key] = (path, logits)
    return _BASE_CACHE[key]


def locality_preserved(state: EditorState, prompt, n: int, r: Route, rule: str) -> bool:
    path, base_logits = unedited_path(state.model, state.digest, prompt, n)
    if r.override is not None:
        return r.override[: len(path)] == path
    if r.hook is None and rule == "logit":
        # Bypass runs the identical unhooked computation.
        return True
    logits = state.logits(tuple(prompt) + path, r)[_target_slice(prompt, path)]
    if rule == "logit":
        return bool(torch.equal(logits, base_logits))
    return bool(torch.equal(logits.argmax(-1), torch.tensor(path)))


# -- reports ---------------------------------------------------------------


def locality_rule(state: EditorState, conditional: Optional[bool] = None) -> str:
    cond = state.strategy.routing.conditional_activation if conditional is None else conditional
    return "logit" if state.strategy.kind is StrategyKind.MEMOIR and cond else "token"


def evaluate(
    state: EditorState,
    bench: BenchmarkSet,
    up_to_edit: Optional[int] = None,
    window: int = 100,
    conditional: Optional[bool] = None,
    eval_seed: int = 0,
) -> MetricsReport:
    """Score the first ``up_to_edit`` edits (default: all applied) on the current state."""
    T = state.n_edits if up_to_edit is None else up_to_edit
    if T > state.n_edits:
        raise ValueError(f"up_to_edit={T} exceeds the {state.n_edits} edits applied")
    if T > len(bench.edits):
        raise ValueError(f"up_to_edit={T} exceeds the benchmark size {len(bench.edits)}")
    if window < 1:
        raise ValueError("window must be >= 1")
    edits = bench.edits[:T]
    rng = np.random.default_rng([eval_seed, 0xE7A1])
    rule = locality_rule(state, conditional)

    rel, rel_tok, losses, reph, reph_tok, loc = [], [], [], [], [], []
    ratios: dict[str, list[float]] = {c: [] for c in PROMPT_CLASSES}

    def routed(p):
        return state.route(p, rng, conditional)

    for e in edits:
        r = routed(e.prompt)
        s = score_target(state, e.prompt, e.target, r)
        rel.append(s.exact)
        rel_tok.append(s.token_accuracy)
        losses.append(s.loss)
        if r.match is not None:
            ratios["edited"].append(r.match.overlap_ratio)
        for x in e.rephrases:
            r = routed(x)
            s = score_target(state, x, e.target, r)
            reph.append(s.exact)
            reph_tok.append(s.token_accuracy)
            if r.match is not None:
                ratios["rephrased"].append(r.match.overlap_ratio)
        r = routed(e.irrelevant_prompt)
        loc.append(locality_preserved(state, e.irrelevant_prompt, len(e.irrelevant_target), r, rule))
        if r.match is not None:
            ratios["irrelevant"].append(r.match.overlap_ratio)

    def mean(xs):
        return float(np.mean(xs)) if len(xs) else 0.0

    finite = [v for v in losses if math.isfinite(v)]
    ppl = float(np.mean(np.exp(finite))) if finite and len(finite) == len(losses) else None
    if not edits:
        return MetricsReport.build(
            state.strategy.kind.value, 0, 0.0, 0.0, 1.0, reliability_token=0.0, generalization_token=0.0,
            perplexity=None, locality_rule=rule,
        )
    return MetricsReport.build(
        state.strategy.kind.value,
        T,
        mean(rel),
        mean(reph),
        mean(loc),
        reliability_token=mean(rel_tok),
        generalization_token=mean(reph_tok),
        perplexity=ppl,
        locality_rule=rule,
        windows=windowed(rel, window),
        histograms={c: histogram(v) for c, v in ratios.items() if v},
    )


def windowed(flags: Sequence[bool], window: int) -> list[tuple[int, float]]:
    return [(i // window, float(np.mean(flags[i : i + window]))) for i in range(0, len(flags), window)]


def forgetting_curve(state: EditorState, bench: BenchmarkSet, window: int = 100) -> list[tuple[int, float]]:
    """Reliability of each block of ``window`` consecutive edits, measured on the final state."""
    if window < 1:
        raise ValueError("window must be >= 1")
    flags = []
    for e in bench.edits[: state.n_edits]:
        flags.append(score_target(state, e.prompt, e.target, state.route(e.prompt)).exact)
    return windowed(flags, window)


# -- ablations ---------------------------------------------------------------

AXES = ("k", "tau", "strategy", "centering_n", "conditional")


def with_value(base: EditorStrategy, axis: str, value) -> EditorStrategy:
    r = dataclasses.replace(base.routing)
    s = dataclasses.replace(base, routing=r)
    if axis == "k":
        r.k = int(value)
    elif axis == "tau":
        r.tau = float(value)
        r.__post_init__()
    elif axis == "strategy":
        r.strategy = Strategy(value)
    elif axis == "centering_n":
        s.centering_n = int(value)
    elif axis == "conditional":
        r.conditional_activation = bool(value)
    else:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {AXES}")
    return s


def ablate(
    axis: str,
    values: Sequence,
    model: BackboneModel,
    bench: BenchmarkSet,
    base: EditorStrategy,
    window: int = 100,
) -> dict:
    """One session and report per value; ``tau`` and ``conditional`` only change inference, so they share a session."""
    if not values:
        raise ValueError("values must be non-empty")
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {AXES}")
    out = {}
    shared: Optional[EditorState] = None
    for v in values:
        strat = with_value(base, axis, v)
        if axis in ("tau", "conditional"):
            if shared is None:
                shared, _ = run_session(model, bench, base)
            shared.strategy = strat
            out[v] = evaluate(shared, bench, window=window)
        else:
            state, _ = run_session(model, bench, strat)
            out[v] = evaluate(state, bench, window=window)
        log.info("ablate %s=%s: %s", axis, v, out[v].row())
    if shared is not None:
        shared.strategy = base
    return out


# -- output ------------------------------------------------------------------


def write_csv(path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def write_report(report: MetricsReport, csv_path, jsonl_path) -> None:
    write_csv(csv_path, [report.row()], CSV_COLUMNS)
    Path(jsonl_path).write_text(json.dumps(report.to_dict()) + "\n", encoding="utf-8")


def write_ablation(table: dict, axis: str, csv_path, jsonl_path) -> None:
    write_csv(csv_path, [{"axis": axis, "value": v, **rep.row()} for v, rep in table.items()], ("axis", "value") + CSV_COLUMNS)
    lines = [json.dumps({"axis": axis, "value": v, **rep.to_dict()}) for v, rep in table.items()]
    Path(jsonl_path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
