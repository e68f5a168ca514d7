"""Sequential edit sessions, comparator strategies and editor-state files.

Three strategies share one trainer:

* ``memoir``: sparse masked residual memory with mask routing.
* ``dense``: the same residual memory trained on every column and always on.
* ``codebook``: a prompt -> target table that fires on byte-identical prompts only.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import binfmt
from .backbone import BackboneModel, FFNHook, ffn_input_activations
from .datagen import BenchmarkSet, EditSample
from .memory import (
    EditError,
    EditTrainConfig,
    ResidualMemory,
    RoutingConfig,
    apply_edit,
    memory_hook,
    query_mask,
    route,
    train_memory,
)
from .tophash import CenteringVector, MaskDatabase, MatchResult, Permutation, Strategy, compute_centering

log = logging.getLogger(__name__)

STATE_MAGIC = b"RESMEMST"


class StrategyKind(str, enum.Enum):
    MEMOIR = "memoir"
    DENSE = "dense"
    CODEBOOK = "codebook"


@dataclass
class EditorStrategy:
    kind: StrategyKind = StrategyKind.MEMOIR
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    train: EditTrainConfig = field(default_factory=EditTrainConfig)
    perm_seed: int = 0
    centering_n: int = 100

    def __post_init__(self):
        self.kind = StrategyKind(self.kind)
        if self.centering_n < 0:
            raise ValueError("centering_n must be >= 0")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "routing": {**asdict(self.routing), "strategy": self.routing.strategy.value},
            "train": asdict(self.train),
            "perm_seed": self.perm_seed,
            "centering_n": self.centering_n,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EditorStrategy":
        return cls(
            StrategyKind(d["kind"]),
            RoutingConfig(**d["routing"]),
            EditTrainConfig(**d["train"]),
            int(d["perm_seed"]),
            int(d["centering_n"]),
        )


def backbone_digest(model: BackboneModel) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class Route:
    """Per-prompt routing decision, fixed for the whole generation."""

    hook: Optional[FFNHook]
    match: Optional[MatchResult]
    override: Optional[tuple[int, ...]] = None  # codebook answer

    @property
    def active(self) -> bool:
        return self.hook is not None or self.override is not None


class EditorState:
    def __init__(self, model: BackboneModel, strategy: EditorStrategy, centering: CenteringVector):
        D = model.cfg.d_ffn
        self.model = model
        self.strategy = strategy
        self.centering = centering
        self.perm = Permutation.from_seed(strategy.perm_seed, D)
        self.memory = ResidualMemory.like(model)
        self.db = MaskDatabase(D, strategy.routing.k if strategy.kind is StrategyKind.MEMOIR else D)
        self.codebook: dict[tuple[int, ...], tuple[int, ...]] = {}
        self.n_edits = 0
        self.digest = backbone_digest(model)
        # Random masks at inference draw from here unless the caller passes a generator.
        self.infer_rng = np.random.default_rng([strategy.train.rng_seed, 0x5EED])

    @classmethod
    def fresh(cls, model: BackboneModel, strategy: EditorStrategy, bench: BenchmarkSet) -> "EditorState":
        """Freeze the centering vector from the benchmark's centering corpus before any edit."""
        if strategy.centering_n > len(bench.centering_corpus):
            raise ValueError(f"centering_n={strategy.centering_n} exceeds the {len(bench.centering_corpus)} centering prompts")
        centering = compute_centering(model, bench.centering_corpus[: strategy.centering_n])
        return cls(model, strategy, centering)

    # -- editing -----------------------------------------------------------

    def apply(self, sample: EditSample) -> tuple[list[float], bool]:
        kind = self.strategy.kind
        if kind is StrategyKind.MEMOIR:
            rep = apply_edit(
                self.model, self.memory, self.db, sample, self.strategy.train, self.strategy.routing, self.centering, self.perm
            )
            losses, collision = rep.losses, rep.collision
        elif kind is StrategyKind.DENSE:
            losses, collision = train_memory(self.model, self.memory, None, sample, self.strategy.train), False
        else:
            if tuple(sample.prompt) in self.codebook:
                raise EditError(f"edit {sample.edit_id}: prompt already in codebook")
            self.codebook[tuple(sample.prompt)] = tuple(sample.target)
            losses, collision = [], False
        self.n_edits += 1
        return losses, collision

    # -- inference ---------------------------------------------------------

    def route(self, prompt, rng: Optional[np.random.Generator] = None, conditional: Optional[bool] = None) -> Route:
        """Routing decision for ``prompt``; ``conditional`` overrides the configured flag."""
        kind = self.strategy.kind
        if kind is StrategyKind.CODEBOOK:
            return Route(None, None, self.codebook.get(tuple(prompt)))
        if kind is StrategyKind.DENSE:
            return Route(memory_hook(self.memory.W, None), None)
        rcfg = self.strategy.routing
        if conditional is not None and conditional != rcfg.conditional_activation:
            rcfg = RoutingConfig(rcfg.tau, rcfg.k, rcfg.strategy, conditional)
        if rng is None and rcfg.strategy is Strategy.RANDOM:
            rng = self.infer_rng
        q = query_mask(ffn_input_activations(self.model, prompt), self.centering, self.perm, rcfg, bytes(prompt), rng)
        mask, match = route(self.db, q, rcfg)
        return Route(None if mask is None else memory_hook(self.memory.W, mask), match)

    def logits(self, tokens, r: Route) -> torch.Tensor:
        """Next-token logits ``[T, vocab]`` for a full token sequence under a routing decision."""
        with torch.no_grad():
            return self.model(tokens, r.hook)[0]


# -- sessions ----------------------------------------------------------------


@dataclass
class EditRecord:
    edit_id: int
    losses: list[float]
    collision: bool
    wall_time: float


@dataclass
class EditSessionLog:
    records: list[EditRecord] = field(default_factory=list)
    snapshots: dict[int, str] = field(default_factory=dict)  # edits applied -> state path
    final_state: Optional[str] = None
    failed_edit_id: Optional[int] = None

    def write_jsonl(self, path) -> None:
        lines = [json.dumps(asdict(r)) for r in self.records]
        lines.append(json.dumps({"type": "session", "snapshots": self.snapshots, "final_state": self.final_state}))
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def run_session(
    model: BackboneModel,
    bench: BenchmarkSet,
    strategy: EditorStrategy,
    snapshot_every: int = 100,
    snapshot_dir=None,
    state: Optional[EditorState] = None,
    stop_after: Optional[int] = None,
) -> tuple[EditorState, EditSessionLog]:
    """Apply ``bench.edits`` in order, resuming from ``state.n_edits`` when a state is given."""
    if not bench.edits:
        raise ValueError("benchmark has no edits")
    if snapshot_every < 1:
        raise ValueError("snapshot_every must be >= 1")
    if state is None:
        state = EditorState.fresh(model, strategy, bench)
    end = len(bench.edits) if stop_after is None else min(stop_after, len(bench.edits))
    session = EditSessionLog()
    snap_dir = Path(snapshot_dir) if snapshot_dir is not None else None
    if snap_dir is not None:
        snap_dir.mkdir(parents=True, exist_ok=True)
    for sample in bench.edits[state.n_edits : end]:
        t0 = time.perf_counter()
        try:
            losses, collision = state.apply(sample)
        except EditError:
            session.failed_edit_id = sample.edit_id
            log.error("session aborted at edit %d", sample.edit_id)
            raise
        session.records.append(EditRecord(sample.edit_id, losses, collision, time.perf_counter() - t0))
        if snap_dir is not None and state.n_edits % snapshot_every == 0:
            path = snap_dir / f"state_{state.n_edits:06d}.bin"
            snapshot(state, path)
            session.snapshots[state.n_edits] = str(path)
        if state.n_edits % 100 == 0:
            log.info("%s: %d edits applied", strategy.kind.value, state.n_edits)
    if snap_dir is not None:
        path = snap_dir / "state_final.bin"
        snapshot(state, path)
        session.final_state = str(path)
    return state, session


# -- state files -------------------------------------------------------------


def snapshot(state: EditorState, path) -> None:
    db_header, db_arrays = state.db.to_arrays()
    prompts = list(state.codebook)
    header = {
        "kind": "editor_state",
        "strategy": state.strategy.to_dict(),
        "backbone_digest": state.digest,
        "n_edits": state.n_edits,
        "db": db_header,
        "centering_n": state.centering.n_samples,
        "codebook": [[list(p), list(state.codebook[p])] for p in prompts],
    }
    arrays = {
        "W_mem": state.memory.W.numpy(),
        "dirty": state.memory.dirty.astype(np.uint8),
        "centering": state.centering.mean,
        **db_arrays,
    }
    binfmt.write_container(path, STATE_MAGIC, header, arrays)


def read_state_header(path) -> tuple[dict, dict[str, np.ndarray]]:
    return binfmt.read_container(path, STATE_MAGIC)


def restore(path, model: BackboneModel) -> EditorState:
    """Rebuild an editor state; the backbone must be the one the state was made with."""
    header, arrays = read_state_header(path)
    if header.get("kind") != "editor_state":
        raise binfmt.FormatError(f"{path}: not an editor state file")
    if header["backbone_digest"] != backbone_digest(model):
        raise binfmt.FormatError(f"{path}: state was built on a different backbone")
    strategy = EditorStrategy.from_dict(header["strategy"])
    state = EditorState(model, strategy, CenteringVector(arrays["centering"], header["centering_n"]))
    W = torch.from_numpy(arrays["W_mem"].copy())
    if W.shape != state.memory.W.shape or W.dtype != state.memory.W.dtype:
        raise binfmt.FormatError(f"{path}: W_mem shape/dtype does not match the backbone")
    state.memory.W = W
    state.memory.dirty = arrays["dirty"].astype(bool)
    state.db = MaskDatabase.from_arrays(header["db"], arrays)
    state.codebook = {tuple(p): tuple(t) for p, t in header["codebook"]}
    state.n_edits = int(header["n_edits"])
    return state


__all__ = [
    "EditRecord",
    "EditSessionLog",
    "EditorState",
    "EditorStrategy",
    "Route",
    "STATE_MAGIC",
    "StrategyKind",
    "backbone_digest",
    "read_state_header",
    "restore",
    "run_session",
    "snapshot",
]
