"""Residual memory at the edited projection: masked training and routed inference."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import BackboneModel, FFNHook
from .datagen import EditSample
from .tophash import (
    CenteringVector,
    MaskDatabase,
    MatchResult,
    Permutation,
    SparseMask,
    Strategy,
    alternative_mask,
    pooled_key,
)

log = logging.getLogger(__name__)


class EditError(RuntimeError):
    pass


@dataclass
class EditTrainConfig:
    learning_rate: float = 1.0
    grad_clip_norm: float = 1.0
    steps_per_edit: int = 50
    n_prefix_augmentations: int = 10
    prefix_len: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if min(self.learning_rate, self.grad_clip_norm) <= 0 or self.steps_per_edit < 1:
            raise ValueError("learning_rate, grad_clip_norm and steps_per_edit must be positive")
        if self.n_prefix_augmentations < 0 or self.prefix_len < 0:
            raise ValueError("augmentation counts must be non-negative")


@dataclass
class RoutingConfig:
    tau: float = 0.4
    k: int = 64
    strategy: Strategy = Strategy.TOPHASH
    conditional_activation: bool = True

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.k < 1:
            raise ValueError("k must be >= 1")


class ResidualMemory:
    """Zero-initialised copy of the edited projection, ``W`` has shape (d_model, D)."""

    def __init__(self, d_model: int, D: int, dtype=torch.float32):
        self.W = torch.zeros(d_model, D, dtype=dtype)
        self.dirty = np.zeros(D, dtype=bool)

    @classmethod
    def like(cls, model: BackboneModel) -> "ResidualMemory":
        return cls(model.cfg.d_model, model.cfg.d_ffn, model.cfg.torch_dtype)

    @property
    def D(self) -> int:
        return self.W.shape[1]

    def dirty_fraction(self) -> float:
        return float(self.dirty.mean())

    def zero_column_fraction(self) -> float:
        return float((self.W == 0).all(dim=0).double().mean())

    def clone(self) -> "ResidualMemory":
        out = ResidualMemory.__new__(ResidualMemory)
        out.W, out.dirty = self.W.clone(), self.dirty.copy()
        return out


def mask_vector(mask: Optional[SparseMask], D: int, dtype) -> torch.Tensor:
    if mask is None:
        return torch.ones(D, dtype=dtype)
    m = torch.zeros(D, dtype=dtype)
    m[list(mask.indices)] = 1
    return m


def memory_hook(W_mem: torch.Tensor, mask: Optional[SparseMask]) -> FFNHook:
    """FFN override ``W0 a + W_mem (mask * a)``; ``mask=None`` means every column."""
    m = mask_vector(mask, W_mem.shape[1], W_mem.dtype)

    def hook(a, base_out):
        return base_out + F.linear(a * m, W_mem)

    return hook


def edited_forward_train(W0, W_mem, activations, mask: Optional[SparseMask]) -> torch.Tensor:
    a = torch.as_tensor(activations, dtype=W0.dtype)
    if a.shape[-1] != W0.shape[1] or W_mem.shape != W0.shape:
        raise ValueError("shape mismatch between activations, W0 and W_mem")
    if mask is not None and mask.D != W0.shape[1]:
        raise ValueError("mask width does not match W0")
    return F.linear(a, W0) + F.linear(a * mask_vector(mask, W0.shape[1], W0.dtype), W_mem)


def query_mask(
    activations,
    centering: CenteringVector,
    perm: Permutation,
    rcfg: RoutingConfig,
    prompt_bytes: bytes = b"",
    rng: Optional[np.random.Generator] = None,
) -> SparseMask:
    key = pooled_key(np.asarray(activations), centering)
    return alternative_mask(rcfg.strategy, key, rcfg.k, perm, prompt_bytes, rng)


def route(
    db: MaskDatabase, query: SparseMask, rcfg: RoutingConfig
) -> tuple[Optional[SparseMask], MatchResult]:
    """Mask the memory should use for a query, or None to bypass it."""
    match = db.best_match(query)
    if not rcfg.conditional_activation:
        return query, match
    if match.matched_edit_id is None or match.overlap_ratio < rcfg.tau:
        return None, match
    return db.mask_of(match.matched_edit_id), match


def routed_forward_infer(
    W0,
    W_mem,
    activations,
    db: MaskDatabase,
    centering: CenteringVector,
    perm: Permutation,
    rcfg: RoutingConfig,
    prompt_bytes: bytes = b"",
    rng: Optional[np.random.Generator] = None,
) -> tuple[torch.Tensor, MatchResult]:
    a = torch.as_tensor(activations, dtype=W0.dtype)
    q = query_mask(a.numpy(), centering, perm, rcfg, prompt_bytes, rng)
    mask, match = route(db, q, rcfg)
    base = F.linear(a, W0)
    if mask is None:
        return base, match
    return memory_hook(W_mem, mask)(a, base), match


# -- training ---------------------------------------------------------------


@dataclass
class EditReport:
    edit_id: int
    losses: list[float] = field(default_factory=list)
    mask: Optional[SparseMask] = None
    collision: bool = False


def sample_prefixes(model: BackboneModel, n: int, length: int, seed) -> list[tuple[int, ...]]:
    """Random-token prefixes sampled from the frozen base model, starting at a random printable byte."""
    if n == 0 or length == 0:
        return []
    g = torch.Generator().manual_seed(int(np.random.default_rng(seed).integers(2**62)))
    seq = torch.randint(33, 127, (n, 1), generator=g)
    with torch.no_grad():
        while seq.shape[1] < length:
            probs = torch.softmax(model(seq)[:, -1].double(), dim=-1)
            seq = torch.cat([seq, torch.multinomial(probs, 1, generator=g)], dim=1)
    return [tuple(int(t) for t in row) for row in seq]


class _EditBatch:
    """Frozen-prefix cache for one training sequence set (all rows share a length)."""

    def __init__(self, model: BackboneModel, seqs: list[tuple[int, ...]], n_target: int, m: torch.Tensor):
        tokens = torch.tensor(seqs, dtype=torch.long)
        with torch.no_grad():
            resid, a = model.edit_layer_state(tokens)
            self.base = resid + model.edit_block.proj(a)
        self.masked = a * m
        L = tokens.shape[1]
        # logits at position p predict token p + 1
        self.logit_pos = slice(L - n_target - 1, L - 1)
        self.labels = tokens[:, L - n_target :]


def _target_loss(model: BackboneModel, W: torch.Tensor, batch: _EditBatch, rows) -> torch.Tensor:
    resid = batch.base[rows] + F.linear(batch.masked[rows], W)
    logits = model.forward_tail(resid)[:, batch.logit_pos]
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch.labels[rows].reshape(-1))


def train_memory(
    model: BackboneModel,
    memory: ResidualMemory,
    mask: Optional[SparseMask],
    sample: EditSample,
    tcfg: EditTrainConfig,
) -> list[float]:
    """SGD on ``memory.W`` for one edit; only the columns in ``mask`` move.

    Steps alternate between the clean prompt and one randomly chosen
    prefix-augmented copy.  ``mask=None`` trains every column.
    """
    D = memory.D
    m = mask_vector(mask, D, memory.W.dtype)
    cols = torch.arange(D) if mask is None else torch.tensor(mask.indices, dtype=torch.long)
    prompt, target = tuple(sample.prompt), tuple(sample.target)
    clean = _EditBatch(model, [prompt + target], len(target), m)
    prefixes = sample_prefixes(model, tcfg.n_prefix_augmentations, tcfg.prefix_len, [tcfg.rng_seed, sample.edit_id, 1])
    aug = _EditBatch(model, [p + prompt + target for p in prefixes], len(target), m) if prefixes else None
    pick = np.random.default_rng([tcfg.rng_seed, sample.edit_id, 2])

    W = memory.W
    losses = []
    for step in range(tcfg.steps_per_edit):
        Wv = W.detach().requires_grad_(True)
        if aug is not None and step % 2 == 1:
            loss = _target_loss(model, Wv, aug, [int(pick.integers(len(prefixes)))])
        else:
            loss = _target_loss(model, Wv, clean, [0])
        value = loss.item()
        if not math.isfinite(value):
            raise EditError(f"edit {sample.edit_id}: non-finite loss {value} at step {step}")
        losses.append(value)
        (grad,) = torch.autograd.grad(loss, Wv)
        norm = float(torch.linalg.vector_norm(grad))
        scale = tcfg.learning_rate * min(1.0, tcfg.grad_clip_norm / (norm + 1e-6))
        with torch.no_grad():
            W[:, cols] -= scale * grad[:, cols]
    memory.dirty[cols.numpy()] = True
    return losses


def apply_edit(
    model: BackboneModel,
    memory: ResidualMemory,
    db: MaskDatabase,
    sample: EditSample,
    tcfg: EditTrainConfig,
    rcfg: RoutingConfig,
    centering: CenteringVector,
    perm: Permutation,
    rng: Optional[np.random.Generator] = None,
) -> EditReport:
    """Compute the edit's mask from the clean prompt, store it, then train the masked columns."""
    if sample.edit_id in db:
        raise EditError(f"edit_id {sample.edit_id} already applied")
    from .backbone import ffn_input_activations

    acts = ffn_input_activations(model, sample.prompt)
    if rng is None:
        rng = np.random.default_rng([tcfg.rng_seed, sample.edit_id, 3])
    mask = query_mask(acts, centering, perm, rcfg, bytes(sample.prompt), rng)
    collision = db.add(sample.edit_id, mask)
    losses = train_memory(model, memory, mask, sample, tcfg)
    return EditReport(sample.edit_id, losses, mask, collision)
