"""Sparse activation masks and the mask database used to route prompts to edits.

A mask is built from the token-mean of the edited layer's input activations,
centred by a frozen reference mean.  The indices of the ``k`` largest entries
are kept (lowest index wins ties) and then sent through a fixed permutation.
"""

from __future__ import annotations

import enum
import hashlib
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import binfmt

log = logging.getLogger(__name__)

MASKDB_MAGIC = b"RESMEMDB"


class Strategy(str, enum.Enum):
    TOPHASH = "tophash"
    TOPK = "topk"
    RANDOM = "random"
    HASH = "hash"


@dataclass(frozen=True)
class CenteringVector:
    mean: np.ndarray
    n_samples: int

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        mean.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        if self.n_samples < 0:
            raise ValueError("n_samples must be >= 0")

    @classmethod
    def disabled(cls, D: int) -> "CenteringVector":
        return cls(np.zeros(D), 0)


@dataclass(frozen=True)
class Permutation:
    seed: int
    mapping: np.ndarray

    @classmethod
    def from_seed(cls, seed: int, D: int) -> "Permutation":
        mapping = np.random.default_rng([seed, D]).permutation(D)
        mapping.setflags(write=False)
        return cls(seed, mapping)

    @classmethod
    def identity(cls, D: int) -> "Permutation":
        m = np.arange(D)
        m.setflags(write=False)
        return cls(-1, m)

    @property
    def D(self) -> int:
        return len(self.mapping)

    def __call__(self, idx) -> np.ndarray:
        return self.mapping[np.asarray(idx, dtype=np.int64)]


@dataclass(frozen=True)
class SparseMask:
    indices: tuple[int, ...]
    D: int

    @classmethod
    def from_indices(cls, idx, D: int) -> "SparseMask":
        uniq = sorted({int(i) for i in idx})
        if len(uniq) != len(idx):
            raise ValueError("mask indices must be distinct")
        if uniq and not (0 <= uniq[0] and uniq[-1] < D):
            raise ValueError("mask index out of range")
        return cls(tuple(uniq), D)

    @property
    def k(self) -> int:
        return len(self.indices)

    def dense(self) -> np.ndarray:
        out = np.zeros(self.D, dtype=bool)
        out[list(self.indices)] = True
        return out

    def packed(self) -> np.ndarray:
        words = np.zeros((self.D + 63) // 64, dtype=np.uint64)
        for i in self.indices:
            words[i >> 6] |= np.uint64(1) << np.uint64(i & 63)
        return words


@dataclass(frozen=True)
class MatchResult:
    matched_edit_id: Optional[int]
    overlap_ratio: float
    hamming_distance: int
    overlap: int = 0


def pooled_key(activations: np.ndarray, centering: CenteringVector) -> np.ndarray:
    acts = np.asarray(activations, dtype=np.float64)
    if acts.ndim != 2 or acts.shape[0] < 1:
        raise ValueError("activations must be a non-empty [tokens, D] matrix")
    if acts.shape[1] != centering.mean.shape[0]:
        raise ValueError(f"activation width {acts.shape[1]} != centering width {centering.mean.shape[0]}")
    return acts.mean(axis=0) - centering.mean


def compute_centering(model, prompts: Sequence[Sequence[int]]) -> CenteringVector:
    from .backbone import ffn_input_activations

    D = model.cfg.d_ffn
    if not prompts:
        return CenteringVector.disabled(D)
    keys = [np.asarray(ffn_input_activations(model, p), dtype=np.float64).mean(axis=0) for p in prompts]
    return CenteringVector(np.mean(keys, axis=0), len(prompts))


def _top_indices(key: np.ndarray, k: int) -> np.ndarray:
    key = np.asarray(key, dtype=np.float64)
    D = key.shape[0]
    if not 1 <= k <= D:
        raise ValueError(f"k={k} must lie in [1, {D}]")
    # Stable sort on the negated key keeps the lowest index first among ties.
    return np.argsort(-key, kind="stable")[:k]


def tophash_mask(key: np.ndarray, k: int, perm: Permutation) -> SparseMask:
    if perm.D != len(key):
        raise ValueError("permutation size does not match key width")
    return SparseMask.from_indices(perm(_top_indices(key, k)), len(key))


def _digest_seed(data: bytes) -> int:
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "little")


def alternative_mask(
    strategy: Strategy | str,
    key: np.ndarray,
    k: int,
    perm: Permutation,
    prompt_bytes: bytes = b"",
    rng: Optional[np.random.Generator] = None,
) -> SparseMask:
    strategy = Strategy(strategy)
    D = len(key)
    if not 1 <= k <= D:
        raise ValueError(f"k={k} must lie in [1, {D}]")
    if strategy is Strategy.TOPHASH:
        return tophash_mask(key, k, perm)
    if strategy is Strategy.TOPK:
        return SparseMask.from_indices(_top_indices(key, k), D)
    if strategy is Strategy.HASH:
        g = np.random.default_rng(_digest_seed(bytes(prompt_bytes)))
        return SparseMask.from_indices(g.choice(D, size=k, replace=False), D)
    if rng is None:
        rng = np.random.default_rng()
    return SparseMask.from_indices(rng.choice(D, size=k, replace=False), D)


class MaskDatabase:
    """Insertion-ordered (edit_id, mask) store with packed-bitset overlap search."""

    def __init__(self, D: int, k: int):
        if not 1 <= k <= D:
            raise ValueError("need 1 <= k <= D")
        self.D, self.k = D, k
        self.n_words = (D + 63) // 64
        self._bits = np.zeros((16, self.n_words), dtype=np.uint64)
        self._ids: list[int] = []
        self._id_set: set[int] = set()
        self._by_bits: dict[bytes, int] = {}
        self.collisions = 0

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def edit_ids(self) -> list[int]:
        return list(self._ids)

    @property
    def packed(self) -> np.ndarray:
        return self._bits[: len(self._ids)]

    def __contains__(self, edit_id: int) -> bool:
        return edit_id in self._id_set

    def _check(self, mask: SparseMask):
        if mask.D != self.D or mask.k != self.k:
            raise ValueError(f"mask (D={mask.D}, k={mask.k}) does not match database (D={self.D}, k={self.k})")

    def add(self, edit_id: int, mask: SparseMask) -> bool:
        """Insert a mask; returns True when an identical mask is already stored."""
        self._check(mask)
        if edit_id in self._id_set:
            raise KeyError(f"edit_id {edit_id} already in database")
        n = len(self._ids)
        if n == len(self._bits):
            self._bits = np.concatenate([self._bits, np.zeros_like(self._bits)])
        words = mask.packed()
        self._bits[n] = words
        self._ids.append(edit_id)
        self._id_set.add(edit_id)
        sig = words.tobytes()
        collided = sig in self._by_bits
        if collided:
            self.collisions += 1
            log.info("mask collision: edit %d repeats the mask of edit %d", edit_id, self._by_bits[sig])
        else:
            self._by_bits[sig] = edit_id
        return collided

    def mask_of(self, edit_id: int) -> SparseMask:
        row = self._bits[self._ids.index(edit_id)]
        bits = np.unpackbits(row.view(np.uint8), bitorder="little")[: self.D]
        return SparseMask(tuple(int(i) for i in np.flatnonzero(bits)), self.D)

    def overlaps(self, query: SparseMask) -> np.ndarray:
        self._check(query)
        return np.bitwise_count(self.packed & query.packed()).sum(axis=1)

    def best_match(self, query: SparseMask) -> MatchResult:
        self._check(query)
        if not self._ids:
            return MatchResult(None, 0.0, 2 * self.k, 0)
        ov = self.overlaps(query)
        i = int(np.argmax(ov))  # first maximum, i.e. earliest edit
        best = int(ov[i])
        return MatchResult(self._ids[i], best / self.k, 2 * (self.k - best), best)

    # -- persistence -------------------------------------------------------

    def to_arrays(self) -> tuple[dict, dict[str, np.ndarray]]:
        header = {"D": self.D, "k": self.k, "collisions": self.collisions}
        return header, {"mask_ids": np.asarray(self._ids, dtype=np.int64), "mask_bits": self.packed.copy()}

    @classmethod
    def from_arrays(cls, header: dict, arrays: dict[str, np.ndarray]) -> "MaskDatabase":
        db = cls(int(header["D"]), int(header["k"]))
        for eid, row in zip(arrays["mask_ids"], arrays["mask_bits"]):
            bits = np.unpackbits(np.ascontiguousarray(row).view(np.uint8), bitorder="little")[: db.D]
            db.add(int(eid), SparseMask(tuple(int(i) for i in np.flatnonzero(bits)), db.D))
        return db

    def save(self, path, strategy: Strategy | str, perm: Permutation, centering: CenteringVector) -> None:
        header, arrays = self.to_arrays()
        header.update(kind="maskdb", strategy=Strategy(strategy).value, perm_seed=perm.seed, centering_n=centering.n_samples)
        arrays["centering"] = centering.mean
        binfmt.write_container(path, MASKDB_MAGIC, header, arrays)

    @classmethod
    def load(cls, path) -> tuple["MaskDatabase", dict, CenteringVector]:
        header, arrays = binfmt.read_container(path, MASKDB_MAGIC)
        db = cls.from_arrays(header, arrays)
        return db, header, CenteringVector(arrays["centering"], header["centering_n"])


def scan_best_match(entries: Sequence[tuple[int, SparseMask]], query: SparseMask) -> MatchResult:
    """Reference exhaustive scan over python sets."""
    best_id, best = None, -1
    q = set(query.indices)
    for eid, m in entries:
        ov = len(q & set(m.indices))
        if ov > best:
            best_id, best = eid, ov
    if best_id is None:
        return MatchResult(None, 0.0, 2 * query.k, 0)
    return MatchResult(best_id, best / query.k, 2 * (query.k - best), best)


def hamming(a: SparseMask, b: SparseMask) -> int:
    return int(np.count_nonzero(a.dense() != b.dense()))
