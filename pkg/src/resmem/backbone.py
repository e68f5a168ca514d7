"""Small decoder-only transformer used as the frozen host model.

Byte-level vocabulary, rotary position encoding and pre-LayerNorm blocks.  The
FFN is either ungated, ``W_proj @ gelu(W_fc @ h)``, or gated,
``W_proj @ (silu(W_gate @ h) * (W_fc @ h))``; neither has biases, so the
projection at the edited layer is a plain linear map of the activations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import binfmt

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RESMEMBB"

# (activations [B, T, D], base projection output [B, T, d_model]) -> FFN output
FFNHook = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


class SequenceLengthError(ValueError):
    pass


def encode_text(text: str) -> tuple[int, ...]:
    return tuple(text.encode("utf-8"))


def decode_tokens(tokens: Sequence[int]) -> str:
    return bytes(tokens).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ffn: int = 256
    max_seq_len: int = 96
    # None resolves to the second-to-last block.
    edit_layer_index: Optional[int] = None
    rng_seed: int = 0
    dtype: str = "float32"
    # "gelu" (ungated) or "swiglu" (gated, signed activations)
    ffn: str = "gelu"

    def __post_init__(self):
        if self.edit_layer_index is None:
            object.__setattr__(self, "edit_layer_index", max(self.n_layers - 2, 0))
        if self.d_ffn < 8:
            raise ValueError("d_ffn must be >= 8")
        if not 0 <= self.edit_layer_index < self.n_layers:
            raise ValueError("edit_layer_index must be in [0, n_layers)")
        if self.d_model % self.n_heads or (self.d_model // self.n_heads) % 2:
            raise ValueError("d_model must split into an even head size")
        if self.ffn not in ("gelu", "swiglu"):
            raise ValueError(f"unsupported ffn {self.ffn}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


def _rope_tables(seq_len: int, head_dim: int, dtype: torch.dtype):
    inv = 1.0 / (10000 ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim))
    ang = torch.outer(torch.arange(seq_len, dtype=torch.float64), inv)
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def _apply_rope(x, cos, sin):
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.flatten(-2)


class Block(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model, bias=False)
        self.out = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.fc = nn.Linear(cfg.d_model, cfg.d_ffn, bias=False)
        self.gate = nn.Linear(cfg.d_model, cfg.d_ffn, bias=False) if cfg.ffn == "swiglu" else None
        self.proj = nn.Linear(cfg.d_ffn, cfg.d_model, bias=False)

    def attend(self, x, cos, sin):
        B, T, C = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(C, dim=-1)
        shape = (B, T, self.n_heads, C // self.n_heads)
        q, k, v = (t.view(shape).transpose(1, 2) for t in (q, k, v))
        q, k = _apply_rope(q, cos[:T], sin[:T]), _apply_rope(k, cos[:T], sin[:T])
        y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        return x + self.out(y.transpose(1, 2).reshape(B, T, C))

    def ffn_input(self, x):
        h = self.ln2(x)
        if self.gate is None:
            return F.gelu(self.fc(h))
        return F.silu(self.gate(h)) * self.fc(h)

    def forward(self, x, cos, sin, hook: Optional[FFNHook] = None):
        x = self.attend(x, cos, sin)
        a = self.ffn_input(x)
        out = self.proj(a)
        if hook is not None:
            out = hook(a, out)
        return x + out


class BackboneModel(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        cos, sin = _rope_tables(cfg.max_seq_len, cfg.d_model // cfg.n_heads, cfg.torch_dtype)
        self.register_buffer("rope_cos", cos, persistent=False)
        self.register_buffer("rope_sin", sin, persistent=False)
        self.to(cfg.torch_dtype)
        self._init_weights()

    def _init_weights(self):
        g = torch.Generator().manual_seed(self.cfg.rng_seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if "ln" in name:
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                else:
                    std = 0.02 / math.sqrt(2 * self.cfg.n_layers) if name.endswith(("out.weight", "proj.weight")) else 0.02
                    p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * std)

    @property
    def edit_block(self) -> Block:
        return self.blocks[self.cfg.edit_layer_index]

    @property
    def W0(self) -> torch.Tensor:
        """Projection matrix of the edited layer, shape (d_model, D)."""
        return self.edit_block.proj.weight

    def as_tokens(self, tokens) -> torch.Tensor:
        t = torch.as_tensor(tokens, dtype=torch.long)
        if t.dim() == 1:
            t = t.unsqueeze(0)
        if t.shape[1] == 0:
            raise ValueError("empty token sequence")
        if t.shape[1] > self.cfg.max_seq_len:
            raise SequenceLengthError(f"sequence length {t.shape[1]} exceeds max_seq_len {self.cfg.max_seq_len}")
        if int(t.max()) >= self.cfg.vocab_size or int(t.min()) < 0:
            raise ValueError("token id outside vocabulary")
        return t

    def forward(self, tokens, hook: Optional[FFNHook] = None) -> torch.Tensor:
        x = self.embed(self.as_tokens(tokens))
        for i, blk in enumerate(self.blocks):
            x = blk(x, self.rope_cos, self.rope_sin, hook if i == self.cfg.edit_layer_index else None)
        return self.head(self.ln_f(x))

    def edit_layer_state(self, tokens):
        """Residual stream entering the edited FFN and its activations ``a``.

        Returns ``(resid, a)`` with the attention output already added to ``resid``.
        """
        x = self.embed(self.as_tokens(tokens))
        ell = self.cfg.edit_layer_index
        for blk in self.blocks[:ell]:
            x = blk(x, self.rope_cos, self.rope_sin)
        x = self.edit_block.attend(x, self.rope_cos, self.rope_sin)
        return x, self.edit_block.ffn_input(x)

    def forward_tail(self, resid: torch.Tensor) -> torch.Tensor:
        """Logits from the residual stream leaving the edited block."""
        x = resid
        for blk in self.blocks[self.cfg.edit_layer_index + 1 :]:
            x = blk(x, self.rope_cos, self.rope_sin)
        return self.head(self.ln_f(x))

    def freeze(self) -> "BackboneModel":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    # -- checkpoint -------------------------------------------------------

    def save(self, path) -> None:
        arrays = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        binfmt.write_container(path, CHECKPOINT_MAGIC, {"kind": "backbone", "config": asdict(self.cfg)}, arrays)

    @classmethod
    def load(cls, path) -> "BackboneModel":
        header, arrays = binfmt.read_container(path, CHECKPOINT_MAGIC)
        model = cls(BackboneConfig(**header["config"]))
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
        return model.freeze()


def ffn_input_activations(model: BackboneModel, prompt) -> np.ndarray:
    """Activations entering the edited projection, one row per prompt token."""
    with torch.no_grad():
        _, a = model.edit_layer_state(prompt)
    return a[0].numpy()


@dataclass
class PretrainResult:
    model: BackboneModel
    losses: list[float] = field(default_factory=list)


def pretrain(
    config: BackboneConfig,
    corpus: Sequence[tuple[Sequence[int], Sequence[int]]],
    steps: int,
    batch_size: int = 32,
    lr: float = 3e-3,
    log_every: int = 100,
) -> PretrainResult:
    """Next-token training on ``prompt + target`` sequences; returns a frozen model.

    ``losses`` holds the mean loss of each logged window, the first entry being
    the loss of the initial batch.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not corpus:
        raise ValueError("corpus is empty")
    seqs = [tuple(p) + tuple(t) for p, t in corpus]
    for s in seqs:
        if len(s) > config.max_seq_len:
            raise SequenceLengthError(f"corpus sequence of length {len(s)} exceeds max_seq_len {config.max_seq_len}")
        if len(s) < 2:
            raise ValueError("corpus sequences need at least two tokens")

    model = BackboneModel(config)
    model.train()
    width = max(len(s) for s in seqs)
    data = torch.zeros(len(seqs), width, dtype=torch.long)
    valid = torch.zeros(len(seqs), width, dtype=torch.bool)
    for i, s in enumerate(seqs):
        data[i, : len(s)] = torch.tensor(s)
        valid[i, : len(s)] = True

    gen = torch.Generator().manual_seed(config.rng_seed + 1)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, betas=(0.9, 0.98), weight_decay=0.0)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / 100) * 0.5 * (1 + math.cos(math.pi * min(s, steps) / steps))
    )
    losses: list[float] = []
    window: list[float] = []
    for step in range(steps):
        idx = torch.randint(len(seqs), (batch_size,), generator=gen)
        batch, mask = data[idx], valid[idx]
        span = int(mask.sum(1).max())
        batch, mask = batch[:, :span], mask[:, :span]
        logits = model(batch)
        loss = F.cross_entropy(logits[:, :-1][mask[:, 1:]], batch[:, 1:][mask[:, 1:]])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched.step()
        if step == 0:
            losses.append(loss.item())
        window.append(loss.item())
        if (step + 1) % log_every == 0 or step == steps - 1:
            losses.append(float(np.mean(window)))
            log.info("pretrain step %d loss %.4f", step + 1, losses[-1])
            window = []
    return PretrainResult(model.freeze(), losses)


def decode(model: BackboneModel, prompt, max_new: int, hook: Optional[FFNHook] = None, keep_logits: bool = False):
    """Greedy decoding; returns ``(new_tokens, per-step logits or None)``."""
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    seq = list(prompt)
    steps = []
    with torch.no_grad():
        for _ in range(max_new):
            if len(seq) >= model.cfg.max_seq_len:
                break
            logits = model(seq, hook)[0, -1]
            if keep_logits:
                steps.append(logits.clone())
            seq.append(int(torch.argmax(logits)))
    return tuple(seq[len(prompt) :]), (torch.stack(steps) if keep_logits else None)


def generate(model: BackboneModel, editor_hook: Optional[FFNHook], prompt, max_new: int) -> tuple[int, ...]:
    return decode(model, prompt, max_new, editor_hook)[0]
