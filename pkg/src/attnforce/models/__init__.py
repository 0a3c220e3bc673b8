"""Encoder-attention-decoder models (RNN and Transformer) and their public operations."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor

from ..diffcore import ParamStore
from .checkpoint import read_checkpoint, save_checkpoint
from .config import ModelConfig
from .rnn import RNNSeq2Seq, init_rnn
from .transformer import TransformerSeq2Seq, init_transformer
from .vocab import BOS, EOS, PAD, UNK, Batch, Vocab, collate

Model = RNNSeq2Seq | TransformerSeq2Seq

__all__ = [
    "BOS", "EOS", "PAD", "UNK", "Batch", "Vocab", "collate", "ModelConfig", "Model",
    "RNNSeq2Seq", "TransformerSeq2Seq", "HeadSelection", "build_model", "init_params",
    "encode", "rnn_decode_step", "transformer_decode_parallel", "save_checkpoint", "load_checkpoint",
]


@dataclass(frozen=True)
class HeadSelection:
    """Cross-attention heads to force, as 1-based (layer, head) pairs."""

    pairs: frozenset[tuple[int, int]] = frozenset()

    @classmethod
    def grid(cls, layers, heads) -> "HeadSelection":
        return cls(frozenset((n, h) for n in layers for h in heads))

    @classmethod
    def parse(cls, text: str) -> "HeadSelection":
        """``"1-2:1-8"`` selects layers 1..2 x heads 1..8; ``""`` or ``"none"`` selects nothing."""
        text = text.strip()
        if text in ("", "none"):
            return cls()
        pairs = set()
        for part in text.split(";"):
            layers, _, heads = part.partition(":")
            pairs.update((n, h) for n in _span(layers) for h in _span(heads))
        return cls(frozenset(pairs))

    def format(self) -> str:
        if not self.pairs:
            return "none"
        return ";".join(f"{n}:{h}" for n, h in sorted(self.pairs))

    def __len__(self) -> int:
        return len(self.pairs)

    def validate(self, layers: int, heads: int) -> None:
        for n, h in self.pairs:
            if not (1 <= n <= layers and 1 <= h <= heads):
                raise ValueError(f"head ({n}, {h}) outside the {layers}x{heads} grid")

    def clip(self, layers: int, heads: int) -> "HeadSelection":
        return HeadSelection(frozenset((n, h) for n, h in self.pairs if n <= layers and h <= heads))

    def mask(self, layers: int, heads: int) -> Tensor:
        self.validate(layers, heads)
        m = torch.zeros(layers, heads, dtype=torch.bool)
        for n, h in self.pairs:
            m[n - 1, h - 1] = True
        return m


def _span(text: str) -> range:
    lo, _, hi = text.partition("-")
    return range(int(lo), int(hi or lo) + 1)


def build_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> Model:
    gen = torch.Generator().manual_seed(seed)
    if cfg.family == "rnn":
        model = RNNSeq2Seq(cfg).to(dtype)
        init_rnn(model, gen)
    else:
        model = TransformerSeq2Seq(cfg).to(dtype)
        init_transformer(model, gen)
    return model


def init_params(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> ParamStore:
    return ParamStore.from_module(build_model(cfg, seed, dtype))


def load_checkpoint(path: str | Path) -> Model:
    cfg, tensors = read_checkpoint(path)
    dtype = next(iter(tensors.values())).dtype
    model = build_model(cfg, 0, dtype)
    params = dict(model.named_parameters())
    if set(params) != set(tensors):
        raise ValueError(f"{path}: parameter paths do not match the model config")
    with torch.no_grad():
        for name, t in tensors.items():
            if params[name].shape != t.shape:
                raise ValueError(f"{path}: shape mismatch for {name}")
            params[name].copy_(t)
    return model


def encode(model: Model, src: Tensor, src_mask: Tensor | None = None):
    if src.dim() == 1:
        src = src[None]
    if src.shape[1] == 0:
        raise ValueError("empty source sequence")
    return model.encode(src, src_mask)


def rnn_decode_step(model: RNNSeq2Seq, state, prev: Tensor, enc, override: Tensor | None = None):
    """One RNN step; returns (token distribution, predicted alpha, next state).

    The predicted alignment is always returned; when ``override`` rows are
    given they, not the prediction, weight the context vector.
    """
    if override is not None:
        if override.shape[-1] != enc.length:
            raise ValueError(f"override row length {override.shape[-1]} != source length {enc.length}")
        if (override < 0).any() or ((override.sum(-1) - 1).abs() > 1e-6).any():
            raise ValueError("override rows must be non-negative and sum to 1")
    logp, alpha, state = model.step(state, prev, enc, override)
    return logp.exp(), alpha, state


def transformer_decode_parallel(model: TransformerSeq2Seq, history: Tensor, enc,
                                overrides: Tensor | None = None, selection: HeadSelection | None = None):
    """Score every position of ``history`` in one causal pass.

    Returns (distributions [B,T,V], predicted cross-attention [B,N,H,T,L]).
    """
    head_mask = None
    if selection is not None:
        head_mask = selection.mask(*model.grid)
        if len(selection) and overrides is None:
            raise ValueError("head selection given without override attention")
    logp, stack = model(enc, history, overrides, head_mask)
    return logp.exp(), stack
