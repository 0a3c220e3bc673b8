"""Pre-LN Transformer encoder-decoder with per-head cross-attention override."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .. import diffcore as dc
from .config import ModelConfig
from .vocab import PAD


@dataclass
class Encoded:
    states: Tensor  # [B, L, D]
    mask: Tensor  # [B, L]

    @property
    def length(self) -> int:
        return self.states.shape[1]


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe.to(dtype)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        # a key bias shifts every score of a query equally, so softmax ignores it
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.drop = dc.SeededDropout(dropout)

    def _split(self, x: Tensor) -> Tensor:
        B, T, _ = x.shape
        return x.view(B, T, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, query: Tensor, memory: Tensor, mask: Tensor,
                override: Tensor | None = None, head_mask: Tensor | None = None):
        """Attention of ``query`` [B,Tq,D] over ``memory`` [B,Tk,D].

        ``mask`` broadcasts to [B,H,Tq,Tk]. For heads flagged in ``head_mask``
        [H] the weights in ``override`` [B,H,Tq,Tk] replace the predicted ones
        when mixing values. Returns (output, predicted weights, mixed values).
        """
        q, k, v = self._split(self.q(query)), self._split(self.k(memory)), self._split(self.v(memory))
        weights = dc.softmax(dc.scaled_dot_scores(q, k), mask)
        used = weights
        if override is not None and head_mask is not None and bool(head_mask.any()):
            used = torch.where(head_mask[None, :, None, None], override, weights)
        mixed = dc.weighted_sum(used, v)  # [B,H,Tq,hd]
        B, H, Tq, hd = mixed.shape
        out = self.o(self.drop(mixed.transpose(1, 2).reshape(B, Tq, H * hd)))
        return out, weights, mixed


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = dc.SeededDropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.drop(dc.relu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.hidden_dim
        self.norm1 = nn.LayerNorm(D)
        self.attn = MultiHeadAttention(D, cfg.heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(D)
        self.ffn = FeedForward(D, cfg.ffn_dim, cfg.dropout)
        self.drop = dc.SeededDropout(cfg.dropout)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, mask)[0])
        return x + self.drop(self.ffn(self.norm2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.hidden_dim
        self.norm1 = nn.LayerNorm(D)
        self.self_attn = MultiHeadAttention(D, cfg.heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(D)
        self.cross_attn = MultiHeadAttention(D, cfg.heads, cfg.dropout)
        self.norm3 = nn.LayerNorm(D)
        self.ffn = FeedForward(D, cfg.ffn_dim, cfg.dropout)
        self.drop = dc.SeededDropout(cfg.dropout)

    def forward(self, x, memory, self_mask, cross_mask, override=None, head_mask=None):
        h = self.norm1(x)
        x = x + self.drop(self.self_attn(h, h, self_mask)[0])
        out, weights, mixed = self.cross_attn(self.norm2(x), memory, cross_mask, override, head_mask)
        x = x + self.drop(out)
        x = x + self.drop(self.ffn(self.norm3(x)))
        return x, weights, mixed


class TransformerSeq2Seq(nn.Module):
    family = "transformer"
    max_len = 512

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.hidden_dim
        self.src_emb = nn.Embedding(cfg.src_vocab, D)
        self.tgt_emb = nn.Embedding(cfg.tgt_vocab, D)
        self.register_buffer("positions", sinusoidal_positions(self.max_len, D), persistent=False)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.enc_layers))
        self.enc_norm = nn.LayerNorm(D)
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.dec_layers))
        self.dec_norm = nn.LayerNorm(D)
        self.out = nn.Linear(D, cfg.tgt_vocab)
        self.drop = dc.SeededDropout(cfg.dropout)
        # filled by forward when record_mixed is set; used by instrumentation tests
        self.record_mixed = False
        self.last_mixed: list[Tensor] = []

    @property
    def grid(self) -> tuple[int, int]:
        return self.cfg.dec_layers, self.cfg.heads

    def _embed(self, table: nn.Embedding, ids: Tensor) -> Tensor:
        T = ids.shape[1]
        if T > self.max_len:
            raise ValueError(f"sequence length {T} exceeds {self.max_len}")
        x = table(ids) * math.sqrt(self.cfg.hidden_dim) + self.positions[:T].to(table.weight.dtype)
        return self.drop(x)

    def encode(self, src: Tensor, src_mask: Tensor | None = None) -> Encoded:
        if src_mask is None:
            src_mask = src != PAD
        if src.numel() and (src.min() < 0 or src.max() >= self.cfg.src_vocab):
            raise ValueError(f"source token id outside [0, {self.cfg.src_vocab})")
        x = self._embed(self.src_emb, src)
        mask = src_mask[:, None, None, :]
        for layer in self.encoder:
            x = layer(x, mask)
        return Encoded(self.enc_norm(x), src_mask)

    def forward(self, enc: Encoded, dec_in: Tensor, override: Tensor | None = None,
                head_mask: Tensor | None = None):
        """Causal parallel decoding over a full history.

        ``override`` [B,N,H,T,L] holds reference attention; ``head_mask``
        [N,H] selects the heads that consume it. Returns log-probs [B,T,V]
        and the predicted cross-attention stack [B,N,H,T,L].
        """
        T = dec_in.shape[1]
        N, H = self.grid
        if head_mask is not None and tuple(head_mask.shape) != (N, H):
            raise ValueError(f"head mask shape {tuple(head_mask.shape)} != model grid {(N, H)}")
        causal = torch.ones(T, T, dtype=torch.bool).tril()[None, None]
        cross = enc.mask[:, None, None, :]
        x = self._embed(self.tgt_emb, dec_in)
        stack, mixed_all = [], []
        for n, layer in enumerate(self.decoder):
            ov = None if override is None else override[:, n]
            hm = None if head_mask is None else head_mask[n]
            x, weights, mixed = layer(x, enc.states, causal, cross, ov, hm)
            stack.append(weights)
            if self.record_mixed:
                mixed_all.append(mixed)
        if self.record_mixed:
            self.last_mixed = mixed_all
        logp = torch.log_softmax(self.out(self.dec_norm(x)), dim=-1)
        return logp, torch.stack(stack, dim=1)

    # step interface used by the decoders: the state is the token history so far.
    def init_state(self, enc: Encoded) -> Tensor:
        return torch.empty(enc.states.shape[0], 0, dtype=torch.long)

    def step(self, state: Tensor, prev: Tensor, enc: Encoded):
        history = torch.cat([state, prev[:, None]], dim=1)
        logp, stack = self.forward(enc, history)
        return logp[:, -1], stack[:, :, :, -1], history


def init_transformer(model: TransformerSeq2Seq, generator: torch.Generator) -> None:
    with torch.no_grad():
        for name, p in sorted(model.named_parameters()):
            if name.endswith("bias"):
                p.zero_()
            elif ".norm" in name or name.startswith(("enc_norm", "dec_norm")):
                p.fill_(1.0)
            else:
                fan_in = p.shape[1]
                std = 1.0 / math.sqrt(fan_in)
                p.copy_((torch.randn(p.shape, generator=generator, dtype=torch.float64) * std).to(p.dtype))
