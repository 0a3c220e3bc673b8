"""Bidirectional-LSTM encoder, general dot-product attention, LSTM decoder.

No input feeding: the context vector only enters the output projection, so
decoder states depend on the token history alone.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .. import diffcore as dc
from .config import ModelConfig
from .vocab import PAD

RNNState = list[tuple[Tensor, Tensor]]


@dataclass
class Encoded:
    states: Tensor  # [B, L, 2H]
    mask: Tensor  # [B, L] True on real tokens
    keys: Tensor  # [B, L, H] = states @ W^T of the general score

    @property
    def length(self) -> int:
        return self.states.shape[1]


class RNNSeq2Seq(nn.Module):
    family = "rnn"

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        E, H = cfg.emb_dim, cfg.hidden_dim
        self.src_emb = nn.Embedding(cfg.src_vocab, E)
        self.tgt_emb = nn.Embedding(cfg.tgt_vocab, E)
        self.encoder = nn.ModuleList(
            nn.LSTM(E if i == 0 else 2 * H, H, batch_first=True, bidirectional=True) for i in range(cfg.enc_layers)
        )
        self.decoder = nn.ModuleList(nn.LSTM(E if i == 0 else H, H, batch_first=True) for i in range(cfg.dec_layers))
        self.attn_weight = nn.Parameter(torch.empty(H, 2 * H))
        self.combine = nn.Linear(3 * H, H)
        self.out = nn.Linear(H, cfg.tgt_vocab)
        self.drop = dc.SeededDropout(cfg.dropout)

    # -- encoder ----------------------------------------------------------

    def encode(self, src: Tensor, src_mask: Tensor | None = None) -> Encoded:
        if src_mask is None:
            src_mask = src != PAD
        if src.numel() and (src.min() < 0 or src.max() >= self.cfg.src_vocab):
            raise ValueError(f"source token id outside [0, {self.cfg.src_vocab})")
        lengths = src_mask.sum(1).cpu()
        x = self.drop(self.src_emb(src))
        for i, lstm in enumerate(self.encoder):
            if i:
                x = self.drop(x)
            packed = pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
            x, _ = lstm(packed)
            x, _ = pad_packed_sequence(x, batch_first=True, total_length=src.shape[1])
        keys = dc.affine(x, self.attn_weight)
        return Encoded(x, src_mask, keys)

    # -- decoder ----------------------------------------------------------

    def _attend(self, s: Tensor, enc: Encoded, override: Tensor | None):
        # s: [B, T, H]
        scores = s @ enc.keys.transpose(1, 2)
        alpha = dc.softmax(scores, enc.mask[:, None, :])
        weights = alpha if override is None else override
        ctx = dc.weighted_sum(weights, enc.states)
        hidden = torch.tanh(self.combine(dc.concat([s, ctx])))
        logp = torch.log_softmax(self.out(self.drop(hidden)), dim=-1)
        return logp, alpha

    def forward(self, enc: Encoded, dec_in: Tensor, override: Tensor | None = None):
        """Score a whole history at once.

        Returns log-probabilities [B, T, V] and predicted attention [B, T, L].
        ``override`` [B, T, L] replaces the attention used for the context.
        """
        x = self.drop(self.tgt_emb(dec_in))
        for i, lstm in enumerate(self.decoder):
            if i:
                x = self.drop(x)
            x, _ = lstm(x)
        return self._attend(x, enc, override)

    def init_state(self, enc: Encoded) -> RNNState:
        B, H = enc.states.shape[0], self.cfg.hidden_dim
        z = enc.states.new_zeros(1, B, H)
        return [(z, z) for _ in self.decoder]

    def step(self, state: RNNState, prev: Tensor, enc: Encoded, override: Tensor | None = None):
        """One decoding step: returns log-probs [B, V], predicted alpha [B, L], next state."""
        x = self.drop(self.tgt_emb(prev[:, None]))
        new_state = []
        for i, (lstm, hc) in enumerate(zip(self.decoder, state)):
            if i:
                x = self.drop(x)
            x, hc = lstm(x, hc)
            new_state.append(hc)
        logp, alpha = self._attend(x, enc, None if override is None else override[:, None, :])
        return logp[:, 0], alpha[:, 0], new_state


def init_rnn(model: RNNSeq2Seq, generator: torch.Generator) -> None:
    with torch.no_grad():
        for name, p in sorted(model.named_parameters()):
            if "bias" in name:
                p.zero_()
            else:
                p.copy_(torch.rand(p.shape, generator=generator, dtype=torch.float64).to(p.dtype) * 0.2 - 0.1)
