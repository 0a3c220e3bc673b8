"""Greedy, sampling and beam-search decoding with per-step entropies."""
from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import torch
from torch import Tensor

from .models import BOS, EOS, PAD, Model


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "greedy"  # greedy | sampling | beam
    beam_width: int = 4
    max_len: int | None = None  # None -> 2 * source length + 10
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("greedy", "sampling", "beam"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.beam_width < 1:
            raise ValueError("beam width must be >= 1")
        if self.max_len is not None and self.max_len < 1:
            raise ValueError("max length must be >= 1")

    def length_cap(self, src_len: int) -> int:
        return self.max_len if self.max_len is not None else 2 * src_len + 10


@dataclass
class DecodeResult:
    tokens: list[int]  # generated ids, EOS excluded
    entropies: list[float]  # nats, one per generated step (EOS step included)
    log_prob: float
    finished: bool = True


def entropy(logp: Tensor) -> Tensor:
    return (-(logp.exp() * logp).nan_to_num(0.0).sum(-1)).clamp_min(0.0)


def _as_batch(src) -> Tensor:
    src = torch.as_tensor(src, dtype=torch.long)
    return src[None] if src.dim() == 1 else src


@torch.no_grad()
def decode_batch(model: Model, src: Tensor, cfg: DecodeConfig,
                 generator: torch.Generator | None = None) -> list[DecodeResult]:
    """Greedy or sampling decoding of a padded source batch [B, L]."""
    if cfg.strategy == "beam":
        return [beam_decode(model, row[row != PAD], cfg) for row in src]
    was_training = model.training
    model.eval()
    try:
        src_mask = src != PAD
        enc = model.encode(src, src_mask)
        B = src.shape[0]
        caps = [cfg.length_cap(int(n)) for n in src_mask.sum(1)]
        state = model.init_state(enc)
        prev = torch.full((B,), BOS, dtype=torch.long)
        done = torch.zeros(B, dtype=torch.bool)
        results = [DecodeResult([], [], 0.0, False) for _ in range(B)]
        for t in range(max(caps)):
            logp, _, state = model.step(state, prev, enc)
            if cfg.strategy == "greedy":
                tok = logp.argmax(-1)
            else:
                tok = torch.multinomial(logp.exp(), 1, generator=generator)[:, 0]
            ent = entropy(logp)
            lp = logp.gather(1, tok[:, None])[:, 0]
            for i in range(B):
                if done[i] or t >= caps[i]:
                    continue
                r = results[i]
                r.entropies.append(float(ent[i]))
                r.log_prob += float(lp[i])
                if int(tok[i]) == EOS:
                    r.finished = True
                    done[i] = True
                else:
                    r.tokens.append(int(tok[i]))
                    if len(r.tokens) >= caps[i]:
                        done[i] = True
            if bool(done.all()):
                break
            prev = tok
        return results
    finally:
        model.train(was_training)


def greedy_decode(model: Model, source, cfg: DecodeConfig = DecodeConfig()) -> DecodeResult:
    return decode_batch(model, _as_batch(source), DecodeConfig("greedy", max_len=cfg.max_len))[0]


def sample_decode(model: Model, source, seed: int, cfg: DecodeConfig = DecodeConfig()) -> DecodeResult:
    gen = torch.Generator().manual_seed(seed)
    return decode_batch(model, _as_batch(source), DecodeConfig("sampling", max_len=cfg.max_len), gen)[0]


@dataclass
class _Hyp:
    tokens: tuple[int, ...]
    score: float
    entropies: tuple[float, ...]
    state: object


def _state_select(state, idx: Tensor):
    if isinstance(state, Tensor):
        return state[idx]
    return [(h[:, idx], c[:, idx]) for h, c in state]


@torch.no_grad()
def beam_decode(model: Model, source, cfg: DecodeConfig = DecodeConfig("beam")) -> DecodeResult:
    """Beam search over summed log-probabilities, no length normalisation.

    Candidates are ranked by score, then lower token id; finished hypotheses
    are retired, and search stops once no live hypothesis can beat the best
    finished one (scores never increase).
    """
    src = _as_batch(source)
    width = cfg.beam_width
    cap = cfg.length_cap(src.shape[1])
    was_training = model.training
    model.eval()
    try:
        enc = model.encode(src, src != PAD)
        live = [_Hyp((), 0.0, (), model.init_state(enc))]
        finished: list[_Hyp] = []
        for t in range(cap):
            idx = torch.zeros(len(live), dtype=torch.long)
            enc_rep = type(enc)(**{k: v[idx] for k, v in vars(enc).items()})
            state = _merge_states([h.state for h in live])
            prev = torch.tensor([h.tokens[-1] if h.tokens else BOS for h in live])
            logp, _, new_state = model.step(state, prev, enc_rep)
            ent = entropy(logp)
            V = logp.shape[1]
            scores = torch.tensor([h.score for h in live], dtype=torch.float64)[:, None] + logp.double()
            flat = scores.reshape(-1).tolist()
            order = sorted(range(len(flat)), key=lambda j: (-flat[j], j % V, j // V))[:width]
            next_live = []
            for j in order:
                b, tok = divmod(j, V)
                h = live[b]
                cand = _Hyp(h.tokens + (tok,), flat[j], h.entropies + (float(ent[b]),),
                            _state_select(new_state, torch.tensor([b])))
                if tok == EOS:
                    finished.append(cand)
                else:
                    next_live.append(cand)
            live = next_live
            if not live:
                break
            if finished and max(f.score for f in finished) >= max(h.score for h in live):
                break
        pool = finished + [h for h in live if len(h.tokens) >= cap or not finished]
        best = min(pool, key=lambda h: (-h.score, len(h.tokens)))
        done = bool(best.tokens) and best.tokens[-1] == EOS
        toks = list(best.tokens[:-1] if done else best.tokens)
        return DecodeResult(toks, list(best.entropies), best.score, done)
    finally:
        model.train(was_training)


def _merge_states(states: Sequence):
    if isinstance(states[0], Tensor):
        return torch.cat(states, 0)
    layers = len(states[0])
    return [
        (torch.cat([s[i][0] for s in states], 1), torch.cat([s[i][1] for s in states], 1))
        for i in range(layers)
    ]


def decode(model: Model, source, cfg: DecodeConfig) -> DecodeResult:
    if cfg.strategy == "greedy":
        return greedy_decode(model, source, cfg)
    if cfg.strategy == "sampling":
        return sample_decode(model, source, cfg.seed, cfg)
    return beam_decode(model, source, cfg)
