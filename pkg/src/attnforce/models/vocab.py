"""Vocabularies, token sequences and padded batches."""
from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocab:
    """Ordered token list; ids 0-3 are PAD, BOS, EOS, UNK."""

    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.index.get(w, UNK) for w in words]

    def decode(self, ids: Sequence[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self.tokens[i])
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:4]) != RESERVED:
            raise ValueError(f"{path}: first four lines must be the reserved tokens")
        return cls(lines)


def check_token_seq(ids: Sequence[int], vocab_size: int, what: str = "sequence") -> None:
    if len(ids) == 0:
        raise ValueError(f"empty {what}")
    for i in ids:
        if not 0 <= i < vocab_size:
            raise ValueError(f"{what}: token id {i} outside [0, {vocab_size})")
    if PAD in ids:
        raise ValueError(f"{what}: PAD inside sequence")


@dataclass
class Batch:
    """Padded source/target tensors.

    ``tgt`` holds y_1..y_T (ending in EOS), ``dec_in`` is BOS followed by
    y_1..y_{T-1}; masks are True on real positions.
    """

    src: Tensor
    src_mask: Tensor
    dec_in: Tensor
    tgt: Tensor
    tgt_mask: Tensor

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def tgt_lengths(self) -> Tensor:
        return self.tgt_mask.sum(1)

    def subset(self, idx) -> "Batch":
        return Batch(self.src[idx], self.src_mask[idx], self.dec_in[idx], self.tgt[idx], self.tgt_mask[idx])


def pad_sequences(seqs: Sequence[Sequence[int]]) -> Tensor:
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def shift_right(tgt: Tensor) -> Tensor:
    """BOS followed by tgt[:, :-1]."""
    bos = torch.full((tgt.shape[0], 1), BOS, dtype=tgt.dtype)
    return torch.cat([bos, tgt[:, :-1]], dim=1)


def collate(pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> Batch:
    """Pairs of (source ids, target ids ending in EOS) -> Batch."""
    if not pairs:
        raise ValueError("empty batch")
    src = pad_sequences([p[0] for p in pairs])
    tgt = pad_sequences([p[1] for p in pairs])
    return Batch(src, src != PAD, shift_right(tgt), tgt, tgt != PAD)
