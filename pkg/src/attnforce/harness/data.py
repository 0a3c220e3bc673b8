"""Parallel corpora, vocabulary building and synthetic translation tasks."""
from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from ..models.vocab import EOS, Vocab

TASKS = ("copy", "reverse", "reorder")
SPLITS = ("train", "valid", "test")


@dataclass
class Corpus:
    """Line-aligned (source ids, target ids + EOS) pairs."""

    pairs: list[tuple[list[int], list[int]]]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def sources(self) -> list[list[int]]:
        return [s for s, _ in self.pairs]

    @property
    def references(self) -> list[list[int]]:
        """Targets without the trailing EOS."""
        return [t[:-1] if t and t[-1] == EOS else t for _, t in self.pairs]


@dataclass
class TaskData:
    train: Corpus
    valid: Corpus
    test: Corpus
    src_vocab: Vocab
    tgt_vocab: Vocab

    def split(self, name: str) -> Corpus:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]


def _read_lines(path: str | Path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def load_corpus(src_path, tgt_path, src_vocab: Vocab, tgt_vocab: Vocab, split: str = "train") -> Corpus:
    src_lines, tgt_lines = _read_lines(src_path), _read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise ValueError(f"line counts differ: {src_path} has {len(src_lines)}, {tgt_path} has {len(tgt_lines)}")
    pairs = []
    for i, (s, t) in enumerate(zip(src_lines, tgt_lines), 1):
        s, t = s.split(), t.split()
        if not s or not t:
            raise ValueError(f"empty sentence on line {i}")
        pairs.append((src_vocab.encode(s), tgt_vocab.encode(t) + [EOS]))
    return Corpus(pairs, split)


def write_corpus(corpus: Corpus, src_vocab: Vocab, tgt_vocab: Vocab, src_path, tgt_path) -> None:
    Path(src_path).write_text("".join(" ".join(src_vocab.decode(s)) + "\n" for s, _ in corpus.pairs), "utf-8")
    Path(tgt_path).write_text("".join(" ".join(tgt_vocab.decode(t)) + "\n" for _, t in corpus.pairs), "utf-8")


def count_tokens(lines) -> Counter:
    counts = Counter()
    for line in lines:
        counts.update(line.split())
    return counts


def vocab_from_counts(counts: Counter, max_size: int) -> Vocab:
    if max_size <= 4:
        raise ValueError("max vocabulary size must exceed the 4 reserved tokens")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab([tok for tok, _ in ranked[: max_size - 4]])


def build_vocab(text_path, max_size: int) -> Vocab:
    """Frequency-ranked vocabulary (ties lexicographic) with reserved tokens first."""
    return vocab_from_counts(count_tokens(_read_lines(text_path)), max_size)


def save_task(data: TaskData, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        write_corpus(data.split(name), data.src_vocab, data.tgt_vocab, out / f"{name}.src", out / f"{name}.tgt")
    data.src_vocab.save(out / "vocab.src")
    data.tgt_vocab.save(out / "vocab.tgt")


def load_task(data_dir) -> TaskData:
    d = Path(data_dir)
    sv, tv = Vocab.load(d / "vocab.src"), Vocab.load(d / "vocab.tgt")
    corpora = [load_corpus(d / f"{n}.src", d / f"{n}.tgt", sv, tv, n) for n in SPLITS]
    return TaskData(*corpora, sv, tv)


# --------------------------------------------------------------------------
# synthetic tasks


def substitute(symbol: int, vocab_size: int) -> int:
    """Fixed bijective substitution used by the reorder task."""
    return vocab_size - 1 - symbol


def make_target(kind: str, source: list[int], vocab_size: int, swap: bool = False) -> list[int]:
    if kind == "copy":
        return list(source)
    if kind == "reverse":
        return source[::-1]
    if kind == "reorder":
        mapped = [substitute(s, vocab_size) for s in source]
        if swap:
            mid = len(mapped) // 2
            mapped = mapped[mid:] + mapped[:mid]
        return mapped
    raise ValueError(f"unknown task {kind!r}")


def _gen_split(kind, vocab_size, lengths, n, rng: random.Random):
    out = []
    for _ in range(n):
        L = rng.randint(*lengths)
        src = [rng.randrange(vocab_size) for _ in range(L)]
        swap = kind == "reorder" and rng.random() < 0.5
        out.append((src, make_target(kind, src, vocab_size, swap)))
    return out


def gen_task(kind: str, vocab_size: int, length_range: tuple[int, int], n: int, seed: int = 0,
             n_valid: int | None = None, n_test: int | None = None) -> TaskData:
    """Synthetic copy / reverse / reorder corpora over symbols "0".."V-1".

    ``reorder`` substitutes every symbol and, with probability 0.5 per
    sentence, swaps the two halves of the output.
    """
    if kind not in TASKS:
        raise ValueError(f"unknown task {kind!r}; expected one of {TASKS}")
    lo, hi = length_range
    if not 1 <= lo <= hi:
        raise ValueError("invalid length range")
    vocab = Vocab(str(i) for i in range(vocab_size))
    sizes = {"train": n, "valid": n_valid or max(100, n // 10), "test": n_test or max(100, n // 10)}
    corpora = []
    for i, name in enumerate(SPLITS):
        rng = random.Random(seed * 3 + i)
        raw = _gen_split(kind, vocab_size, (lo, hi), sizes[name], rng)
        pairs = [(vocab.encode([str(s) for s in src]), vocab.encode([str(t) for t in tgt]) + [EOS])
                 for src, tgt in raw]
        corpora.append(Corpus(pairs, name))
    return TaskData(*corpora, vocab, vocab)
