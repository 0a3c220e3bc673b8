"""Corpus BLEU, pairwise BLEU and mean greedy entropy."""
from __future__ import annotations

import csv
import io
import itertools
import math
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass, field

MAX_N = 4


@dataclass
class NGramCounts:
    matches: list[int] = field(default_factory=lambda: [0] * MAX_N)
    totals: list[int] = field(default_factory=lambda: [0] * MAX_N)
    ref_totals: list[int] = field(default_factory=lambda: [0] * MAX_N)
    hyp_len: int = 0
    ref_len: int = 0

    def add(self, hyp: Sequence, ref: Sequence) -> None:
        self.hyp_len += len(hyp)
        self.ref_len += len(ref)
        for n in range(1, MAX_N + 1):
            h = _ngrams(hyp, n)
            r = _ngrams(ref, n)
            self.matches[n - 1] += sum((h & r).values())
            self.totals[n - 1] += sum(h.values())
            self.ref_totals[n - 1] += sum(r.values())


def _ngrams(seq: Sequence, n: int) -> Counter:
    seq = tuple(seq)
    return Counter(seq[i : i + n] for i in range(len(seq) - n + 1))


@dataclass
class BleuReport:
    precisions: list[float]
    bp: float
    bleu: float
    hyp_len: int
    ref_len: int

    def csv_row(self) -> list:
        return [self.bleu, *self.precisions, self.bp, self.hyp_len, self.ref_len]


def _precision(counts: NGramCounts, n: int) -> float:
    total = counts.totals[n]
    if total:
        return counts.matches[n] / total
    # no n-grams of this order on either side counts as agreement
    return 1.0 if counts.ref_totals[n] == 0 else 0.0


def brevity_penalty(c: int, r: int, coefficient: float = 0.6) -> float:
    if c >= r:
        return 1.0
    if c == 0:
        return 0.0
    return math.exp(coefficient * (1.0 - r / c))


def bleu_from_counts(counts: NGramCounts, bp_coefficient: float = 0.6,
                     ngram_mean: str = "geometric") -> BleuReport:
    precisions = [_precision(counts, n) for n in range(MAX_N)]
    bp = brevity_penalty(counts.hyp_len, counts.ref_len, bp_coefficient)
    if ngram_mean == "geometric":
        if min(precisions) > 0:
            mean = math.exp(sum(math.log(p) for p in precisions) / MAX_N)
        else:
            mean = 0.0
    elif ngram_mean == "arithmetic":
        mean = sum(precisions) / MAX_N
    else:
        raise ValueError(f"unknown n-gram mean {ngram_mean!r}")
    return BleuReport(precisions, bp, 100.0 * bp * mean, counts.hyp_len, counts.ref_len)


def bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], bp_coefficient: float = 0.6,
         ngram_mean: str = "geometric") -> BleuReport:
    """Corpus-level BLEU with one reference per hypothesis; counts pooled before dividing."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("empty corpus")
    counts = NGramCounts()
    for h, r in zip(hypotheses, references):
        counts.add(h, r)
    return bleu_from_counts(counts, bp_coefficient, ngram_mean)


def pairwise_bleu(runs: Sequence[Sequence[Sequence]], **kw) -> float:
    """Mean BLEU over all M(M-1) ordered pairs of decode runs."""
    if len(runs) < 2:
        raise ValueError("pairwise BLEU needs at least two runs")
    sizes = {len(r) for r in runs}
    if len(sizes) != 1:
        raise ValueError("runs must cover the same sentences")
    scores = [bleu(runs[a], runs[b], **kw).bleu for a, b in itertools.permutations(range(len(runs)), 2)]
    return sum(scores) / len(scores)


def mean_entropy(results) -> float:
    """Step-weighted mean of per-step entropies over all sentences."""
    if not results:
        raise ValueError("no decode results")
    steps = [e for r in results for e in r.entropies]
    if not steps:
        raise ValueError("decode results contain no steps")
    return sum(steps) / len(steps)


@dataclass
class DiversityReport:
    pairwise_bleu: float
    entropy: float
    M: int


BLEU_HEADER = ["bleu", "p1", "p2", "p3", "p4", "bp", "c", "r"]
DIVERSITY_HEADER = ["pairwise_bleu", "entropy", "M"]


def reports_to_csv(bleu_report: BleuReport | None = None, diversity: DiversityReport | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if bleu_report is not None:
        w.writerow(BLEU_HEADER)
        w.writerow(bleu_report.csv_row())
    if diversity is not None:
        w.writerow(DIVERSITY_HEADER)
        w.writerow([diversity.pairwise_bleu, diversity.entropy, diversity.M])
    return buf.getvalue()
