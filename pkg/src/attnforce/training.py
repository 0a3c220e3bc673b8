"""Training losses: TF, AF, scheduled AF, parallel SS and parallel AF.

Every loss returns a :class:`LossBreakdown` holding per-sequence tensors so
the scheduling decisions, which are made per sequence, stay inspectable.
"""
from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .models import PAD, HeadSelection, Model
from .models.vocab import Batch, shift_right

KL_FLOOR = 1e-9
MODES = ("TF", "AF", "SAF", "PSS", "PAF")


@dataclass
class TrainingModeConfig:
    mode: str = "TF"
    gamma: float = 0.0
    lam: float = math.inf
    K: int = 2
    forced_heads: HeadSelection = field(default_factory=HeadSelection)
    ss_start: float = 1.0
    ss_end: float = 0.7
    ss_steps: int = 1000
    teacher: str | None = None
    rule: str = "greedy"  # rollout decode rule: greedy | sample

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not (0 <= self.ss_end <= 1 and 0 <= self.ss_start <= 1):
            raise ValueError("scheduled-sampling probabilities must lie in [0, 1]")
        if self.rule not in ("greedy", "sample"):
            raise ValueError(f"unknown rollout rule {self.rule!r}")

    @property
    def needs_teacher(self) -> bool:
        return self.mode in ("AF", "SAF", "PAF")


@dataclass
class LossBreakdown:
    """Per-sequence loss components.

    ``chosen`` is True where the generated-history pass (A for SAF, K for
    PAF) was used; ``kl_a``/``kl_b`` are the detached sums the decision rule
    compared (pass A / pass K first, pass B / pass 1 second).
    """

    loss_y: Tensor
    loss_alpha: Tensor
    gamma: float = 0.0
    chosen: Tensor | None = None
    kl_a: Tensor | None = None
    kl_b: Tensor | None = None
    passes: tuple[str, str] = ("A", "B")
    n_kl_terms: Tensor | None = None

    @property
    def total(self) -> Tensor:
        if self.gamma == 0.0:
            return self.loss_y
        return self.loss_y + self.gamma * self.loss_alpha

    def objective(self) -> Tensor:
        """Mean over sequences of L_y + gamma * L_alpha."""
        return self.total.mean()

    def chosen_labels(self) -> list[str]:
        if self.chosen is None:
            return []
        return [self.passes[0] if c else self.passes[1] for c in self.chosen.tolist()]


# --------------------------------------------------------------------------
# building blocks


def sequence_nll(logp: Tensor, tgt: Tensor, tgt_mask: Tensor, smoothing: float = 0.0) -> Tensor:
    """-sum_t log p(y_t) per sequence, optionally label-smoothed with a uniform prior."""
    nll = -logp.gather(-1, tgt[..., None])[..., 0]
    if smoothing:
        nll = (1.0 - smoothing) * nll - smoothing * logp.mean(-1)
    return torch.where(tgt_mask, nll, torch.zeros_like(nll)).sum(-1)


def kl_rows(ref: Tensor, pred: Tensor, floor: float = KL_FLOOR) -> Tensor:
    """KL(ref || pred) over the last axis; 0 log 0 := 0, pred floored at ``floor``."""
    if ref.shape[-1] != pred.shape[-1]:
        raise ValueError(f"attention rows differ in length: {ref.shape[-1]} vs {pred.shape[-1]}")
    return (torch.xlogy(ref, ref) - ref * pred.clamp_min(floor).log()).sum(-1)


def kl_attention(ref: Tensor, pred: Tensor, floor: float = KL_FLOOR) -> float:
    ref, pred = torch.as_tensor(ref, dtype=torch.float64), torch.as_tensor(pred, dtype=torch.float64)
    if ref.dim() != 1 or ref.shape != pred.shape:
        raise ValueError("kl_attention expects two rows of equal length")
    return float(kl_rows(ref, pred, floor))


def _masked_time_sum(x: Tensor, tgt_mask: Tensor) -> Tensor:
    return torch.where(tgt_mask, x, torch.zeros_like(x)).sum(-1)


def pick_tokens(logp: Tensor, rule: str = "greedy", generator: torch.Generator | None = None) -> Tensor:
    if rule == "greedy":
        return logp.argmax(-1)
    if rule == "sample":
        probs = logp.exp()
        flat = probs.reshape(-1, probs.shape[-1])
        return torch.multinomial(flat, 1, generator=generator).reshape(probs.shape[:-1])
    raise ValueError(f"unknown decode rule {rule!r}")


def _check_pair(student: Model, teacher: Model) -> None:
    if teacher is None:
        raise ValueError("this training mode needs a teacher model")
    if student.family != teacher.family:
        raise ValueError("teacher and student families differ")
    if student.family == "transformer" and student.grid != teacher.grid:
        raise ValueError(f"teacher grid {teacher.grid} != student grid {student.grid}")


def _decision(kl_gen: Tensor, kl_ref: Tensor, lam: float) -> Tensor:
    if math.isinf(lam):
        return torch.ones_like(kl_gen, dtype=torch.bool)
    return kl_gen < lam * kl_ref


# --------------------------------------------------------------------------
# losses


def teacher_forcing_loss(model: Model, batch: Batch, smoothing: float = 0.0) -> LossBreakdown:
    enc = model.encode(batch.src, batch.src_mask)
    logp, _ = model(enc, batch.dec_in)
    loss_y = sequence_nll(logp, batch.tgt, batch.tgt_mask, smoothing)
    return LossBreakdown(loss_y, torch.zeros_like(loss_y))


def reference_attention(teacher: Model, batch: Batch) -> Tensor:
    """Teacher attention in teacher-forcing mode: [B,T,L] (rnn) or [B,N,H,T,L]."""
    was_training = teacher.training
    teacher.eval()
    try:
        with torch.no_grad():
            enc = teacher.encode(batch.src, batch.src_mask)
            _, attn = teacher(enc, batch.dec_in)
    finally:
        teacher.train(was_training)
    return attn


def rnn_rollout(student: Model, enc, batch: Batch, ref: Tensor | None, rule: str = "greedy",
                generator: torch.Generator | None = None):
    """Free-running RNN pass with reference attention driving the context.

    Returns log-probs [B,T,V], predicted attention [B,T,L], generated tokens [B,T].
    """
    state = student.init_state(enc)
    prev = batch.dec_in[:, 0]
    logps, alphas, toks = [], [], []
    for t in range(batch.tgt.shape[1]):
        row = None if ref is None else ref[:, t]
        logp, alpha, state = student.step(state, prev, enc, row)
        prev = pick_tokens(logp.detach(), rule, generator)
        logps.append(logp)
        alphas.append(alpha)
        toks.append(prev)
    return torch.stack(logps, 1), torch.stack(alphas, 1), torch.stack(toks, 1)


def attention_forcing_loss(student: Model, teacher: Model, batch: Batch, gamma: float,
                           rule: str = "greedy", generator: torch.Generator | None = None,
                           ref: Tensor | None = None) -> LossBreakdown:
    """Vanilla attention forcing for the RNN family (sequential rollout)."""
    _check_pair(student, teacher)
    if student.family != "rnn":
        raise ValueError("sequential attention forcing is defined for the rnn family; use PAF")
    if ref is None:
        ref = reference_attention(teacher, batch)
    enc = student.encode(batch.src, batch.src_mask)
    logp, alpha, _ = rnn_rollout(student, enc, batch, ref, rule, generator)
    loss_y = sequence_nll(logp, batch.tgt, batch.tgt_mask)
    loss_alpha = _masked_time_sum(kl_rows(ref, alpha), batch.tgt_mask)
    chosen = torch.ones(batch.size, dtype=torch.bool)
    return LossBreakdown(loss_y, loss_alpha, gamma, chosen, loss_alpha.detach(), None)


def saf_step(student: Model, teacher: Model, batch: Batch, gamma: float, lam: float,
             rule: str = "greedy", generator: torch.Generator | None = None,
             ref: Tensor | None = None) -> LossBreakdown:
    """Scheduled attention forcing: per sequence, keep pass A or fall back to pass B."""
    _check_pair(student, teacher)
    if student.family != "rnn":
        raise ValueError("scheduled attention forcing is defined for the rnn family")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if ref is None:
        ref = reference_attention(teacher, batch)
    enc = student.encode(batch.src, batch.src_mask)
    # pass A first so its dropout draws line up with vanilla AF
    logp_a, alpha_a, _ = rnn_rollout(student, enc, batch, ref, rule, generator)
    logp_b, alpha_b = student(enc, batch.dec_in, ref)
    kl_a = _masked_time_sum(kl_rows(ref, alpha_a), batch.tgt_mask)
    kl_b = _masked_time_sum(kl_rows(ref, alpha_b), batch.tgt_mask)
    chosen = _decision(kl_a.detach(), kl_b.detach(), lam)
    nll_a = sequence_nll(logp_a, batch.tgt, batch.tgt_mask)
    nll_b = sequence_nll(logp_b, batch.tgt, batch.tgt_mask)
    return LossBreakdown(
        torch.where(chosen, nll_a, nll_b),
        torch.where(chosen, kl_a, kl_b),
        gamma, chosen, kl_a.detach(), kl_b.detach(),
    )


@dataclass
class Rollout:
    histories: list[Tensor]  # y^0 (reference) .. y^K, each [B,T]
    attention: list[Tensor]  # predicted attention of passes 1..K


def parallel_rollout(student: Model, batch: Batch, K: int, ref: Tensor | None = None,
                     selection: HeadSelection | None = None, rule: str = "greedy",
                     generator: torch.Generator | None = None, enc=None) -> Rollout:
    """K parallel passes; pass k re-generates positions t >= k from history y^(k-1)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if enc is None:
        enc = student.encode(batch.src, batch.src_mask)
    head_mask = None
    if student.family == "transformer" and selection is not None and len(selection):
        head_mask = selection.mask(*student.grid)
    hist = torch.where(batch.tgt_mask, batch.tgt, torch.full_like(batch.tgt, PAD))
    histories, attention = [hist], []
    with torch.no_grad():
        for k in range(1, K + 1):
            dec_in = shift_right(hist)
            if student.family == "transformer":
                logp, attn = student(enc, dec_in, ref if head_mask is not None else None, head_mask)
            else:
                logp, attn = student(enc, dec_in, ref)
            new = pick_tokens(logp, rule, generator)
            new[:, : k - 1] = hist[:, : k - 1]
            hist = torch.where(batch.tgt_mask, new, torch.full_like(new, PAD))
            histories.append(hist)
            attention.append(attn)
    return Rollout(histories, attention)


def _all_head_kl(ref: Tensor, attn: Tensor, tgt_mask: Tensor) -> Tensor:
    # [B,N,H,T] -> mean over heads -> masked sum over T
    return _masked_time_sum(kl_rows(ref, attn).mean(dim=(1, 2)), tgt_mask)


def paf_step(student: Model, teacher: Model, batch: Batch, gamma: float, lam: float, K: int,
             selection: HeadSelection, rule: str = "greedy", generator: torch.Generator | None = None,
             smoothing: float = 0.0, ref: Tensor | None = None) -> LossBreakdown:
    """Parallel attention forcing with scheduled pass selection and selective heads."""
    _check_pair(student, teacher)
    if student.family != "transformer":
        raise ValueError("parallel attention forcing is defined for the transformer family")
    head_mask = selection.mask(*student.grid)
    if ref is None:
        ref = reference_attention(teacher, batch)
    enc = student.encode(batch.src, batch.src_mask)
    ro = parallel_rollout(student, batch, K, ref, selection, rule, generator, enc)
    kl_k = _all_head_kl(ref, ro.attention[-1], batch.tgt_mask)
    kl_1 = _all_head_kl(ref, ro.attention[0], batch.tgt_mask)
    chosen = _decision(kl_k, kl_1, lam)
    hist = torch.where(chosen[:, None], ro.histories[K], ro.histories[1])
    logp, attn = student(enc, shift_right(hist), ref, head_mask)
    loss_y = sequence_nll(logp, batch.tgt, batch.tgt_mask, smoothing)
    per_head = kl_rows(ref, attn)  # [B,N,H,T]
    sel = head_mask[None, :, :, None] & batch.tgt_mask[:, None, None, :]
    loss_alpha = torch.where(sel, per_head, torch.zeros_like(per_head)).sum(dim=(1, 2, 3))
    n_terms = sel.sum(dim=(1, 2, 3))
    return LossBreakdown(loss_y, loss_alpha, gamma, chosen, kl_k, kl_1, ("K", "1"), n_terms)


def pss_probability(step: int, start: float = 1.0, end: float = 0.7, total: int = 1000) -> float:
    """Linearly decaying probability of keeping the reference token."""
    frac = min(max(step, 0) / max(total, 1), 1.0)
    return start + (end - start) * frac


def pss_step(student: Model, batch: Batch, K: int, p: float, generator: torch.Generator | None = None,
             rule: str = "greedy", smoothing: float = 0.0) -> LossBreakdown:
    """Parallel scheduled sampling: score the reference given a reference/generated mix."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("mixing probability must lie in [0, 1]")
    enc = student.encode(batch.src, batch.src_mask)
    hist = batch.tgt
    if p < 1.0:
        generated = parallel_rollout(student, batch, K, rule=rule, generator=generator, enc=enc).histories[K]
        keep = torch.rand(batch.tgt.shape, generator=generator) < p
        hist = torch.where(keep, batch.tgt, generated)
    logp, _ = student(enc, shift_right(hist))
    loss_y = sequence_nll(logp, batch.tgt, batch.tgt_mask, smoothing)
    return LossBreakdown(loss_y, torch.zeros_like(loss_y))


# --------------------------------------------------------------------------
# diagnostics


@dataclass
class DecisionStats:
    fraction: float  # share of sequences trained on the generated-history pass
    mean_kl_a: float
    mean_kl_b: float
    count: int


def kl_decision_stats(batch: Sequence[LossBreakdown]) -> DecisionStats:
    if not batch:
        raise ValueError("no loss breakdowns given")
    chosen = torch.cat([b.chosen for b in batch if b.chosen is not None]) if any(
        b.chosen is not None for b in batch) else None
    if chosen is None:
        raise ValueError("loss breakdowns carry no pass decisions")

    def _mean(parts):
        parts = [p for p in parts if p is not None]
        return float(torch.cat(parts).double().mean()) if parts else math.nan

    return DecisionStats(
        float(chosen.double().mean()),
        _mean([b.kl_a for b in batch]),
        _mean([b.kl_b for b in batch]),
        int(chosen.numel()),
    )


def compute_loss(cfg: TrainingModeConfig, student: Model, teacher: Model | None, batch: Batch,
                 step: int = 0, generator: torch.Generator | None = None,
                 smoothing: float = 0.0) -> LossBreakdown:
    """Dispatch one batch to the loss of the configured regime."""
    if cfg.mode == "TF":
        return teacher_forcing_loss(student, batch, smoothing)
    if cfg.mode == "PSS":
        p = pss_probability(step, cfg.ss_start, cfg.ss_end, cfg.ss_steps)
        return pss_step(student, batch, cfg.K, p, generator, cfg.rule, smoothing)
    if cfg.mode == "AF":
        if student.family == "transformer":
            return paf_step(student, teacher, batch, cfg.gamma, math.inf, cfg.K, cfg.forced_heads, cfg.rule,
                            generator, smoothing)
        return attention_forcing_loss(student, teacher, batch, cfg.gamma, cfg.rule, generator)
    if cfg.mode == "SAF":
        if student.family == "transformer":
            return paf_step(student, teacher, batch, cfg.gamma, cfg.lam, cfg.K, cfg.forced_heads, cfg.rule,
                            generator, smoothing)
        return saf_step(student, teacher, batch, cfg.gamma, cfg.lam, cfg.rule, generator)
    return paf_step(student, teacher, batch, cfg.gamma, cfg.lam, cfg.K, cfg.forced_heads, cfg.rule,
                    generator, smoothing)
