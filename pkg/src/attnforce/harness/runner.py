"""Training loop, checkpoint selection and evaluation."""
from __future__ import annotations

import copy
import csv
import logging
import random
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from .. import diffcore as dc
from ..decoding import DecodeConfig, decode_batch
from ..metrics import BleuReport, DiversityReport, bleu, mean_entropy, pairwise_bleu
from ..models import Model, build_model, collate, load_checkpoint, save_checkpoint
from ..models.vocab import pad_sequences
from ..training import TrainingModeConfig, compute_loss
from .config import ExperimentConfig, save_config
from .data import Corpus, TaskData

log = logging.getLogger(__name__)

RUNLOG_HEADER = ["epoch", "loss_y", "loss_alpha", "val_bleu", "passA_frac", "seconds"]


@dataclass
class EpochRow:
    epoch: int
    loss_y: float
    loss_alpha: float
    val_bleu: float
    passA_frac: float | None
    seconds: float


@dataclass
class RunLog:
    rows: list[EpochRow] = field(default_factory=list)

    def append(self, row: EpochRow) -> None:
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ValueError("run log rows must be appended in epoch order")
        self.rows.append(row)

    @property
    def best_epoch(self) -> int:
        """Epoch with the highest validation BLEU; ties go to the earlier epoch."""
        best = max(self.rows, key=lambda r: (r.val_bleu, -r.epoch))
        return best.epoch

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RUNLOG_HEADER)
            for r in self.rows:
                frac = "" if r.passA_frac is None else f"{r.passA_frac:.6f}"
                w.writerow([r.epoch, f"{r.loss_y:.6f}", f"{r.loss_alpha:.6f}", f"{r.val_bleu:.4f}", frac,
                            f"{r.seconds:.3f}"])

    @classmethod
    def read_csv(cls, path) -> "RunLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([
            EpochRow(int(r["epoch"]), float(r["loss_y"]), float(r["loss_alpha"]), float(r["val_bleu"]),
                     float(r["passA_frac"]) if r["passA_frac"] else None, float(r["seconds"]))
            for r in rows
        ])


@dataclass
class RunResult:
    model: Model
    log: RunLog
    best_epoch: int
    best_bleu: float


# --------------------------------------------------------------------------
# batching


def make_batches(corpus: Corpus, cfg: ExperimentConfig, rng: random.Random) -> list[list[int]]:
    order = list(range(len(corpus)))
    rng.shuffle(order)
    batches: list[list[int]] = []
    if cfg.model.family == "rnn":
        bs = cfg.optim.batch_size
        return [order[i : i + bs] for i in range(0, len(order), bs)]
    budget = cfg.optim.batch_tokens
    cur: list[int] = []
    longest = 0
    for i in order:
        n = len(corpus.pairs[i][1])
        if cur and max(longest, n) * (len(cur) + 1) > budget:
            batches.append(cur)
            cur, longest = [], 0
        cur.append(i)
        longest = max(longest, n)
    if cur:
        batches.append(cur)
    return batches


def translate_corpus(model: Model, sources: list[list[int]], cfg: DecodeConfig = DecodeConfig(),
                     seed: int | None = None, chunk: int = 256):
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    results = []
    for i in range(0, len(sources), chunk):
        results.extend(decode_batch(model, pad_sequences(sources[i : i + chunk]), cfg, gen))
    return results


def corpus_bleu(model: Model, corpus: Corpus, cfg: DecodeConfig = DecodeConfig()) -> BleuReport:
    hyps = [r.tokens for r in translate_corpus(model, corpus.sources, cfg)]
    return bleu(hyps, corpus.references)


# --------------------------------------------------------------------------
# training


def _schedule(cfg: ExperimentConfig) -> dc.LRSchedule:
    o = cfg.optim
    if o.schedule == "constant":
        return dc.LRSchedule("halved-on-finetune" if cfg.finetune else "constant", o.lr)
    base = o.lr / 2 if cfg.finetune else o.lr
    return dc.LRSchedule(o.schedule, base, o.warmup)


def _resolve_heads(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.model.family != "transformer":
        return cfg
    clipped = cfg.mode.forced_heads.clip(cfg.model.dec_layers, cfg.model.heads)
    return replace(cfg, mode=replace(cfg.mode, forced_heads=clipped))


def train_run(cfg: ExperimentConfig, data: TaskData, teacher: Model | None = None,
              out_dir: str | Path | None = None, init: Model | None = None) -> RunResult:
    """Train with the configured regime, keeping the best-validation-BLEU parameters.

    Finetuning regimes start from ``init`` (default: a copy of the teacher).
    """
    mode: TrainingModeConfig = cfg.mode
    if cfg.finetune and teacher is None:
        if mode.teacher:
            teacher = load_checkpoint(mode.teacher)
        else:
            raise ValueError(f"mode {mode.mode} needs a teacher checkpoint (TF pretraining first)")
    dtype = getattr(torch, cfg.dtype)
    model_cfg = replace(cfg.model, src_vocab=len(data.src_vocab), tgt_vocab=len(data.tgt_vocab))
    cfg = _resolve_heads(replace(cfg, model=model_cfg))
    mode = cfg.mode
    if teacher is not None:
        teacher = teacher.to(dtype)
        teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)
    if init is not None:
        model = copy.deepcopy(init).to(dtype)
    elif cfg.finetune:
        model = copy.deepcopy(teacher)
        for p in model.parameters():
            p.requires_grad_(True)
    else:
        model = build_model(model_cfg, cfg.seed, dtype)
    # the teacher's dropout rate may differ from this run's config
    for m in model.modules():
        if isinstance(m, dc.SeededDropout):
            m.rate = cfg.model.dropout
    model.cfg = replace(model.cfg, dropout=cfg.model.dropout)

    store = dc.ParamStore.from_module(model)
    adam = dc.AdamState(cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps)
    schedule = _schedule(cfg)
    smoothing = cfg.optim.label_smoothing if model_cfg.family == "transformer" else 0.0
    rng = random.Random(cfg.seed)
    runlog = RunLog()
    best_bleu, best_state, best_epoch = -1.0, None, 0
    since_best = 0
    step = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / "config.txt")
        data.src_vocab.save(out / "vocab.src")
        data.tgt_vocab.save(out / "vocab.tgt")

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        sum_y = sum_a = 0.0
        n_seq = 0
        chosen = decided = 0
        for idx in make_batches(data.train, cfg, rng):
            step += 1
            batch = collate([data.train.pairs[i] for i in idx])
            dc.reseed_dropout(model, cfg.seed, step)
            gen = torch.Generator().manual_seed(dc.derive_seed(cfg.seed, "rollout", step))
            bd = compute_loss(mode, model, teacher, batch, step, gen, smoothing)
            loss = dc.check_finite(bd.objective(), f"loss at step {step}")
            grads = dc.clip_grad_norm(dc.backward(loss, store), cfg.optim.clip)
            dc.adam_step(store, grads, adam, dc.lr_at(schedule, step))
            sum_y += float(bd.loss_y.detach().sum())
            sum_a += float(bd.loss_alpha.detach().sum())
            n_seq += batch.size
            if bd.chosen is not None:
                chosen += int(bd.chosen.sum())
                decided += bd.chosen.numel()
        val = corpus_bleu(model, data.valid).bleu
        frac = chosen / decided if decided else None
        row = EpochRow(epoch, sum_y / n_seq, sum_a / n_seq, val, frac, time.perf_counter() - t0)
        runlog.append(row)
        log.info("epoch %d loss_y %.4f loss_alpha %.4f val_bleu %.2f passA %s", epoch, row.loss_y,
                 row.loss_alpha, val, "-" if frac is None else f"{frac:.3f}")
        if val > best_bleu:
            best_bleu, best_epoch, since_best = val, epoch, 0
            best_state = store.snapshot()
        else:
            since_best += 1
        if since_best >= cfg.patience:
            break

    with torch.no_grad():
        for name, p in store.items():
            p.copy_(best_state[name])
    model.eval()
    if out is not None:
        save_checkpoint(model, out / "best.ckpt")
        runlog.write_csv(out / "runlog.csv")
    return RunResult(model, runlog, best_epoch, best_bleu)


def evaluate_run(model: Model, test: Corpus, cfg: DecodeConfig = DecodeConfig(), M: int = 5,
                 seed: int = 0) -> tuple[BleuReport, DiversityReport]:
    """Test BLEU via ``cfg``, pairwise BLEU over M sampling runs, entropy under greedy."""
    hyps = [r.tokens for r in translate_corpus(model, test.sources, cfg, seed)]
    report = bleu(hyps, test.references)
    return report, diversity(model, test, M, seed)


def diversity(model: Model, corpus: Corpus, M: int = 5, seed: int = 0) -> DiversityReport:
    if M < 2:
        raise ValueError("M must be >= 2 for pairwise BLEU")
    runs = [[r.tokens for r in translate_corpus(model, corpus.sources, DecodeConfig("sampling"), seed + m)]
            for m in range(M)]
    greedy = translate_corpus(model, corpus.sources, DecodeConfig("greedy"))
    return DiversityReport(pairwise_bleu(runs), mean_entropy(greedy), M)


def mean_std(values: list[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    if not values:
        raise ValueError("no values")
    mean = statistics.fmean(values)
    return mean, statistics.stdev(values) if len(values) > 1 else 0.0


def repeat_runs(cfg: ExperimentConfig, data: TaskData, teacher: Model | None = None,
                decode: DecodeConfig = DecodeConfig()) -> tuple[float, float, list[RunResult]]:
    """R runs with seeds seed..seed+R-1; returns test-BLEU mean, sample std and the runs."""
    results, scores = [], []
    for r in range(cfg.repeats):
        res = train_run(replace(cfg, seed=cfg.seed + r), data, teacher)
        results.append(res)
        scores.append(corpus_bleu(res.model, data.test, decode).bleu)
    mean, std = mean_std(scores)
    return mean, std, results
