"""Command-line entry point: ``attnforce <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from ..decoding import DecodeConfig
from ..metrics import reports_to_csv
from ..models import collate, load_checkpoint
from ..models.vocab import Vocab
from ..training import compute_loss, kl_decision_stats
from .config import ExperimentConfig, apply_overrides, config_keys, load_config, rnn_defaults, transformer_defaults
from .data import TASKS, build_vocab, gen_task, load_corpus, load_task, save_task
from .runner import diversity, evaluate_run, train_run, translate_corpus


class CLIError(Exception):
    pass


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--preset", choices=("rnn", "transformer"), help="desk-scale defaults to start from")
    group = p.add_argument_group("config overrides")
    for key in config_keys():
        group.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="V")


def _experiment_config(args) -> ExperimentConfig:
    base = {"rnn": rnn_defaults, "transformer": transformer_defaults}.get(args.preset, ExperimentConfig)()
    cfg = load_config(args.config, base) if args.config else base
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return apply_overrides(cfg, overrides)


def _decode_config(args) -> DecodeConfig:
    return DecodeConfig(args.strategy, args.beam_width, args.max_len, args.seed)


def _add_decode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", default="greedy", choices=("greedy", "sampling", "beam"))
    p.add_argument("--beam-width", type=int, default=4)
    p.add_argument("--max-len", type=int)
    p.add_argument("--seed", type=int, default=0)


def _load_split(args, split: str):
    d = Path(args.data)
    ckpt_dir = Path(args.checkpoint).parent
    vocab_dir = d if (d / "vocab.src").exists() else ckpt_dir
    sv, tv = Vocab.load(vocab_dir / "vocab.src"), Vocab.load(vocab_dir / "vocab.tgt")
    return load_corpus(d / f"{split}.src", d / f"{split}.tgt", sv, tv, split), sv, tv


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_task(args) -> None:
    lo, _, hi = args.lengths.partition("-")
    data = gen_task(args.kind, args.vocab_size, (int(lo), int(hi or lo)), args.n, args.seed)
    save_task(data, args.out)
    print(f"wrote {args.kind} task to {args.out}: {len(data.train)}/{len(data.valid)}/{len(data.test)} pairs")


def cmd_build_vocab(args) -> None:
    vocab = build_vocab(args.text, args.max_size)
    vocab.save(args.out)
    print(f"wrote {len(vocab)} tokens to {args.out}")


def cmd_train(args) -> None:
    cfg = _experiment_config(args)
    data = load_task(args.data)
    teacher = load_checkpoint(cfg.mode.teacher) if cfg.mode.teacher else None
    if cfg.finetune and teacher is None:
        raise CLIError(f"mode {cfg.mode.mode} needs --teacher CHECKPOINT from a TF run")
    result = train_run(cfg, data, teacher, args.out)
    print(f"best epoch {result.best_epoch} val_bleu {result.best_bleu:.2f}; wrote {args.out}/best.ckpt")


def cmd_translate(args) -> None:
    model = load_checkpoint(args.checkpoint)
    d = Path(args.checkpoint).parent
    sv = Vocab.load(args.src_vocab or d / "vocab.src")
    tv = Vocab.load(args.tgt_vocab or d / "vocab.tgt")
    lines = Path(args.input).read_text(encoding="utf-8").splitlines()
    if any(not line.split() for line in lines):
        raise CLIError(f"{args.input} contains an empty line")
    results = translate_corpus(model, [sv.encode(line.split()) for line in lines], _decode_config(args), args.seed)
    text = "".join(" ".join(tv.decode(r.tokens)) + "\n" for r in results)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_evaluate(args) -> None:
    model = load_checkpoint(args.checkpoint)
    corpus, _, _ = _load_split(args, args.split)
    report, div = evaluate_run(model, corpus, _decode_config(args), args.M, args.seed)
    _emit(reports_to_csv(report, div), args.output)


def cmd_diversity(args) -> None:
    model = load_checkpoint(args.checkpoint)
    corpus, _, _ = _load_split(args, args.split)
    _emit(reports_to_csv(diversity=diversity(model, corpus, args.M, args.seed)), args.output)


def cmd_decision_stats(args) -> None:
    """Share of sequences a scheduled regime would train on generated history."""
    cfg = _experiment_config(args)
    if cfg.mode.mode not in ("SAF", "PAF"):
        raise CLIError("decision-stats needs --mode SAF or PAF")
    student = load_checkpoint(args.checkpoint)
    teacher = load_checkpoint(cfg.mode.teacher) if cfg.mode.teacher else student
    corpus, _, _ = _load_split(args, args.split)
    if student.family == "transformer":
        cfg = apply_overrides(cfg, {"forced_heads": cfg.mode.forced_heads.clip(*student.grid).format()})
    student.eval()
    gen = torch.Generator().manual_seed(cfg.seed)
    parts = []
    with torch.no_grad():
        for i in range(0, len(corpus), args.batch):
            batch = collate(corpus.pairs[i : i + args.batch])
            parts.append(compute_loss(cfg.mode, student, teacher, batch, 1, gen))
    stats = kl_decision_stats(parts)
    rows = [["passA_frac", "mean_kl_a", "mean_kl_b", "count"],
            [stats.fraction, stats.mean_kl_a, stats.mean_kl_b, stats.count]]
    _emit("".join(",".join(map(str, r)) + "\n" for r in rows), args.output)


def _emit(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attnforce", description="attention-forcing seq2seq experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-task", help="write a synthetic copy/reverse/reorder task")
    p.add_argument("kind", choices=TASKS)
    p.add_argument("--vocab-size", type=int, default=20)
    p.add_argument("--lengths", default="3-8", help="LO-HI sentence length range")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_task)

    p = sub.add_parser("build-vocab", help="frequency-ranked vocabulary from a text file")
    p.add_argument("text")
    p.add_argument("--max-size", type=int, default=50000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", help="train one run; writes best.ckpt, runlog.csv, config.txt")
    p.add_argument("--data", required=True, help="directory with {train,valid,test}.{src,tgt} and vocab files")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="decode a source file")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("--output")
    p.add_argument("--src-vocab")
    p.add_argument("--tgt-vocab")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_translate)

    for name, func, help_ in (("evaluate", cmd_evaluate, "BLEU plus diversity CSV"),
                              ("diversity", cmd_diversity, "pairwise BLEU and greedy entropy CSV")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("checkpoint")
        p.add_argument("--data", required=True)
        p.add_argument("--split", default="test", choices=("train", "valid", "test"))
        p.add_argument("--M", type=int, default=5)
        p.add_argument("--output")
        _add_decode_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("decision-stats", help="pass-A/K fraction and mean KLs of a scheduled regime")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="valid", choices=("train", "valid", "test"))
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--output")
    _add_config_flags(p)
    p.set_defaults(func=cmd_decision_stats)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (CLIError, ValueError, OSError, KeyError, RuntimeError, ArithmeticError) as exc:
        reason = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        print(f"attnforce {args.command}: {reason}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
