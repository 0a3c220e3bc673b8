"""Two-stage runs: TF teachers, then SAF (RNN) and PAF (Transformer) finetuning.

    python scripts/regime_smoke.py --task copy
    python scripts/regime_smoke.py --task reorder --lam 2.0
"""
import argparse
import logging
from dataclasses import replace

from attnforce.harness import gen_task, rnn_defaults, train_run
from attnforce.models import HeadSelection, ModelConfig

from copy_smoke import copy_config


def rnn_config(seed=0, **overrides):
    cfg = rnn_defaults(seed=seed, **overrides)
    cfg.model = ModelConfig.rnn(24, 24, dropout=cfg.model.dropout)
    return cfg


def finetune(cfg, mode, lam, epochs, **mode_kw):
    return replace(cfg, max_epochs=epochs, mode=replace(cfg.mode, mode=mode, lam=lam, **mode_kw))


def run(task: str, lam: float, seed: int = 0, teacher_epochs: int = 30, ft_epochs: int = 5, log=print):
    data = gen_task(task, 20, (3, 8), 2000, seed=seed)
    out = {}
    rnn = rnn_config(seed, max_epochs=teacher_epochs)
    rnn_teacher = train_run(rnn, data)
    saf = train_run(finetune(rnn, "SAF", lam, ft_epochs), data, teacher=rnn_teacher.model)
    out["rnn"] = (rnn_teacher, saf)
    log(f"[{task}] rnn teacher {rnn_teacher.best_bleu:.2f} -> SAF {saf.best_bleu:.2f} "
        f"passA {[r.passA_frac for r in saf.log.rows]}")
    tr = copy_config(seed, max_epochs=teacher_epochs)
    tr_teacher = train_run(tr, data)
    paf = train_run(finetune(tr, "PAF", lam, ft_epochs, K=2, forced_heads=HeadSelection.parse("1-2:1-8")), data,
                    teacher=tr_teacher.model)
    out["transformer"] = (tr_teacher, paf)
    log(f"[{task}] transformer teacher {tr_teacher.best_bleu:.2f} -> PAF {paf.best_bleu:.2f} "
        f"passK {[r.passA_frac for r in paf.log.rows]}")
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--task", default="copy", choices=("copy", "reverse", "reorder"))
    ap.add_argument("--lam", type=float, default=2.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--teacher-epochs", type=int, default=30)
    ap.add_argument("--ft-epochs", type=int, default=5)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    run(args.task, args.lam, args.seed, args.teacher_epochs, args.ft_epochs)


if __name__ == "__main__":
    main()
