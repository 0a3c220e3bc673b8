"""Teacher-forced tiny Transformer on the synthetic copy task.

    python scripts/copy_smoke.py --out runs/copy_tf
"""
import argparse
import logging
import time

from attnforce.harness import gen_task, train_run, transformer_defaults
from attnforce.models import ModelConfig

COPY_OVERRIDES = dict(lr=2e-3, warmup=200, batch_tokens=300, dropout=0.1, label_smoothing=0.1, max_epochs=30)


def copy_config(seed: int = 0, **overrides):
    cfg = transformer_defaults(seed=seed, **{**COPY_OVERRIDES, **overrides})
    cfg.model = ModelConfig.transformer(24, 24, hidden_dim=32, enc_layers=2, dec_layers=2, heads=2, ffn_dim=64,
                                        dropout=cfg.model.dropout)
    return cfg


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    data = gen_task("copy", 20, (3, 8), 2000, seed=args.seed)
    t0 = time.perf_counter()
    res = train_run(copy_config(args.seed, max_epochs=args.epochs), data, out_dir=args.out)
    print(f"best epoch {res.best_epoch} val BLEU {res.best_bleu:.2f} in {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
