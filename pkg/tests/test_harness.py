import math
import random
from collections import Counter

import pytest
import torch

from attnforce.harness.cli import main
from attnforce.harness.config import (
    ExperimentConfig, apply_overrides, config_lines, load_config, rnn_defaults, save_config, transformer_defaults,
)
from attnforce.harness.data import build_vocab, gen_task, load_corpus, load_task, save_task, substitute
from attnforce.harness.runner import (
    RUNLOG_HEADER, EpochRow, RunLog, diversity, evaluate_run, make_batches, mean_std, train_run,
)
from attnforce.models import EOS, UNK, HeadSelection, ModelConfig, Vocab, load_checkpoint

# --------------------------------------------------------------------------
# data


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_load_corpus(tmp_path):
    v = Vocab(["a", "b"])
    c = load_corpus(_write(tmp_path / "s", "a b\nb zz\n"), _write(tmp_path / "t", "b\na a\n"), v, v)
    assert len(c) == 2
    assert c.pairs[1][0] == [5, UNK]
    assert c.pairs[0][1] == [5, EOS]
    assert c.references == [[5], [4, 4]]


def test_load_corpus_errors(tmp_path):
    v = Vocab(["a"])
    with pytest.raises(ValueError, match="line counts"):
        load_corpus(_write(tmp_path / "s", "a\na\n"), _write(tmp_path / "t", "a\n"), v, v)
    with pytest.raises(ValueError, match="empty"):
        load_corpus(_write(tmp_path / "s", "a\n\n"), _write(tmp_path / "t", "a\na\n"), v, v)


def test_build_vocab(tmp_path):
    p = _write(tmp_path / "x", "a a b\n")
    assert build_vocab(p, 10).tokens == ["<pad>", "<bos>", "<eos>", "<unk>", "a", "b"]
    assert build_vocab(p, 5).tokens[4:] == ["a"]
    with pytest.raises(ValueError):
        build_vocab(p, 4)


def test_build_vocab_counting_oracle(tmp_path):
    rng = random.Random(5)
    words = [f"w{rng.randrange(30)}" for _ in range(500)]
    lines = [" ".join(words[i : i + 7]) for i in range(0, 500, 7)]
    p = _write(tmp_path / "x", "\n".join(lines) + "\n")
    counts = Counter(words)
    got = build_vocab(p, 14).tokens[4:]
    assert len(got) == 10
    kept = [counts[w] for w in got]
    assert kept == sorted(kept, reverse=True)
    assert min(kept) >= max(c for w, c in counts.items() if w not in got)


@pytest.mark.parametrize("kind", ["copy", "reverse", "reorder"])
def test_gen_task_rules(kind):
    V = 12
    data = gen_task(kind, V, (3, 6), 200, seed=7)
    assert (len(data.train), len(data.valid), len(data.test)) == (200, 100, 100)
    swapped = 0
    for src, tgt in data.train.pairs:
        assert tgt[-1] == EOS and 3 <= len(src) <= 6
        s = [int(data.src_vocab.tokens[i]) for i in src]
        t = [int(data.tgt_vocab.tokens[i]) for i in tgt[:-1]]
        if kind == "copy":
            assert t == s
        elif kind == "reverse":
            assert t == s[::-1]
        else:
            mapped = [substitute(x, V) for x in s]
            mid = len(mapped) // 2
            assert t in (mapped, mapped[mid:] + mapped[:mid])
            swapped += t != mapped
    if kind == "reorder":
        assert 60 < swapped < 140
    assert gen_task(kind, V, (3, 6), 200, seed=7).train.pairs == data.train.pairs


def test_gen_task_errors():
    with pytest.raises(ValueError):
        gen_task("sort", 10, (3, 5), 10)
    with pytest.raises(ValueError):
        gen_task("copy", 10, (5, 3), 10)


def test_task_roundtrip(tmp_path):
    data = gen_task("reverse", 10, (2, 4), 30, seed=1)
    save_task(data, tmp_path)
    back = load_task(tmp_path)
    assert back.src_vocab == data.src_vocab
    for name in ("train", "valid", "test"):
        assert back.split(name).pairs == data.split(name).pairs


# --------------------------------------------------------------------------
# config


def test_config_roundtrip(tmp_path):
    cfg = transformer_defaults(lam="inf", mode="PAF", forced_heads="1:2", max_epochs=3)
    save_config(cfg, tmp_path / "c.txt")
    back = load_config(tmp_path / "c.txt")
    assert back == cfg
    assert back.mode.lam == math.inf and back.mode.forced_heads == HeadSelection.parse("1:2")


def test_config_overrides_and_errors():
    cfg = apply_overrides(ExperimentConfig(), {"lr": "0.01", "hidden-dim": "16", "seed": "4"})
    assert (cfg.optim.lr, cfg.model.hidden_dim, cfg.seed) == (0.01, 16, 4)
    with pytest.raises(ValueError):
        apply_overrides(ExperimentConfig(), {"nope": "1"})
    with pytest.raises(ValueError):
        ExperimentConfig(patience=0)
    assert all("=" in line for line in config_lines(cfg))


def test_defaults():
    r, t = rnn_defaults(), transformer_defaults()
    assert (r.optim.lr, r.optim.clip, r.optim.batch_size, r.model.dropout, r.mode.gamma) == (0.002, 1.0, 50, 0.2, 10.0)
    assert (t.optim.schedule, t.optim.beta2, t.optim.label_smoothing, t.mode.gamma) == (
        "inverse-sqrt-warmup", 0.98, 0.1, 1000.0)


# --------------------------------------------------------------------------
# runner


def _tiny_rnn(**kw):
    cfg = rnn_defaults(**kw)
    cfg.model = ModelConfig.rnn(10, 10, emb_dim=8, hidden_dim=8, dropout=cfg.model.dropout)
    return cfg


@pytest.fixture(scope="module")
def tiny_data():
    return gen_task("copy", 6, (2, 3), 60, seed=0, n_valid=20, n_test=20)


@pytest.fixture(scope="module")
def tiny_teacher(tiny_data):
    return train_run(_tiny_rnn(max_epochs=2), tiny_data).model


def test_runlog_csv(tmp_path):
    log = RunLog()
    log.append(EpochRow(1, 1.5, 0.0, 10.0, None, 0.1))
    log.append(EpochRow(2, 1.0, 0.2, 12.0, 0.5, 0.1))
    log.write_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0].split(",") == RUNLOG_HEADER
    back = RunLog.read_csv(tmp_path / "r.csv")
    assert back.rows[0].passA_frac is None and back.rows[1].passA_frac == 0.5
    assert back.best_epoch == 2
    with pytest.raises(ValueError):
        log.append(EpochRow(2, 0, 0, 0, None, 0))


def test_best_epoch_ties_to_earlier():
    log = RunLog([EpochRow(1, 0, 0, 5.0, None, 0), EpochRow(2, 0, 0, 5.0, None, 0)])
    assert log.best_epoch == 1


def test_make_batches():
    data = gen_task("copy", 6, (2, 6), 50, seed=0)
    rnn = make_batches(data.train, _tiny_rnn(batch_size=7), random.Random(0))
    assert [len(b) for b in rnn[:-1]] == [7] * 7 and sorted(i for b in rnn for i in b) == list(range(50))
    tcfg = transformer_defaults(batch_tokens=20)
    for b in make_batches(data.train, tcfg, random.Random(0)):
        longest = max(len(data.train.pairs[i][1]) for i in b)
        assert len(b) == 1 or longest * len(b) <= 20


def test_patience_stops(tiny_data):
    res = train_run(_tiny_rnn(lr=1e-12, patience=1, max_epochs=10), tiny_data)
    assert len(res.log.rows) == 2 and res.best_epoch == 1


def test_train_writes_artifacts(tmp_path, tiny_data):
    res = train_run(_tiny_rnn(max_epochs=1), tiny_data, out_dir=tmp_path)
    for name in ("config.txt", "vocab.src", "vocab.tgt", "best.ckpt", "runlog.csv"):
        assert (tmp_path / name).exists()
    back = load_checkpoint(tmp_path / "best.ckpt")
    for (n, a), (_, b) in zip(sorted(res.model.named_parameters()), sorted(back.named_parameters())):
        assert torch.equal(a, b), n


def test_training_reproducible(tiny_data):
    a = train_run(_tiny_rnn(max_epochs=2, seed=3), tiny_data)
    b = train_run(_tiny_rnn(max_epochs=2, seed=3), tiny_data)
    assert [r.loss_y for r in a.log.rows] == [r.loss_y for r in b.log.rows]
    for (_, x), (_, y) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert torch.equal(x, y)


def test_finetune_needs_teacher(tiny_data):
    with pytest.raises(ValueError, match="teacher"):
        train_run(_tiny_rnn(mode="SAF"), tiny_data)


def test_saf_infinite_lambda_logs_full_fraction(tiny_data, tiny_teacher):
    res = train_run(_tiny_rnn(mode="SAF", lam="inf", max_epochs=2), tiny_data, tiny_teacher)
    assert [r.passA_frac for r in res.log.rows] == [1.0, 1.0]
    tf = train_run(_tiny_rnn(max_epochs=1), tiny_data)
    assert tf.log.rows[0].passA_frac is None


def test_teacher_untouched_by_finetune(tiny_data, tiny_teacher):
    before = {n: p.clone() for n, p in tiny_teacher.named_parameters()}
    train_run(_tiny_rnn(mode="AF", max_epochs=1), tiny_data, tiny_teacher)
    for n, p in tiny_teacher.named_parameters():
        assert torch.equal(p, before[n])


def test_evaluate_deterministic(tiny_data, tiny_teacher):
    a = evaluate_run(tiny_teacher, tiny_data.test, M=3, seed=1)
    b = evaluate_run(tiny_teacher, tiny_data.test, M=3, seed=1)
    assert a == b
    with pytest.raises(ValueError):
        diversity(tiny_teacher, tiny_data.test, M=1)


def test_one_hot_model_diversity(tiny_data, tiny_teacher):
    import copy
    model = copy.deepcopy(tiny_teacher)
    with torch.no_grad():
        model.out.weight.zero_()
        model.out.bias.fill_(-1e4)
        model.out.bias[5] = 0.0
    div = diversity(model, tiny_data.test, M=3)
    assert div.pairwise_bleu == 100.0 and div.entropy < 1e-9


def test_mean_std():
    assert mean_std([2.0]) == (2.0, 0.0)
    m, s = mean_std([1.0, 2.0, 3.0])
    assert m == 2.0 and s == pytest.approx(1.0)


# --------------------------------------------------------------------------
# command line


def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    run = tmp_path / "run"
    assert main(["gen-task", "copy", "--vocab-size", "6", "--lengths", "2-3", "--n", "40", "--out", str(data)]) == 0
    assert (data / "train.src").exists()
    assert main(["train", "--data", str(data), "--out", str(run), "--preset", "rnn", "--max-epochs", "1",
                 "--hidden-dim", "8", "--emb-dim", "8"]) == 0
    ckpt = str(run / "best.ckpt")
    out = tmp_path / "hyp.txt"
    assert main(["translate", ckpt, str(data / "test.src"), "--output", str(out), "--strategy", "beam"]) == 0
    assert len(out.read_text().splitlines()) == len((data / "test.src").read_text().splitlines())
    assert main(["evaluate", ckpt, "--data", str(data), "--M", "2", "--output", str(tmp_path / "e.csv")]) == 0
    assert (tmp_path / "e.csv").read_text().startswith("bleu,p1")
    capsys.readouterr()
    assert main(["diversity", ckpt, "--data", str(data), "--M", "2"]) == 0
    assert capsys.readouterr().out.startswith("pairwise_bleu")
    assert main(["decision-stats", ckpt, "--data", str(data), "--preset", "rnn", "--mode", "SAF",
                 "--hidden-dim", "8", "--emb-dim", "8"]) == 0
    header, row = capsys.readouterr().out.splitlines()
    assert header == "passA_frac,mean_kl_a,mean_kl_b,count" and 0.0 <= float(row.split(",")[0]) <= 1.0
    assert main(["build-vocab", str(data / "train.src"), "--max-size", "8", "--out", str(tmp_path / "v")]) == 0
    assert len((tmp_path / "v").read_text().splitlines()) == 8


def test_cli_errors(tmp_path, capsys):
    data = tmp_path / "data"
    main(["gen-task", "copy", "--vocab-size", "6", "--lengths", "2-3", "--n", "20", "--out", str(data)])
    capsys.readouterr()
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "r"), "--mode", "SAF"]) == 1
    assert "teacher" in capsys.readouterr().err
    assert main(["evaluate", str(tmp_path / "missing.ckpt"), "--data", str(data)]) == 1
    with pytest.raises(SystemExit):
        main(["train", "--data", str(data), "--out", str(tmp_path / "r"), "--bogus-key", "1"])
