import random

import pytest
import torch

from attnforce.models import ModelConfig, build_model, collate


def tiny_cfg(family: str, V: int = 8, dim: int = 4, **kw) -> ModelConfig:
    if family == "rnn":
        return ModelConfig.rnn(V, V, emb_dim=dim, hidden_dim=dim, **kw)
    kw.setdefault("heads", 2)
    kw.setdefault("ffn_dim", 2 * dim)
    return ModelConfig.transformer(V, V, hidden_dim=dim, **kw)


def tiny_model(family: str, seed: int = 0, dtype=torch.float64, **kw):
    return build_model(tiny_cfg(family, **kw), seed, dtype)


def spread(model, seed: int, scale: float = 1.0):
    """Redraw every parameter from N(0, scale^2): sharper attention and larger gradients."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, p in sorted(model.named_parameters()):
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * scale)
    return model


def random_pairs(rng: random.Random, n: int, V: int, src_len=(2, 5), tgt_len=(2, 5)):
    """Random (source, target + EOS) pairs over ids 4..V-1."""
    pairs = []
    for _ in range(n):
        s = [rng.randrange(4, V) for _ in range(rng.randint(*src_len))]
        t = [rng.randrange(4, V) for _ in range(rng.randint(tgt_len[0] - 1, tgt_len[1] - 1))] + [2]
        pairs.append((s, t))
    return pairs


def random_batch(seed: int, n: int = 3, V: int = 8, **kw):
    return collate(random_pairs(random.Random(seed), n, V, **kw))


@pytest.fixture
def rng():
    return random.Random(1234)
