from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass
class ModelConfig:
    family: str = "transformer"  # rnn | transformer
    src_vocab: int = 24
    tgt_vocab: int = 24
    emb_dim: int = 32
    hidden_dim: int = 32
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int | None = 2
    ffn_dim: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        if self.family not in ("rnn", "transformer"):
            raise ValueError(f"unknown model family {self.family!r}")
        if self.family == "rnn":
            self.heads = None
        else:
            if not self.heads or self.heads < 1:
                raise ValueError("transformer needs heads >= 1")
            if self.hidden_dim % self.heads:
                raise ValueError("hidden_dim must be divisible by heads")
        for name in ("src_vocab", "tgt_vocab", "emb_dim", "hidden_dim", "enc_layers", "dec_layers", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @classmethod
    def rnn(cls, src_vocab: int, tgt_vocab: int, **kw) -> "ModelConfig":
        base = dict(emb_dim=32, hidden_dim=32, enc_layers=1, dec_layers=2)
        base.update(kw)
        return cls(family="rnn", src_vocab=src_vocab, tgt_vocab=tgt_vocab, **base)

    @classmethod
    def transformer(cls, src_vocab: int, tgt_vocab: int, **kw) -> "ModelConfig":
        base = dict(emb_dim=32, hidden_dim=32, enc_layers=2, dec_layers=2, heads=2, ffn_dim=64)
        base.update(kw)
        base["emb_dim"] = base["hidden_dim"]
        return cls(family="transformer", src_vocab=src_vocab, tgt_vocab=tgt_vocab, **base)

    def to_lines(self) -> list[str]:
        return [f"{k}={'' if v is None else v}" for k, v in asdict(self).items()]

    @classmethod
    def from_lines(cls, lines) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in lines:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            if key not in types:
                raise ValueError(f"unknown model config key {key!r}")
            if key == "family":
                kw[key] = value
            elif key == "dropout":
                kw[key] = float(value)
            elif key == "heads":
                kw[key] = int(value) if value else None
            else:
                kw[key] = int(value)
        return cls(**kw)
