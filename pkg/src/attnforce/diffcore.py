"""Tensor primitives, gradients, Adam and learning-rate schedules.

Reverse-mode differentiation is delegated to torch autograd; everything the
training code relies on numerically (clipping, the Adam recurrence, schedules,
seeded dropout masks) is written out here so its behaviour is pinned down.
"""
from __future__ import annotations

import hashlib
import math
from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible input shapes."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op
        self.detail = detail


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf is detected at an operation boundary."""


def check_finite(x: Tensor, where: str) -> Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {where}")
    return x


# --------------------------------------------------------------------------
# primitives


def softmax(scores: Tensor, mask: Tensor | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` marks valid entries (True)."""
    if mask is not None:
        try:
            torch.broadcast_shapes(mask.shape, scores.shape)
        except RuntimeError:
            raise ShapeError("softmax", f"mask {tuple(mask.shape)} vs scores {tuple(scores.shape)}") from None
        scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1)


def weighted_sum(weights: Tensor, rows: Tensor) -> Tensor:
    """sum_l weights[..., l] * rows[..., l, :]."""
    if weights.shape[-1] != rows.shape[-2]:
        raise ShapeError("weighted_sum", f"weights last dim {weights.shape[-1]} != rows dim -2 {rows.shape[-2]}")
    return weights @ rows


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError("affine", f"input dim {x.shape[-1]} != weight in-dim {weight.shape[-1]}")
    return F.linear(x, weight, bias)


def embedding(ids: Tensor, table: Tensor) -> Tensor:
    if ids.numel() and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", f"id out of range [0, {table.shape[0]})")
    return F.embedding(ids, table)


def general_scores(queries: Tensor, keys: Tensor, weight: Tensor) -> Tensor:
    """Bilinear scores q^T W k for every (query, key) pair."""
    if queries.shape[-1] != weight.shape[0] or keys.shape[-1] != weight.shape[1]:
        raise ShapeError(
            "general_scores",
            f"q {queries.shape[-1]}, W {tuple(weight.shape)}, k {keys.shape[-1]}",
        )
    return queries @ weight @ keys.transpose(-1, -2)


def scaled_dot_scores(queries: Tensor, keys: Tensor) -> Tensor:
    if queries.shape[-1] != keys.shape[-1]:
        raise ShapeError("scaled_dot_scores", f"q dim {queries.shape[-1]} != k dim {keys.shape[-1]}")
    return queries @ keys.transpose(-1, -2) / math.sqrt(queries.shape[-1])


def concat(tensors: list[Tensor], dim: int = -1) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.dim() != len(ref):
            raise ShapeError("concat", "rank mismatch")
    return torch.cat(tensors, dim=dim)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape[-1] != x.shape[-1]:
        raise ShapeError("layer_norm", f"gain dim {gain.shape[-1]} != input dim {x.shape[-1]}")
    return F.layer_norm(x, (x.shape[-1],), gain, bias, eps)


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor | None = None):
    """One LSTM step with gate order (input, forget, cell, output); returns (h', c')."""
    gates = x @ w_ih.T + h @ w_hh.T
    if bias is not None:
        gates = gates + bias
    if gates.shape[-1] != 4 * h.shape[-1]:
        raise ShapeError("lstm_cell", f"gates {gates.shape[-1]} != 4 * hidden {h.shape[-1]}")
    i, f, g, o = gates.chunk(4, dim=-1)
    c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    return torch.sigmoid(o) * torch.tanh(c), c


def dropout_mask(shape: torch.Size | tuple[int, ...], rate: float, generator: torch.Generator,
                 dtype: torch.dtype = torch.float32) -> Tensor:
    """Inverted-dropout keep mask, scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = torch.rand(shape, generator=generator, dtype=dtype) >= rate
    return keep.to(dtype) / (1.0 - rate)


def apply_dropout(x: Tensor, rate: float, generator: torch.Generator) -> Tensor:
    if rate == 0.0:
        return x
    return x * dropout_mask(x.shape, rate, generator, x.dtype)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "softmax": softmax,
    "weighted_sum": weighted_sum,
    "affine": affine,
    "embedding": embedding,
    "general_scores": general_scores,
    "scaled_dot_scores": scaled_dot_scores,
    "concat": lambda *ts, dim=-1: concat(list(ts), dim),
    "layer_norm": layer_norm,
    "relu": relu,
    "lstm_cell": lstm_cell,
    "dropout": apply_dropout,
}


def primitive_forward(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


# --------------------------------------------------------------------------
# seeded dropout


def derive_seed(*parts) -> int:
    digest = hashlib.blake2b(":".join(map(str, parts)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & ((1 << 63) - 1)


class SeededDropout(nn.Module):
    """Dropout whose masks come from a generator seeded per (global seed, step, path).

    ``reseed`` is called by the training loop before each update; within one
    update successive calls draw successive masks from the same generator.
    """

    def __init__(self, rate: float):
        super().__init__()
        self.rate = float(rate)
        self.path = ""
        self._generator: torch.Generator | None = None

    def reseed(self, global_seed: int, step: int) -> None:
        self._generator = torch.Generator().manual_seed(derive_seed(global_seed, step, self.path))

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0.0:
            return x
        if self._generator is None:
            self.reseed(0, 0)
        return apply_dropout(x, self.rate, self._generator)


def reseed_dropout(model: nn.Module, global_seed: int, step: int) -> None:
    for name, mod in model.named_modules():
        if isinstance(mod, SeededDropout):
            mod.path = name
            mod.reseed(global_seed, step)


# --------------------------------------------------------------------------
# parameters and gradients


class ParamStore(Mapping[str, Tensor]):
    """Named parameters in lexicographic path order."""

    def __init__(self, params: Mapping[str, Tensor]):
        self._params = dict(sorted(params.items()))

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamStore":
        return cls(dict(module.named_parameters()))

    def __getitem__(self, key: str) -> Tensor:
        return self._params[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def snapshot(self) -> dict[str, Tensor]:
        return {k: v.detach().clone() for k, v in self._params.items()}

    def max_abs_diff(self, other: Mapping[str, Tensor]) -> float:
        if set(self) != set(other):
            raise KeyError("parameter paths differ")
        return max((self[k].detach() - other[k].detach()).abs().max().item() for k in self)


Gradients = dict[str, Tensor]


def backward(loss: Tensor, store: ParamStore, retain_graph: bool = False) -> Gradients:
    """Gradient of a scalar loss w.r.t. every parameter; untouched ones get zeros."""
    if loss.dim() != 0:
        raise ShapeError("backward", f"loss must be scalar, got shape {tuple(loss.shape)}")
    names = list(store)
    params = [store[n] for n in names]
    grads = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=retain_graph)
    out: Gradients = {}
    for name, p, g in zip(names, params, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
        out[name] = g
    return out


def global_norm(grads: Mapping[str, Tensor]) -> float:
    return math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))


def clip_grad_norm(grads: Mapping[str, Tensor], max_norm: float) -> Gradients:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


# --------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)


def adam_step(store: ParamStore, grads: Mapping[str, Tensor], state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update of ``store``; eps added after the sqrt."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    with torch.no_grad():
        for name, p in store.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError("adam_step", f"{name}: grad {tuple(g.shape)} vs param {tuple(p.shape)}")
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))


# --------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class LRSchedule:
    kind: str = "constant"  # constant | halved-on-finetune | inverse-sqrt-warmup
    base: float = 0.002
    warmup: int = 4000

    def __post_init__(self):
        if self.kind not in ("constant", "halved-on-finetune", "inverse-sqrt-warmup"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.base <= 0 or self.warmup < 1:
            raise ValueError("base rate and warmup must be positive")


def lr_at(schedule: LRSchedule, step: int) -> float:
    if step < 1:
        raise ValueError("step counts from 1")
    if schedule.kind == "constant":
        return schedule.base
    if schedule.kind == "halved-on-finetune":
        return schedule.base / 2
    if step <= schedule.warmup:
        return schedule.base * step / schedule.warmup
    return schedule.base * math.sqrt(schedule.warmup / step)
