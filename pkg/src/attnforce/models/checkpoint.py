"""Checkpoint format.

A text header followed by a binary payload::

    attnforce-checkpoint 1
    [config]
    key=value          (one ModelConfig field per line)
    [manifest]
    path dtype d1,d2   (one parameter per line, lexicographic path order)
    [payload]
    <raw little-endian scalars, parameters concatenated in manifest order>
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import ModelConfig

MAGIC = "attnforce-checkpoint 1"
_DTYPES = {"float32": ("<f4", torch.float32), "float64": ("<f8", torch.float64)}
_PAYLOAD = b"[payload]\n"


def save_checkpoint(model: nn.Module, path: str | Path) -> None:
    params = dict(sorted(model.named_parameters()))
    header = [MAGIC, "[config]", *model.cfg.to_lines(), "[manifest]"]
    chunks = []
    for name, p in params.items():
        dtype = str(p.dtype).removeprefix("torch.")
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {dtype} for {name}")
        shape = ",".join(str(d) for d in p.shape)
        header.append(f"{name} {dtype} {shape}")
        chunks.append(p.detach().cpu().numpy().astype(_DTYPES[dtype][0], copy=False).tobytes())
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("utf-8"))
        fh.write(_PAYLOAD)
        for c in chunks:
            fh.write(c)


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    cut = raw.find(_PAYLOAD)
    if cut < 0:
        raise ValueError(f"{path}: missing payload marker")
    lines = raw[:cut].decode("utf-8").splitlines()
    if not lines or lines[0] != MAGIC:
        raise ValueError(f"{path}: not an attnforce checkpoint")
    i_cfg, i_man = lines.index("[config]"), lines.index("[manifest]")
    cfg = ModelConfig.from_lines(lines[i_cfg + 1 : i_man])
    payload = memoryview(raw)[cut + len(_PAYLOAD) :]
    offset = 0
    tensors = {}
    for line in lines[i_man + 1 :]:
        name, dtype, shape = line.split(" ")
        dims = tuple(int(d) for d in shape.split(",")) if shape else ()
        np_dtype, torch_dtype = _DTYPES[dtype]
        count = int(np.prod(dims)) if dims else 1
        nbytes = count * np.dtype(np_dtype).itemsize
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype=np_dtype).reshape(dims)
        tensors[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True)).to(torch_dtype)
        offset += nbytes
    if offset != len(payload):
        raise ValueError(f"{path}: payload size does not match manifest")
    return cfg, tensors
