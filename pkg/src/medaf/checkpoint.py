"""Binary checkpoint container.

Layout (all integers little-endian ``uint32``)::

    b"MEDAF1"
    config_len, config_json (utf-8; model config + normalization constants)
    n_params
    repeated n_params times:
        name_len, name (utf-8), ndim, dim_0 .. dim_{ndim-1},
        prod(dims) little-endian float64 values, row-major

Parameters appear in model declaration order. JSON keys are sorted so equal
models serialize to equal bytes.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import CheckpointError
from .network import MedafConfig, Model, build_model

MAGIC = b"MEDAF1"


def to_bytes(model: Model) -> bytes:
    header = {
        "model": model.config.to_dict(),
        "norm_mean": list(model.norm_mean),
        "norm_std": list(model.norm_std),
    }
    cfg = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def from_bytes(buf: bytes) -> Model:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a MEDAF1 checkpoint (bad magic)")
    header = json.loads(r.take(r.u32()).decode())
    model = build_model(MedafConfig.from_dict(header["model"]))
    model.norm_mean = list(header["norm_mean"])
    model.norm_std = list(header["norm_std"])
    n = r.u32()
    if n != len(model.params):
        raise CheckpointError(f"checkpoint has {n} tensors, config implies {len(model.params)}")
    for expected_name, p in model.params.items():
        name = r.take(r.u32()).decode()
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        if name != expected_name or shape != p.shape:
            raise CheckpointError(f"tensor {name}{list(shape)} does not match {expected_name}{list(p.shape)}")
        count = int(np.prod(shape))
        data = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        model.params[name] = Tensor(data, requires_grad=True)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor")
    return model


def atomic_write(path, data: bytes | str) -> Path:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def save(model: Model, path) -> Path:
    return atomic_write(path, to_bytes(model))


def load(path) -> Model:
    return from_bytes(Path(path).read_bytes())
