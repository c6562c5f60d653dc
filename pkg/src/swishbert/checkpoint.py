"""Binary checkpoint files.

Layout (all integers u32 little-endian)::

    b"SWRN" | version | config_len | config JSON (UTF-8)
    repeated: name_len | name (UTF-8) | rank | dims[rank] | f32 LE payload

Optimizer moments are stored under ``adam.m.<param>`` / ``adam.v.<param>``
and the update counter as the rank-0 record ``adam.step``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import CheckpointError, ConfigError
from .model import EncoderModel, ModelConfig
from .training import AdamState

MAGIC = b"SWRN"
VERSION = 1
_U32 = struct.Struct("<I")
_F32 = np.dtype("<f4")


def _record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype=_F32)  # tobytes() emits C order; keeps rank 0
    head = _U32.pack(len(raw)) + raw + _U32.pack(arr.ndim)
    head += b"".join(_U32.pack(n) for n in arr.shape)
    return head + arr.tobytes()


def save_checkpoint(model: EncoderModel, state: Optional[AdamState], path: Union[str, Path]) -> Path:
    """Write parameters (and optimizer state, if given) to ``path`` atomically."""
    path = Path(path)
    cfg = model.config.to_json().encode("utf-8")
    chunks = [MAGIC, _U32.pack(VERSION), _U32.pack(len(cfg)), cfg]
    params = model.named_parameters()
    for name, t in params.items():
        chunks.append(_record(name, t.data))
    if state is not None:
        chunks.append(_record("adam.step", np.asarray(state.step, dtype=np.float64)))
        for name in params:
            if name in state.m:
                chunks.append(_record("adam.m." + name, state.m[name]))
                chunks.append(_record("adam.v." + name, state.v[name]))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    @property
    def done(self) -> bool:
        return self.pos == len(self.buf)


def load_checkpoint(path: Union[str, Path], expect_config: Optional[ModelConfig] = None):
    """Read a checkpoint; returns ``(model, state)``.

    ``state`` is None when the file holds no optimizer records. Any format
    violation, truncation, missing parameter or shape disagreement raises
    :class:`CheckpointError` before a model is returned.
    """
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic bytes; not a SWRN checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config = ModelConfig.from_json(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"invalid config header: {exc}") from exc
    if expect_config is not None and config != expect_config:
        raise CheckpointError("checkpoint config differs from the expected config")

    model = EncoderModel(config, seed=0, dtype=np.float32)
    params = model.named_parameters()
    loaded: set[str] = set()
    m: dict = {}
    v: dict = {}
    step = None
    while not r.done:
        try:
            name = r.take(r.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("record name is not UTF-8") from exc
        rank = r.u32()
        if rank > 3:
            raise CheckpointError(f"record {name!r} has rank {rank} > 3")
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * count), dtype=_F32).reshape(shape).astype(np.float32)
        if name == "adam.step":
            if shape != ():
                raise CheckpointError("adam.step must be a scalar record")
            step = int(arr[()])
            continue
        target = name
        slot = None
        if name.startswith("adam.m."):
            target, slot = name[7:], m
        elif name.startswith("adam.v."):
            target, slot = name[7:], v
        if target not in params:
            raise CheckpointError(f"unknown record {name!r} for this config")
        if shape != params[target].shape:
            raise CheckpointError(f"record {name!r} has shape {shape}, config expects {params[target].shape}")
        if slot is None:
            if name in loaded:
                raise CheckpointError(f"duplicate record {name!r}")
            params[name].data[...] = arr
            loaded.add(name)
        else:
            slot[target] = arr
    missing = set(params) - loaded
    if missing:
        raise CheckpointError(f"checkpoint lacks {len(missing)} parameter(s), e.g. {sorted(missing)[0]!r}")
    if set(m) != set(v):
        raise CheckpointError("optimizer first and second moments cover different parameters")
    if step is None:
        if m:
            raise CheckpointError("optimizer moments present without a step counter")
        return model, None
    return model, AdamState(m=m, v=v, step=step)
