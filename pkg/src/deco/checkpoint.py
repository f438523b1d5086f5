"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DECO"                      magic
    u32   format version         (FORMAT_VERSION)
    u64   config length, then that many bytes of UTF-8 JSON (the run config)
    u64   tensor count
    per tensor:
        u32   name length, then the UTF-8 name
        u8    dtype code         (see DTYPE_CODES)
        u32   rank
        u64   each dimension
        raw element data, little-endian, C order

Tensors are the model's trainable parameters followed by its buffers (fixed
router scales), in ``LanguageModel.params()`` order.
"""
from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .config import ConfigError, MoEConfig, RunConfig, run_config_from_dict
from .lm import LanguageModel, build_model

MAGIC = b"DECO"
FORMAT_VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("<i4"), 5: np.dtype("u1")}
_CODE_OF = {v: k for k, v in DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def _run_config_for(model: LanguageModel) -> RunConfig:
    moe = model.moe_config or MoEConfig(d_h=model.config.d_h)
    return RunConfig(model=model.config, moe=moe)


def model_tensors(model: LanguageModel) -> dict[str, np.ndarray]:
    out = dict(model.params())
    out.update(model.buffers())
    return out


def encode(model: LanguageModel, run_config: RunConfig | None = None) -> bytes:
    cfg = run_config or _run_config_for(model)
    blob = cfg.to_json().encode("utf-8")
    tensors = model_tensors(model)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<Q", len(tensors)))
    for name, arr in tensors.items():
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODE_OF:
            raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BI", _CODE_OF[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> tuple[RunConfig, dict[str, np.ndarray]]:
    r = _Reader(data)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"not a DECO checkpoint (magic {magic!r})")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}; this build reads {FORMAT_VERSION}")
    (n_cfg,) = r.unpack("<Q")
    try:
        cfg = run_config_from_dict(json.loads(r.take(n_cfg).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, ConfigError) as e:
        raise CheckpointError(f"bad config blob: {e}") from None
    (n_t,) = r.unpack("<Q")
    tensors = {}
    for _ in range(n_t):
        (n_name,) = r.unpack("<I")
        name = r.take(n_name).decode("utf-8")
        code, rank = r.unpack("<BI")
        if code not in DTYPE_CODES:
            raise CheckpointError(f"tensor {name}: unknown dtype code {code}")
        dt = DTYPE_CODES[code]
        shape = r.unpack(f"<{rank}Q")
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(n), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after tensor table")
    return cfg, tensors


def model_from_tensors(cfg: RunConfig, tensors: dict[str, np.ndarray]) -> LanguageModel:
    model = build_model(cfg.model, cfg.moe, dtype=tensors["tok_emb"].dtype)
    slots = model_tensors(model)
    missing = sorted(set(slots) - set(tensors))
    extra = sorted(set(tensors) - set(slots))
    if missing or extra:
        raise CheckpointError(f"tensor names do not match the config (missing {missing}, unexpected {extra})")
    for name, dst in slots.items():
        src = tensors[name]
        if src.shape != dst.shape:
            raise CheckpointError(f"tensor {name}: shape {src.shape}, config expects {dst.shape}")
        dst[...] = src
    return model


def save_checkpoint(path: str | Path, model: LanguageModel, run_config: RunConfig | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(model, run_config))
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[LanguageModel, RunConfig]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    cfg, tensors = decode(path.read_bytes())
    return model_from_tensors(cfg, tensors), cfg
