import struct

import numpy as np
import pytest

from conftest import tiny_config
from deco.checkpoint import (CheckpointError, MAGIC, decode, encode, load_checkpoint, model_tensors,
                             save_checkpoint)
from deco.lm import build_model


@pytest.fixture
def model():
    cfg = tiny_config()
    m = build_model(cfg.model, cfg.moe)
    m.head += 0.01 * np.arange(m.head.size, dtype=m.dtype).reshape(m.head.shape)
    return m, cfg


def test_round_trip_bit_exact(model, tmp_path):
    m, cfg = model
    save_checkpoint(tmp_path / "m.deco", m, cfg)
    m2, cfg2 = load_checkpoint(tmp_path / "m.deco")
    assert cfg2 == cfg
    a, b = model_tensors(m), model_tensors(m2)
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes(), k
    x = np.arange(10)[None] % 256
    assert np.array_equal(m.logits(x), m2.logits(x))


def test_header_layout(model):
    m, cfg = model
    data = encode(m, cfg)
    assert data[:4] == MAGIC
    assert struct.unpack("<I", data[4:8]) == (1,)
    (n,) = struct.unpack("<Q", data[8:16])
    assert data[16:16 + n].decode().startswith("{")


def test_bad_magic(model):
    data = bytearray(encode(*model))
    data[:4] = b"NOPE"
    with pytest.raises(CheckpointError, match="magic"):
        decode(bytes(data))


def test_version_mismatch(model):
    data = bytearray(encode(*model))
    data[4:8] = struct.pack("<I", 2)
    with pytest.raises(CheckpointError, match="version 2"):
        decode(bytes(data))


@pytest.mark.parametrize("cut", [3, 10, 100, -1])
def test_truncation(model, cut):
    data = encode(*model)
    with pytest.raises(CheckpointError):
        decode(data[:cut])


def test_trailing_bytes(model):
    with pytest.raises(CheckpointError, match="trailing"):
        decode(encode(*model) + b"\0")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.deco")
