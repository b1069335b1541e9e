import struct

import numpy as np
import pytest

from medaf import checkpoint as ckpt
from medaf.autodiff import Tensor
from medaf.errors import CheckpointError
from medaf.network import MedafConfig, build_model

CFG = MedafConfig(num_experts=2, num_classes=3, input_shape=(1, 8, 8), stem_channels=(2, 3),
                  branch_channels=(3, 4), gate_hidden=5)


def model():
    m = build_model(CFG, rng_seed=4)
    m.norm_mean, m.norm_std = [0.25], [0.5]
    return m


def test_round_trip_exact(tmp_path):
    m = model()
    back = ckpt.load(ckpt.save(m, tmp_path / "m.ckpt"))
    assert back.config == m.config
    assert (back.norm_mean, back.norm_std) == (m.norm_mean, m.norm_std)
    assert list(back.params) == list(m.params)
    assert all(back.params[k].data.tobytes() == m.params[k].data.tobytes() for k in m.params)


def test_layout_starts_with_magic_and_lengths():
    raw = ckpt.to_bytes(model())
    assert raw[:6] == b"MEDAF1"
    (n_cfg,) = struct.unpack("<I", raw[6:10])
    (n_params,) = struct.unpack("<I", raw[10 + n_cfg:14 + n_cfg])
    assert n_params == len(model().params)
    # first parameter record: name, then shape, then doubles
    off = 14 + n_cfg
    (n_name,) = struct.unpack("<I", raw[off:off + 4])
    name = raw[off + 4:off + 4 + n_name].decode()
    assert name == "stem.conv1.weight"
    off += 4 + n_name
    (ndim,) = struct.unpack("<I", raw[off:off + 4])
    dims = struct.unpack(f"<{ndim}I", raw[off + 4:off + 4 + 4 * ndim])
    assert dims == (2, 1, 3, 3)
    first = np.frombuffer(raw[off + 4 + 4 * ndim:], dtype="<f8", count=1)[0]
    assert first == model().params[name].data.ravel()[0]


def test_equal_models_equal_bytes():
    assert ckpt.to_bytes(model()) == ckpt.to_bytes(model())


def test_bad_magic():
    raw = bytearray(ckpt.to_bytes(model()))
    raw[:6] = b"MEDAF0"
    with pytest.raises(CheckpointError):
        ckpt.from_bytes(bytes(raw))


def test_truncated():
    raw = ckpt.to_bytes(model())
    with pytest.raises(CheckpointError):
        ckpt.from_bytes(raw[:-5])


def test_trailing_bytes():
    with pytest.raises(CheckpointError):
        ckpt.from_bytes(ckpt.to_bytes(model()) + b"\0")


def test_shape_mismatch():
    m = model()
    m.params["expert1.head.weight"] = Tensor(np.zeros((3, 4, 1, 2)))
    with pytest.raises(CheckpointError):
        ckpt.from_bytes(ckpt.to_bytes(m))


def test_atomic_write_leaves_no_temp(tmp_path):
    ckpt.atomic_write(tmp_path / "a.txt", "x")
    ckpt.atomic_write(tmp_path / "a.txt", "y")
    assert [p.name for p in tmp_path.iterdir()] == ["a.txt"]
    assert (tmp_path / "a.txt").read_text() == "y"
