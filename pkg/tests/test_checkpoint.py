"""Checkpoint blob round trips and corruption handling."""

import numpy as np
import pytest
import torch

from eo1 import checkpoint
from eo1.errors import IntegrityError, ValidationError


def _params():
    rng = np.random.default_rng(0)
    return {
        "layer.weight": rng.normal(size=(4, 3)).astype(np.float32),
        "layer.bias": rng.normal(size=(4,)).astype(np.float32),
        "scalar": np.float32(2.5),
    }


def test_round_trip_preserves_arrays(tmp_path):
    path = str(tmp_path / "m.ckpt")
    params = _params()
    checkpoint.save_checkpoint(path, params, {"lr": 1e-3}, step=17,
                               rng_state={"seed": 5})
    loaded, header = checkpoint.load_checkpoint(path)
    assert sorted(loaded) == sorted(params)
    for k in params:
        assert np.array_equal(loaded[k], np.asarray(params[k], dtype=np.float32))
        assert loaded[k].dtype == np.float32
    assert header["step"] == 17
    assert header["config"] == {"lr": 1e-3}
    assert header["rng_state"] == {"seed": 5}


def test_save_is_deterministic(tmp_path):
    a = str(tmp_path / "a.ckpt")
    b = str(tmp_path / "b.ckpt")
    checkpoint.save_checkpoint(a, _params(), {"x": 1}, 3)
    checkpoint.save_checkpoint(b, _params(), {"x": 1}, 3)
    assert open(a, "rb").read() == open(b, "rb").read()


def test_payload_tamper_raises_integrity_error(tmp_path):
    path = str(tmp_path / "m.ckpt")
    checkpoint.save_checkpoint(path, _params(), {}, 0)
    raw = bytearray(open(path, "rb").read())
    raw[-1] ^= 0xFF
    open(path, "wb").write(bytes(raw))
    with pytest.raises(IntegrityError):
        checkpoint.load_checkpoint(path)


def test_truncation_raises(tmp_path):
    path = str(tmp_path / "m.ckpt")
    checkpoint.save_checkpoint(path, _params(), {}, 0)
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[:-5])
    with pytest.raises(IntegrityError):
        checkpoint.load_checkpoint(path)
    open(path, "wb").write(raw[:4])
    with pytest.raises(ValidationError):
        checkpoint.load_checkpoint(path)
    # header length pointing past the end of the file
    open(path, "wb").write(raw[: 8 + 10])
    with pytest.raises(ValidationError):
        checkpoint.load_checkpoint(path)


def test_bad_version_rejected(tmp_path):
    import json
    import struct

    path = str(tmp_path / "m.ckpt")
    header = json.dumps({"format_version": 42}).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
    with pytest.raises(ValidationError):
        checkpoint.load_checkpoint(path)


def test_module_round_trip(tmp_path):
    path = str(tmp_path / "m.ckpt")
    torch.manual_seed(0)
    mod = torch.nn.Sequential(torch.nn.Linear(3, 5), torch.nn.GELU(),
                              torch.nn.Linear(5, 2))
    checkpoint.save_module(path, mod, {"width": 5}, step=9)
    torch.manual_seed(1)
    other = torch.nn.Sequential(torch.nn.Linear(3, 5), torch.nn.GELU(),
                                torch.nn.Linear(5, 2))
    before = {k: v.clone() for k, v in other.state_dict().items()}
    header = checkpoint.load_module(path, other)
    assert header["step"] == 9 and header["config"] == {"width": 5}
    for k, v in mod.state_dict().items():
        assert torch.equal(other.state_dict()[k], v)
        assert not torch.equal(other.state_dict()[k], before[k])


def test_module_key_mismatch_raises(tmp_path):
    path = str(tmp_path / "m.ckpt")
    checkpoint.save_module(path, torch.nn.Linear(3, 5), {}, 0)
    with pytest.raises(ValidationError):
        checkpoint.load_module(path, torch.nn.Linear(4, 4))
