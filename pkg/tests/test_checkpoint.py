import json

import numpy as np
import pytest

from ganca import checkpoint as ckpt
from ganca.errors import ConfigError, UsageError
from ganca.nca import NcaParams
from ganca.optim import AdamState, adam_step


def _write(path, seed=0):
    p = NcaParams.init(np.random.default_rng(seed), 8, 16)
    p.w_out.data[:] = np.random.default_rng(seed + 1).normal(size=p.w_out.shape)
    opt = AdamState.for_params(p.tensors())
    adam_step(p.tensors(), [np.ones(t.shape, np.float32) for t in p.tensors()], opt)
    tensors = ckpt.params_tensors("nca", NcaParams.NAMES, p.tensors())
    tensors.update(ckpt.adam_tensors("adam", NcaParams.NAMES, opt))
    return ckpt.save(path, "nca", tensors, 8, 16, opt.step_count, step=1), p, opt


def test_round_trip(tmp_path):
    path, p, opt = _write(tmp_path / "a.ckpt")
    c = ckpt.load(path)
    assert c.kind == "nca" and c.header["D"] == 8 and c.header["F"] == 16 and c.header["step"] == 1
    for a, b in zip(c.nca_params().tensors(), p.tensors()):
        np.testing.assert_array_equal(a.data, b.data)
    back = ckpt.restore_adam(c, "adam", NcaParams.NAMES, AdamState.for_params(p.tensors()), c.header["adam_step"])
    assert back.step_count == 1
    for a, b in zip(back.m + back.v, opt.m + opt.v):
        np.testing.assert_array_equal(a, b)
    assert set(c.group("nca/")) == set(NcaParams.NAMES)
    for a, b in zip(ckpt.load_nca(path).tensors(), p.tensors()):
        np.testing.assert_array_equal(a.data, b.data)


def test_identical_state_gives_identical_bytes(tmp_path):
    a, _, _ = _write(tmp_path / "a.ckpt")
    b, _, _ = _write(tmp_path / "b.ckpt")
    assert a.read_bytes() == b.read_bytes()
    assert not (tmp_path / "a.ckpt.tmp").exists()


def test_layout_is_header_line_then_little_endian_float32(tmp_path):
    path = ckpt.save(tmp_path / "x.ckpt", "nca", {"a": np.array([1.0, -2.5]), "b": np.zeros((2, 1))}, 5, 1, 0)
    raw = path.read_bytes()
    head, body = raw.split(b"\n", 1)
    assert json.loads(head)["shapes"] == [["a", [2]], ["b", [2, 1]]]
    np.testing.assert_array_equal(np.frombuffer(body, "<f4"), [1.0, -2.5, 0.0, 0.0])


def test_missing_file_is_usage_error(tmp_path):
    with pytest.raises(UsageError, match="not found"):
        ckpt.load(tmp_path / "nope.ckpt")


def test_truncated_and_trailing_bytes(tmp_path):
    path, _, _ = _write(tmp_path / "a.ckpt")
    raw = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-4])
    with pytest.raises(ConfigError, match="truncated"):
        ckpt.load(tmp_path / "t.ckpt")
    (tmp_path / "x.ckpt").write_bytes(raw + b"\0\0\0\0")
    with pytest.raises(ConfigError, match="trailing"):
        ckpt.load(tmp_path / "x.ckpt")


def test_bad_header_and_version(tmp_path):
    (tmp_path / "junk.ckpt").write_bytes(b"\x89PNG garbage\nmore")
    with pytest.raises(ConfigError, match="bad header"):
        ckpt.load(tmp_path / "junk.ckpt")
    (tmp_path / "v.ckpt").write_bytes(json.dumps({"version": 99, "kind": "nca", "shapes": []}).encode() + b"\n")
    with pytest.raises(ConfigError, match="version"):
        ckpt.load(tmp_path / "v.ckpt")
    with pytest.raises(ConfigError):
        ckpt.save(tmp_path / "k.ckpt", "vae", {}, 16, 128, 0)
