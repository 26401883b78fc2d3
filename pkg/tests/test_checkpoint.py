import struct

import numpy as np
import pytest

from sadconv.checkpoint import (BadMagicError, CheckpointError, TruncatedCheckpointError, UnknownTensorError,
                                VersionMismatchError, dumps, load_checkpoint, loads, save_checkpoint)
from sadconv.sadc import VARIANTS, SadcNet, net_forward


@pytest.mark.parametrize("variant", VARIANTS)
def test_round_trip_is_bit_exact(tmp_path, variant):
    net = SadcNet(6, 3, variant=variant, init="random", seed=2)
    save_checkpoint(net, tmp_path / "n.ckpt")
    back = load_checkpoint(tmp_path / "n.ckpt")
    assert back.variant == variant and len(back.blocks) == 3 and back.channels == 6
    a, b = net.named_parameters(), back.named_parameters()
    assert list(a) == list(b)
    for name in a:
        assert a[name].data.tobytes() == b[name].data.tobytes(), name
    img = np.random.default_rng(0).random((1, 3, 12, 12)).astype(np.float32)
    m = np.random.default_rng(1).random((1, 12, 12)) < 0.3
    assert net_forward(net, img, m).data.tobytes() == net_forward(back, img, m).data.tobytes()


def test_header_layout():
    buf = dumps({"x.bias": np.array([1.0, 2.0], np.float32)})
    assert buf[:4] == b"SADC"
    assert struct.unpack("<II", buf[4:12]) == (1, 1)
    assert struct.unpack("<I", buf[12:16]) == (6,)
    assert buf[16:22] == b"x.bias"
    assert struct.unpack("<4I", buf[22:38]) == (2, 1, 1, 1)
    assert np.frombuffer(buf[38:], "<f4").tolist() == [1.0, 2.0]


def test_bad_magic(tmp_path):
    good = dumps({"stem.w": np.zeros((2, 3, 3, 3), np.float32)})
    with pytest.raises(BadMagicError):
        loads(b"NOPE" + good[4:])


@pytest.mark.parametrize("cut", [2, 10, 20, 60])
def test_truncation_is_reported(cut):
    good = dumps({"stem.w": np.zeros((2, 3, 3, 3), np.float32)})
    with pytest.raises(TruncatedCheckpointError, match="truncated"):
        loads(good[:cut])


def test_trailing_bytes_rejected():
    with pytest.raises(CheckpointError):
        loads(dumps({}) + b"\0")


def test_version_bump_lists_unknown_names(tmp_path):
    net = SadcNet(4, 1)
    tensors = {k: v.data for k, v in net.named_parameters().items()}
    tensors["block0.gate"] = np.zeros((4, 1, 1, 1), np.float32)
    (tmp_path / "v2.ckpt").write_bytes(dumps(tensors, version=2))
    with pytest.raises(VersionMismatchError, match=r"version 2.*block0\.gate"):
        load_checkpoint(tmp_path / "v2.ckpt")


def test_unknown_tensor_same_version(tmp_path):
    tensors = {k: v.data for k, v in SadcNet(4, 1).named_parameters().items()}
    tensors["extra"] = np.zeros((1, 1, 1, 1), np.float32)
    (tmp_path / "u.ckpt").write_bytes(dumps(tensors))
    with pytest.raises(UnknownTensorError, match="extra"):
        load_checkpoint(tmp_path / "u.ckpt")


def test_missing_tensor_rejected(tmp_path):
    tensors = {k: v.data for k, v in SadcNet(4, 2).named_parameters().items()}
    del tensors["block1.w2.bias"]
    (tmp_path / "m.ckpt").write_bytes(dumps(tensors))
    with pytest.raises(CheckpointError, match="block1.w2.bias"):
        load_checkpoint(tmp_path / "m.ckpt")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.ckpt")
