import struct

import numpy as np
import pytest

from brainfed.codec import (
    MessageKind,
    MessageLog,
    ProtocolMessage,
    FormatError,
    decode_params,
    encode_params,
    iter_frames,
    load_checkpoint,
    pack_modalities,
    save_checkpoint,
    unpack_modalities,
)
from brainfed.network import NetworkConfig, init
from brainfed.numerics import Rng


def params():
    return init(NetworkConfig(5, 4, 2, 2, 3), Rng(1))


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    p = params()
    p.layers[0].weight[0, 0] = -0.0
    p.layers[1].bias[0] = 5e-324
    save_checkpoint(tmp_path / "c.bgck", p)
    q = load_checkpoint(tmp_path / "c.bgck")
    assert q.equals(p)
    assert q.input_dim == 5


def test_checkpoint_layout():
    p = params()
    blob = encode_params(p)
    assert blob[:4] == b"BGCK"
    version, count = struct.unpack_from("<HH", blob, 4)
    assert (version, count) == (1, len(p))
    (name_len,) = struct.unpack_from("<H", blob, 8)
    assert blob[10 : 10 + name_len] == b"input"
    rank = blob[10 + name_len]
    assert rank == 2
    dims = struct.unpack_from("<II", blob, 11 + name_len)
    assert dims == (5, 4)
    first = struct.unpack_from("<d", blob, 19 + name_len)[0]
    assert first == p.layers[0].weight[0, 0]
    n_floats = sum(t.size for t in p.tensors())
    header = 8 + sum(2 + len(l.name) + 2 + 4 * (l.weight.ndim + l.bias.ndim) for l in p.layers)
    assert len(blob) == header + 8 * n_floats


def test_bad_magic_and_truncation():
    blob = encode_params(params())
    with pytest.raises(FormatError):
        decode_params(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        decode_params(blob[:-3])


def test_modalities_roundtrip():
    a, b = params(), init(NetworkConfig(5, 4, 2, 3, 3), Rng(2))
    out = unpack_modalities(pack_modalities({"image": a, "text": b}))
    assert out["image"].equals(a) and out["text"].equals(b)


def test_message_frame_layout():
    msg = ProtocolMessage(MessageKind.UPLOAD_SHADOW, 3, 17, b"payload", 512)
    frame = msg.encode()
    length, kind, epoch, sender, count = struct.unpack_from("<IBIHI", frame)
    assert length == len(frame) - 4
    assert (kind, epoch, sender, count) == (2, 17, 3, 512)
    assert frame.endswith(b"payload")
    assert ProtocolMessage.decode(frame) == msg


def test_log_concatenates_frames(tmp_path):
    log = MessageLog()
    msgs = [ProtocolMessage(MessageKind.REGISTER, i, 0, b"", 10 + i) for i in range(3)]
    for m in msgs:
        assert log.send(m) == m
    assert list(iter_frames(log.getvalue())) == msgs
    assert log.frames == 3 and log.nbytes == len(log.getvalue())

    file_log = MessageLog(tmp_path / "audit.bin")
    for m in msgs:
        file_log.send(m)
    file_log.close()
    assert (tmp_path / "audit.bin").read_bytes() == log.getvalue()
    assert file_log.digest() == log.digest()


def test_unknown_kind_rejected():
    frame = bytearray(ProtocolMessage(MessageKind.REGISTER, 1, 0).encode())
    frame[4] = 99
    with pytest.raises(FormatError):
        list(iter_frames(bytes(frame)))
