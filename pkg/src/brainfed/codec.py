"""Binary encodings: ``BGCK`` parameter blobs and protocol message frames.

All integers and floats are little-endian. A ``BGCK`` blob is::

    b"BGCK" | version u16 | layer count u16
    per layer: name length u16 | utf-8 name | weight tensor | bias tensor
    tensor:    rank u8 | dims u32 * rank | f64 * prod(dims)

A message frame is::

    length u32 (bytes after this field) | kind u8 | epoch u32 | sender u16 |
    sample count u32 | BGCK payload
"""

from __future__ import annotations

import enum
import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from brainfed.network import Layer, ParamSet

MAGIC = b"BGCK"
VERSION = 1
_F64 = np.dtype("<f8")


class FormatError(ValueError):
    pass


def _write_tensor(buf: io.BytesIO, t: np.ndarray) -> None:
    if t.ndim > 255:
        raise FormatError("tensor rank too large")
    buf.write(struct.pack("<B", t.ndim))
    buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
    buf.write(np.ascontiguousarray(t, dtype=_F64).tobytes())


def encode_layers(layers: list[Layer]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HH", VERSION, len(layers)))
    for layer in layers:
        name = layer.name.encode("utf-8")
        buf.write(struct.pack("<H", len(name)))
        buf.write(name)
        _write_tensor(buf, layer.weight)
        _write_tensor(buf, layer.bias)
    return buf.getvalue()


def encode_params(params: ParamSet) -> bytes:
    return encode_layers(params.layers)


class _Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = memoryview(data)
        self.pos = offset

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated data: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> np.ndarray:
        (rank,) = self.unpack("<B")
        dims = self.unpack(f"<{rank}I")
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        return np.frombuffer(self.take(8 * count), dtype=_F64).astype(np.float64).reshape(dims)


def decode_layers(data: bytes) -> list[Layer]:
    r = _Reader(data)
    magic = bytes(r.take(4))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count = r.unpack("<HH")
    if version != VERSION:
        raise FormatError(f"unsupported BGCK version {version}")
    layers = []
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = bytes(r.take(n)).decode("utf-8")
        w = r.tensor()
        b = r.tensor()
        layers.append(Layer(name, w, b))
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes after BGCK payload")
    return layers


def decode_params(data: bytes) -> ParamSet:
    layers = decode_layers(data)
    input_dim = layers[0].weight.shape[0] if layers and layers[0].name == "input" else None
    return ParamSet(layers, input_dim)


def save_checkpoint(path: str | Path, params: ParamSet) -> None:
    Path(path).write_bytes(encode_params(params))


def load_checkpoint(path: str | Path) -> ParamSet:
    return decode_params(Path(path).read_bytes())


def params_digest(params: ParamSet) -> str:
    return hashlib.sha256(encode_params(params)).hexdigest()


# Multi-modality payloads prefix layer names with "<modality>/".


def pack_modalities(sets: dict[str, ParamSet]) -> bytes:
    layers = []
    for modality in sorted(sets):
        layers.extend(Layer(f"{modality}/{l.name}", l.weight, l.bias) for l in sets[modality].layers)
    return encode_layers(layers)


def unpack_modalities(data: bytes) -> dict[str, ParamSet]:
    out: dict[str, list[Layer]] = {}
    for layer in decode_layers(data):
        modality, _, name = layer.name.partition("/")
        if not name:
            raise FormatError(f"layer name {layer.name!r} lacks a modality prefix")
        out.setdefault(modality, []).append(Layer(name, layer.weight, layer.bias))
    return {k: ParamSet(v) for k, v in out.items()}


class MessageKind(enum.IntEnum):
    REGISTER = 1
    UPLOAD_SHADOW = 2
    BROADCAST_GLOBAL = 3


COORDINATOR_ID = 0xFFFF
_HEADER = struct.Struct("<BIHI")


@dataclass(frozen=True)
class ProtocolMessage:
    kind: MessageKind
    sender: int
    epoch: int
    payload: bytes = b""
    sample_count: int = 0

    def encode(self) -> bytes:
        body = _HEADER.pack(int(self.kind), self.epoch, self.sender, self.sample_count) + self.payload
        return struct.pack("<I", len(body)) + body

    @classmethod
    def decode(cls, frame: bytes) -> "ProtocolMessage":
        msgs = list(iter_frames(frame))
        if len(msgs) != 1:
            raise FormatError(f"expected one frame, found {len(msgs)}")
        return msgs[0]


def iter_frames(data: bytes):
    """Yield every message in a concatenated frame log."""
    r = _Reader(data)
    while r.pos < len(r.data):
        (length,) = r.unpack("<I")
        body = r.take(length)
        if length < _HEADER.size:
            raise FormatError("frame shorter than its header")
        kind, epoch, sender, count = _HEADER.unpack(body[: _HEADER.size])
        try:
            kind = MessageKind(kind)
        except ValueError:
            raise FormatError(f"unknown message kind {kind}") from None
        yield ProtocolMessage(kind, sender, epoch, bytes(body[_HEADER.size :]), count)


class MessageLog:
    """Append-only record of every frame that crossed the client/coordinator boundary.

    Frames are kept in memory, appended to ``path``, or (``keep=False``) only
    counted and hashed.
    """

    def __init__(self, path: str | Path | None = None, keep: bool = True):
        self.path = Path(path) if path is not None else None
        self.keep = keep and self.path is None
        self._buf = io.BytesIO() if self.keep else None
        self._file = open(self.path, "wb") if self.path is not None else None
        self.frames = 0
        self.nbytes = 0
        self._sha = hashlib.sha256()

    def record(self, frame: bytes) -> None:
        self.frames += 1
        self.nbytes += len(frame)
        self._sha.update(frame)
        if self._buf is not None:
            self._buf.write(frame)
        if self._file is not None:
            self._file.write(frame)

    def send(self, msg: ProtocolMessage) -> ProtocolMessage:
        """Encode, record and decode ``msg``; the receiver only ever sees the decoded copy."""
        frame = msg.encode()
        self.record(frame)
        return ProtocolMessage.decode(frame)

    def digest(self) -> str:
        return self._sha.hexdigest()

    def getvalue(self) -> bytes:
        if self._buf is not None:
            return self._buf.getvalue()
        if self.path is not None:
            self.flush()
            return self.path.read_bytes()
        raise RuntimeError("message log was not retained")

    def flush(self) -> None:
        if self._file is not None:
            self._file.flush()

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None
