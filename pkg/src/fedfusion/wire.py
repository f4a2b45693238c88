"""Bit-exact wire format and model artifact serialization.

Frame layout: magic b"FLNG", version byte 0x01, message-tag byte, payload
length as u32 little-endian, then the payload. All integers little-endian;
accuracies are f64; parameters travel as f32 (storage precision), training
runs in f64. The same artifact encoding is used on disk and on the wire.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (ArtifactMismatchError, BadMagicError, LengthOverflowError,
                     MalformedPayloadError, TruncatedFrameError,
                     UnknownTagError, UnsupportedVersionError)

MAGIC = b"FLNG"
VERSION = 1
HEADER_LEN = 10  # magic 4 + version 1 + tag 1 + payload length 4
MAX_PAYLOAD = 1 << 26  # 64 MiB; anything larger is rejected as overflow

TAG_REGISTER = 0x01
TAG_GLOBAL_MODEL = 0x02
TAG_LOCAL_UPDATE = 0x03
TAG_ROUND_RESULT = 0x04
TAG_SHUTDOWN = 0x05


@dataclass
class ModelArtifact:
    """Architecture id + flat f32 parameter vector + (name, shape) manifest."""

    arch: int
    layout: tuple  # ((name, shape_tuple), ...)
    params: np.ndarray  # flat float32

    def __post_init__(self):
        self.layout = tuple((str(n), tuple(int(d) for d in s)) for n, s in self.layout)
        self.params = np.asarray(self.params, dtype=np.float32).ravel()
        total = sum(int(np.prod(s, dtype=np.int64)) for _, s in self.layout)
        if total != self.params.size:
            raise ArtifactMismatchError(f"manifest total {total} != parameter count {self.params.size}")

    def __eq__(self, other):
        return (isinstance(other, ModelArtifact) and self.arch == other.arch
                and self.layout == other.layout
                and self.params.tobytes() == other.params.tobytes())


@dataclass(frozen=True)
class Register:
    client_id: int


@dataclass(frozen=True)
class GlobalModel:
    round: int
    artifact: ModelArtifact


@dataclass(frozen=True)
class LocalUpdate:
    client_id: int
    round: int
    accuracy: float
    artifact: ModelArtifact


@dataclass(frozen=True)
class RoundResult:
    round: int
    promoted: bool
    global_accuracy: float


@dataclass(frozen=True)
class Shutdown:
    pass


FedMessage = Register | GlobalModel | LocalUpdate | RoundResult | Shutdown


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedFrameError(f"payload needs {n} more bytes at offset {self.pos}, "
                                      f"have {len(self.data) - self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return self.take(1)[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self):
        return struct.unpack("<d", self.take(8))[0]

    def done(self):
        if self.pos != len(self.data):
            raise MalformedPayloadError(f"{len(self.data) - self.pos} trailing bytes in payload")


# ---------------------------------------------------------------------------
# artifact codec


def encode_artifact(artifact: ModelArtifact) -> bytes:
    parts = [struct.pack("<H", artifact.arch), struct.pack("<I", len(artifact.layout))]
    for name, shape in artifact.layout:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", len(shape)))
        parts.extend(struct.pack("<I", d) for d in shape)
    parts.append(struct.pack("<Q", artifact.params.size))
    parts.append(artifact.params.astype("<f4").tobytes())
    return b"".join(parts)


def _decode_artifact(r: _Reader) -> ModelArtifact:
    arch = r.u16()
    if not 1 <= arch <= 4:
        raise MalformedPayloadError(f"unknown architecture id {arch}")
    n_entries = r.u32()
    if n_entries > 100_000:
        raise MalformedPayloadError(f"implausible manifest entry count {n_entries}")
    layout = []
    total = 0
    for _ in range(n_entries):
        name_len = r.u32()
        if name_len > 4096:
            raise MalformedPayloadError(f"implausible name length {name_len}")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPayloadError(f"manifest name is not valid UTF-8: {exc}") from exc
        ndims = r.u32()
        if ndims > 16:
            raise MalformedPayloadError(f"implausible rank {ndims}")
        shape = tuple(r.u32() for _ in range(ndims))
        layout.append((name, shape))
        total += int(np.prod(shape, dtype=np.int64))
    count = r.u64()
    if count != total:
        raise MalformedPayloadError(f"parameter count {count} != manifest total {total}")
    params = np.frombuffer(r.take(count * 4), dtype="<f4").copy()
    return ModelArtifact(arch, tuple(layout), params)


def decode_artifact(data: bytes) -> ModelArtifact:
    r = _Reader(data)
    artifact = _decode_artifact(r)
    r.done()
    return artifact


# ---------------------------------------------------------------------------
# message codec


def _check_accuracy(value: float) -> float:
    if not 0.0 <= value <= 1.0:
        raise MalformedPayloadError(f"accuracy {value} outside [0, 1]")
    return value


def encode_payload(msg: FedMessage) -> tuple[int, bytes]:
    if isinstance(msg, Register):
        return TAG_REGISTER, struct.pack("<I", msg.client_id)
    if isinstance(msg, GlobalModel):
        return TAG_GLOBAL_MODEL, struct.pack("<I", msg.round) + encode_artifact(msg.artifact)
    if isinstance(msg, LocalUpdate):
        head = struct.pack("<IId", msg.client_id, msg.round, msg.accuracy)
        return TAG_LOCAL_UPDATE, head + encode_artifact(msg.artifact)
    if isinstance(msg, RoundResult):
        return TAG_ROUND_RESULT, struct.pack("<IBd", msg.round, int(msg.promoted), msg.global_accuracy)
    if isinstance(msg, Shutdown):
        return TAG_SHUTDOWN, b""
    raise UnknownTagError(f"cannot encode {type(msg).__name__}")


def encode(msg: FedMessage) -> bytes:
    tag, payload = encode_payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise LengthOverflowError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return MAGIC + bytes([VERSION, tag]) + struct.pack("<I", len(payload)) + payload


def decode_payload(tag: int, payload: bytes) -> FedMessage:
    r = _Reader(payload)
    if tag == TAG_REGISTER:
        msg = Register(r.u32())
    elif tag == TAG_GLOBAL_MODEL:
        msg = GlobalModel(r.u32(), _decode_artifact(r))
    elif tag == TAG_LOCAL_UPDATE:
        client_id, rnd = r.u32(), r.u32()
        acc = _check_accuracy(r.f64())
        msg = LocalUpdate(client_id, rnd, acc, _decode_artifact(r))
    elif tag == TAG_ROUND_RESULT:
        rnd = r.u32()
        promoted = r.u8()
        if promoted not in (0, 1):
            raise MalformedPayloadError(f"promoted flag must be 0 or 1, got {promoted}")
        msg = RoundResult(rnd, bool(promoted), _check_accuracy(r.f64()))
    elif tag == TAG_SHUTDOWN:
        msg = Shutdown()
    else:
        raise UnknownTagError(f"unknown message tag 0x{tag:02x}")
    r.done()
    return msg


def decode_header(header: bytes) -> tuple[int, int]:
    """Validate a 10-byte frame header; returns (tag, payload_length)."""
    if len(header) < HEADER_LEN:
        raise TruncatedFrameError(f"frame header has {len(header)} of {HEADER_LEN} bytes")
    if header[:4] != MAGIC:
        raise BadMagicError(f"bad magic {header[:4]!r}")
    if header[4] != VERSION:
        raise UnsupportedVersionError(f"unsupported protocol version {header[4]}")
    length = struct.unpack("<I", header[6:10])[0]
    if length > MAX_PAYLOAD:
        raise LengthOverflowError(f"declared payload length {length} exceeds {MAX_PAYLOAD}")
    return header[5], length


def decode(frame: bytes) -> FedMessage:
    tag, length = decode_header(frame[:HEADER_LEN])
    payload = frame[HEADER_LEN:]
    if len(payload) < length:
        raise TruncatedFrameError(f"payload has {len(payload)} of {length} declared bytes")
    if len(payload) > length:
        raise MalformedPayloadError(f"{len(payload) - length} bytes beyond declared payload length")
    return decode_payload(tag, payload)


# ---------------------------------------------------------------------------
# socket framing


def send_message(sock, msg: FedMessage) -> None:
    sock.sendall(encode(msg))


def _recv_exact(sock, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            raise TruncatedFrameError(f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def recv_message(sock) -> FedMessage:
    header = _recv_exact(sock, HEADER_LEN)
    tag, length = decode_header(header)
    payload = _recv_exact(sock, length) if length else b""
    return decode_payload(tag, payload)


# ---------------------------------------------------------------------------
# model <-> artifact


def artifact_from_model(model) -> ModelArtifact:
    layout = tuple((p.name, tuple(p.value.shape)) for p in model.params())
    flat = np.concatenate([p.value.ravel() for p in model.params()]) if layout else np.array([])
    return ModelArtifact(int(model.arch_id), layout, flat.astype(np.float32))


def load_artifact_into_model(model, artifact: ModelArtifact) -> None:
    expected = tuple((p.name, tuple(p.value.shape)) for p in model.params())
    if artifact.arch != int(model.arch_id):
        raise ArtifactMismatchError(f"artifact arch {artifact.arch} != model arch {int(model.arch_id)}")
    if artifact.layout != expected:
        raise ArtifactMismatchError("artifact manifest does not match model parameters")
    offset = 0
    for p in model.params():
        n = p.value.size
        p.value = artifact.params[offset : offset + n].astype(np.float64).reshape(p.value.shape)
        p.grad = np.zeros_like(p.value)
        offset += n


def model_from_artifact(artifact: ModelArtifact, num_classes=3, input_shape=None):
    from .models import DEFAULT_INPUT_SHAPE, build_model

    model = build_model(artifact.arch, num_classes=num_classes,
                        input_shape=input_shape or DEFAULT_INPUT_SHAPE, seed=0)
    load_artifact_into_model(model, artifact)
    return model


def save_artifact(path, artifact: ModelArtifact) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_artifact(artifact))


def load_artifact(path) -> ModelArtifact:
    with open(path, "rb") as fh:
        return decode_artifact(fh.read())
