"""Framed binary wire format for producer/consumer exchange.

Frame layout (all integers little-endian):

    magic "MM01" | msg_type u8 | session_id u64 | batch_index u64
    | tensor_count u16
    | per tensor: dtype_code u8, ndim u8, ndim * (dim u32), raw payload
    | crc32 u32 over every preceding byte

The CRC is checked before a message object is built. Decoding never raises
anything outside ProtocolError / CorruptionError / IncompleteFrame, so a
stream reader can feed it arbitrary byte prefixes.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import CorruptionError, IncompleteFrame, ProtocolError

MAGIC = b"MM01"
_HEADER = struct.Struct("<4sBQQH")  # magic, msg_type, session_id, batch_index, tensor_count
_CRC = struct.Struct("<I")
_DIM = struct.Struct("<I")

# Refuse frames claiming more payload than this; protects the fuzz path from
# absurd allocation requests.
MAX_FRAME_BYTES = 1 << 30


class MsgType(IntEnum):
    HELLO = 0
    FORWARD_FEATURES = 1
    BACKWARD_GRADS = 2
    LABELS_ENC = 3
    METRICS = 4
    CONTROL = 5
    BYE = 6


# dtype code on the wire -> (name, numpy dtype, bytes per element)
_DTYPES = {
    0: ("f32", np.dtype("<f4"), 4),
    1: ("f16", np.dtype("<f2"), 2),
    2: ("u8", np.dtype("u1"), 1),
}
_DTYPE_CODES = {name: code for code, (name, _, _) in _DTYPES.items()}


@dataclass
class FeatureTensor:
    """Dense numeric array with explicit dtype and shape, as sent on the wire.

    f32 and f16 carry feature/gradient payloads; u8 carries opaque byte
    payloads (encrypted labels, JSON control records).
    """

    dtype: str
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self):
        if self.dtype not in _DTYPE_CODES:
            raise ProtocolError(f"unknown dtype {self.dtype!r}")
        self.shape = tuple(int(d) for d in self.shape)
        expected = self.element_count * _DTYPES[_DTYPE_CODES[self.dtype]][2]
        if len(self.data) != expected:
            raise ProtocolError(
                f"buffer length {len(self.data)} does not match shape {self.shape} "
                f"dtype {self.dtype} (expected {expected})"
            )

    @property
    def element_count(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n

    @property
    def nbytes(self) -> int:
        return len(self.data)

    @classmethod
    def from_numpy(cls, arr: np.ndarray) -> "FeatureTensor":
        if arr.dtype == np.float32:
            name = "f32"
        elif arr.dtype == np.float16:
            name = "f16"
        elif arr.dtype == np.uint8:
            name = "u8"
        else:
            raise ProtocolError(f"unsupported array dtype {arr.dtype}")
        wire_dtype = _DTYPES[_DTYPE_CODES[name]][1]
        return cls(name, tuple(arr.shape), np.ascontiguousarray(arr, dtype=wire_dtype).tobytes())

    def to_numpy(self) -> np.ndarray:
        np_dtype = _DTYPES[_DTYPE_CODES[self.dtype]][1]
        return np.frombuffer(self.data, dtype=np_dtype).reshape(self.shape).copy()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "FeatureTensor":
        """Wrap an opaque byte string as a 1-D u8 tensor."""
        return cls("u8", (len(payload),), bytes(payload))


@dataclass
class SplitMessage:
    msg_type: MsgType
    session_id: int = 0
    batch_index: int = 0
    tensors: list[FeatureTensor] = field(default_factory=list)

    def payload_bytes(self) -> int:
        return sum(t.nbytes for t in self.tensors)


def encode_message(msg: SplitMessage) -> bytes:
    """Serialize a message into one complete frame."""
    parts = [_HEADER.pack(MAGIC, int(msg.msg_type), msg.session_id, msg.batch_index, len(msg.tensors))]
    for t in msg.tensors:
        code = _DTYPE_CODES[t.dtype]
        parts.append(struct.pack("<BB", code, len(t.shape)))
        for d in t.shape:
            parts.append(_DIM.pack(d))
        parts.append(t.data)
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def decode_message(buf: bytes) -> tuple[SplitMessage, int]:
    """Parse one frame from the head of ``buf``.

    Returns the message and the number of bytes consumed, so back-to-back
    frames in a stream buffer can be peeled off one at a time.

    Raises:
        IncompleteFrame: the buffer is a valid prefix but the frame is not
            fully present yet.
        ProtocolError: the bytes cannot be a frame (bad magic, unknown
            dtype or message code, oversize claim).
        CorruptionError: the frame is structurally complete but fails CRC.
    """
    buf = bytes(buf)
    if len(buf) < len(MAGIC):
        if MAGIC.startswith(buf):
            raise IncompleteFrame("short read inside magic")
        raise ProtocolError("bad magic")
    if buf[:4] != MAGIC:
        raise ProtocolError("bad magic")
    if len(buf) < _HEADER.size:
        raise IncompleteFrame("short read inside header")
    _, msg_type, session_id, batch_index, tensor_count = _HEADER.unpack_from(buf, 0)

    # Walk tensor headers to locate the frame end. dtype codes must be known
    # to size the payloads, so an unknown code is a structural error.
    offset = _HEADER.size
    specs: list[tuple[int, tuple[int, ...], int]] = []
    total_payload = 0
    for _ in range(tensor_count):
        if len(buf) < offset + 2:
            raise IncompleteFrame("short read inside tensor header")
        code = buf[offset]
        ndim = buf[offset + 1]
        offset += 2
        if code not in _DTYPES:
            raise ProtocolError(f"unknown dtype code {code}")
        if len(buf) < offset + 4 * ndim:
            raise IncompleteFrame("short read inside tensor dims")
        dims = tuple(_DIM.unpack_from(buf, offset + 4 * i)[0] for i in range(ndim))
        offset += 4 * ndim
        nbytes = _DTYPES[code][2]
        for d in dims:
            nbytes *= d
        total_payload += nbytes
        if total_payload > MAX_FRAME_BYTES:
            raise ProtocolError("frame claims oversize payload")
        specs.append((code, dims, nbytes))
        offset += nbytes
    frame_len = offset + _CRC.size
    if len(buf) < frame_len:
        raise IncompleteFrame("short read inside payload")

    (stored_crc,) = _CRC.unpack_from(buf, offset)
    actual_crc = zlib.crc32(buf[:offset]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CorruptionError(f"crc mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}")

    try:
        mt = MsgType(msg_type)
    except ValueError:
        raise ProtocolError(f"unknown message type {msg_type}") from None

    tensors = []
    cursor = _HEADER.size
    for code, dims, nbytes in specs:
        cursor += 2 + 4 * len(dims)
        tensors.append(FeatureTensor(_DTYPES[code][0], dims, buf[cursor : cursor + nbytes]))
        cursor += nbytes
    return SplitMessage(mt, session_id, batch_index, tensors), frame_len


def decode_single(frame: bytes) -> SplitMessage:
    """Decode a buffer that must hold exactly one frame."""
    msg, consumed = decode_message(frame)
    if consumed != len(frame):
        raise ProtocolError(f"trailing bytes after frame ({len(frame) - consumed})")
    return msg
