import random
import struct
import zlib

import numpy as np
import pytest

from taskmorph.errors import CorruptionError, IncompleteFrame, ProtocolError
from taskmorph.wire import (
    MAGIC,
    FeatureTensor,
    MsgType,
    SplitMessage,
    decode_message,
    decode_single,
    encode_message,
)


def test_empty_control_frame_is_27_bytes():
    frame = encode_message(SplitMessage(MsgType.CONTROL, session_id=7, batch_index=3))
    assert len(frame) == 27
    msg = decode_single(frame)
    assert msg.msg_type == MsgType.CONTROL
    assert msg.session_id == 7
    assert msg.batch_index == 3
    assert msg.tensors == []


def test_single_f32_feature_block_payload_size():
    arr = np.zeros((512, 1, 1), dtype=np.float32)
    msg = SplitMessage(MsgType.FORWARD_FEATURES, 1, 0, [FeatureTensor.from_numpy(arr)])
    frame = encode_message(msg)
    # header 23 + tensor header (2 + 3*4) + payload + crc 4
    assert len(frame) == 23 + 14 + 2048 + 4
    assert msg.payload_bytes() == 2048


def test_roundtrip_all_dtypes():
    rng = np.random.default_rng(11)
    tensors = [
        FeatureTensor.from_numpy(rng.standard_normal((3, 4, 5)).astype(np.float32)),
        FeatureTensor.from_numpy(rng.standard_normal((2, 8)).astype(np.float16)),
        FeatureTensor.from_bytes(b"opaque-label-blob"),
    ]
    msg = SplitMessage(MsgType.LABELS_ENC, session_id=2**40, batch_index=12345, tensors=tensors)
    out = decode_single(encode_message(msg))
    assert out.msg_type == MsgType.LABELS_ENC
    assert out.session_id == 2**40
    assert out.batch_index == 12345
    assert len(out.tensors) == 3
    for a, b in zip(tensors, out.tensors):
        assert a.dtype == b.dtype
        assert a.shape == b.shape
        assert a.data == b.data
    np.testing.assert_array_equal(tensors[0].to_numpy(), out.tensors[0].to_numpy())


def test_roundtrip_random_messages():
    rng = np.random.default_rng(0)
    pyrng = random.Random(0)
    for _ in range(200):
        tensors = []
        for _ in range(pyrng.randrange(0, 4)):
            kind = pyrng.choice(["f32", "f16", "u8"])
            shape = tuple(pyrng.randrange(1, 6) for _ in range(pyrng.randrange(0, 4)))
            if kind == "u8":
                n = 1
                for d in shape:
                    n *= d
                tensors.append(FeatureTensor(kind, shape, bytes(rng.integers(0, 256, n, dtype=np.uint8))))
            else:
                dt = np.float32 if kind == "f32" else np.float16
                tensors.append(FeatureTensor.from_numpy(rng.standard_normal(shape).astype(dt)))
        msg = SplitMessage(
            MsgType(pyrng.randrange(0, 7)),
            session_id=pyrng.randrange(0, 2**64),
            batch_index=pyrng.randrange(0, 2**32),
            tensors=tensors,
        )
        frame = encode_message(msg)
        out, consumed = decode_message(frame)
        assert consumed == len(frame)
        assert out.msg_type == msg.msg_type
        assert out.session_id == msg.session_id
        assert out.batch_index == msg.batch_index
        assert [(t.dtype, t.shape, t.data) for t in out.tensors] == [
            (t.dtype, t.shape, t.data) for t in msg.tensors
        ]


def test_stream_peeling_two_frames():
    f1 = encode_message(SplitMessage(MsgType.HELLO, 1, 0))
    f2 = encode_message(
        SplitMessage(MsgType.FORWARD_FEATURES, 1, 1, [FeatureTensor.from_bytes(b"xy")])
    )
    buf = f1 + f2
    m1, c1 = decode_message(buf)
    assert m1.msg_type == MsgType.HELLO
    m2, c2 = decode_message(buf[c1:])
    assert m2.msg_type == MsgType.FORWARD_FEATURES
    assert c1 + c2 == len(buf)


def test_bad_magic_rejected():
    frame = bytearray(encode_message(SplitMessage(MsgType.BYE, 0, 0)))
    frame[0] = ord("X")
    with pytest.raises(ProtocolError):
        decode_message(bytes(frame))


def test_every_truncation_is_incomplete():
    arr = np.arange(12, dtype=np.float32).reshape(3, 4)
    frame = encode_message(SplitMessage(MsgType.BACKWARD_GRADS, 5, 9, [FeatureTensor.from_numpy(arr)]))
    for cut in range(len(frame)):
        with pytest.raises(IncompleteFrame):
            decode_message(frame[:cut])


def test_flipped_bit_anywhere_is_detected():
    arr = np.arange(6, dtype=np.float32)
    frame = encode_message(SplitMessage(MsgType.FORWARD_FEATURES, 3, 1, [FeatureTensor.from_numpy(arr)]))
    pyrng = random.Random(42)
    for _ in range(300):
        pos = pyrng.randrange(len(frame))
        bit = 1 << pyrng.randrange(8)
        mutated = bytearray(frame)
        mutated[pos] ^= bit
        with pytest.raises((CorruptionError, ProtocolError, IncompleteFrame)):
            decode_single(bytes(mutated))


def test_payload_bit_flip_is_crc_failure_specifically():
    arr = np.arange(6, dtype=np.float32)
    frame = bytearray(encode_message(SplitMessage(MsgType.FORWARD_FEATURES, 3, 1, [FeatureTensor.from_numpy(arr)])))
    frame[-8] ^= 0x01  # inside the payload, ahead of the crc
    with pytest.raises(CorruptionError):
        decode_message(bytes(frame))


def test_unknown_message_type_after_valid_crc():
    body = struct.Struct("<4sBQQH").pack(MAGIC, 99, 0, 0, 0)
    frame = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    with pytest.raises(ProtocolError):
        decode_message(frame)


def test_oversize_payload_claim_rejected():
    # One u8 tensor claiming 2**32-1 elements twice over: structural reject,
    # no attempt to wait for that many bytes.
    body = struct.Struct("<4sBQQH").pack(MAGIC, 1, 0, 0, 2)
    for _ in range(2):
        body += struct.pack("<BB", 2, 1) + struct.pack("<I", 2**31)
    with pytest.raises(ProtocolError):
        decode_message(body)


def test_unknown_dtype_code_rejected():
    body = struct.Struct("<4sBQQH").pack(MAGIC, 1, 0, 0, 1)
    body += struct.pack("<BB", 7, 0)
    frame = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    with pytest.raises(ProtocolError):
        decode_message(frame)


def test_fuzz_random_bytes_never_crash():
    pyrng = random.Random(1234)
    outcomes = {"ok": 0, "protocol": 0, "incomplete": 0, "corrupt": 0}
    for _ in range(20000):
        n = pyrng.randrange(0, 80)
        blob = bytes(pyrng.randrange(256) for _ in range(n))
        if pyrng.random() < 0.3:
            blob = MAGIC + blob  # force deeper paths
        try:
            decode_message(blob)
            outcomes["ok"] += 1
        except ProtocolError:
            outcomes["protocol"] += 1
        except IncompleteFrame:
            outcomes["incomplete"] += 1
        except CorruptionError:
            outcomes["corrupt"] += 1
    # Every branch should have been exercised at least once.
    assert outcomes["protocol"] > 0
    assert outcomes["incomplete"] > 0


def test_feature_tensor_length_checked():
    with pytest.raises(ProtocolError):
        FeatureTensor("f32", (2, 2), b"\x00" * 15)
    with pytest.raises(ProtocolError):
        FeatureTensor("f64", (1,), b"\x00" * 8)
