"""Producer and consumer training sessions over a byte-stream transport.

The two parties exchange framed messages in strict lockstep: every frame a
party sends is answered before it sends the next one. This keeps at most one
data frame in flight per direction, which is what makes checksum recovery
simple (drop the receive buffer, ask the peer to resend its last frame).

Session shape:

    consumer                          producer
    HELLO (auth token, dtype)  ->
                               <-     HELLO (auth ack, session info)
    per epoch:
                               <-     LABELS_ENC (encrypted label block)
    CONTROL "ACK"              ->
    per batch:
                               <-     FORWARD_FEATURES
    BACKWARD_GRADS             ->
    ...
                               <-     BYE (end-of-session record)
    METRICS                    ->

Labels ride encrypted under a pre-shared authenticated symmetric key; feature
and gradient frames are integrity-checked but deliberately not encrypted.
"""

from __future__ import annotations

import io
import json
import math
import socket
import threading
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
from cryptography.fernet import Fernet, InvalidToken

from .data import LabeledImages, iterate_batches
from .errors import (
    ConfigurationError,
    CorruptionError,
    DataError,
    IncompleteFrame,
    ProtocolError,
    SessionError,
)
from .privacy import DPConfig, PrivacyLedger, clip_per_sample, noisy_aggregate
from .training import TaskSpec
from .wire import FeatureTensor, MsgType, SplitMessage, decode_message, encode_message

_RECV_CHUNK = 65536
_NACK = b"NACK"
_LABELS_OK = b"ACK"


def new_session_key() -> bytes:
    """Fresh symmetric key for one session; distribute out of band."""
    return Fernet.generate_key()


# ---------------------------------------------------------------------------
# round-trip timing records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RttRecord:
    """One feature-out/gradient-back round trip, timed on the producer."""

    batch_index: int
    payload_bytes: int
    send_timestamp: float
    ack_timestamp: float
    rtt_ms: float

    def __post_init__(self):
        if self.rtt_ms < 0:
            raise ConfigurationError(f"rtt_ms must be nonnegative, got {self.rtt_ms}")


@dataclass(frozen=True)
class RttSummary:
    payload_bytes: int
    count: int
    mean_ms: float
    p50_ms: float
    p95_ms: float


def measure_rtt(records) -> dict[int, RttSummary]:
    """Group round-trip records by payload size and summarize each group."""
    groups: dict[int, list[float]] = {}
    for r in records:
        groups.setdefault(r.payload_bytes, []).append(r.rtt_ms)
    out = {}
    for size in sorted(groups):
        vals = np.asarray(groups[size], dtype=np.float64)
        out[size] = RttSummary(
            payload_bytes=size,
            count=int(vals.size),
            mean_ms=float(vals.mean()),
            p50_ms=float(np.percentile(vals, 50)),
            p95_ms=float(np.percentile(vals, 95)),
        )
    return out


# ---------------------------------------------------------------------------
# framed lockstep channel
# ---------------------------------------------------------------------------


class MessageChannel:
    """Framed messaging over a connected socket, with resend-on-corruption.

    Requires the lockstep discipline documented at module level: because at
    most one data frame is ever in flight per direction, a corrupted frame
    can be recovered by dropping the receive buffer and sending a NACK
    control frame, to which the peer answers by retransmitting its last
    data frame. NACK frames themselves are never stored for retransmission.

    When ``capture_path`` is set, every valid frame sent or received is
    appended verbatim to that file (concatenated raw frames).
    """

    def __init__(self, sock, *, capture_path=None, max_retries: int = 3):
        self._sock = sock
        self._buf = b""
        self._last_frame: bytes | None = None
        self._max_retries = max_retries
        self._capture = open(capture_path, "ab") if capture_path else None

    def close(self) -> None:
        if self._capture is not None:
            self._capture.close()
            self._capture = None

    def _record(self, frame: bytes) -> None:
        if self._capture is not None:
            self._capture.write(frame)
            self._capture.flush()

    def send(self, msg: SplitMessage) -> int:
        frame = encode_message(msg)
        self._last_frame = frame
        self._record(frame)
        self._sock.sendall(frame)
        return len(frame)

    def _send_nack(self, session_id: int) -> None:
        msg = SplitMessage(
            MsgType.CONTROL, session_id, 0, [FeatureTensor.from_bytes(_NACK)]
        )
        frame = encode_message(msg)
        self._record(frame)
        self._sock.sendall(frame)

    def recv(self, session_id: int = 0) -> SplitMessage:
        """Next application message; NACK servicing happens transparently."""
        corrupted = 0
        while True:
            try:
                msg, consumed = decode_message(self._buf)
            except IncompleteFrame:
                try:
                    data = self._sock.recv(_RECV_CHUNK)
                except TimeoutError as exc:
                    raise SessionError("timed out waiting for a frame") from exc
                if not data:
                    raise SessionError("connection closed by peer")
                self._buf += data
                continue
            except CorruptionError:
                corrupted += 1
                if corrupted > self._max_retries:
                    raise ProtocolError(
                        f"frame still corrupt after {self._max_retries} resends"
                    )
                self._buf = b""
                self._send_nack(session_id)
                continue
            self._record(self._buf[:consumed])
            self._buf = self._buf[consumed:]
            if (
                msg.msg_type is MsgType.CONTROL
                and msg.tensors
                and bytes(msg.tensors[0].data) == _NACK
            ):
                if self._last_frame is None:
                    raise ProtocolError("peer requested a resend but nothing was sent")
                self._record(self._last_frame)
                self._sock.sendall(self._last_frame)
                continue
            return msg


# ---------------------------------------------------------------------------
# session configuration and outcomes
# ---------------------------------------------------------------------------


class SessionStatus(Enum):
    COMPLETED = "completed"
    BUDGET_EXHAUSTED = "budget_exhausted"
    ABORTED = "aborted"


@dataclass(frozen=True)
class SessionConfig:
    """Parameters both parties agree on before a session starts.

    ``key`` is the pre-shared label-encryption key. ``dp`` switches the
    producer to sanitized per-sample updates; ``use_f16`` asks the producer
    to ship features at half precision (gradients stay f32).
    """

    key: bytes
    session_id: int = 0
    epochs: int = 1
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    dp: DPConfig | None = None
    use_f16: bool = False
    timeout_s: float = 30.0

    def __post_init__(self):
        if not self.key:
            raise ConfigurationError("session key must be nonempty")
        if not isinstance(self.epochs, int) or self.epochs < 0:
            raise ConfigurationError(f"epochs must be a nonnegative int, got {self.epochs!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be a positive int, got {self.batch_size!r}")
        if not isinstance(self.session_id, int) or self.session_id < 0:
            raise ConfigurationError(f"session_id must be a nonnegative int, got {self.session_id!r}")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.timeout_s <= 0:
            raise ConfigurationError(f"timeout_s must be positive, got {self.timeout_s}")


@dataclass
class ProducerOutcome:
    status: SessionStatus
    records: list[RttRecord]
    steps: int
    epsilon: float | None = None
    consumer_metrics: dict | None = None
    reason: str | None = None


@dataclass
class ConsumerOutcome:
    status: SessionStatus
    losses: list[float] = field(default_factory=list)
    steps: int = 0
    reason: str | None = None


def _json_tensor(obj) -> FeatureTensor:
    return FeatureTensor.from_bytes(json.dumps(obj).encode())


def _json_from(t: FeatureTensor) -> dict:
    try:
        return json.loads(bytes(t.data).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed JSON payload: {exc}") from exc


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def _npy_from(raw: bytes) -> np.ndarray:
    try:
        return np.load(io.BytesIO(raw), allow_pickle=False)
    except ValueError as exc:
        raise ProtocolError(f"malformed label block: {exc}") from exc


def _expect(msg: SplitMessage, kind: MsgType) -> SplitMessage:
    if msg.msg_type is not kind:
        raise ProtocolError(f"expected {kind.name}, got {msg.msg_type.name}")
    return msg


# ---------------------------------------------------------------------------
# producer side
# ---------------------------------------------------------------------------


def run_producer(
    sock,
    encoder,
    metamorph,
    data: LabeledImages,
    task: TaskSpec,
    config: SessionConfig,
    *,
    capture_path=None,
) -> ProducerOutcome:
    """Serve one training session to a connected consumer.

    The producer owns the data: it streams feature batches, applies the
    returned boundary gradients to the encoder and morphing module (through
    the clip-and-noise path when ``config.dp`` is set), and times each
    round trip. Handshake failures raise; mid-session timeouts and peer
    disconnects return an ABORTED outcome carrying the partial records.
    """
    sock.settimeout(config.timeout_s)
    channel = MessageChannel(sock, capture_path=capture_path)
    try:
        return _producer_session(channel, encoder, metamorph, data, task, config)
    finally:
        channel.close()


def _producer_session(channel, encoder, metamorph, data, task, config) -> ProducerOutcome:
    fernet = Fernet(config.key)
    n = len(data)
    if n == 0:
        raise DataError("cannot train on an empty dataset")
    if config.batch_size > n:
        raise ConfigurationError(f"batch_size {config.batch_size} exceeds dataset size {n}")
    if task.task_id not in data.labels:
        raise DataError(
            f"dataset has no labels for task {task.task_id!r}; have {sorted(data.labels)}"
        )
    dp = config.dp
    if dp is not None:
        q = config.batch_size / n
        if not math.isclose(q, dp.sample_rate, rel_tol=1e-9, abs_tol=1e-12):
            raise ConfigurationError(
                f"dp.sample_rate {dp.sample_rate} does not match "
                f"batch_size/dataset_size = {q}"
            )

    hello = _expect(channel.recv(config.session_id), MsgType.HELLO)
    if hello.session_id != config.session_id:
        raise SessionError(
            f"unknown session id {hello.session_id} (serving {config.session_id})"
        )
    if not hello.tensors:
        raise ProtocolError("HELLO carried no authentication token")
    try:
        token = fernet.decrypt(bytes(hello.tensors[0].data))
    except InvalidToken as exc:
        raise SessionError("consumer failed authentication") from exc
    if token != b"hello:%d" % config.session_id:
        raise SessionError("authentication token does not match this session")
    request = _json_from(hello.tensors[1]) if len(hello.tensors) > 1 else {}
    dtype = "f16" if request.get("dtype") == "f16" else "f32"

    with torch.no_grad():
        probe = metamorph(encoder(torch.as_tensor(data.images[:1])))
    info = {
        "feature_shape": list(probe.shape[1:]),
        "epochs": config.epochs,
        "batches_per_epoch": n // config.batch_size,
        "batch_size": config.batch_size,
        "dtype": dtype,
        "per_sample": dp is not None,
    }
    channel.send(
        SplitMessage(
            MsgType.HELLO,
            config.session_id,
            0,
            [
                FeatureTensor.from_bytes(fernet.encrypt(b"ack:%d" % config.session_id)),
                _json_tensor(info),
            ],
        )
    )

    params = [
        p for m in (encoder, metamorph) for p in m.parameters() if p.requires_grad
    ]
    if not params:
        raise ConfigurationError("no trainable producer parameters")
    optimizer = torch.optim.AdamW(params, lr=config.lr)
    ledger = PrivacyLedger(config=dp) if dp is not None else None
    shuffle_rng = np.random.default_rng(config.seed)
    noise_rng = np.random.default_rng(config.seed + 1)
    enforce_budget = dp is not None and dp.noise_multiplier > 0
    dim = sum(p.numel() for p in params)

    records: list[RttRecord] = []
    status = SessionStatus.COMPLETED
    reason = None
    consumer_metrics = None
    step = 0
    wire_dtype = np.float16 if dtype == "f16" else np.float32
    try:
        halted = False
        for epoch in range(config.epochs):
            batches = list(
                iterate_batches(data, config.batch_size, rng=shuffle_rng, drop_last=True)
            )
            labels_epoch = np.concatenate(
                [b.labels[task.task_id] for b in batches], axis=0
            )
            channel.send(
                SplitMessage(
                    MsgType.LABELS_ENC,
                    config.session_id,
                    epoch,
                    [FeatureTensor.from_bytes(fernet.encrypt(_npy_bytes(labels_epoch)))],
                )
            )
            ack = _expect(channel.recv(config.session_id), MsgType.CONTROL)
            if not ack.tensors or bytes(ack.tensors[0].data) != _LABELS_OK:
                raise ProtocolError("labels were not acknowledged")
            for batch in batches:
                if enforce_budget and ledger.would_exceed(extra_steps=1):
                    status = SessionStatus.BUDGET_EXHAUSTED
                    reason = "privacy budget exhausted"
                    halted = True
                    break
                step = _producer_step(
                    channel, encoder, metamorph, params, optimizer, batch,
                    dp, noise_rng, dim, wire_dtype, config.session_id, step, records,
                )
                if ledger is not None:
                    ledger.record_step()
            if halted:
                break
        end = {"status": status.value, "steps": step}
        channel.send(SplitMessage(MsgType.BYE, config.session_id, step, [_json_tensor(end)]))
        final = _expect(channel.recv(config.session_id), MsgType.METRICS)
        if final.tensors:
            consumer_metrics = _json_from(final.tensors[0])
    except SessionError as exc:
        status = SessionStatus.ABORTED
        reason = str(exc)
    return ProducerOutcome(
        status=status,
        records=records,
        steps=step,
        epsilon=ledger.epsilon() if ledger is not None else None,
        consumer_metrics=consumer_metrics,
        reason=reason,
    )


def _producer_step(
    channel, encoder, metamorph, params, optimizer, batch,
    dp, noise_rng, dim, wire_dtype, session_id, step, records,
) -> int:
    """One forward/backward round trip; returns the next step index."""
    x = torch.from_numpy(np.ascontiguousarray(batch.images))
    nb = x.shape[0]
    if dp is None:
        z = metamorph(encoder(x))
        z_send = z.detach()
        per_sample_z = None
    else:
        # separate graphs per sample so each sample's parameter gradient
        # can be clipped on its own
        per_sample_z = [metamorph(encoder(x[i : i + 1])) for i in range(nb)]
        z = None
        z_send = torch.cat([t.detach() for t in per_sample_z], dim=0)

    msg = SplitMessage(
        MsgType.FORWARD_FEATURES,
        session_id,
        step,
        [FeatureTensor.from_numpy(z_send.numpy().astype(wire_dtype))],
    )
    send_ts = time.monotonic()
    channel.send(msg)
    reply = _expect(channel.recv(session_id), MsgType.BACKWARD_GRADS)
    ack_ts = time.monotonic()
    if reply.batch_index != step:
        raise ProtocolError(
            f"batch index mismatch: sent {step}, peer answered {reply.batch_index}"
        )
    if not reply.tensors:
        raise ProtocolError("gradient frame carried no tensors")
    grads = reply.tensors[0].to_numpy().astype(np.float32)
    if tuple(grads.shape) != tuple(z_send.shape):
        raise ProtocolError(
            f"gradient shape {tuple(grads.shape)} does not match "
            f"feature shape {tuple(z_send.shape)}"
        )
    records.append(
        RttRecord(
            batch_index=step,
            payload_bytes=msg.payload_bytes(),
            send_timestamp=send_ts,
            ack_timestamp=ack_ts,
            rtt_ms=(ack_ts - send_ts) * 1000.0,
        )
    )

    g = torch.from_numpy(grads)
    optimizer.zero_grad(set_to_none=True)
    if dp is None:
        z.backward(gradient=g)
    else:
        rows = np.zeros((nb, dim), dtype=np.float32)
        for i, z_i in enumerate(per_sample_z):
            for p in params:
                p.grad = None
            # the consumer's boundary gradient is for the batch-mean loss;
            # scaling by the batch size recovers the per-sample gradient
            z_i.backward(gradient=g[i : i + 1] * nb)
            offset = 0
            for p in params:
                k = p.numel()
                if p.grad is not None:
                    rows[i, offset : offset + k] = p.grad.detach().reshape(-1).numpy()
                offset += k
        clipped = clip_per_sample(rows, dp.clip_threshold)
        aggregate = noisy_aggregate(clipped, dp.noise_multiplier, dp.clip_threshold, noise_rng)
        offset = 0
        for p in params:
            k = p.numel()
            p.grad = torch.from_numpy(aggregate[offset : offset + k].copy()).reshape(p.shape)
            offset += k
    optimizer.step()
    return step + 1


# ---------------------------------------------------------------------------
# consumer side
# ---------------------------------------------------------------------------


def run_consumer(
    sock,
    head,
    task: TaskSpec,
    config: SessionConfig,
    *,
    capture_path=None,
) -> ConsumerOutcome:
    """Join a producer's session and train the task head locally.

    Per feature batch the head runs forward, the task loss is computed
    against the decrypted labels, and the gradient at the feature boundary
    is sent back; the head updates with its own optimizer. Handshake
    failures raise; mid-session timeouts, label decryption failures, and
    disconnects return an ABORTED outcome with the losses so far.
    """
    sock.settimeout(config.timeout_s)
    channel = MessageChannel(sock, capture_path=capture_path)
    try:
        return _consumer_session(channel, head, task, config)
    finally:
        channel.close()


def _consumer_session(channel, head, task, config) -> ConsumerOutcome:
    fernet = Fernet(config.key)
    channel.send(
        SplitMessage(
            MsgType.HELLO,
            config.session_id,
            0,
            [
                FeatureTensor.from_bytes(fernet.encrypt(b"hello:%d" % config.session_id)),
                _json_tensor({"dtype": "f16" if config.use_f16 else "f32"}),
            ],
        )
    )
    reply = _expect(channel.recv(config.session_id), MsgType.HELLO)
    if not reply.tensors:
        raise ProtocolError("HELLO reply carried no authentication token")
    try:
        token = fernet.decrypt(bytes(reply.tensors[0].data))
    except InvalidToken as exc:
        raise SessionError("producer failed authentication") from exc
    if token != b"ack:%d" % config.session_id:
        raise SessionError("authentication token does not match this session")
    info = _json_from(reply.tensors[1]) if len(reply.tensors) > 1 else {}
    per_sample = bool(info.get("per_sample"))

    params = [p for p in head.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(params, lr=config.lr) if params else None
    losses: list[float] = []
    status = SessionStatus.COMPLETED
    reason = None
    step = 0
    labels: np.ndarray | None = None
    used = 0
    try:
        while True:
            msg = channel.recv(config.session_id)
            if msg.msg_type is MsgType.LABELS_ENC:
                if not msg.tensors:
                    raise ProtocolError("label frame carried no payload")
                try:
                    raw = fernet.decrypt(bytes(msg.tensors[0].data))
                except InvalidToken as exc:
                    raise SessionError("label decryption failed") from exc
                labels = _npy_from(raw)
                used = 0
                channel.send(
                    SplitMessage(
                        MsgType.CONTROL,
                        config.session_id,
                        msg.batch_index,
                        [FeatureTensor.from_bytes(_LABELS_OK)],
                    )
                )
            elif msg.msg_type is MsgType.FORWARD_FEATURES:
                if msg.batch_index != step:
                    raise ProtocolError(
                        f"batch index mismatch: expected {step}, got {msg.batch_index}"
                    )
                if labels is None:
                    raise ProtocolError("features arrived before any labels")
                feats = msg.tensors[0].to_numpy().astype(np.float32)
                nb = feats.shape[0]
                if used + nb > len(labels):
                    raise ProtocolError("more feature rows than labels this epoch")
                y = torch.from_numpy(np.ascontiguousarray(labels[used : used + nb]))
                used += nb
                z = torch.from_numpy(feats).requires_grad_(True)
                if optimizer is not None:
                    optimizer.zero_grad(set_to_none=True)
                scores = head(z)
                if per_sample:
                    # mean of per-sample losses, so the boundary gradient rows
                    # are exactly (1/n) d loss_i / d z_i for the producer to
                    # rescale and clip
                    loss = torch.stack(
                        [
                            task.loss_value(scores[i : i + 1], y[i : i + 1])
                            for i in range(nb)
                        ]
                    ).mean()
                else:
                    loss = task.loss_value(scores, y)
                loss.backward()
                g = z.grad.detach().numpy().astype(np.float32)
                channel.send(
                    SplitMessage(
                        MsgType.BACKWARD_GRADS,
                        config.session_id,
                        step,
                        [
                            FeatureTensor.from_numpy(g),
                            FeatureTensor.from_numpy(
                                np.asarray([float(loss.detach())], dtype=np.float32)
                            ),
                        ],
                    )
                )
                if optimizer is not None:
                    optimizer.step()
                losses.append(float(loss.detach()))
                step += 1
            elif msg.msg_type is MsgType.BYE:
                if msg.tensors:
                    end = _json_from(msg.tensors[0])
                    if end.get("status") == SessionStatus.BUDGET_EXHAUSTED.value:
                        status = SessionStatus.BUDGET_EXHAUSTED
                        reason = "producer stopped at its privacy budget"
                break
            else:
                raise ProtocolError(f"unexpected message type {msg.msg_type.name}")
    except SessionError as exc:
        return ConsumerOutcome(
            status=SessionStatus.ABORTED, losses=losses, steps=step, reason=str(exc)
        )
    metrics = {
        "batches": step,
        "mean_loss": float(np.mean(losses)) if losses else math.nan,
    }
    channel.send(
        SplitMessage(MsgType.METRICS, config.session_id, step, [_json_tensor(metrics)])
    )
    return ConsumerOutcome(status=status, losses=losses, steps=step, reason=reason)


# ---------------------------------------------------------------------------
# transport helpers
# ---------------------------------------------------------------------------


def open_listener(host: str = "127.0.0.1", port: int = 0) -> socket.socket:
    """Bound, listening TCP socket; port 0 lets the OS pick a free port."""
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((host, port))
    listener.listen(1)
    return listener


def serve_producer(
    listener: socket.socket,
    encoder,
    metamorph,
    data: LabeledImages,
    task: TaskSpec,
    config: SessionConfig,
    *,
    capture_path=None,
) -> ProducerOutcome:
    """Accept one consumer on ``listener`` and run a full producer session."""
    listener.settimeout(config.timeout_s)
    try:
        conn, _ = listener.accept()
    except TimeoutError as exc:
        raise SessionError("no consumer connected before the timeout") from exc
    with conn:
        return run_producer(
            conn, encoder, metamorph, data, task, config, capture_path=capture_path
        )


def connect_consumer(
    host: str,
    port: int,
    head,
    task: TaskSpec,
    config: SessionConfig,
    *,
    capture_path=None,
) -> ConsumerOutcome:
    """Connect to a producer at ``host:port`` and run a consumer session."""
    try:
        sock = socket.create_connection((host, port), timeout=config.timeout_s)
    except OSError as exc:
        raise SessionError(f"could not reach producer at {host}:{port}: {exc}") from exc
    with sock:
        return run_consumer(sock, head, task, config, capture_path=capture_path)


# ---------------------------------------------------------------------------
# round-trip benchmark
# ---------------------------------------------------------------------------


def _echo_peer(sock) -> None:
    channel = MessageChannel(sock)
    try:
        while True:
            msg = channel.recv()
            if msg.msg_type is MsgType.BYE:
                return
            channel.send(
                SplitMessage(MsgType.BACKWARD_GRADS, msg.session_id, msg.batch_index, msg.tensors)
            )
    except (SessionError, ProtocolError):
        return
    finally:
        channel.close()


def rtt_benchmark(
    payload_sizes, rounds: int = 50, *, warmup: int = 5
) -> list[RttRecord]:
    """Time feature-sized round trips over a local socket pair.

    For each payload size, an equal-sized gradient frame comes back per
    round; ``warmup`` rounds per size are discarded before recording.
    """
    if rounds < 1:
        raise ConfigurationError(f"rounds must be positive, got {rounds}")
    sizes = [int(s) for s in payload_sizes]
    for s in sizes:
        if s < 4 or s % 4:
            raise ConfigurationError(f"payload size must be a positive multiple of 4, got {s}")
    records: list[RttRecord] = []
    if not sizes:
        return records
    here, there = socket.socketpair()
    peer = threading.Thread(target=_echo_peer, args=(there,), daemon=True)
    peer.start()
    channel = MessageChannel(here)
    try:
        here.settimeout(30.0)
        index = 0
        for size in sizes:
            tensor = FeatureTensor.from_numpy(np.zeros(size // 4, dtype=np.float32))
            for r in range(warmup + rounds):
                msg = SplitMessage(MsgType.FORWARD_FEATURES, 0, index, [tensor])
                send_ts = time.monotonic()
                channel.send(msg)
                reply = _expect(channel.recv(), MsgType.BACKWARD_GRADS)
                ack_ts = time.monotonic()
                if reply.batch_index != index:
                    raise ProtocolError(
                        f"benchmark echo answered {reply.batch_index} for {index}"
                    )
                index += 1
                if r >= warmup:
                    records.append(
                        RttRecord(
                            batch_index=index - 1,
                            payload_bytes=msg.payload_bytes(),
                            send_timestamp=send_ts,
                            ack_timestamp=ack_ts,
                            rtt_ms=(ack_ts - send_ts) * 1000.0,
                        )
                    )
        channel.send(SplitMessage(MsgType.BYE, 0, index))
    finally:
        channel.close()
        here.close()
        peer.join(timeout=5.0)
        there.close()
    return records


__all__ = [
    "ConsumerOutcome",
    "MessageChannel",
    "ProducerOutcome",
    "RttRecord",
    "RttSummary",
    "SessionConfig",
    "SessionStatus",
    "connect_consumer",
    "measure_rtt",
    "new_session_key",
    "open_listener",
    "rtt_benchmark",
    "run_consumer",
    "run_producer",
    "serve_producer",
]
