"""Write-ahead log: append/flush with group commit, recovery, checkpoints.

The scheme is redo-only with force-log-at-commit and no-steal buffering:
uncommitted effects never reach a checkpoint image, so recovery is a single
forward pass that applies a transaction's records when (and only when) its
COMMIT record is durable. There is no undo.

On-disk layout (all integers little-endian):

  log file       magic "QDBL", u32 version, then frames
  checkpoint     magic "QDBC", u32 version, then frames (written to a .tmp
                 and renamed into place, so a crash mid-checkpoint leaves the
                 previous image intact)
  frame          u32 body_len | body | u32 crc32(body)
  log body       u64 lsn | u64 txn_id | u8 kind | kind-specific fields

Group commit: the first committer to reach flush_through becomes the flush
leader. It waits a bounded time (default 1 ms, or until 64 committers are
pending, whichever comes first), then one write+fsync covers every record
buffered so far. Followers just wait for the durable horizon to pass their
lsn. A torn tail (partial or CRC-failing frame at end of file) is truncated
on recovery; a bad frame with valid data after it means mid-log corruption
and recovery refuses rather than drop committed work.
"""

from __future__ import annotations

import os
import struct
import threading
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable, Iterable, Optional

from .errors import EngineFailedError, UnrecoverableLogError, UsageError

LOG_MAGIC = b"QDBL"
CHECKPOINT_MAGIC = b"QDBC"
FORMAT_VERSION = 1
HEADER_SIZE = 8

LOG_FILE = "log.qdbl"
CHECKPOINT_FILE = "checkpoint.qdbc"
CHECKPOINT_TMP = "checkpoint.qdbc.tmp"

# Frames larger than this are treated as corruption, not data. Payloads are
# capped well below (engine default 1 MiB).
MAX_FRAME_BODY = 32 * 1024 * 1024


class RecordKind(IntEnum):
    BEGIN = 1
    INSERT = 2
    DELETE = 3
    COMMIT = 4
    ABORT = 5
    CHECKPOINT = 6
    CREATE_QUEUE = 7
    DESTROY_QUEUE = 8


@dataclass
class LogRecord:
    lsn: int
    txn_id: int
    kind: RecordKind
    queue_id: int = 0
    message_id: int = 0
    priority: int = 0
    payload: bytes = b""
    # CREATE_QUEUE only
    name: str = ""
    durability: int = 0
    ordering: int = 0


def encode_body(rec: LogRecord) -> bytes:
    head = struct.pack("<QQB", rec.lsn, rec.txn_id, int(rec.kind))
    k = rec.kind
    if k in (RecordKind.BEGIN, RecordKind.COMMIT, RecordKind.ABORT, RecordKind.CHECKPOINT):
        return head
    if k == RecordKind.INSERT:
        return head + struct.pack("<QQq I", rec.queue_id, rec.message_id, rec.priority,
                                  len(rec.payload)) + rec.payload
    if k == RecordKind.DELETE:
        return head + struct.pack("<QQ", rec.queue_id, rec.message_id)
    if k == RecordKind.CREATE_QUEUE:
        nm = rec.name.encode("utf-8")
        return head + struct.pack("<QI", rec.queue_id, len(nm)) + nm + struct.pack(
            "<BB", rec.durability, rec.ordering)
    if k == RecordKind.DESTROY_QUEUE:
        return head + struct.pack("<Q", rec.queue_id)
    raise UsageError(f"unknown record kind {k}")


def decode_body(body: bytes) -> LogRecord:
    if len(body) < 17:
        raise UnrecoverableLogError("log record body too short")
    lsn, txn_id, kind_raw = struct.unpack_from("<QQB", body, 0)
    try:
        kind = RecordKind(kind_raw)
    except ValueError:
        raise UnrecoverableLogError(f"unknown log record kind {kind_raw}")
    rec = LogRecord(lsn=lsn, txn_id=txn_id, kind=kind)
    off = 17
    if kind in (RecordKind.BEGIN, RecordKind.COMMIT, RecordKind.ABORT, RecordKind.CHECKPOINT):
        return rec
    if kind == RecordKind.INSERT:
        rec.queue_id, rec.message_id, rec.priority, plen = struct.unpack_from("<QQqI", body, off)
        off += 28
        rec.payload = body[off:off + plen]
        if len(rec.payload) != plen:
            raise UnrecoverableLogError("INSERT payload truncated inside frame")
        return rec
    if kind == RecordKind.DELETE:
        rec.queue_id, rec.message_id = struct.unpack_from("<QQ", body, off)
        return rec
    if kind == RecordKind.CREATE_QUEUE:
        rec.queue_id, nlen = struct.unpack_from("<QI", body, off)
        off += 12
        rec.name = body[off:off + nlen].decode("utf-8")
        off += nlen
        rec.durability, rec.ordering = struct.unpack_from("<BB", body, off)
        return rec
    if kind == RecordKind.DESTROY_QUEUE:
        (rec.queue_id,) = struct.unpack_from("<Q", body, off)
        return rec
    raise UnrecoverableLogError(f"undecodable record kind {kind}")


def frame(body: bytes) -> bytes:
    return struct.pack("<I", len(body)) + body + struct.pack("<I", zlib.crc32(body))


@dataclass
class ScanResult:
    """Outcome of a raw frame scan over log bytes."""

    bodies: list[bytes]
    clean: bool            # False when the scan stopped at a torn tail
    good_end: int          # byte offset just past the last valid frame


def scan_frames(data: bytes, offset: int = HEADER_SIZE) -> ScanResult:
    """Walk frames; stop at a torn tail; refuse on mid-stream corruption.

    Torn tail: a partial frame at EOF, a frame whose declared length runs
    past EOF, or a CRC-failing frame that is the last thing in the file.
    A CRC failure with more bytes after the frame is not a torn write, it is
    corruption of data that may have been committed: refuse.
    """
    bodies: list[bytes] = []
    n = len(data)
    pos = offset
    while pos < n:
        if n - pos < 4:
            return ScanResult(bodies, False, pos)
        (blen,) = struct.unpack_from("<I", data, pos)
        if blen > MAX_FRAME_BODY:
            # Garbage length. If it claims to run past EOF treat as torn
            # tail; a "frame" that fits is corruption we cannot skip.
            if pos + 8 + blen > n:
                return ScanResult(bodies, False, pos)
            raise UnrecoverableLogError(f"implausible frame length {blen} at offset {pos}")
        if pos + 8 + blen > n:
            return ScanResult(bodies, False, pos)
        body = data[pos + 4:pos + 4 + blen]
        (crc,) = struct.unpack_from("<I", data, pos + 4 + blen)
        if zlib.crc32(body) != crc:
            if pos + 8 + blen == n:
                return ScanResult(bodies, False, pos)
            raise UnrecoverableLogError(f"CRC mismatch at offset {pos} with valid data after it")
        bodies.append(body)
        pos += 8 + blen
    return ScanResult(bodies, True, pos)


class FileLogWriter:
    """Unbuffered appender; the seam tests replace to inject I/O faults."""

    def __init__(self, path: Path):
        self._f = open(path, "ab", buffering=0)

    def write(self, data: bytes) -> None:
        self._f.write(data)

    def fsync(self) -> None:
        os.fsync(self._f.fileno())

    def close(self) -> None:
        self._f.close()


WriterFactory = Callable[[Path], FileLogWriter]


class Log:
    """Append-only log with group-commit flushing.

    append() is cheap (buffers a frame under the log mutex); flush_through()
    provides the durability point. After any I/O failure the log latches
    failed and every subsequent append/flush raises EngineFailedError.
    """

    def __init__(self, directory: Path, *, next_lsn: int = 1,
                 group_wait_s: float = 0.001, group_max_batch: int = 64,
                 writer_factory: Optional[WriterFactory] = None):
        self.directory = Path(directory)
        self.path = self.directory / LOG_FILE
        self._writer_factory = writer_factory or FileLogWriter
        self._mu = threading.Lock()
        self._cv = threading.Condition(self._mu)
        self._buf: list[bytes] = []
        self._next_lsn = next_lsn
        self._appended_lsn = next_lsn - 1
        self._durable_lsn = next_lsn - 1
        self._flush_leader = False
        self._flush_waiters = 0
        self._failed: Optional[BaseException] = None
        self._closed = False
        self.group_wait_s = group_wait_s
        self.group_max_batch = group_max_batch
        self.flush_count = 0  # physical fsyncs, instrumentation for bench/tests

        fresh = not self.path.exists() or self.path.stat().st_size == 0
        if fresh:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "wb") as f:
                f.write(LOG_MAGIC + struct.pack("<I", FORMAT_VERSION))
                f.flush()
                os.fsync(f.fileno())
        self._bytes = self.path.stat().st_size
        self._writer = self._writer_factory(self.path)

    # -- write path ---------------------------------------------------------

    def append(self, kind: RecordKind, txn_id: int, *, queue_id: int = 0,
               message_id: int = 0, priority: int = 0, payload: bytes = b"",
               name: str = "", durability: int = 0, ordering: int = 0) -> int:
        with self._mu:
            self._check_open()
            lsn = self._next_lsn
            self._next_lsn += 1
            rec = LogRecord(lsn=lsn, txn_id=txn_id, kind=kind, queue_id=queue_id,
                            message_id=message_id, priority=priority, payload=payload,
                            name=name, durability=durability, ordering=ordering)
            data = frame(encode_body(rec))
            self._buf.append(data)
            self._bytes += len(data)
            self._appended_lsn = lsn
            return lsn

    def flush_through(self, lsn: int) -> None:
        with self._mu:
            if lsn > self._appended_lsn:
                raise UsageError(f"flush_through({lsn}) beyond appended lsn {self._appended_lsn}")
            if self._durable_lsn >= lsn:
                return  # already durable, immediate no-op
            self._flush_waiters += 1
            self._cv.notify_all()  # leader may be counting pending committers
            try:
                while self._durable_lsn < lsn:
                    self._check_failed()
                    if self._closed:
                        raise EngineFailedError("log closed")
                    if not self._flush_leader:
                        self._flush_leader = True
                        try:
                            self._lead_flush()
                        finally:
                            self._flush_leader = False
                            self._cv.notify_all()
                    else:
                        self._cv.wait(0.05)
                self._check_failed()
            finally:
                self._flush_waiters -= 1

    def _lead_flush(self) -> None:
        # Called with the mutex held; releases it around the physical write.
        deadline = _real_now() + self.group_wait_s
        while self._flush_waiters < self.group_max_batch:
            remaining = deadline - _real_now()
            if remaining <= 0:
                break
            self._cv.wait(remaining)
        batch = self._buf
        horizon = self._appended_lsn
        self._buf = []
        self._mu.release()
        try:
            try:
                if batch:
                    self._writer.write(b"".join(batch))
                self._writer.fsync()
            except OSError as exc:
                with self._mu:
                    self._failed = exc
                    self._cv.notify_all()
                raise EngineFailedError(f"log I/O failure: {exc}") from exc
        finally:
            if self._failed is None:
                self._mu.acquire()
        self.flush_count += 1
        self._durable_lsn = horizon
        self._cv.notify_all()

    def _check_open(self) -> None:
        self._check_failed()
        if self._closed:
            raise EngineFailedError("log closed")

    def _check_failed(self) -> None:
        if self._failed is not None:
            raise EngineFailedError(f"log failed: {self._failed}")

    # -- checkpoint/truncation support ---------------------------------------

    def truncate_before(self, keep_after_lsn: int) -> None:
        """Replace the log with an empty one; callable only when every
        appended record is durable and <= keep_after_lsn (quiescent point)."""
        with self._mu:
            self._check_open()
            if self._buf or self._durable_lsn != self._appended_lsn:
                raise UsageError("truncate with unflushed records")
            if self._appended_lsn > keep_after_lsn:
                raise UsageError("truncate would drop records after the checkpoint")
            self._writer.close()
            tmp = self.path.with_suffix(".new")
            with open(tmp, "wb") as f:
                f.write(LOG_MAGIC + struct.pack("<I", FORMAT_VERSION))
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, self.path)
            _fsync_dir(self.directory)
            self._bytes = HEADER_SIZE
            self._writer = self._writer_factory(self.path)

    # -- introspection --------------------------------------------------------

    @property
    def failed(self) -> bool:
        return self._failed is not None

    @property
    def durable_lsn(self) -> int:
        return self._durable_lsn

    @property
    def appended_lsn(self) -> int:
        return self._appended_lsn

    def byte_size(self) -> int:
        with self._mu:
            return self._bytes

    def close(self) -> None:
        with self._mu:
            if self._closed:
                return
            if self._failed is None and self._durable_lsn < self._appended_lsn:
                # Best-effort final flush; committed work was already forced.
                batch = self._buf
                self._buf = []
                try:
                    if batch:
                        self._writer.write(b"".join(batch))
                    self._writer.fsync()
                    self._durable_lsn = self._appended_lsn
                except OSError as exc:
                    self._failed = exc
            self._closed = True
            self._cv.notify_all()
            try:
                self._writer.close()
            except OSError:
                pass


def _real_now() -> float:
    import time

    return time.monotonic()


def _fsync_dir(directory: Path) -> None:
    fd = os.open(directory, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


# -- checkpoint image ----------------------------------------------------------

_CKPT_HEADER = 1
_CKPT_QUEUE = 2
_CKPT_MESSAGE = 3
_CKPT_END = 4


@dataclass
class CheckpointQueue:
    queue_id: int
    name: str
    durability: int
    ordering: int
    next_enqueue_seq: int
    enqueue_count: int
    dequeue_count: int


@dataclass
class CheckpointMessage:
    queue_id: int
    message_id: int
    priority: int
    enqueue_seq: int
    payload: bytes


@dataclass
class CheckpointImage:
    lsn_at_checkpoint: int
    next_txn_id: int
    next_message_id: int
    next_queue_id: int
    queues: list[CheckpointQueue] = field(default_factory=list)
    messages: list[CheckpointMessage] = field(default_factory=list)


def write_checkpoint(directory: Path, image: CheckpointImage) -> Path:
    """Write-new-then-rename; a crash leaves either the old or the new image."""
    directory = Path(directory)
    tmp = directory / CHECKPOINT_TMP
    final = directory / CHECKPOINT_FILE
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<I", FORMAT_VERSION))
        f.write(frame(struct.pack("<BQQQQ", _CKPT_HEADER, image.lsn_at_checkpoint,
                                  image.next_txn_id, image.next_message_id,
                                  image.next_queue_id)))
        for q in image.queues:
            nm = q.name.encode("utf-8")
            f.write(frame(struct.pack("<BQI", _CKPT_QUEUE, q.queue_id, len(nm)) + nm +
                          struct.pack("<BBQQQ", q.durability, q.ordering,
                                      q.next_enqueue_seq, q.enqueue_count, q.dequeue_count)))
        for m in image.messages:
            f.write(frame(struct.pack("<BQQqQI", _CKPT_MESSAGE, m.queue_id, m.message_id,
                                      m.priority, m.enqueue_seq, len(m.payload)) + m.payload))
        f.write(frame(struct.pack("<B", _CKPT_END)))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, final)
    _fsync_dir(directory)
    return final


def read_checkpoint(directory: Path) -> Optional[CheckpointImage]:
    path = Path(directory) / CHECKPOINT_FILE
    if not path.exists():
        return None
    data = path.read_bytes()
    if len(data) < HEADER_SIZE or data[:4] != CHECKPOINT_MAGIC:
        raise UnrecoverableLogError("checkpoint image has bad magic")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise UnrecoverableLogError(f"checkpoint format version {version} unsupported")
    scan = scan_frames(data)
    if not scan.clean:
        raise UnrecoverableLogError("checkpoint image is truncated or corrupt")
    image: Optional[CheckpointImage] = None
    ended = False
    for body in scan.bodies:
        tag = body[0]
        if tag == _CKPT_HEADER:
            _, lsn, ntxn, nmsg, nq = struct.unpack("<BQQQQ", body)
            image = CheckpointImage(lsn, ntxn, nmsg, nq)
        elif tag == _CKPT_QUEUE:
            if image is None:
                raise UnrecoverableLogError("checkpoint queue record before header")
            _, qid, nlen = struct.unpack_from("<BQI", body, 0)
            off = 13
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            dur, order, seq, enq, deq = struct.unpack_from("<BBQQQ", body, off)
            image.queues.append(CheckpointQueue(qid, name, dur, order, seq, enq, deq))
        elif tag == _CKPT_MESSAGE:
            if image is None:
                raise UnrecoverableLogError("checkpoint message record before header")
            _, qid, mid, prio, seq, plen = struct.unpack_from("<BQQqQI", body, 0)
            payload = body[37:37 + plen]
            image.messages.append(CheckpointMessage(qid, mid, prio, seq, payload))
        elif tag == _CKPT_END:
            ended = True
        else:
            raise UnrecoverableLogError(f"unknown checkpoint record tag {tag}")
    if image is None or not ended:
        raise UnrecoverableLogError("checkpoint image incomplete")
    return image


# -- recovery -------------------------------------------------------------------


@dataclass
class RecoveredMessage:
    message_id: int
    priority: int
    enqueue_seq: int
    payload: bytes


@dataclass
class RecoveredQueue:
    queue_id: int
    name: str
    durability: int
    ordering: int
    next_enqueue_seq: int = 1
    enqueue_count: int = 0
    dequeue_count: int = 0
    messages: list[RecoveredMessage] = field(default_factory=list)


@dataclass
class RecoveredState:
    queues: dict[int, RecoveredQueue] = field(default_factory=dict)
    next_txn_id: int = 1
    next_message_id: int = 1
    next_queue_id: int = 1
    next_lsn: int = 1
    checkpoint_lsn: int = 0
    truncate_log_at: Optional[int] = None  # byte offset of a torn tail, if any


def recover(directory: Path) -> RecoveredState:
    """Rebuild exactly the committed state from checkpoint image + log.

    Pure read: never modifies files. Idempotent by construction. Volatile
    queue *definitions* are restored (their CREATE_QUEUE records are logged);
    their contents were never logged so they come back empty.
    """
    directory = Path(directory)
    state = RecoveredState()
    image = read_checkpoint(directory)
    if image is not None:
        state.checkpoint_lsn = image.lsn_at_checkpoint
        state.next_txn_id = image.next_txn_id
        state.next_message_id = image.next_message_id
        state.next_queue_id = image.next_queue_id
        state.next_lsn = image.lsn_at_checkpoint + 1
        for q in image.queues:
            state.queues[q.queue_id] = RecoveredQueue(
                q.queue_id, q.name, q.durability, q.ordering,
                next_enqueue_seq=q.next_enqueue_seq,
                enqueue_count=q.enqueue_count, dequeue_count=q.dequeue_count)
        for m in image.messages:
            rq = state.queues.get(m.queue_id)
            if rq is None:
                raise UnrecoverableLogError("checkpoint message for unknown queue")
            rq.messages.append(RecoveredMessage(m.message_id, m.priority, m.enqueue_seq, m.payload))
            state.next_message_id = max(state.next_message_id, m.message_id + 1)

    log_path = directory / LOG_FILE
    if not log_path.exists():
        return state
    data = log_path.read_bytes()
    if len(data) < HEADER_SIZE:
        # A log so short it lacks even the header is a torn creation.
        state.truncate_log_at = len(data)
        return state
    if data[:4] != LOG_MAGIC:
        raise UnrecoverableLogError("log file has bad magic")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise UnrecoverableLogError(f"log format version {version} unsupported")

    scan = scan_frames(data)
    if not scan.clean:
        state.truncate_log_at = scan.good_end

    last_lsn = 0
    in_flight: dict[int, list[LogRecord]] = {}
    began: set[int] = set()
    for body in scan.bodies:
        rec = decode_body(body)
        if rec.lsn <= last_lsn:
            raise UnrecoverableLogError(
                f"lsn {rec.lsn} not increasing after {last_lsn}")
        last_lsn = rec.lsn
        if rec.lsn <= state.checkpoint_lsn:
            continue
        kind = rec.kind
        if kind == RecordKind.BEGIN:
            began.add(rec.txn_id)
            in_flight.setdefault(rec.txn_id, [])
        elif kind in (RecordKind.INSERT, RecordKind.DELETE,
                      RecordKind.CREATE_QUEUE, RecordKind.DESTROY_QUEUE):
            if rec.txn_id not in began:
                raise UnrecoverableLogError(
                    f"effect record lsn {rec.lsn} without BEGIN for txn {rec.txn_id}")
            in_flight.setdefault(rec.txn_id, []).append(rec)
        elif kind == RecordKind.COMMIT:
            _apply_committed(state, in_flight.pop(rec.txn_id, []))
            began.discard(rec.txn_id)
        elif kind == RecordKind.ABORT:
            in_flight.pop(rec.txn_id, None)
            began.discard(rec.txn_id)
        elif kind == RecordKind.CHECKPOINT:
            pass  # position marker only
        state.next_txn_id = max(state.next_txn_id, rec.txn_id + 1)
        if rec.message_id:
            state.next_message_id = max(state.next_message_id, rec.message_id + 1)
        if rec.queue_id:
            state.next_queue_id = max(state.next_queue_id, rec.queue_id + 1)
    state.next_lsn = max(state.next_lsn, last_lsn + 1)
    return state


def _apply_committed(state: RecoveredState, records: Iterable[LogRecord]) -> None:
    for rec in records:
        if rec.kind == RecordKind.CREATE_QUEUE:
            state.queues[rec.queue_id] = RecoveredQueue(
                rec.queue_id, rec.name, rec.durability, rec.ordering)
        elif rec.kind == RecordKind.DESTROY_QUEUE:
            state.queues.pop(rec.queue_id, None)
        elif rec.kind == RecordKind.INSERT:
            rq = state.queues.get(rec.queue_id)
            if rq is None:
                raise UnrecoverableLogError(
                    f"committed INSERT into unknown queue {rec.queue_id}")
            seq = rq.next_enqueue_seq
            rq.next_enqueue_seq += 1
            rq.messages.append(RecoveredMessage(rec.message_id, rec.priority, seq, rec.payload))
            rq.enqueue_count += 1
        elif rec.kind == RecordKind.DELETE:
            rq = state.queues.get(rec.queue_id)
            if rq is None:
                raise UnrecoverableLogError(
                    f"committed DELETE in unknown queue {rec.queue_id}")
            for i, m in enumerate(rq.messages):
                if m.message_id == rec.message_id:
                    del rq.messages[i]
                    break
            else:
                raise UnrecoverableLogError(
                    f"committed DELETE of unknown message {rec.message_id}")
            rq.dequeue_count += 1
