"""Crash-durable, append-only, multi-topic message log.

Each topic is a directory of segment files holding length-prefixed frames;
consumer positions live in per-consumer cursor files next to the segments.
Appends are flushed to stable storage before they are acknowledged, so after
a crash at any point every acknowledged record is still readable and at most
the final, unacknowledged frame is lost.

On-disk frame layout (little-endian), the byte-exact contract for this log
and for every other CRC-framed file in the platform:

    [u32 length][u32 crc32][u64 offset][u64 written_ms][u16 key_len][key][payload]

``length`` counts everything after the length field itself; ``crc32`` covers
``key + payload``. A frame is *torn* iff its length field points past the end
of the file, the remaining bytes cannot hold any frame, or the file's final
frame fails validation. An invalid frame anywhere else is corruption: the
topic is flagged read-only and the error is surfaced, never repaired silently.
"""

from __future__ import annotations

import os
import re
import struct
import threading
import zlib
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from filelock import FileLock, Timeout

from .errors import ScreenforgeError
from .util import atomic_write, fsync_dir, now_utc, utc_ms

TOPIC_NAME_RE = re.compile(r"^[a-z0-9-]{1,64}$")
MAX_PAYLOAD = 16 * 1024 * 1024
DEFAULT_SEGMENT_MAX = 1 << 30  # 1 GiB, then roll

_HEADER = struct.Struct("<IIQQH")  # length, crc, offset, written_ms, key_len
_FIXED_AFTER_LENGTH = 4 + 8 + 8 + 2  # crc + offset + written_ms + key_len
_MIN_FRAME = _HEADER.size  # 26 bytes: smallest possible complete frame

_SEGMENT_RE = re.compile(r"^segment-(\d+)\.log$")
_READONLY_MARKER = "READONLY"


class QueueError(ScreenforgeError):
    code = "QUEUE"


class BadTopicName(QueueError):
    code = "BAD_TOPIC_NAME"


class UnknownTopic(QueueError):
    code = "UNKNOWN_TOPIC"


class PayloadTooLarge(QueueError):
    code = "PAYLOAD_TOO_LARGE"


class TopicCorrupt(QueueError):
    """Invalid frame before the tail: an integrity violation, not a torn write."""

    code = "TOPIC_CORRUPT"


class TopicReadOnly(QueueError):
    code = "TOPIC_READ_ONLY"


class TopicLocked(QueueError):
    code = "TOPIC_LOCKED"


class OffsetOutOfRange(QueueError):
    code = "OFFSET_OUT_OF_RANGE"


class CursorRegression(QueueError):
    code = "CURSOR_REGRESSION"


class CursorCorrupt(QueueError):
    code = "CURSOR_CORRUPT"


@dataclass(frozen=True)
class TopicRecord:
    topic: str
    offset: int
    key: bytes
    payload: bytes
    checksum: int
    written_at: datetime


def encode_frame(offset: int, written_ms: int, key: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(key + payload) & 0xFFFFFFFF
    length = _FIXED_AFTER_LENGTH + len(key) + len(payload)
    return _HEADER.pack(length, crc, offset, written_ms, len(key)) + key + payload


# Frame scan outcomes. TORN means the bytes at this position can never form a
# complete frame; INVALID means a complete candidate frame failed its checks
# (the caller decides torn vs corrupt based on whether it is the final frame).
_OK, _TORN, _INVALID, _END = range(4)


def _decode_at(buf: bytes, pos: int):
    """Return (status, frame_tuple_or_None, next_pos)."""
    remaining = len(buf) - pos
    if remaining == 0:
        return _END, None, pos
    if remaining < _MIN_FRAME:
        return _TORN, None, pos
    length, crc, offset, written_ms, key_len = _HEADER.unpack_from(buf, pos)
    if length > remaining - 4:
        return _TORN, None, pos
    end = pos + 4 + length
    if length < _FIXED_AFTER_LENGTH or key_len > length - _FIXED_AFTER_LENGTH:
        return _INVALID, None, end
    body_start = pos + _HEADER.size
    key = buf[body_start : body_start + key_len]
    payload = buf[body_start + key_len : end]
    if zlib.crc32(key + payload) & 0xFFFFFFFF != crc:
        return _INVALID, None, end
    return _OK, (offset, written_ms, key, payload, crc), end


def scan_frames(buf: bytes):
    """Yield (pos, offset, written_ms, key, payload, crc, end) for each valid
    frame; stop before the first invalid byte region."""
    pos = 0
    while True:
        status, frame, end = _decode_at(buf, pos)
        if status != _OK:
            return
        offset, written_ms, key, payload, crc = frame
        yield pos, offset, written_ms, key, payload, crc, end
        pos = end


@dataclass
class _Segment:
    path: Path
    number: int
    size: int


class _Topic:
    def __init__(self, name: str, directory: Path):
        self.name = name
        self.dir = directory
        self.mutex = threading.RLock()
        self.segments: list[_Segment] = []
        # one (segment_index, byte_pos, frame_size) entry per offset
        self.index: list[tuple[int, int, int]] = []
        self.next_offset = 0
        self.writer: object | None = None  # open file handle of last segment
        self.file_lock: FileLock | None = None

    @property
    def read_only(self) -> bool:
        return (self.dir / _READONLY_MARKER).exists()


class QueueLog:
    """Multi-topic durable log rooted at ``<root>/``.

    Thread-safe within one process; the cross-process single-writer rule is
    enforced with a lock file per topic directory. Existing topics are
    recovered (torn tail truncated) the first time they are touched.
    """

    def __init__(self, root: Path | str, *, segment_max_bytes: int = DEFAULT_SEGMENT_MAX,
                 fsync: bool = True):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.segment_max_bytes = segment_max_bytes
        self.fsync = fsync
        self._topics: dict[str, _Topic] = {}
        self._mutex = threading.Lock()
        self._cursor_locks: dict[str, threading.Lock] = {}

    # -- topic plumbing ----------------------------------------------------

    def topics(self) -> list[str]:
        found = {p.name for p in self.root.iterdir() if p.is_dir()} if self.root.exists() else set()
        return sorted(found | set(self._topics))

    def _topic(self, name: str, *, create: bool) -> _Topic:
        if not TOPIC_NAME_RE.match(name):
            raise BadTopicName(f"invalid topic name: {name!r}")
        with self._mutex:
            topic = self._topics.get(name)
            if topic is None:
                directory = self.root / name
                if not directory.exists():
                    if not create:
                        raise UnknownTopic(f"no such topic: {name}")
                    directory.mkdir(parents=True)
                    fsync_dir(self.root)
                topic = _Topic(name, directory)
                self._topics[name] = topic
                self._recover_locked(topic)
            return topic

    def _segments_on_disk(self, topic: _Topic) -> list[_Segment]:
        segs = []
        for p in topic.dir.iterdir():
            m = _SEGMENT_RE.match(p.name)
            if m:
                segs.append(_Segment(p, int(m.group(1)), p.stat().st_size))
        segs.sort(key=lambda s: s.number)
        return segs

    # -- recovery ----------------------------------------------------------

    def recover(self, topic: str) -> int:
        """Scan frames, truncate a torn tail if present, return next offset.

        Idempotent: a second call leaves the files byte-identical. Corruption
        anywhere except the final frame of the final segment flags the topic
        read-only and raises :class:`TopicCorrupt`.
        """
        t = self._topic(topic, create=False)
        with t.mutex:
            return self._recover_locked(t)

    def _recover_locked(self, t: _Topic) -> int:
        if t.writer is not None:
            t.writer.close()
            t.writer = None
        segments = self._segments_on_disk(t)
        index: list[tuple[int, int, int]] = []
        expected = 0
        corrupt = None
        for i, seg in enumerate(segments):
            data = seg.path.read_bytes()
            last_segment = i == len(segments) - 1
            pos = 0
            while corrupt is None:
                status, frame, end = _decode_at(data, pos)
                if status == _END:
                    break
                if status == _OK:
                    offset = frame[0]
                    if offset != expected:
                        # a wrong stored offset is indistinguishable from a
                        # damaged header; classify like a failed checksum
                        if last_segment and end == len(data):
                            self._truncate(seg, pos)
                            break
                        corrupt = (seg, pos, f"offset {offset} where {expected} expected")
                        break
                    index.append((i, pos, end - pos))
                    expected += 1
                    pos = end
                    continue
                if status == _TORN:
                    if last_segment:
                        self._truncate(seg, pos)
                        break
                    corrupt = (seg, pos, "torn frame before final segment")
                    break
                # complete candidate frame that failed validation
                if last_segment and end == len(data):
                    self._truncate(seg, pos)
                    break
                corrupt = (seg, pos, "invalid frame before tail")
                break
            if corrupt:
                break
        # keep the valid prefix readable even when the scan found corruption
        t.segments = segments
        t.index = index
        t.next_offset = expected
        if corrupt:
            seg, pos, why = corrupt
            (t.dir / _READONLY_MARKER).write_bytes(b"")
            raise TopicCorrupt(
                f"topic {t.name}: {why} at {seg.path.name}:{pos}; topic flagged read-only",
                topic=t.name, segment=seg.path.name, position=pos, offset=expected,
            )
        return expected

    def _truncate(self, seg: _Segment, size: int) -> None:
        if seg.size == size:
            return
        with open(seg.path, "rb+") as fh:
            fh.truncate(size)
            fh.flush()
            os.fsync(fh.fileno())
        seg.size = size

    # -- append ------------------------------------------------------------

    def append(self, topic: str, key: bytes, payload: bytes) -> int:
        if len(payload) > MAX_PAYLOAD:
            raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds 16 MiB")
        t = self._topic(topic, create=True)
        with t.mutex:
            if t.read_only:
                raise TopicReadOnly(f"topic {topic} is read-only after corruption")
            self._acquire_writer_lock(t)
            offset = t.next_offset
            frame = encode_frame(offset, utc_ms(now_utc()), key, payload)
            seg = self._writable_segment(t, len(frame))
            pos = seg.size
            try:
                t.writer.write(frame)
                t.writer.flush()
                if self.fsync:
                    os.fsync(t.writer.fileno())
            except OSError:
                # leave the log unchanged past the last valid frame
                try:
                    t.writer.seek(pos)
                    t.writer.truncate(pos)
                except OSError:
                    pass
                raise
            seg.size = pos + len(frame)
            t.index.append((t.segments.index(seg), pos, len(frame)))
            t.next_offset = offset + 1
            return offset

    def _acquire_writer_lock(self, t: _Topic) -> None:
        if t.file_lock is not None:
            return
        lock = FileLock(str(t.dir / ".writer.lock"))
        try:
            lock.acquire(timeout=5)
        except Timeout:
            raise TopicLocked(f"topic {t.name} is locked by another writer") from None
        t.file_lock = lock

    def _writable_segment(self, t: _Topic, frame_len: int) -> _Segment:
        if not t.segments:
            seg = _Segment(t.dir / "segment-0.log", 0, 0)
            seg.path.touch()
            fsync_dir(t.dir)
            t.segments.append(seg)
        seg = t.segments[-1]
        if seg.size > 0 and seg.size + frame_len > self.segment_max_bytes:
            if t.writer is not None:
                t.writer.close()
                t.writer = None
            seg = _Segment(t.dir / f"segment-{seg.number + 1}.log", seg.number + 1, 0)
            seg.path.touch()
            fsync_dir(t.dir)
            t.segments.append(seg)
        if t.writer is None or os.path.basename(t.writer.name) != seg.path.name:
            if t.writer is not None:
                t.writer.close()
            t.writer = open(seg.path, "ab")
        return seg

    # -- read --------------------------------------------------------------

    def read(self, topic: str, from_offset: int, max_records: int) -> list[TopicRecord]:
        t = self._topic(topic, create=False)
        with t.mutex:
            if from_offset < 0:
                raise OffsetOutOfRange(f"negative offset {from_offset}")
            stop = min(from_offset + max_records, t.next_offset)
            out: list[TopicRecord] = []
            for offset in range(from_offset, stop):
                seg_idx, pos, size = t.index[offset]
                seg = t.segments[seg_idx]
                with open(seg.path, "rb") as fh:
                    fh.seek(pos)
                    raw = fh.read(size)
                status, frame, _ = _decode_at(raw, 0)
                if status != _OK or frame[0] != offset:
                    (t.dir / _READONLY_MARKER).write_bytes(b"")
                    raise TopicCorrupt(
                        f"topic {topic}: record at offset {offset} failed its checksum",
                        topic=topic, offset=offset,
                    )
                _, written_ms, key, payload, crc = frame
                out.append(TopicRecord(
                    topic=topic, offset=offset, key=key, payload=payload, checksum=crc,
                    written_at=datetime.fromtimestamp(written_ms / 1000, tz=timezone.utc),
                ))
            return out

    def end_offset(self, topic: str) -> int:
        """Next offset that would be assigned (== record count)."""
        t = self._topic(topic, create=False)
        with t.mutex:
            return t.next_offset

    # -- consumer cursors ----------------------------------------------------

    def _cursor_path(self, topic: str, consumer_id: str) -> Path:
        safe = re.sub(r"[^A-Za-z0-9_-]", "_", consumer_id)
        return self.root / topic / "cursors" / f"{safe}.cur"

    def commit(self, consumer_id: str, topic: str, offset: int) -> None:
        t = self._topic(topic, create=False)
        lock = self._cursor_locks.setdefault(consumer_id, threading.Lock())
        with t.mutex, lock:
            if offset < 0 or offset >= t.next_offset:
                raise OffsetOutOfRange(
                    f"commit at {offset} but topic {topic} ends at {t.next_offset - 1}")
            current = self._read_cursor(topic, consumer_id)
            if current is not None and offset < current:
                raise CursorRegression(
                    f"cursor for {consumer_id}@{topic} already at {current}, refusing {offset}")
            path = self._cursor_path(topic, consumer_id)
            path.parent.mkdir(parents=True, exist_ok=True)
            raw = struct.pack("<Q", offset)
            atomic_write(path, raw + struct.pack("<I", zlib.crc32(raw) & 0xFFFFFFFF))

    def committed(self, consumer_id: str, topic: str) -> int | None:
        t = self._topic(topic, create=False)
        with t.mutex:
            return self._read_cursor(topic, consumer_id)

    def resume(self, consumer_id: str, topic: str) -> int:
        """Next position the consumer should read from."""
        committed = self.committed(consumer_id, topic)
        return 0 if committed is None else committed + 1

    def _read_cursor(self, topic: str, consumer_id: str) -> int | None:
        path = self._cursor_path(topic, consumer_id)
        if not path.exists():
            return None
        raw = path.read_bytes()
        if len(raw) != 12:
            raise CursorCorrupt(f"cursor file {path} has {len(raw)} bytes, expected 12")
        offset = struct.unpack("<Q", raw[:8])[0]
        crc = struct.unpack("<I", raw[8:])[0]
        if zlib.crc32(raw[:8]) & 0xFFFFFFFF != crc:
            raise CursorCorrupt(f"cursor file {path} failed its checksum")
        return offset

    def close(self) -> None:
        with self._mutex:
            for t in self._topics.values():
                with t.mutex:
                    if t.writer is not None:
                        t.writer.close()
                        t.writer = None
                    if t.file_lock is not None:
                        t.file_lock.release()
                        t.file_lock = None
            self._topics.clear()

    def __enter__(self) -> "QueueLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
