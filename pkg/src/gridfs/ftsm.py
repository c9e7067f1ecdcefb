"""Parallel-stream file transfer with resume and end-to-end integrity.

A transfer is negotiated on the authenticated control connection
(XFER_OFFER / XFER_ACCEPT, or XFER_RESUME when the receiver holds partial
state), then the bytes travel over N data connections opened with
HELLO(transfer_id, stream_index). The planned region is ceiling-split into
N contiguous spans, one per stream, and each span is sent as sequential
CHUNK frames:

    transfer_id(16) | stream_index(1) | offset(8 BE) | length(4 BE) | payload

Offsets are absolute file offsets; the receiver writes each payload at
exactly its offset, so any interleaving of streams reassembles the same
bytes. After draining, the sender's XFER_DONE carries the whole-region
MD5; the receiver re-reads its region and compares before acknowledging.
A whole-file transfer replaces the destination (the offer carries a
truncate flag, so a shorter file drops any stale tail); an explicit
region only ever touches its own byte range.

The receiver persists progress beside the destination in `<dst>.xferstate`:
the transfer geometry plus a chunk-granularity bitmap, rewritten atomically
after every chunk, data first. An interrupted transfer resumes from the
sidecar — the original chunk grid is preserved and only missing chunks are
resent, round-robin across however many streams the resuming sender brings.
The sidecar is removed only on a verified completion.

A memory-to-memory mode (zero generator into a discarding sink) drives the
identical protocol path with no disk at either end, for measuring raw
protocol throughput.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import secchan, wire
from .errors import (
    BadRequest,
    ConnectionLost,
    EmptyRegion,
    GridfsError,
    IncompleteTransfer,
    IntegrityMismatch,
    NoSuchFile,
    PermissionDenied,
    ProtocolError,
    StateCorrupt,
    Status,
    StreamLost,
)
from .perms import Account, ActionKind, GuardedAction, check
from .secchan import Channel
from .wire import FrameType, Mode, SecurityMode, SessionParams

log = logging.getLogger("gridfs.ftsm")

CHUNK_HEADER = struct.Struct(">16sBQI")    # transfer_id, stream, offset, length
STATE_SUFFIX = ".xferstate"
EMPTY_MD5 = bytes.fromhex("d41d8cd98f00b204e9800998ecf8427e")

# XFER_* field tags
X_TRANSFER = 1
X_PATH = 2
X_REGION_OFFSET = 3
X_REGION_LENGTH = 4
X_STREAMS = 5
X_CHUNK_SIZE = 6
X_MD5 = 7
X_STATUS = 8
X_BITMAP = 9
X_SINK = 10
X_TOTAL = 11
X_TRUNCATE = 12      # whole-file transfer: drop any stale tail on finish

SINK_FILE = 0
SINK_MEM = 1


def pack_chunk(transfer_id: bytes, stream_index: int, offset: int,
               payload: bytes) -> bytes:
    return CHUNK_HEADER.pack(transfer_id, stream_index, offset,
                             len(payload)) + payload


def unpack_chunk(raw: bytes) -> tuple[bytes, int, int, bytes]:
    if len(raw) < CHUNK_HEADER.size:
        raise BadRequest("short chunk frame")
    transfer_id, stream_index, offset, length = CHUNK_HEADER.unpack(
        raw[:CHUNK_HEADER.size])
    payload = raw[CHUNK_HEADER.size:]
    if len(payload) != length:
        raise BadRequest("chunk length field disagrees with payload")
    return transfer_id, stream_index, offset, payload


def md5_region(path: Path, offset: int, length: int) -> bytes:
    digest = hashlib.md5()
    remaining = length
    with open(path, "rb") as handle:
        handle.seek(offset)
        while remaining:
            piece = handle.read(min(1 << 20, remaining))
            if not piece:
                break
            digest.update(piece)
            remaining -= len(piece)
    return digest.digest()


# -- planning ---------------------------------------------------------------

@dataclass(frozen=True)
class StreamSpan:
    index: int
    offset: int
    length: int


@dataclass(frozen=True)
class ChunkGrid:
    """The fixed chunk geometry of one transfer.

    Chunks are enumerated span-major: all of span 0's chunks first, in
    offset order, then span 1's, and so on. That ordinal numbering is what
    the resume bitmap indexes, so it must never change for a given
    (region, stream_count, chunk_size) triple.
    """

    region_offset: int
    region_length: int
    stream_count: int
    chunk_size: int

    def spans(self) -> list[StreamSpan]:
        if self.region_length == 0:
            return []
        per = -(-self.region_length // self.stream_count)   # ceil
        spans = []
        position = self.region_offset
        end = self.region_offset + self.region_length
        index = 0
        while position < end:
            size = min(per, end - position)
            spans.append(StreamSpan(index, position, size))
            position += size
            index += 1
        return spans

    def chunks(self) -> list[tuple[int, int]]:
        """All (offset, length) chunks in ordinal order."""
        out = []
        for span in self.spans():
            position = span.offset
            span_end = span.offset + span.length
            while position < span_end:
                size = min(self.chunk_size, span_end - position)
                out.append((position, size))
                position += size
        return out

    def chunks_by_span(self) -> list[list[tuple[int, int]]]:
        grouped = []
        for span in self.spans():
            position = span.offset
            span_end = span.offset + span.length
            group = []
            while position < span_end:
                size = min(self.chunk_size, span_end - position)
                group.append((position, size))
                position += size
            grouped.append(group)
        return grouped

    def ordinal_of(self) -> dict[int, int]:
        return {offset: k for k, (offset, _) in enumerate(self.chunks())}


def plan_transfer(file_size: int, region: tuple[int, int] | None,
                  stream_count: int, chunk_size: int) -> ChunkGrid:
    if stream_count < 1:
        raise BadRequest("stream count must be at least 1")
    if chunk_size < 1:
        raise BadRequest("chunk size must be at least 1")
    if region is None:
        offset, length = 0, file_size
    else:
        offset, length = region
    if offset < 0 or length < 0 or offset + length > file_size:
        raise BadRequest("region lies outside the file")
    if length == 0:
        raise EmptyRegion("nothing to transfer")
    return ChunkGrid(offset, length, stream_count, chunk_size)


def assign_missing(grid: ChunkGrid, missing: list[int],
                   streams: int) -> list[list[tuple[int, int]]]:
    """Group missing ordinals into consecutive runs, dealt round-robin."""
    chunks = grid.chunks()
    runs: list[list[tuple[int, int]]] = []
    previous = None
    for ordinal in missing:
        if previous is not None and ordinal == previous + 1:
            runs[-1].append(chunks[ordinal])
        else:
            runs.append([chunks[ordinal]])
        previous = ordinal
    assignment: list[list[tuple[int, int]]] = [[] for _ in range(streams)]
    for k, run in enumerate(runs):
        assignment[k % streams].extend(run)
    return [chunks_i for chunks_i in assignment if chunks_i]


# -- persisted receiver state ----------------------------------------------

S_TRANSFER = 1
S_REGION_OFFSET = 2
S_REGION_LENGTH = 3
S_CHUNK_SIZE = 4
S_STREAMS = 5
S_BITMAP = 6
S_TOTAL = 7


@dataclass
class TransferState:
    transfer_id: bytes
    grid: ChunkGrid
    bitmap: bytearray
    total_received: int = 0

    @classmethod
    def fresh(cls, transfer_id: bytes, grid: ChunkGrid) -> "TransferState":
        n = len(grid.chunks())
        return cls(transfer_id, grid, bytearray((n + 7) // 8))

    def mark(self, ordinal: int, length: int) -> None:
        self.bitmap[ordinal // 8] |= 1 << (ordinal % 8)
        self.total_received += length

    def has(self, ordinal: int) -> bool:
        return bool(self.bitmap[ordinal // 8] & (1 << (ordinal % 8)))

    def missing(self) -> list[int]:
        return [k for k in range(len(self.grid.chunks())) if not self.has(k)]

    def complete(self) -> bool:
        return not self.missing()

    def encode(self) -> bytes:
        return wire.encode_fields({
            S_TRANSFER: self.transfer_id,
            S_REGION_OFFSET: wire.u64(self.grid.region_offset),
            S_REGION_LENGTH: wire.u64(self.grid.region_length),
            S_CHUNK_SIZE: wire.u32(self.grid.chunk_size),
            S_STREAMS: wire.u8(self.grid.stream_count),
            S_BITMAP: bytes(self.bitmap),
            S_TOTAL: wire.u64(self.total_received),
        })

    @classmethod
    def decode(cls, raw: bytes, dst_size: int | None = None) -> "TransferState":
        try:
            fields = wire.decode_fields(raw)
            grid = ChunkGrid(
                wire.read_uint(fields, S_REGION_OFFSET),
                wire.read_uint(fields, S_REGION_LENGTH),
                wire.read_uint(fields, S_STREAMS),
                wire.read_uint(fields, S_CHUNK_SIZE))
            state = cls(fields.get(S_TRANSFER, b""), grid,
                        bytearray(fields.get(S_BITMAP, b"")),
                        wire.read_uint(fields, S_TOTAL, 0))
        except GridfsError as exc:
            raise StateCorrupt(f"unreadable transfer state: {exc}") from None
        chunks = grid.chunks()
        if len(state.bitmap) != (len(chunks) + 7) // 8 or \
                len(state.transfer_id) != 16 or grid.stream_count < 1 or \
                grid.chunk_size < 1:
            raise StateCorrupt("transfer state disagrees with its geometry")
        tail_bits = len(chunks) % 8
        if tail_bits and state.bitmap and \
                state.bitmap[-1] >> tail_bits:
            raise StateCorrupt("bitmap marks chunks beyond the region")
        if dst_size is not None:
            for k, (offset, length) in enumerate(chunks):
                if state.has(k) and offset + length > dst_size:
                    raise StateCorrupt(
                        "state claims bytes beyond the destination size")
        return state


def state_path(dst: Path) -> Path:
    return dst.with_name(dst.name + STATE_SUFFIX)


def load_state(dst: Path) -> TransferState | None:
    sidecar = state_path(dst)
    if not sidecar.exists():
        return None
    dst_size = dst.stat().st_size if dst.exists() else 0
    return TransferState.decode(sidecar.read_bytes(), dst_size)


def save_state(dst: Path, state: TransferState) -> None:
    sidecar = state_path(dst)
    tmp = sidecar.with_name(sidecar.name + ".tmp")
    tmp.write_bytes(state.encode())
    os.replace(tmp, sidecar)


# -- receiving end (either side, depending on direction) --------------------

class RegionReceiver:
    """Writes validated chunks at their absolute offsets and keeps the
    sidecar current. Data lands before the bitmap marks it, so a crash
    can lose at most the marking, never claim unwritten bytes."""

    def __init__(self, dst: Path, transfer_id: bytes, grid: ChunkGrid,
                 state: TransferState | None = None,
                 truncate_to: int | None = None):
        self.dst = Path(dst)
        self.grid = grid
        self.state = state or TransferState.fresh(transfer_id, grid)
        self.transfer_id = transfer_id
        self.truncate_to = truncate_to
        self._ordinals = grid.ordinal_of()
        self._lengths = dict(grid.chunks())
        self._lock = threading.Lock()
        self.state.transfer_id = transfer_id
        self.dst.parent.mkdir(parents=True, exist_ok=True)
        self._fd = os.open(self.dst, os.O_RDWR | os.O_CREAT, 0o644)

    def write_chunk(self, offset: int, payload: bytes) -> None:
        ordinal = self._ordinals.get(offset)
        if ordinal is None or self._lengths[offset] != len(payload):
            raise BadRequest("chunk does not lie on the transfer grid")
        os.pwrite(self._fd, payload, offset)
        with self._lock:
            if self.state.has(ordinal):
                return     # duplicate delivery after a resume race: harmless
            self.state.mark(ordinal, len(payload))
            save_state(self.dst, self.state)

    def complete(self) -> bool:
        with self._lock:
            return self.state.complete()

    def finish(self, expected_md5: bytes) -> int:
        """Verify the region against the sender's digest; only a match
        removes the sidecar."""
        try:
            if self.truncate_to is not None:
                # whole-file transfer over a longer predecessor
                os.ftruncate(self._fd, self.truncate_to)
            os.fsync(self._fd)
        finally:
            os.close(self._fd)
            self._fd = -1
        if not self.state.complete():
            raise IncompleteTransfer(
                f"{len(self.state.missing())} chunks never arrived")
        actual = md5_region(self.dst, self.grid.region_offset,
                            self.grid.region_length)
        if actual != expected_md5:
            raise IntegrityMismatch("region digest differs from sender's")
        try:
            state_path(self.dst).unlink()
        except FileNotFoundError:
            pass
        return self.state.total_received

    def abort(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1


class MemSink:
    """Discarding receiver for the memory-to-memory benchmark."""

    def __init__(self, transfer_id: bytes):
        self.transfer_id = transfer_id
        self._lock = threading.Lock()
        self.total_received = 0

    def write_chunk(self, offset: int, payload: bytes) -> None:
        with self._lock:
            self.total_received += len(payload)

    def complete(self) -> bool:
        return False    # open-ended: quiesce by idleness, not by bitmap

    def abort(self) -> None:
        pass


# -- server side ------------------------------------------------------------

class TransferSession:
    """Server-side rendezvous record joining control and data connections."""

    def __init__(self, transfer_id: bytes, account: Account, direction: Mode,
                 security: SecurityMode, receiver=None, sender_ctx=None):
        self.transfer_id = transfer_id
        self.account = account
        self.direction = direction
        self.security = security
        self.receiver = receiver          # push: RegionReceiver or MemSink
        self.sender_ctx = sender_ctx      # pull: (src path, assignments)
        self._cond = threading.Condition()
        self._active = 0
        self._last_activity = time.monotonic()

    def attach(self) -> None:
        with self._cond:
            self._active += 1
            self._last_activity = time.monotonic()

    def detach(self) -> None:
        with self._cond:
            self._active -= 1
            self._last_activity = time.monotonic()
            self._cond.notify_all()

    def touch(self) -> None:
        with self._cond:
            self._last_activity = time.monotonic()
            self._cond.notify_all()

    def wait_quiesce(self, timeout: float, grace: float = 1.0) -> None:
        """Block until the receiver is complete, or the data connections
        have gone idle for `grace` seconds, or `timeout` expires."""
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                if self.receiver is not None and self.receiver.complete():
                    return
                now = time.monotonic()
                if now >= deadline:
                    return
                if self._active == 0 and now - self._last_activity >= grace:
                    return
                self._cond.wait(min(0.1, deadline - now))


class TransferRegistry:
    def __init__(self):
        self._lock = threading.Lock()
        self._sessions: dict[bytes, TransferSession] = {}

    def register(self, session: TransferSession) -> None:
        with self._lock:
            if session.transfer_id in self._sessions:
                raise BadRequest("transfer id already in use")
            self._sessions[session.transfer_id] = session

    def lookup(self, transfer_id: bytes) -> TransferSession | None:
        with self._lock:
            return self._sessions.get(transfer_id)

    def remove(self, transfer_id: bytes) -> None:
        with self._lock:
            self._sessions.pop(transfer_id, None)


class FtsmService:
    """Handles FTSM control sessions and their data connections.

    `resolver(account, relative) -> Path` maps an offered path to a local
    destination; the default confines it to the account sandbox behind the
    file permission gate. The task runner substitutes its own resolver to
    stage into per-set work directories.
    """

    def __init__(self, registry: TransferRegistry, drain_timeout: float = 30.0,
                 gate=check, resolver=None):
        self.registry = registry
        self.drain_timeout = drain_timeout
        self.gate = gate
        self.resolver = resolver

    def _resolve(self, account: Account, relative: str) -> Path:
        if self.resolver is not None:
            return self.resolver(account, relative)
        from .dfsm import resolve_path    # local import: avoids a cycle
        target = resolve_path(account.sandbox_root, relative)
        denial = self.gate(account, GuardedAction(ActionKind.FILE_IO, target))
        if denial is not None:
            raise PermissionDenied(denial)
        return target

    # control connection, mode FTSM_PUSH: the peer sends, this node receives

    def serve_push(self, channel: Channel, account: Account) -> None:
        while True:
            try:
                frame = channel.expect(FrameType.XFER_OFFER)
            except ConnectionLost:
                return
            try:
                self._one_push(channel, account, frame.payload)
            except GridfsError as exc:
                log.debug("push transfer failed: %s", exc)
                channel.send_error(exc)

    def _one_push(self, channel: Channel, account: Account,
                  offer_raw: bytes) -> None:
        fields = wire.decode_fields(offer_raw)
        transfer_id = fields.get(X_TRANSFER, b"")
        if len(transfer_id) != 16:
            raise BadRequest("transfer id must be 16 bytes")
        sink = wire.read_uint(fields, X_SINK, SINK_FILE)
        if sink == SINK_MEM:
            session = TransferSession(transfer_id, account, Mode.FTSM_PUSH,
                                      channel.params.security,
                                      receiver=MemSink(transfer_id))
            reply = (FrameType.XFER_ACCEPT,
                     wire.encode_fields({X_TRANSFER: transfer_id}))
            self._register_and_reply(channel, session, reply)
            self._finish_mem_push(channel, session)
            return

        region_offset = wire.read_uint(fields, X_REGION_OFFSET, 0)
        region_length = wire.read_uint(fields, X_REGION_LENGTH)
        streams = wire.read_uint(fields, X_STREAMS, 1)
        chunk_size = wire.read_uint(fields, X_CHUNK_SIZE,
                                    channel.params.buffer_size)
        whole_file = bool(wire.read_uint(fields, X_TRUNCATE, 0))
        relative = fields.get(X_PATH, b"").decode("utf-8")
        dst = self._resolve(account, relative)

        if region_length == 0:
            dst.parent.mkdir(parents=True, exist_ok=True)
            if whole_file:
                dst.write_bytes(b"")
            else:
                dst.touch()
            session = TransferSession(transfer_id, account, Mode.FTSM_PUSH,
                                      channel.params.security)
            reply = (FrameType.XFER_ACCEPT,
                     wire.encode_fields({X_TRANSFER: transfer_id}))
            self._register_and_reply(channel, session, reply)
            self._finish_push(channel, session)
            return

        state = None
        try:
            state = load_state(dst)
        except StateCorrupt:
            log.warning("discarding corrupt transfer state next to %s",
                        dst.name)
            state_path(dst).unlink(missing_ok=True)
        if state is not None and (
                state.grid.region_offset != region_offset or
                state.grid.region_length != region_length or
                state.grid.chunk_size != chunk_size):
            # different transfer parameters: the old remnant is useless
            state_path(dst).unlink(missing_ok=True)
            state = None

        if state is not None:
            end = state.grid.region_offset + state.grid.region_length
            receiver = RegionReceiver(dst, transfer_id, state.grid, state,
                                      truncate_to=end if whole_file else None)
            reply = (FrameType.XFER_RESUME, wire.encode_fields({
                X_TRANSFER: transfer_id,
                X_REGION_OFFSET: wire.u64(state.grid.region_offset),
                X_REGION_LENGTH: wire.u64(state.grid.region_length),
                X_STREAMS: wire.u8(state.grid.stream_count),
                X_CHUNK_SIZE: wire.u32(state.grid.chunk_size),
                X_BITMAP: bytes(state.bitmap),
            }))
        else:
            grid = ChunkGrid(region_offset, region_length, max(1, streams),
                             chunk_size)
            end = region_offset + region_length
            receiver = RegionReceiver(dst, transfer_id, grid,
                                      truncate_to=end if whole_file else None)
            reply = (FrameType.XFER_ACCEPT,
                     wire.encode_fields({X_TRANSFER: transfer_id}))
        session = TransferSession(transfer_id, account, Mode.FTSM_PUSH,
                                  channel.params.security, receiver=receiver)
        self._register_and_reply(channel, session, reply)
        self._finish_push(channel, session)

    def _register_and_reply(self, channel: Channel, session: TransferSession,
                            reply: tuple[FrameType, bytes]) -> None:
        self.registry.register(session)
        try:
            channel.send(*reply)
        except BaseException:
            self.registry.remove(session.transfer_id)
            if session.receiver is not None:
                session.receiver.abort()
            raise

    def _finish_push(self, channel: Channel,
                     session: TransferSession) -> None:
        try:
            frame = channel.expect(FrameType.XFER_DONE)
        except ConnectionLost:
            # sender vanished: keep the sidecar, but let late or still
            # draining data connections land their chunks first
            if session.receiver is not None:
                session.wait_quiesce(min(5.0, self.drain_timeout))
            self.registry.remove(session.transfer_id)
            if session.receiver is not None:
                session.receiver.abort()
            return
        try:
            fields = wire.decode_fields(frame.payload)
            expected_md5 = fields.get(X_MD5, b"")
            session.wait_quiesce(self.drain_timeout)
            if session.receiver is None:    # zero-length region
                if expected_md5 != EMPTY_MD5:
                    raise IntegrityMismatch("digest of empty region differs")
                total = 0
            else:
                total = session.receiver.finish(expected_md5)
            channel.send(FrameType.XFER_DONE, wire.encode_fields({
                X_TRANSFER: session.transfer_id,
                X_STATUS: wire.u16(Status.OK),
                X_TOTAL: wire.u64(total),
            }))
        except GridfsError as exc:
            if session.receiver is not None:
                session.receiver.abort()
            channel.send_error(exc)
        finally:
            self.registry.remove(session.transfer_id)

    def _finish_mem_push(self, channel: Channel,
                         session: TransferSession) -> None:
        try:
            frame = channel.expect(FrameType.XFER_DONE)
        except ConnectionLost:
            self.registry.remove(session.transfer_id)
            return
        try:
            fields = wire.decode_fields(frame.payload)
            claimed = wire.read_uint(fields, X_TOTAL, 0)
            session.wait_quiesce(self.drain_timeout)
            received = session.receiver.total_received
            if received != claimed:
                raise IntegrityMismatch(
                    f"sink counted {received} bytes, sender claims {claimed}")
            channel.send(FrameType.XFER_DONE, wire.encode_fields({
                X_TRANSFER: session.transfer_id,
                X_STATUS: wire.u16(Status.OK),
                X_TOTAL: wire.u64(received),
            }))
        except GridfsError as exc:
            channel.send_error(exc)
        finally:
            self.registry.remove(session.transfer_id)

    # control connection, mode FTSM_PULL: the peer receives, this node sends

    def serve_pull(self, channel: Channel, account: Account) -> None:
        while True:
            try:
                frame = channel.expect(FrameType.XFER_OFFER)
            except ConnectionLost:
                return
            try:
                self._one_pull(channel, account, frame.payload)
            except GridfsError as exc:
                log.debug("pull transfer failed: %s", exc)
                channel.send_error(exc)

    def _one_pull(self, channel: Channel, account: Account,
                  offer_raw: bytes) -> None:
        fields = wire.decode_fields(offer_raw)
        transfer_id = fields.get(X_TRANSFER, b"")
        if len(transfer_id) != 16:
            raise BadRequest("transfer id must be 16 bytes")
        relative = fields.get(X_PATH, b"").decode("utf-8")
        src = self._resolve(account, relative)
        if not src.is_file():
            raise NoSuchFile("source does not exist")
        file_size = src.stat().st_size
        streams = wire.read_uint(fields, X_STREAMS, 1)
        chunk_size = wire.read_uint(fields, X_CHUNK_SIZE,
                                    channel.params.buffer_size)
        region_offset = wire.read_uint(fields, X_REGION_OFFSET, 0)
        region_length = wire.read_uint(fields, X_REGION_LENGTH, 2**64 - 1)
        if region_length == 2**64 - 1:
            region_length = max(file_size - region_offset, 0)

        if region_length == 0:
            channel.send(FrameType.XFER_ACCEPT, wire.encode_fields({
                X_TRANSFER: transfer_id,
                X_REGION_OFFSET: wire.u64(region_offset),
                X_REGION_LENGTH: wire.u64(0),
                X_CHUNK_SIZE: wire.u32(chunk_size),
                X_STREAMS: wire.u8(streams),
            }))
            self._finish_pull(channel, transfer_id, src, region_offset, 0)
            return

        grid = plan_transfer(file_size, (region_offset, region_length),
                             max(1, streams), chunk_size)
        bitmap = fields.get(X_BITMAP)
        if bitmap is not None:
            state = TransferState(transfer_id, grid, bytearray(bitmap))
            if len(state.bitmap) != (len(grid.chunks()) + 7) // 8:
                raise StateCorrupt("offered bitmap disagrees with geometry")
            assignments = assign_missing(grid, state.missing(), streams)
        else:
            assignments = grid.chunks_by_span()

        session = TransferSession(transfer_id, account, Mode.FTSM_PULL,
                                  channel.params.security,
                                  sender_ctx=(src, assignments))
        self.registry.register(session)
        try:
            channel.send(FrameType.XFER_ACCEPT, wire.encode_fields({
                X_TRANSFER: transfer_id,
                X_REGION_OFFSET: wire.u64(grid.region_offset),
                X_REGION_LENGTH: wire.u64(grid.region_length),
                X_CHUNK_SIZE: wire.u32(grid.chunk_size),
                X_STREAMS: wire.u8(grid.stream_count),
            }))
            self._finish_pull(channel, transfer_id, src, grid.region_offset,
                              grid.region_length)
        finally:
            self.registry.remove(transfer_id)

    def _finish_pull(self, channel: Channel, transfer_id: bytes, src: Path,
                     region_offset: int, region_length: int) -> None:
        try:
            channel.expect(FrameType.XFER_DONE)
        except ConnectionLost:
            return
        digest = md5_region(src, region_offset, region_length) \
            if region_length else EMPTY_MD5
        channel.send(FrameType.XFER_DONE, wire.encode_fields({
            X_TRANSFER: transfer_id,
            X_STATUS: wire.u16(Status.OK),
            X_MD5: digest,
            X_TOTAL: wire.u64(region_length),
        }))

    # data connections (HELLO carried a transfer_id)

    def serve_data(self, channel: Channel, transfer_id: bytes,
                   stream_index: int) -> None:
        session = self.registry.lookup(transfer_id)
        if session is None:
            channel.send_error(BadRequest("unknown transfer"))
            channel.close()
            return
        if channel.params.security != session.security:
            channel.send_error(BadRequest(
                "data connection security differs from the control session"))
            channel.close()
            return
        if channel.username != session.account.username:
            channel.send_error(BadRequest(
                "data connection user differs from the transfer owner"))
            channel.close()
            return
        session.attach()
        try:
            if session.direction == Mode.FTSM_PUSH:
                self._drain_incoming(channel, session)
            else:
                self._send_assigned(channel, session, stream_index)
        finally:
            session.detach()
            channel.close()

    def _drain_incoming(self, channel: Channel,
                        session: TransferSession) -> None:
        while True:
            try:
                frame = channel.expect(FrameType.CHUNK)
            except ConnectionLost:
                return
            transfer_id, _, offset, payload = unpack_chunk(frame.payload)
            if transfer_id != session.transfer_id:
                channel.send_error(BadRequest("chunk for a different transfer"))
                return
            try:
                session.receiver.write_chunk(offset, payload)
            except GridfsError as exc:
                channel.send_error(exc)
                return
            session.touch()

    def _send_assigned(self, channel: Channel, session: TransferSession,
                       stream_index: int) -> None:
        src, assignments = session.sender_ctx
        if stream_index >= len(assignments):
            return
        try:
            with open(src, "rb") as handle:
                for offset, length in assignments[stream_index]:
                    handle.seek(offset)
                    payload = handle.read(length)
                    if len(payload) != length:
                        raise StreamLost("source shrank mid-transfer")
                    channel.send(FrameType.CHUNK,
                                 pack_chunk(session.transfer_id, stream_index,
                                            offset, payload))
        except (OSError, GridfsError) as exc:
            log.debug("data stream %d failed: %s", stream_index, exc)


# -- client side ------------------------------------------------------------

@dataclass
class TransferReport:
    bytes_moved: int
    seconds: float
    per_stream: list[int]
    resumed: bool = False

    @property
    def mbps(self) -> float:
        return throughput_mbps(self.bytes_moved, self.seconds)


def throughput_mbps(byte_count: int, seconds: float) -> float:
    if byte_count == 0 or seconds <= 0:
        return 0.0
    return byte_count * 8 / (1e6 * seconds)


class TransferClient:
    """Client engine for push, pull and the memory benchmark.

    Transient stream failures are retried with doubling backoff; each
    retry re-offers the transfer, which the receiving side answers with
    resume state, so completed chunks are never resent.
    """

    def __init__(self, address: tuple[str, int], username: str, psk: bytes,
                 security: SecurityMode = SecurityMode.NONSECURE,
                 streams: int = 1, buffer_size: int = wire.DEFAULT_MAX_PAYLOAD,
                 chunk_size: int | None = None, retries: int = 3,
                 backoff: float = 0.25):
        self.address = address
        self.username = username
        self.psk = psk
        self.security = security
        self.streams = max(1, streams)
        self.buffer_size = buffer_size
        self.chunk_size = chunk_size
        self.retries = retries
        self.backoff = backoff

    def _control(self, mode: Mode) -> Channel:
        params = SessionParams(mode, self.security,
                               buffer_size=self.buffer_size,
                               stream_count=self.streams)
        return secchan.connect(self.address, params, self.username, self.psk)

    def _data(self, control: Channel, transfer_id: bytes,
              stream_index: int) -> Channel:
        params = SessionParams(control.params.mode, self.security,
                               buffer_size=control.params.buffer_size,
                               stream_count=control.params.stream_count)
        return secchan.connect(self.address, params, self.username, self.psk,
                               transfer_id=transfer_id,
                               stream_index=stream_index)

    def push(self, local: Path, remote: str,
             region: tuple[int, int] | None = None) -> TransferReport:
        local = Path(local)
        if not local.is_file():
            raise NoSuchFile(f"{local} does not exist")
        attempt = 0
        while True:
            try:
                return self._push_once(local, remote, region)
            except (ConnectionLost, StreamLost):
                attempt += 1
                if attempt > self.retries:
                    raise
                time.sleep(self.backoff * (2 ** (attempt - 1)))

    def _push_once(self, local: Path, remote: str,
                   region: tuple[int, int] | None) -> TransferReport:
        control = self._control(Mode.FTSM_PUSH)
        try:
            return self.push_on(control, local, remote, region)
        finally:
            control.close()

    def push_on(self, control: Channel, local: Path, remote: str,
                region: tuple[int, int] | None = None) -> TransferReport:
        """Run one push over an already established control channel. The
        channel stays open afterwards; the caller owns it."""
        local = Path(local)
        file_size = local.stat().st_size
        whole_file = region is None
        offset, length = region if region is not None else (0, file_size)
        if offset + length > file_size:
            raise BadRequest("region lies outside the file")
        chunk_size = min(self.chunk_size or self.buffer_size,
                         control.params.buffer_size)
        transfer_id = os.urandom(16)
        start = time.monotonic()
        offer = {
            X_TRANSFER: transfer_id,
            X_PATH: remote.encode("utf-8"),
            X_REGION_OFFSET: wire.u64(offset),
            X_REGION_LENGTH: wire.u64(length),
            X_STREAMS: wire.u8(min(self.streams, 255)),
            X_CHUNK_SIZE: wire.u32(chunk_size),
        }
        if whole_file:
            # replace semantics: a shorter file must not keep the old tail
            offer[X_TRUNCATE] = wire.u8(1)
        control.send(FrameType.XFER_OFFER, wire.encode_fields(offer))
        reply = control.expect(FrameType.XFER_ACCEPT, FrameType.XFER_RESUME)
        resumed = reply.frame_type == FrameType.XFER_RESUME
        if length == 0:
            assignments = []
        elif resumed:
            fields = wire.decode_fields(reply.payload)
            grid = ChunkGrid(
                wire.read_uint(fields, X_REGION_OFFSET),
                wire.read_uint(fields, X_REGION_LENGTH),
                wire.read_uint(fields, X_STREAMS),
                wire.read_uint(fields, X_CHUNK_SIZE))
            state = TransferState(transfer_id, grid,
                                  bytearray(fields.get(X_BITMAP, b"")))
            assignments = assign_missing(grid, state.missing(), self.streams)
        else:
            grid = ChunkGrid(offset, length, self.streams, chunk_size)
            assignments = grid.chunks_by_span()

        per_stream = self._run_senders(control, transfer_id, local,
                                       assignments)
        digest = md5_region(local, offset, length) if length else EMPTY_MD5
        control.send(FrameType.XFER_DONE, wire.encode_fields({
            X_TRANSFER: transfer_id, X_MD5: digest}))
        control.expect(FrameType.XFER_DONE)
        return TransferReport(sum(per_stream), time.monotonic() - start,
                              per_stream, resumed)

    def _run_senders(self, control: Channel, transfer_id: bytes, local: Path,
                     assignments: list[list[tuple[int, int]]]) -> list[int]:
        per_stream = [0] * len(assignments)
        failures: list[BaseException] = []

        def run(index: int) -> None:
            try:
                data = self._data(control, transfer_id, index)
                try:
                    with open(local, "rb") as handle:
                        for offset, size in assignments[index]:
                            handle.seek(offset)
                            payload = handle.read(size)
                            if len(payload) != size:
                                raise StreamLost("local file shrank")
                            data.send(FrameType.CHUNK,
                                      pack_chunk(transfer_id, index, offset,
                                                 payload))
                            per_stream[index] += size
                finally:
                    data.close()
            except BaseException as exc:
                failures.append(exc)

        threads = [threading.Thread(target=run, args=(i,))
                   for i in range(len(assignments))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if failures:
            raise StreamLost(f"{len(failures)} data streams failed: "
                             f"{failures[0]}")
        return per_stream

    def pull(self, remote: str, local: Path,
             region: tuple[int, int] | None = None) -> TransferReport:
        local = Path(local)
        attempt = 0
        while True:
            try:
                return self._pull_once(remote, local, region)
            except (ConnectionLost, StreamLost):
                attempt += 1
                if attempt > self.retries:
                    raise
                time.sleep(self.backoff * (2 ** (attempt - 1)))

    def _pull_once(self, remote: str, local: Path,
                   region: tuple[int, int] | None) -> TransferReport:
        control = self._control(Mode.FTSM_PULL)
        try:
            return self.pull_on(control, remote, local, region)
        finally:
            control.close()

    def pull_on(self, control: Channel, remote: str, local: Path,
                region: tuple[int, int] | None = None) -> TransferReport:
        """Run one pull over an already established control channel. The
        channel stays open afterwards; the caller owns it."""
        local = Path(local)
        chunk_size = min(self.chunk_size or self.buffer_size,
                         control.params.buffer_size)
        start = time.monotonic()
        state = load_state(local)
        transfer_id = os.urandom(16)
        receiver = None
        try:
            offer = {
                X_TRANSFER: transfer_id,
                X_PATH: remote.encode("utf-8"),
                X_STREAMS: wire.u8(min(self.streams, 255)),
                X_CHUNK_SIZE: wire.u32(chunk_size),
            }
            if region is not None:
                offer[X_REGION_OFFSET] = wire.u64(region[0])
                offer[X_REGION_LENGTH] = wire.u64(region[1])
            resumed = False
            if state is not None:
                # only reuse state that matches what we are asking for now
                matches = state.grid.chunk_size == chunk_size and (
                    region is None or
                    (state.grid.region_offset, state.grid.region_length)
                    == region)
                if matches:
                    offer[X_REGION_OFFSET] = wire.u64(state.grid.region_offset)
                    offer[X_REGION_LENGTH] = wire.u64(state.grid.region_length)
                    offer[X_CHUNK_SIZE] = wire.u32(state.grid.chunk_size)
                    offer[X_STREAMS] = wire.u8(state.grid.stream_count)
                    offer[X_BITMAP] = bytes(state.bitmap)
                    resumed = True
                else:
                    state_path(local).unlink(missing_ok=True)
                    state = None
            control.send(FrameType.XFER_OFFER, wire.encode_fields(offer))
            accept = wire.decode_fields(
                control.expect(FrameType.XFER_ACCEPT).payload)
            grid = ChunkGrid(
                wire.read_uint(accept, X_REGION_OFFSET),
                wire.read_uint(accept, X_REGION_LENGTH),
                wire.read_uint(accept, X_STREAMS),
                wire.read_uint(accept, X_CHUNK_SIZE))
            if grid.region_length == 0:
                control.send(FrameType.XFER_DONE,
                             wire.encode_fields({X_TRANSFER: transfer_id}))
                control.expect(FrameType.XFER_DONE)
                local.parent.mkdir(parents=True, exist_ok=True)
                if region is None:
                    local.write_bytes(b"")
                else:
                    local.touch()
                return TransferReport(0, time.monotonic() - start, [],
                                      resumed)

            end = grid.region_offset + grid.region_length
            receiver = RegionReceiver(local, transfer_id, grid, state,
                                      truncate_to=end if region is None
                                      else None)
            per_stream = self._run_receivers(control, transfer_id, receiver)
            control.send(FrameType.XFER_DONE,
                         wire.encode_fields({X_TRANSFER: transfer_id}))
            done = wire.decode_fields(
                control.expect(FrameType.XFER_DONE).payload)
            sender_md5 = done.get(X_MD5, b"")
            receiver.finish(sender_md5)
            receiver = None
            return TransferReport(sum(per_stream), time.monotonic() - start,
                                  per_stream, resumed)
        finally:
            if receiver is not None:
                receiver.abort()

    def _run_receivers(self, control: Channel, transfer_id: bytes,
                       receiver: RegionReceiver) -> list[int]:
        count = max(1, min(self.streams, 255))
        per_stream = [0] * count
        failures: list[BaseException] = []

        def run(index: int) -> None:
            try:
                data = self._data(control, transfer_id, index)
                try:
                    while True:
                        try:
                            frame = data.expect(FrameType.CHUNK)
                        except ConnectionLost:
                            return
                        tid, _, offset, payload = unpack_chunk(frame.payload)
                        if tid != transfer_id:
                            raise ProtocolError("chunk for another transfer")
                        receiver.write_chunk(offset, payload)
                        per_stream[index] += len(payload)
                finally:
                    data.close()
            except BaseException as exc:
                failures.append(exc)

        threads = [threading.Thread(target=run, args=(i,))
                   for i in range(count)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if failures:
            raise StreamLost(f"{len(failures)} data streams failed: "
                             f"{failures[0]}")
        if not receiver.complete():
            raise StreamLost("streams drained but chunks are missing")
        return per_stream

    def bench_mem(self, seconds: float) -> TransferReport:
        """Zero generator to discarding sink: protocol throughput with no
        disk at either end."""
        transfer_id = os.urandom(16)
        chunk_size = self.chunk_size or self.buffer_size
        start = time.monotonic()
        control = self._control(Mode.FTSM_PUSH)
        try:
            chunk_size = min(chunk_size, control.params.buffer_size)
            control.send(FrameType.XFER_OFFER, wire.encode_fields({
                X_TRANSFER: transfer_id,
                X_SINK: wire.u8(SINK_MEM),
                X_STREAMS: wire.u8(min(self.streams, 255)),
                X_CHUNK_SIZE: wire.u32(chunk_size),
            }))
            control.expect(FrameType.XFER_ACCEPT)
            deadline = start + seconds
            per_stream = [0] * self.streams
            failures: list[BaseException] = []
            zeros = bytes(chunk_size)

            def run(index: int) -> None:
                # synthetic offsets keep each stream in a private range
                try:
                    data = self._data(control, transfer_id, index)
                    try:
                        offset = index << 48
                        while time.monotonic() < deadline:
                            data.send(FrameType.CHUNK,
                                      pack_chunk(transfer_id, index, offset,
                                                 zeros))
                            per_stream[index] += chunk_size
                            offset += chunk_size
                    finally:
                        data.close()
                except BaseException as exc:
                    failures.append(exc)

            threads = [threading.Thread(target=run, args=(i,))
                       for i in range(self.streams)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            if failures:
                raise StreamLost(str(failures[0]))
            control.send(FrameType.XFER_DONE, wire.encode_fields({
                X_TRANSFER: transfer_id,
                X_TOTAL: wire.u64(sum(per_stream)),
            }))
            done = wire.decode_fields(
                control.expect(FrameType.XFER_DONE).payload)
            total = wire.read_uint(done, X_TOTAL, 0)
            return TransferReport(total, time.monotonic() - start, per_stream)
        finally:
            control.close()
