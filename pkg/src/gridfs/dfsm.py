"""Remote file system mode: stateless per-request file operations.

Nine operations (READ, WRITE, FLUSH, LOCK, UNLOCK, SEEK, CLOSE, SETLENGTH,
STAT) travel as DFS_REQ/DFS_RESP FieldMaps. Every request names the full
sandbox-relative path and absolute offset; the server opens, acts and
closes per request, holding no cursor or position between requests. The
only server-side session state is the lock table, and a session's locks
vanish when its connection does.

Byte-range locks are advisory and non-blocking: an overlapping request is
refused immediately with LOCK_CONFLICT and the client retries. Overlap is
checked against live locks of all sessions, the requester's own included;
reads and writes from other sessions also respect lock ranges. length
0xFFFF_FFFF_FFFF_FFFF locks to end of file, whatever the file size becomes.

Seek never reaches the server as state: it is client-side arithmetic over
a stat snapshot, and the resulting absolute offset rides in the next
request. The SEEK wire op is answered exactly like STAT so a client can
fold the size fetch into the same round trip.

Operation failures (missing file, lock conflict, denial) come back as a
DFS_RESP with a non-zero status and leave the session usable; only framing
violations kill the connection. Error statuses carry no path text: DFS
responses may cross a transport whose policy leaves them clear.
"""

from __future__ import annotations

import errno
import logging
import os
import threading
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path, PurePosixPath

from . import wire
from .errors import (
    BadRequest,
    ConnectionLost,
    GridfsError,
    LockConflict,
    NegativeOffset,
    NoSuchFile,
    NotOwner,
    PermissionDenied,
    Status,
    StorageFull,
    error_for_status,
)
from .perms import Account, ActionKind, GuardedAction, check
from .secchan import Channel
from .wire import FrameType

log = logging.getLogger("gridfs.dfsm")

WHOLE_FILE = 0xFFFFFFFFFFFFFFFF
MAX_PATH_BYTES = 255
# Room a WRITE request needs beside its data: fixed fields plus path.
REQUEST_MARGIN = 512


class Op(IntEnum):
    READ = 1
    WRITE = 2
    FLUSH = 3
    LOCK = 4
    UNLOCK = 5
    SEEK = 6
    CLOSE = 7
    SETLENGTH = 8
    STAT = 9


class SeekOrigin(IntEnum):
    BEGIN = 0
    CURRENT_HINT = 1
    END = 2


# DFS_REQ / DFS_RESP field tags
F_OP = 1
F_REQUEST_ID = 2
F_PATH = 3
F_OFFSET = 4
F_LENGTH = 5
F_DATA = 6
F_SEEK_ORIGIN = 7
F_STATUS = 8
F_LOCK_ID = 9
F_SIZE = 10


@dataclass(frozen=True)
class FileStat:
    size: int
    exists: bool


def resolve_seek(origin: SeekOrigin, delta: int, stat: FileStat,
                 current: int = 0) -> int:
    if origin == SeekOrigin.BEGIN:
        position = delta
    elif origin == SeekOrigin.CURRENT_HINT:
        position = current + delta
    elif origin == SeekOrigin.END:
        position = stat.size + delta
    else:
        raise BadRequest(f"unknown seek origin {origin}")
    if position < 0:
        raise NegativeOffset(f"seek resolves to {position}")
    return position


def resolve_path(sandbox_root: Path, relative: str) -> Path:
    """Map a request path into the sandbox; traversal is a denial, not an
    os error, so the namespace stays closed before any filesystem touch."""
    if not relative or "\x00" in relative:
        raise BadRequest("empty or malformed path")
    if len(relative.encode("utf-8")) > MAX_PATH_BYTES:
        raise BadRequest("path too long")
    pure = PurePosixPath(relative)
    if pure.is_absolute() or ".." in pure.parts:
        raise PermissionDenied("path escapes the sandbox")
    return (sandbox_root / pure).resolve()


# -- byte-range lock table --------------------------------------------------

@dataclass(frozen=True)
class RangeLock:
    lock_id: int
    path: str
    offset: int
    length: int
    owner_session: bytes

    @property
    def end(self) -> int:
        return self.offset + self.length

    def overlaps(self, offset: int, length: int) -> bool:
        return self.offset < offset + length and offset < self.end


class LockTable:
    """All live byte-range locks, across every session of one server.

    `audit` is called as audit(event, snapshot) under the table lock on
    every grant and release; tests hang invariant checks off it.
    """

    def __init__(self, audit=None):
        self._lock = threading.Lock()
        self._locks: dict[int, RangeLock] = {}
        self._released: dict[bytes, set[int]] = {}
        self._next_id = 1
        self.audit = audit

    def acquire(self, path: str, offset: int, length: int,
                session: bytes) -> int:
        if length == 0:
            raise BadRequest("lock length must be positive")
        with self._lock:
            for live in self._locks.values():
                if live.path == path and live.overlaps(offset, length):
                    raise LockConflict(
                        f"range [{offset}, {offset + length}) is locked")
            lock_id = self._next_id
            self._next_id += 1
            self._locks[lock_id] = RangeLock(lock_id, path, offset, length,
                                             session)
            if self.audit:
                self.audit("acquire", tuple(self._locks.values()))
            return lock_id

    def release(self, lock_id: int, session: bytes) -> None:
        with self._lock:
            live = self._locks.get(lock_id)
            if live is None:
                if lock_id in self._released.get(session, ()):
                    return    # repeat unlock by the owner: fine
                raise NotOwner(f"lock {lock_id} is not held by this session")
            if live.owner_session != session:
                raise NotOwner(f"lock {lock_id} belongs to another session")
            del self._locks[lock_id]
            self._released.setdefault(session, set()).add(lock_id)
            if self.audit:
                self.audit("release", tuple(self._locks.values()))

    def release_session(self, session: bytes) -> None:
        with self._lock:
            gone = [i for i, l in self._locks.items()
                    if l.owner_session == session]
            for lock_id in gone:
                del self._locks[lock_id]
            self._released.pop(session, None)
            if gone and self.audit:
                self.audit("release_session", tuple(self._locks.values()))

    def conflicts(self, path: str, offset: int, length: int,
                  session: bytes) -> bool:
        """True when [offset, offset+length) overlaps a foreign lock."""
        if length == 0:
            return False
        with self._lock:
            return any(l.path == path and l.owner_session != session
                       and l.overlaps(offset, length)
                       for l in self._locks.values())

    def live_locks(self) -> tuple[RangeLock, ...]:
        with self._lock:
            return tuple(self._locks.values())


# -- server side ------------------------------------------------------------

def _stat(path: Path) -> FileStat:
    try:
        return FileStat(path.stat().st_size, True)
    except FileNotFoundError:
        return FileStat(0, False)


def _map_os_error(exc: OSError) -> GridfsError:
    if isinstance(exc, FileNotFoundError):
        return NoSuchFile("no such file")
    if exc.errno == errno.ENOSPC:
        return StorageFull("storage full")
    if exc.errno in (errno.EACCES, errno.EPERM):
        return PermissionDenied("filesystem refused access")
    if isinstance(exc, IsADirectoryError) or exc.errno == errno.EISDIR:
        return BadRequest("path names a directory")
    return BadRequest(f"io error {errno.errorcode.get(exc.errno, exc.errno)}")


class DfsServer:
    """Per-connection request loop over an authenticated DFSM channel."""

    def __init__(self, channel: Channel, account: Account,
                 locks: LockTable, gate=check):
        self.channel = channel
        self.account = account
        self.locks = locks
        self.gate = gate
        self.session = channel.params.session_id
        self._last_request_id: int | None = None

    def serve(self) -> None:
        try:
            while True:
                try:
                    frame = self.channel.expect(FrameType.DFS_REQ)
                except ConnectionLost:
                    return
                if not self._handle(frame.payload):
                    return
        finally:
            self.locks.release_session(self.session)

    def _handle(self, payload: bytes) -> bool:
        fields = wire.decode_fields(payload)
        request_id = wire.read_uint(fields, F_REQUEST_ID)
        reply: dict[int, bytes] = {F_REQUEST_ID: wire.u64(request_id)}
        keep_going = True
        try:
            if self._last_request_id is not None and \
                    request_id <= self._last_request_id:
                raise BadRequest("request ids must strictly increase")
            self._last_request_id = request_id
            op = Op(wire.read_uint(fields, F_OP))
            keep_going = self._dispatch(op, fields, reply)
            reply[F_STATUS] = wire.u16(Status.OK)
        except GridfsError as exc:
            log.debug("dfs op failed: %s", exc)
            reply[F_STATUS] = wire.u16(exc.status)
        except ValueError:
            reply[F_STATUS] = wire.u16(Status.BAD_REQUEST)
        self.channel.send(FrameType.DFS_RESP, wire.encode_fields(reply))
        return keep_going

    def _dispatch(self, op: Op, fields: dict[int, bytes],
                  reply: dict[int, bytes]) -> bool:
        if op == Op.CLOSE:
            self.locks.release_session(self.session)
            return False

        path_raw = fields.get(F_PATH)
        if path_raw is None:
            raise BadRequest("missing path")
        relative = path_raw.decode("utf-8")
        path = resolve_path(self.account.sandbox_root, relative)
        denial = self.gate(self.account,
                           GuardedAction(ActionKind.FILE_IO, path))
        if denial is not None:
            raise PermissionDenied(denial)
        key = str(path)
        offset = wire.read_uint(fields, F_OFFSET, 0)

        if op == Op.READ:
            length = min(wire.read_uint(fields, F_LENGTH, 0),
                         self.channel.params.buffer_size)
            if self.locks.conflicts(key, offset, length, self.session):
                raise LockConflict("range is locked")
            try:
                fd = os.open(path, os.O_RDONLY)
            except OSError as exc:
                raise _map_os_error(exc) from None
            try:
                reply[F_DATA] = os.pread(fd, length, offset)
            finally:
                os.close(fd)
        elif op == Op.WRITE:
            data = fields.get(F_DATA, b"")
            if self.locks.conflicts(key, offset, len(data), self.session):
                raise LockConflict("range is locked")
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                fd = os.open(path, os.O_WRONLY | os.O_CREAT, 0o644)
            except OSError as exc:
                raise _map_os_error(exc) from None
            try:
                written = os.pwrite(fd, data, offset)
            except OSError as exc:
                raise _map_os_error(exc) from None
            finally:
                os.close(fd)
            reply[F_LENGTH] = wire.u64(written)
        elif op == Op.FLUSH:
            try:
                fd = os.open(path, os.O_RDONLY)
            except OSError as exc:
                raise _map_os_error(exc) from None
            try:
                os.fsync(fd)
            finally:
                os.close(fd)
        elif op == Op.LOCK:
            length = wire.read_uint(fields, F_LENGTH, 0)
            lock_id = self.locks.acquire(key, offset, length, self.session)
            reply[F_LOCK_ID] = wire.u64(lock_id)
        elif op == Op.UNLOCK:
            lock_id = wire.read_uint(fields, F_LOCK_ID)
            self.locks.release(lock_id, self.session)
        elif op == Op.SETLENGTH:
            new_len = wire.read_uint(fields, F_SIZE)
            old = _stat(path).size
            low, high = sorted((old, new_len))
            if self.locks.conflicts(key, low, max(high - low, 1),
                                    self.session):
                raise LockConflict("truncated region is locked")
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                fd = os.open(path, os.O_WRONLY | os.O_CREAT, 0o644)
            except OSError as exc:
                raise _map_os_error(exc) from None
            try:
                os.ftruncate(fd, new_len)
            except OSError as exc:
                raise _map_os_error(exc) from None
            finally:
                os.close(fd)
        elif op in (Op.STAT, Op.SEEK):
            # SEEK carries no server state; it is a stat by another name
            st = _stat(path)
            reply[F_SIZE] = wire.u64(st.size)
            reply[F_LENGTH] = wire.u64(1 if st.exists else 0)
        else:
            raise BadRequest(f"unhandled op {op}")
        return True


# -- client side ------------------------------------------------------------

class FsClient:
    """Client handle for one DFSM session; bound to a single connection.

    Tracks a position purely for CURRENT_HINT seeks; the server never
    sees it.
    """

    def __init__(self, channel: Channel):
        self.channel = channel
        self.position = 0
        self._next_request_id = 1

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        try:
            self.close()
        except (GridfsError, OSError):
            pass
        self.channel.close()

    def _call(self, op: Op, extra: dict[int, bytes] | None = None) -> dict[int, bytes]:
        request_id = self._next_request_id
        self._next_request_id += 1
        fields = {F_OP: wire.u8(op), F_REQUEST_ID: wire.u64(request_id)}
        if extra:
            fields.update(extra)
        self.channel.send(FrameType.DFS_REQ, wire.encode_fields(fields))
        reply = wire.decode_fields(
            self.channel.expect(FrameType.DFS_RESP).payload)
        if wire.read_uint(reply, F_REQUEST_ID) != request_id:
            raise ConnectionLost("response for a different request")
        status = wire.read_uint(reply, F_STATUS, Status.INTERNAL)
        if status != Status.OK:
            raise error_for_status(status, f"{op.name} failed")
        return reply

    def read(self, path: str, offset: int, length: int) -> bytes:
        out = bytearray()
        step = self.channel.params.buffer_size
        while len(out) < length:
            want = min(step, length - len(out))
            reply = self._call(Op.READ, {
                F_PATH: path.encode("utf-8"),
                F_OFFSET: wire.u64(offset + len(out)),
                F_LENGTH: wire.u64(want)})
            data = reply.get(F_DATA, b"")
            out += data
            if len(data) < want:
                break    # clean EOF
        return bytes(out)

    def write(self, path: str, offset: int, data: bytes) -> int:
        step = max(1024, self.channel.params.buffer_size - REQUEST_MARGIN)
        written = 0
        while written < len(data) or not data:
            piece = data[written:written + step]
            reply = self._call(Op.WRITE, {
                F_PATH: path.encode("utf-8"),
                F_OFFSET: wire.u64(offset + written),
                F_DATA: piece})
            written += wire.read_uint(reply, F_LENGTH, len(piece))
            if not data:
                break
        return written

    def flush(self, path: str) -> None:
        self._call(Op.FLUSH, {F_PATH: path.encode("utf-8")})

    def lock(self, path: str, offset: int, length: int = WHOLE_FILE) -> int:
        reply = self._call(Op.LOCK, {
            F_PATH: path.encode("utf-8"),
            F_OFFSET: wire.u64(offset),
            F_LENGTH: wire.u64(length)})
        return wire.read_uint(reply, F_LOCK_ID)

    def unlock(self, path: str, lock_id: int) -> None:
        self._call(Op.UNLOCK, {F_PATH: path.encode("utf-8"),
                                 F_LOCK_ID: wire.u64(lock_id)})

    def stat(self, path: str) -> FileStat:
        reply = self._call(Op.STAT, {F_PATH: path.encode("utf-8")})
        return FileStat(wire.read_uint(reply, F_SIZE, 0),
                        bool(wire.read_uint(reply, F_LENGTH, 0)))

    def seek(self, path: str, origin: SeekOrigin, delta: int) -> int:
        if origin == SeekOrigin.END:
            reply = self._call(Op.SEEK, {F_PATH: path.encode("utf-8"),
                                           F_SEEK_ORIGIN: wire.u8(origin)})
            st = FileStat(wire.read_uint(reply, F_SIZE, 0),
                          bool(wire.read_uint(reply, F_LENGTH, 0)))
        else:
            st = FileStat(0, False)
        self.position = resolve_seek(origin, delta, st, self.position)
        return self.position

    def set_length(self, path: str, size: int) -> None:
        self._call(Op.SETLENGTH, {F_PATH: path.encode("utf-8"),
                                    F_SIZE: wire.u64(size)})

    def close(self) -> None:
        self._call(Op.CLOSE)
