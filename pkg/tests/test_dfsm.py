import hashlib
import random
import socket
import threading
from pathlib import Path

import pytest

from gridfs import wire
from gridfs.dfsm import (
    WHOLE_FILE,
    DfsServer,
    FileStat,
    FsClient,
    LockTable,
    Op,
    SeekOrigin,
    resolve_path,
    resolve_seek,
)
from gridfs.errors import (
    BadRequest,
    LockConflict,
    NegativeOffset,
    NoSuchFile,
    NotOwner,
    PermissionDenied,
)
from gridfs.perms import Account, PermissionDoc
from gridfs.secchan import Channel, ChannelKeys
from gridfs.wire import FrameType, Mode, SecurityMode, SessionParams

PSK = b"p" * 32


def make_account(tmp_path, admin=True, **flags):
    root = Path(tmp_path) / "data"
    if admin:
        root.mkdir(parents=True, exist_ok=True)
        return Account("root", PSK, root.resolve(),
                       PermissionDoc.administrator())
    sandbox = root / "home" / "user"
    sandbox.mkdir(parents=True, exist_ok=True)
    return Account("user", PSK, sandbox.resolve(), PermissionDoc.others(**flags))


def dfs_pair(account, locks=None, security=SecurityMode.SECURE):
    """FsClient talking to a DfsServer thread over a socketpair."""
    a, b = socket.socketpair()
    params = SessionParams(Mode.DFSM, security)
    cn, sn = b"c" * 16, b"s" * 16
    client = Channel(a, params, ChannelKeys.for_role(PSK, cn, sn, True))
    server = Channel(b, params, ChannelKeys.for_role(PSK, cn, sn, False))
    locks = locks if locks is not None else LockTable()
    srv = DfsServer(server, account, locks)
    thread = threading.Thread(target=srv.serve, daemon=True)
    thread.start()
    return FsClient(client), thread


class TestSeekArithmetic:
    def test_begin(self):
        assert resolve_seek(SeekOrigin.BEGIN, 100, FileStat(0, False)) == 100

    def test_end_negative_delta(self):
        assert resolve_seek(SeekOrigin.END, -16, FileStat(1024, True)) == 1008

    def test_end_underflow(self):
        with pytest.raises(NegativeOffset):
            resolve_seek(SeekOrigin.END, -2000, FileStat(1024, True))

    def test_current_hint(self):
        assert resolve_seek(SeekOrigin.CURRENT_HINT, 5,
                            FileStat(0, False), current=7) == 12

    def test_begin_negative(self):
        with pytest.raises(NegativeOffset):
            resolve_seek(SeekOrigin.BEGIN, -1, FileStat(0, False))


class TestResolvePath:
    def test_plain(self, tmp_path):
        assert resolve_path(tmp_path, "a/b.txt") == \
            (tmp_path / "a" / "b.txt").resolve()

    def test_traversal_rejected(self, tmp_path):
        with pytest.raises(PermissionDenied):
            resolve_path(tmp_path, "../outside")
        with pytest.raises(PermissionDenied):
            resolve_path(tmp_path, "a/../../outside")

    def test_absolute_rejected(self, tmp_path):
        with pytest.raises(PermissionDenied):
            resolve_path(tmp_path, "/etc/passwd")

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(BadRequest):
            resolve_path(tmp_path, "")


class TestLockTable:
    def test_grant_and_conflict(self):
        table = LockTable()
        table.acquire("f", 0, 10, b"A" * 16)
        with pytest.raises(LockConflict):
            table.acquire("f", 5, 8, b"A" * 16)   # same session still conflicts
        with pytest.raises(LockConflict):
            table.acquire("f", 9, 1, b"B" * 16)

    def test_disjoint_ranges_granted(self):
        table = LockTable()
        table.acquire("f", 0, 10, b"A" * 16)
        table.acquire("f", 10, 10, b"B" * 16)
        assert len(table.live_locks()) == 2

    def test_different_paths_independent(self):
        table = LockTable()
        table.acquire("f", 0, 10, b"A" * 16)
        table.acquire("g", 0, 10, b"B" * 16)

    def test_zero_length_rejected(self):
        table = LockTable()
        with pytest.raises(BadRequest):
            table.acquire("f", 0, 0, b"A" * 16)

    def test_unlock_idempotent_for_owner(self):
        table = LockTable()
        lock_id = table.acquire("f", 0, 10, b"A" * 16)
        table.release(lock_id, b"A" * 16)
        table.release(lock_id, b"A" * 16)   # second release: no error

    def test_foreign_unlock_rejected(self):
        table = LockTable()
        lock_id = table.acquire("f", 0, 10, b"A" * 16)
        with pytest.raises(NotOwner):
            table.release(lock_id, b"B" * 16)
        with pytest.raises(NotOwner):
            table.release(9999, b"B" * 16)

    def test_session_release_frees_ranges(self):
        table = LockTable()
        table.acquire("f", 0, 10, b"A" * 16)
        table.acquire("f", 20, 5, b"A" * 16)
        table.release_session(b"A" * 16)
        table.acquire("f", 0, 30, b"B" * 16)

    def test_whole_file_lock(self):
        table = LockTable()
        table.acquire("f", 0, WHOLE_FILE, b"A" * 16)
        with pytest.raises(LockConflict):
            table.acquire("f", 2**63, 1, b"B" * 16)

    def test_conflicts_ignores_own_locks(self):
        table = LockTable()
        table.acquire("f", 0, 10, b"A" * 16)
        assert not table.conflicts("f", 0, 10, b"A" * 16)
        assert table.conflicts("f", 0, 10, b"B" * 16)
        assert not table.conflicts("f", 10, 5, b"B" * 16)

    def test_audit_sees_every_transition(self):
        events = []
        table = LockTable(audit=lambda kind, snap: events.append((kind, snap)))
        lock_id = table.acquire("f", 0, 10, b"A" * 16)
        table.release(lock_id, b"A" * 16)
        assert [kind for kind, _ in events] == ["acquire", "release"]

    def test_exclusivity_under_random_schedule(self):
        # Hammer the table from several threads; the audit hook checks the
        # no-overlap invariant at every transition.
        violations = []

        def verify(kind, snapshot):
            by_path = {}
            for lock in snapshot:
                by_path.setdefault(lock.path, []).append(lock)
            for locks in by_path.values():
                locks.sort(key=lambda l: l.offset)
                for first, second in zip(locks, locks[1:]):
                    if first.end > second.offset:
                        violations.append((first, second))

        table = LockTable(audit=verify)

        def worker(seed):
            rng = random.Random(seed)
            session = bytes([seed]) * 16
            held = []
            for _ in range(200):
                if held and rng.random() < 0.5:
                    table.release(held.pop(), session)
                else:
                    offset = rng.randrange(0, 100)
                    length = rng.randrange(1, 20)
                    try:
                        held.append(table.acquire("f", offset, length, session))
                    except LockConflict:
                        pass
            table.release_session(session)

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert violations == []


class TestFileOps:
    def test_read_slice(self, tmp_path):
        account = make_account(tmp_path)
        (account.sandbox_root / "f.txt").write_bytes(b"abcdef")
        client, _ = dfs_pair(account)
        with client:
            assert client.read("f.txt", 2, 3) == b"cde"

    def test_read_at_eof_empty(self, tmp_path):
        account = make_account(tmp_path)
        (account.sandbox_root / "f.txt").write_bytes(b"abcdef")
        client, _ = dfs_pair(account)
        with client:
            assert client.read("f.txt", 6, 4) == b""

    def test_read_missing_file(self, tmp_path):
        client, _ = dfs_pair(make_account(tmp_path))
        with client:
            with pytest.raises(NoSuchFile):
                client.read("ghost", 0, 4)

    def test_read_your_write(self, tmp_path):
        client, _ = dfs_pair(make_account(tmp_path))
        with client:
            assert client.write("new.bin", 0, b"hi") == 2
            assert client.read("new.bin", 0, 2) == b"hi"

    def test_sparse_extend(self, tmp_path):
        account = make_account(tmp_path)
        client, _ = dfs_pair(account)
        with client:
            client.write("s.bin", 4, b"x")
            assert client.stat("s.bin").size == 5
            assert client.read("s.bin", 0, 5) == b"\x00\x00\x00\x00x"

    def test_write_creates_parents(self, tmp_path):
        account = make_account(tmp_path)
        client, _ = dfs_pair(account)
        with client:
            client.write("deep/er/f.bin", 0, b"ok")
            assert (account.sandbox_root / "deep" / "er" / "f.bin").exists()

    def test_large_write_round_trips(self, tmp_path):
        # bigger than one buffer: client must chunk both directions
        account = make_account(tmp_path)
        blob = random.Random(7).randbytes(700_000)
        client, _ = dfs_pair(account)
        with client:
            assert client.write("big.bin", 0, blob) == len(blob)
            assert client.read("big.bin", 0, len(blob)) == blob
        assert (account.sandbox_root / "big.bin").read_bytes() == blob

    def test_setlength_truncate_and_extend(self, tmp_path):
        account = make_account(tmp_path)
        (account.sandbox_root / "t.bin").write_bytes(b"abcdef")
        client, _ = dfs_pair(account)
        with client:
            client.set_length("t.bin", 3)
            assert client.read("t.bin", 0, 10) == b"abc"
            client.set_length("t.bin", 8)
            assert client.read("t.bin", 0, 10) == b"abc\x00\x00\x00\x00\x00"

    def test_stat_missing(self, tmp_path):
        client, _ = dfs_pair(make_account(tmp_path))
        with client:
            st = client.stat("nope")
            assert st == FileStat(0, False)

    def test_flush(self, tmp_path):
        client, _ = dfs_pair(make_account(tmp_path))
        with client:
            client.write("f.bin", 0, b"data")
            client.flush("f.bin")
            with pytest.raises(NoSuchFile):
                client.flush("missing.bin")

    def test_seek_end_round_trip(self, tmp_path):
        account = make_account(tmp_path)
        (account.sandbox_root / "f.bin").write_bytes(bytes(1024))
        client, _ = dfs_pair(account)
        with client:
            assert client.seek("f.bin", SeekOrigin.END, -16) == 1008
            assert client.seek("f.bin", SeekOrigin.CURRENT_HINT, 8) == 1016
            assert client.seek("f.bin", SeekOrigin.BEGIN, 0) == 0

    def test_lock_blocks_foreign_write(self, tmp_path):
        account = make_account(tmp_path)
        (account.sandbox_root / "f.bin").write_bytes(bytes(100))
        locks = LockTable()
        alice, _ = dfs_pair(account, locks)
        bob, _ = dfs_pair(account, locks)
        with alice, bob:
            alice.lock("f.bin", 0, 50)
            with pytest.raises(LockConflict):
                bob.write("f.bin", 10, b"x")
            with pytest.raises(LockConflict):
                bob.read("f.bin", 0, 10)
            bob.write("f.bin", 60, b"y")   # outside the locked range

    def test_lock_release_on_close(self, tmp_path):
        account = make_account(tmp_path)
        locks = LockTable()
        alice, thread = dfs_pair(account, locks)
        with alice:
            alice.write("f.bin", 0, bytes(10))
            alice.lock("f.bin", 0, 10)
        thread.join(timeout=5)
        assert locks.live_locks() == ()

    def test_unlock_wrong_session(self, tmp_path):
        account = make_account(tmp_path)
        locks = LockTable()
        alice, _ = dfs_pair(account, locks)
        bob, _ = dfs_pair(account, locks)
        with alice, bob:
            alice.write("f.bin", 0, bytes(4))
            lock_id = alice.lock("f.bin", 0, 4)
            with pytest.raises(NotOwner):
                bob.unlock("f.bin", lock_id)

    def test_request_ids_must_increase(self, tmp_path):
        account = make_account(tmp_path)
        client, _ = dfs_pair(account)
        client.write("f.bin", 0, b"x")
        client._next_request_id = 1    # replay an old id
        with pytest.raises(BadRequest):
            client.stat("f.bin")

    def test_sandboxed_account_cannot_reach_storage_root(self, tmp_path):
        account = make_account(tmp_path, admin=False, FileIOPermission=True)
        secret = account.sandbox_root.parent.parent / "secret.txt"
        secret.write_bytes(b"top")
        client, _ = dfs_pair(account)
        with client:
            with pytest.raises(PermissionDenied):
                client.read("../../secret.txt", 0, 3)

    def test_file_io_flag_denies(self, tmp_path):
        account = make_account(tmp_path, admin=False, FileIOPermission=False)
        client, _ = dfs_pair(account)
        with client:
            with pytest.raises(PermissionDenied):
                client.write("f.bin", 0, b"x")

    def test_file_io_flag_allows_in_sandbox(self, tmp_path):
        account = make_account(tmp_path, admin=False, FileIOPermission=True)
        client, _ = dfs_pair(account)
        with client:
            client.write("mine.bin", 0, b"ok")
            assert (account.sandbox_root / "mine.bin").read_bytes() == b"ok"


class TestConcurrentSchedules:
    def test_disjoint_lock_write_unlock_matches_sequential(self, tmp_path):
        rng = random.Random(0xD15C)
        n_sessions, span = 4, 512
        patterns = [bytes([0xA0 + i]) * span for i in range(n_sessions)]

        # sequential oracle
        oracle = bytearray(n_sessions * span)
        for i, pattern in enumerate(patterns):
            oracle[i * span:(i + 1) * span] = pattern

        account = make_account(tmp_path)
        locks = LockTable()
        clients = [dfs_pair(account, locks)[0] for _ in range(n_sessions)]
        barrier = threading.Barrier(n_sessions)
        errors = []

        def run(i):
            try:
                barrier.wait()
                client = clients[i]
                for attempt in range(100):
                    try:
                        lock_id = client.lock("shared.bin", i * span, span)
                        break
                    except LockConflict:
                        pass
                else:
                    raise RuntimeError("never acquired")
                client.write("shared.bin", i * span, patterns[i])
                client.unlock("shared.bin", lock_id)
            except Exception as exc:
                errors.append(exc)

        threads = [threading.Thread(target=run, args=(i,))
                   for i in range(n_sessions)]
        random.shuffle(threads)
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert errors == []
        assert (account.sandbox_root / "shared.bin").read_bytes() == bytes(oracle)
        for client in clients:
            client.__exit__(None, None, None)

    def test_parallel_disjoint_reads_match_oracle(self, tmp_path):
        account = make_account(tmp_path)
        blob = random.Random(42).randbytes(64 * 1024)
        (account.sandbox_root / "f.bin").write_bytes(blob)
        k = 4
        piece = len(blob) // k
        clients = [dfs_pair(account)[0] for _ in range(k)]
        results = [None] * k

        def run(i):
            results[i] = clients[i].read("f.bin", i * piece, piece)

        threads = [threading.Thread(target=run, args=(i,)) for i in range(k)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for i in range(k):
            assert results[i] == blob[i * piece:(i + 1) * piece]
        for client in clients:
            client.__exit__(None, None, None)
