"""Channel security: PSK authentication and the three transfer-security modes.

Key schedule. Both peers hold the account's pre-shared key and exchange
16-byte nonces in HELLO/WELCOME. Keys come from an HMAC-SHA256
extract-then-expand: the extract step MACs the psk under the concatenated
nonces, the expand step derives one 128-bit key per direction. The client's
send key is the server's receive key and vice versa, so the pair can seal
traffic immediately after WELCOME with no further round trip.

Authentication is a single AUTH frame carrying the username and
proof = HMAC-SHA256(psk, client_nonce || server_nonce || username). The
proof never crosses the wire in clear (AUTH is sealed in every mode) and
verification is constant-time. One AUTH per connection; a second one is a
protocol error. The username itself rides in the clear HELLO so the server
can pick the right psk before it has to open anything.

Sealing is AES-128-GCM. Nonces are lockstep counters (never transmitted):
each side keeps a send and a receive counter, and a frame sealed out of
order or replayed simply fails to open. The frame type is bound in as
associated data, so a sealed payload cannot be replayed under a different
type either.

Mode policy:
  SECURE      every payload sealed.
  SEMISECURE  control frames sealed, CHUNK payloads clear.
  NONSECURE   AUTH/AUTH_OK sealed; path-carrying fields of DFS_REQ,
              XFER_OFFER and TASK_SUBMIT sealed inside an otherwise clear
              FieldMap; everything else clear.
HELLO, WELCOME, AUTH_FAIL and ERROR are clear in every mode: the first two
happen before keys exist, and the last two must stay readable to a peer
whose keys are wrong. None of them ever carries a secret.
"""

from __future__ import annotations

import hmac
import os
import socket
from dataclasses import dataclass, field
from hashlib import sha256

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import wire
from .errors import (
    AuthFailed,
    ConnectionLost,
    CounterExhausted,
    GridfsError,
    IntegrityFailure,
    OversizedPayload,
    ProtocolError,
    error_for_status,
)
from .wire import Frame, FrameType, Mode, SecurityMode, SessionParams

KEY_SIZE = 16
NONCE_SIZE = 16
MAX_USERNAME = 64

# Extra clear HELLO/WELCOME tag: username for key selection.
T_USER = 10

# AUTH / AUTH_OK field tags.
A_USER = 1
A_PROOF = 2

_COUNTER_LIMIT = 2**64


def derive_keys(psk: bytes, client_nonce: bytes, server_nonce: bytes) -> tuple[bytes, bytes]:
    """Returns (client_key, server_key), each 16 bytes, same on both peers."""
    prk = hmac.new(client_nonce + server_nonce, psk, sha256).digest()
    k_client = hmac.new(prk, b"client stream\x01", sha256).digest()[:KEY_SIZE]
    k_server = hmac.new(prk, b"server stream\x01", sha256).digest()[:KEY_SIZE]
    return k_client, k_server


def credential_proof(psk: bytes, client_nonce: bytes, server_nonce: bytes,
                     username: str) -> bytes:
    return hmac.new(psk, client_nonce + server_nonce + username.encode("utf-8"),
                    sha256).digest()


@dataclass
class ChannelKeys:
    send_key: bytes
    recv_key: bytes
    send_counter: int = 0
    recv_counter: int = 0

    @classmethod
    def for_role(cls, psk: bytes, client_nonce: bytes, server_nonce: bytes,
                 is_client: bool) -> "ChannelKeys":
        k_client, k_server = derive_keys(psk, client_nonce, server_nonce)
        if is_client:
            return cls(send_key=k_client, recv_key=k_server)
        return cls(send_key=k_server, recv_key=k_client)

    def seal(self, plaintext: bytes, aad: bytes) -> bytes:
        if self.send_counter >= _COUNTER_LIMIT:
            raise CounterExhausted("send counter exhausted")
        nonce = b"\x00\x00\x00\x00" + self.send_counter.to_bytes(8, "big")
        self.send_counter += 1
        return AESGCM(self.send_key).encrypt(nonce, plaintext, aad)

    def open(self, sealed: bytes, aad: bytes) -> bytes:
        if self.recv_counter >= _COUNTER_LIMIT:
            raise CounterExhausted("receive counter exhausted")
        nonce = b"\x00\x00\x00\x00" + self.recv_counter.to_bytes(8, "big")
        try:
            plaintext = AESGCM(self.recv_key).decrypt(nonce, sealed, aad)
        except InvalidTag:
            raise IntegrityFailure("sealed payload failed to open") from None
        self.recv_counter += 1
        return plaintext


# -- per-mode frame classification ------------------------------------------

CLEAR = 0
SEALED = 1
FIELD_SEALED = 2

_ALWAYS_CLEAR = frozenset({FrameType.HELLO, FrameType.WELCOME,
                           FrameType.AUTH_FAIL, FrameType.ERROR})
_ALWAYS_SEALED = frozenset({FrameType.AUTH, FrameType.AUTH_OK})

# NONSECURE: the path-bearing field of each control frame travels sealed
# inside an otherwise clear FieldMap.
_NONSECURE_FIELDS: dict[int, tuple[int, ...]] = {
    FrameType.DFS_REQ: (3,),       # path
    FrameType.XFER_OFFER: (2,),    # path
    FrameType.TASK_SUBMIT: (3,),   # task descriptors (carry dep/out names)
    FrameType.CRYPT_TASK: (2,),    # cipher key material
}


def classify_frame(frame_type: int, mode: SecurityMode) -> int:
    if frame_type in _ALWAYS_CLEAR:
        return CLEAR
    if frame_type in _ALWAYS_SEALED:
        return SEALED
    if mode == SecurityMode.SECURE:
        return SEALED
    if mode == SecurityMode.SEMISECURE:
        return CLEAR if frame_type == FrameType.CHUNK else SEALED
    return FIELD_SEALED if frame_type in _NONSECURE_FIELDS else CLEAR


def sealed_field_tags(frame_type: int) -> tuple[int, ...]:
    return _NONSECURE_FIELDS.get(frame_type, ())


# -- framed channel over a socket -------------------------------------------

class Channel:
    """One authenticated connection: framing plus the mode's sealing policy.

    Owned by exactly one connection handler or client; not shared across
    threads. The lockstep counters make any cross-thread interleaving a
    protocol error by construction, which is the point.
    """

    def __init__(self, sock: socket.socket, params: SessionParams,
                 keys: ChannelKeys | None):
        self.sock = sock
        self.params = params
        self.keys = keys
        self._rbuf = bytearray()
        self.username: str | None = None
        self.account = None   # set by the server after AUTH

    @property
    def max_payload(self) -> int:
        return self.params.max_frame_payload()

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass

    # frame transmit/receive

    def send(self, frame_type: int, payload: bytes = b"") -> None:
        cls = classify_frame(frame_type, self.params.security)
        # size-check before sealing: a seal consumes a nonce counter, and a
        # frame that then fails to encode would desync the channel for good
        overhead = 16 if cls != CLEAR else 0
        if len(payload) + overhead > self.max_payload:
            raise OversizedPayload(
                f"payload of {len(payload)} bytes cannot fit the "
                f"negotiated frame cap {self.max_payload}")
        flags = 0
        if cls == SEALED:
            payload = self._require_keys().seal(payload, bytes([frame_type]))
            flags = wire.FLAG_SEALED
        elif cls == FIELD_SEALED:
            payload = self._seal_fields(frame_type, payload)
        try:
            self.sock.sendall(wire.encode_frame(Frame(frame_type, payload, flags),
                                                self.max_payload))
        except OSError as exc:
            raise ConnectionLost(str(exc)) from None

    def recv(self) -> Frame:
        frame = self._read_frame()
        cls = classify_frame(frame.frame_type, self.params.security)
        if cls == SEALED:
            if not frame.flags & wire.FLAG_SEALED:
                raise ProtocolError(
                    f"frame type 0x{frame.frame_type:02x} arrived clear, "
                    f"policy requires sealed")
            payload = self._require_keys().open(frame.payload,
                                                bytes([frame.frame_type]))
            return Frame(frame.frame_type, payload, 0)
        if frame.flags & wire.FLAG_SEALED:
            raise ProtocolError(
                f"frame type 0x{frame.frame_type:02x} arrived sealed, "
                f"policy says clear")
        if cls == FIELD_SEALED:
            return Frame(frame.frame_type,
                         self._open_fields(frame.frame_type, frame.payload), 0)
        return frame

    def expect(self, *frame_types: int) -> Frame:
        """Receive a frame, converting ERROR frames into raised exceptions."""
        frame = self.recv()
        if frame.frame_type == FrameType.ERROR:
            code, message = wire.parse_error(frame.payload)
            raise error_for_status(code, message)
        if frame.frame_type not in frame_types:
            raise ProtocolError(
                f"expected {[hex(t) for t in frame_types]}, "
                f"got 0x{frame.frame_type:02x}")
        return frame

    def send_error(self, exc: GridfsError) -> None:
        self.send(FrameType.ERROR,
                  wire.error_payload(int(exc.status), str(exc)))

    # sealed fields: the tag set is fixed per frame type, both peers walk
    # it in ascending order so the counters stay in step.

    def _seal_fields(self, frame_type: int, payload: bytes) -> bytes:
        tags = sealed_field_tags(frame_type)
        fields = wire.decode_fields(payload)
        for tag in sorted(tags):
            if tag in fields:
                fields[tag] = self._require_keys().seal(
                    fields[tag], bytes([frame_type, tag]))
        return wire.encode_fields(fields)

    def _open_fields(self, frame_type: int, payload: bytes) -> bytes:
        tags = sealed_field_tags(frame_type)
        fields = wire.decode_fields(payload)
        for tag in sorted(tags):
            if tag in fields:
                fields[tag] = self._require_keys().open(
                    fields[tag], bytes([frame_type, tag]))
        return wire.encode_fields(fields)

    def _require_keys(self) -> ChannelKeys:
        if self.keys is None:
            raise ProtocolError("no channel keys established")
        return self.keys

    def _read_frame(self) -> Frame:
        while True:
            try:
                frame, rest = wire.decode_frame(bytes(self._rbuf),
                                                self.max_payload)
            except wire.TruncatedFrame as short:
                chunk = self._recv_some(short.needed)
                self._rbuf += chunk
                continue
            self._rbuf = bytearray(rest)
            return frame

    def _recv_some(self, at_least: int) -> bytes:
        out = bytearray()
        while len(out) < at_least:
            try:
                chunk = self.sock.recv(max(at_least - len(out), 65536))
            except OSError as exc:
                raise ConnectionLost(str(exc)) from None
            if not chunk:
                raise ConnectionLost("peer closed the connection")
            out += chunk
        return bytes(out)


# -- client-side bootstrap --------------------------------------------------

def connect(address: tuple[str, int], params: SessionParams,
            username: str, psk: bytes | None,
            transfer_id: bytes | None = None, stream_index: int = 0,
            timeout: float | None = 30.0) -> Channel:
    """Dial a node: HELLO/WELCOME negotiation, key derivation, then AUTH.

    Data connections (transfer_id given) skip AUTH; they are admitted by
    the transfer rendezvous instead and inherit the owner's key schedule.
    """
    if len(username.encode("utf-8")) > MAX_USERNAME:
        raise AuthFailed("username too long")
    sock = socket.create_connection(address, timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    try:
        client_nonce = os.urandom(NONCE_SIZE)
        hello = wire.decode_fields(
            wire.hello_payload(params, client_nonce, transfer_id, stream_index))
        hello[T_USER] = username.encode("utf-8")
        raw = wire.encode_frame(Frame(FrameType.HELLO,
                                      wire.encode_fields(hello)))
        sock.sendall(raw)

        channel = Channel(sock, params, keys=None)
        frame = channel._read_frame()
        if frame.frame_type == FrameType.ERROR:
            code, message = wire.parse_error(frame.payload)
            raise error_for_status(code, message)
        if frame.frame_type != FrameType.WELCOME:
            raise ProtocolError("expected WELCOME")
        agreed, server_nonce = wire.parse_welcome(frame.payload)
        channel.params = agreed
        channel.username = username
        if psk is not None:
            channel.keys = ChannelKeys.for_role(psk, client_nonce,
                                                server_nonce, is_client=True)
        if transfer_id is not None:
            sock.settimeout(None)    # timeout only guards the handshake
            return channel

        proof = credential_proof(psk or b"", client_nonce, server_nonce,
                                 username)
        channel.send(FrameType.AUTH, wire.encode_fields({
            A_USER: username.encode("utf-8"),
            A_PROOF: proof,
        }))
        reply = channel.recv()
        if reply.frame_type == FrameType.AUTH_OK:
            sock.settimeout(None)
            return channel
        if reply.frame_type == FrameType.AUTH_FAIL:
            raise AuthFailed("server rejected credentials")
        if reply.frame_type == FrameType.ERROR:
            code, message = wire.parse_error(reply.payload)
            raise error_for_status(code, message)
        raise ProtocolError("unexpected reply to AUTH")
    except BaseException:
        sock.close()
        raise
