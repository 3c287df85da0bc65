"""Channels, producers and the loopback network connecting NFs.

The transport is an in-process byte pipe: every request and response is
serialized to a frame, optionally observed or tampered with by the network
adversary, and parsed on the other side. Attested channels derive their keys
from the channel public key carried inside a verified attestation report.
"""

from __future__ import annotations

import hashlib
import hmac
import itertools
import json
import logging
import struct
import threading
from dataclasses import dataclass
from typing import Any, Callable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .. import tee
from . import frames
from .frames import Method, SbiMessage
from .tokens import verify_token

log = logging.getLogger(__name__)

PLAIN = "plain"
ATTESTED = "attested"


class SbiError(Exception):
    """Raised by handlers; becomes an error response."""

    status = 500

    def __init__(self, detail: str = "", status: int | None = None, error: str | None = None):
        super().__init__(detail)
        self.detail = detail
        if status is not None:
            self.status = status
        self.error = error or type(self).__name__


class ConnectionRefused(SbiError):
    status = 503


class AttestationMissing(SbiError):
    status = 412


class HandshakeFailure(SbiError):
    status = 495


class Unauthorized(SbiError):
    status = 401


class IntegrityFailure(SbiError):
    status = 400


class Timeout(SbiError):
    status = 504


class ChannelClosed(SbiError):
    status = 499


class RemoteError(SbiError):
    """Error response from a producer that is not one of the SBI errors."""


_TRANSPORT_ERRORS = {c.__name__: c for c in
                     (Unauthorized, AttestationMissing, HandshakeFailure, IntegrityFailure, Timeout)}


def fingerprint(pubkey: bytes) -> bytes:
    return hashlib.sha256(pubkey).digest()


@dataclass(frozen=True)
class ChannelIdentity:
    peer_id: str
    key_fingerprint: bytes = b""
    attested: bool = False


@dataclass
class _LogEntry:
    peer_id: str
    endpoint: str
    report: tee.AttestationReport
    verified_at: int


class AttestationLog:
    """Verified reports by peer; only Verified verdicts can be recorded."""

    def __init__(self):
        self._by_peer: dict[str, _LogEntry] = {}
        self._lock = threading.Lock()

    def record(self, peer_id: str, endpoint: str, verdict: tee.Verdict, now: int = 0) -> None:
        if not verdict.ok or verdict.report is None:
            raise ValueError("only verified reports may enter the attestation log")
        with self._lock:
            self._by_peer[peer_id] = _LogEntry(peer_id, endpoint, verdict.report, now)

    def revoke(self, peer_id: str) -> None:
        with self._lock:
            self._by_peer.pop(peer_id, None)

    def for_endpoint(self, endpoint: str) -> _LogEntry | None:
        with self._lock:
            for e in self._by_peer.values():
                if e.endpoint == endpoint:
                    return e
        return None

    def for_peer(self, peer_id: str) -> _LogEntry | None:
        with self._lock:
            return self._by_peer.get(peer_id)

    def binds(self, peer_id: str, key_fp: bytes) -> bool:
        e = self.for_peer(peer_id)
        return e is not None and fingerprint(e.report.channel_pubkey) == key_fp


# -- channel cryptography ---------------------------------------------------

_INFO = b"confcore-sbi-v1"
_C2S = b"c2s\x00"
_S2C = b"s2c\x00"


def _derive(shared: bytes, key_fp: bytes, eph_pub: bytes) -> tuple[bytes, bytes, bytes]:
    okm = HKDF(hashes.SHA256(), 96, salt=key_fp, info=_INFO + eph_pub).derive(shared)
    return okm[:32], okm[32:64], okm[64:]


class _Cipher:
    """One direction of an attested channel with an implicit counter nonce."""

    def __init__(self, key: bytes, label: bytes):
        self._aead = AESGCM(key)
        self._label = label
        self._send = 0
        self._recv = 0

    def seal(self, header: bytes, plaintext: bytes) -> bytes:
        nonce = self._label + struct.pack(">Q", self._send)
        self._send += 1
        return self._aead.encrypt(nonce, plaintext, header)

    def open(self, header: bytes, ciphertext: bytes) -> bytes:
        nonce = self._label + struct.pack(">Q", self._recv)
        try:
            out = self._aead.decrypt(nonce, ciphertext, header)
        except InvalidTag as exc:
            raise IntegrityFailure("MAC mismatch") from exc
        self._recv += 1
        return out


# -- producer side ------------------------------------------------------------

@dataclass
class RequestContext:
    subject: str | None
    peer_attested: bool
    now: int
    channel_fp: bytes | None = None


Handler = Callable[[SbiMessage, RequestContext], Any]


@dataclass
class _Route:
    handler: Handler
    protected: bool


# key_exchange(key_fp, peer_pub) -> shared secret; runs inside the SVM
KeyExchange = Callable[[bytes, bytes], bytes]


class SbiServer:
    """Token-guarded request dispatch for one NF endpoint."""

    def __init__(self, instance_id: str, nf_type: str, clock, *,
                 token_key: Ed25519PublicKey | None = None,
                 key_exchange: KeyExchange | None = None):
        self.instance_id = instance_id
        self.nf_type = nf_type
        self.clock = clock
        self.token_key = token_key
        self.key_exchange = key_exchange
        self._routes: dict[tuple[str, Method], _Route] = {}
        self._stats_lock = threading.Lock()
        self.executed = 0
        self.executed_protected = 0
        self.rejected = 0

    def route(self, service: str, method: Method, handler: Handler, *, protected: bool = True) -> None:
        self._routes[(service, method)] = _Route(handler, protected)

    def unroute_service(self, service: str) -> None:
        for key in [k for k in self._routes if k[0] == service]:
            del self._routes[key]

    def accept(self, hello: bytes | None) -> tuple["_ServerConnection", bytes]:
        if hello is None:
            return _ServerConnection(self, None, None, None), b""
        if self.key_exchange is None or len(hello) != 64:
            raise HandshakeFailure("peer cannot complete an attested handshake")
        key_fp, eph_pub = hello[:32], hello[32:]
        try:
            shared = self.key_exchange(key_fp, eph_pub)
        except (KeyError, ValueError, tee.TeeError) as exc:
            raise HandshakeFailure(str(exc)) from exc
        k_c2s, k_s2c, k_confirm = _derive(shared, key_fp, eph_pub)
        confirm = hmac.new(k_confirm, b"server-confirm" + hello, hashlib.sha256).digest()
        conn = _ServerConnection(self, _Cipher(k_c2s, _C2S), _Cipher(k_s2c, _S2C), key_fp)
        return conn, confirm

    def dispatch(self, msg: SbiMessage, attested: bool, channel_fp: bytes | None = None) -> SbiMessage:
        route = self._routes.get((msg.service, msg.method))
        if route is None:
            return _error_reply(msg, 404, "NotFound", f"{msg.method.name} {msg.service}")
        now = self.clock.now_ms()
        subject = None
        if route.protected:
            if self.token_key is None:
                return _error_reply(msg, 401, "Unauthorized", "no verification key")
            verdict = verify_token(msg.token, msg.service, now, self.token_key, self.nf_type)
            if not verdict:
                with self._stats_lock:
                    self.rejected += 1
                return _error_reply(msg, 401, "Unauthorized", verdict.reason.value)
            subject = msg.token.subject
        with self._stats_lock:
            self.executed += 1
            if route.protected:
                self.executed_protected += 1
        ctx = RequestContext(subject, attested, now, channel_fp)
        try:
            result = route.handler(msg, ctx)
        except SbiError as exc:
            return _error_reply(msg, exc.status, exc.error, exc.detail)
        if result is None:
            body = b""
        elif isinstance(result, (bytes, bytearray)):
            body = bytes(result)
        else:
            body = json.dumps(result, separators=(",", ":")).encode()
        return msg.reply(200, body)


def _error_reply(msg: SbiMessage, status: int, error: str, detail: str) -> SbiMessage:
    body = json.dumps({"error": error, "detail": detail}).encode()
    return msg.reply(status, body)


class _ServerConnection:
    def __init__(self, server: SbiServer, rx: _Cipher | None, tx: _Cipher | None,
                 key_fp: bytes | None):
        self.server = server
        self.key_fp = key_fp
        self._rx = rx
        self._tx = tx
        self._lock = threading.Lock()
        self.closed = False

    @property
    def attested(self) -> bool:
        return self._rx is not None

    def handle(self, frame: bytes) -> bytes:
        with self._lock:
            if self.closed:
                raise ChannelClosed("connection closed")
            try:
                msg = frames.decode(frame, self._rx.open if self._rx else None)
            except IntegrityFailure:
                self.closed = True
                raise
            except frames.FrameError as exc:
                self.closed = True
                raise IntegrityFailure(f"bad frame: {exc}") from exc
            msg.timestamp = self.server.clock.now_ms()
            resp = self.server.dispatch(msg, self.attested, self.key_fp)
            return frames.encode(resp, self._tx.seal if self._tx else None)


# -- network --------------------------------------------------------------------

Tamper = Callable[[str, bytes], bytes]


class Network:
    """Endpoint registry plus the adversary's view of the wire."""

    def __init__(self):
        self._servers: dict[str, SbiServer] = {}
        self._lock = threading.Lock()
        self.unreachable: set[str] = set()
        self.tamper: Tamper | None = None
        self.tap: list[bytes] | None = None

    def bind(self, endpoint: str, server: SbiServer) -> None:
        with self._lock:
            if endpoint in self._servers:
                raise ValueError(f"endpoint {endpoint} already bound")
            self._servers[endpoint] = server

    def unbind(self, endpoint: str) -> None:
        with self._lock:
            self._servers.pop(endpoint, None)

    def server_at(self, endpoint: str) -> SbiServer | None:
        with self._lock:
            return self._servers.get(endpoint)

    def _server(self, endpoint: str) -> SbiServer:
        if endpoint in self.unreachable:
            raise Timeout(f"{endpoint} did not answer")
        srv = self.server_at(endpoint)
        if srv is None:
            raise ConnectionRefused(endpoint)
        return srv

    def transmit(self, direction: str, data: bytes) -> bytes:
        if self.tamper is not None:
            data = self.tamper(direction, data)
        if self.tap is not None:
            self.tap.append(data)
        return data


class Channel:
    """Client end of a full-duplex, ordered connection to one producer."""

    def __init__(self, network: Network, endpoint: str, local: ChannelIdentity,
                 peer: ChannelIdentity, conn: _ServerConnection,
                 tx: _Cipher | None, rx: _Cipher | None, clock=None):
        self.network = network
        self.endpoint = endpoint
        self.local = local
        self.peer = peer
        self._conn = conn
        self._tx = tx
        self._rx = rx
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self.clock = clock
        self.closed = False

    @property
    def mode(self) -> str:
        return ATTESTED if self.peer.attested else PLAIN

    def next_request_id(self) -> int:
        return next(self._ids)

    def close(self) -> None:
        self.closed = True

    def send(self, msg: SbiMessage) -> SbiMessage:
        with self._lock:
            if self.closed:
                raise ChannelClosed(self.endpoint)
            if self.endpoint in self.network.unreachable:
                raise Timeout(f"{self.endpoint} did not answer")
            wire = self.network.transmit("request", frames.encode(msg, self._tx.seal if self._tx else None))
            try:
                raw = self._conn.handle(wire)
            except (IntegrityFailure, ChannelClosed):
                self.closed = True
                raise
            raw = self.network.transmit("response", raw)
            try:
                resp = frames.decode(raw, self._rx.open if self._rx else None)
            except IntegrityFailure:
                self.closed = True
                raise
            except frames.FrameError as exc:
                self.closed = True
                raise IntegrityFailure(f"bad response frame: {exc}") from exc
        if resp.request_id != msg.request_id or not resp.is_response:
            self.closed = True
            raise IntegrityFailure("response does not correlate with request")
        if self.clock is not None:
            resp.timestamp = self.clock.now_ms()
        return resp


def open_channel(network: Network, local: ChannelIdentity, remote_endpoint: str, mode: str,
                 trust: AttestationLog | None = None, clock=None) -> Channel:
    """Connect to ``remote_endpoint``; attested mode needs a verified report
    for the peer in ``trust`` and key confirmation from the peer."""
    if mode not in (PLAIN, ATTESTED):
        raise ValueError(f"unknown channel mode {mode!r}")
    server = network._server(remote_endpoint)
    if mode == PLAIN:
        conn, _ = server.accept(None)
        peer = ChannelIdentity(server.instance_id)
        return Channel(network, remote_endpoint, local, peer, conn, None, None, clock)

    entry = trust.for_endpoint(remote_endpoint) if trust is not None else None
    if entry is None:
        raise AttestationMissing(f"no verified report for {remote_endpoint}")
    key_fp = fingerprint(entry.report.channel_pubkey)
    eph = X25519PrivateKey.generate()
    eph_pub = eph.public_key().public_bytes_raw()
    hello = key_fp + eph_pub
    conn, confirm = server.accept(network.transmit("hello", hello))
    confirm = network.transmit("confirm", confirm)
    shared = eph.exchange(X25519PublicKey.from_public_bytes(entry.report.channel_pubkey))
    k_c2s, k_s2c, k_confirm = _derive(shared, key_fp, eph_pub)
    expected = hmac.new(k_confirm, b"server-confirm" + hello, hashlib.sha256).digest()
    if not hmac.compare_digest(confirm, expected):
        raise HandshakeFailure("key confirmation mismatch")
    peer = ChannelIdentity(entry.peer_id, key_fp, trust.binds(entry.peer_id, key_fp))
    return Channel(network, remote_endpoint, local, peer, conn,
                   _Cipher(k_c2s, _C2S), _Cipher(k_s2c, _S2C), clock)


def send_request(ch: Channel, msg: SbiMessage) -> SbiMessage:
    """Send and return the correlated response; SBI-level failures raise."""
    resp = ch.send(msg)
    if resp.status >= 400:
        try:
            info = json.loads(resp.body)
        except ValueError:
            info = {}
        name = info.get("error", "RemoteError")
        detail = info.get("detail", "")
        cls = _TRANSPORT_ERRORS.get(name)
        if cls is not None:
            raise cls(detail)
        raise RemoteError(detail, status=resp.status, error=name)
    return resp
