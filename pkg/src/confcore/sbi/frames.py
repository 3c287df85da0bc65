"""SBI wire frames.

Layout, big-endian::

    magic 0x5A54 (2) | version u8 | flags u8 | request_id u64
    | service_len u16 | path_len u16 | token_len u16 | body_len u32
    | service | path | token | body

The 22-byte header is always in clear. When flag bit0 is set, everything
after the header is one AEAD ciphertext (fields plus 16-byte tag) with the
header as associated data, so the lengths are authenticated too.

Flag bit1 marks a response; bits 4-5 carry the method. A response's path
field holds its decimal status code.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import BinaryIO, Callable

from .tokens import AccessToken

MAGIC = 0x5A54
VERSION = 1
FLAG_ENCRYPTED = 0x01
FLAG_RESPONSE = 0x02
_METHOD_SHIFT = 4
_METHOD_MASK = 0x30
TAG_LEN = 16

HEADER = struct.Struct(">HBBQHHHI")
HEADER_LEN = HEADER.size  # 22


class Method(IntEnum):
    GET = 0
    POST = 1
    PUT = 2
    DELETE = 3


class FrameError(ValueError):
    pass


@dataclass
class SbiMessage:
    request_id: int
    method: Method
    service: str
    path: str
    body: bytes = b""
    token: AccessToken | None = None
    status: int | None = None  # None for requests
    timestamp: int = field(default=0, compare=False)

    @property
    def is_response(self) -> bool:
        return self.status is not None

    def reply(self, status: int, body: bytes = b"") -> "SbiMessage":
        return SbiMessage(self.request_id, self.method, self.service, "",
                          body, None, status)


# seal(header, plaintext) -> ciphertext ; open(header, ciphertext) -> plaintext
Sealer = Callable[[bytes, bytes], bytes]
Opener = Callable[[bytes, bytes], bytes]


def _fields(msg: SbiMessage) -> tuple[bytes, bytes, bytes, bytes]:
    path = str(msg.status) if msg.is_response else msg.path
    token = msg.token.to_bytes() if msg.token is not None else b""
    return msg.service.encode(), path.encode(), token, bytes(msg.body)


def encode(msg: SbiMessage, seal: Sealer | None = None) -> bytes:
    service, path, token, body = _fields(msg)
    for name, part, limit in (("service", service, 0xFFFF), ("path", path, 0xFFFF),
                              ("token", token, 0xFFFF), ("body", body, 0xFFFFFFFF)):
        if len(part) > limit:
            raise FrameError(f"{name} too long")
    flags = (int(msg.method) << _METHOD_SHIFT) & _METHOD_MASK
    if msg.is_response:
        flags |= FLAG_RESPONSE
    if seal is not None:
        flags |= FLAG_ENCRYPTED
    header = HEADER.pack(MAGIC, VERSION, flags, msg.request_id,
                         len(service), len(path), len(token), len(body))
    payload = service + path + token + body
    if seal is not None:
        payload = seal(header, payload)
    return header + payload


def parse_header(header: bytes) -> tuple[int, int, tuple[int, int, int, int]]:
    if len(header) < HEADER_LEN:
        raise FrameError("short header")
    magic, version, flags, request_id, sl, pl, tl, bl = HEADER.unpack_from(header)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic:#06x}")
    if version != VERSION:
        raise FrameError(f"unsupported version {version}")
    return flags, request_id, (sl, pl, tl, bl)


def frame_length(header: bytes) -> int:
    flags, _, lens = parse_header(header)
    n = HEADER_LEN + sum(lens)
    return n + TAG_LEN if flags & FLAG_ENCRYPTED else n


def decode(data: bytes, open_: Opener | None = None) -> SbiMessage:
    """Parse one complete frame. Encrypted frames need ``open_``; whatever it
    raises on authentication failure propagates unchanged."""
    flags, request_id, (sl, pl, tl, bl) = parse_header(data)
    if len(data) != frame_length(data):
        raise FrameError("frame length mismatch")
    header, payload = data[:HEADER_LEN], data[HEADER_LEN:]
    if flags & FLAG_ENCRYPTED:
        if open_ is None:
            raise FrameError("encrypted frame on a plain channel")
        payload = open_(header, payload)
        if len(payload) != sl + pl + tl + bl:
            raise FrameError("plaintext length mismatch")
    elif open_ is not None:
        raise FrameError("plain frame on an encrypted channel")
    off = 0
    parts = []
    for n in (sl, pl, tl, bl):
        parts.append(payload[off:off + n])
        off += n
    service, path, token, body = parts
    try:
        tok = AccessToken.from_bytes(token) if token else None
        service_s, path_s = service.decode(), path.decode()
    except (ValueError, UnicodeDecodeError) as exc:
        raise FrameError(str(exc)) from exc
    method = Method((flags & _METHOD_MASK) >> _METHOD_SHIFT)
    if flags & FLAG_RESPONSE:
        try:
            status = int(path_s)
        except ValueError as exc:
            raise FrameError("bad status") from exc
        return SbiMessage(request_id, method, service_s, "", body, tok, status)
    return SbiMessage(request_id, method, service_s, path_s, body, tok)


def read_frame(stream: BinaryIO) -> bytes | None:
    """Read one raw frame from a byte stream; None on clean EOF."""
    header = stream.read(HEADER_LEN)
    if not header:
        return None
    if len(header) < HEADER_LEN:
        raise FrameError("truncated header")
    rest_len = frame_length(header) - HEADER_LEN
    rest = stream.read(rest_len)
    if len(rest) != rest_len:
        raise FrameError("truncated frame")
    return header + rest
