"""Self-contained OAuth2-style access tokens signed by the NRF."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from enum import Enum

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)


class TokenReject(str, Enum):
    SIGNATURE = "signature"
    EXPIRED = "expired"
    SCOPE = "scope"
    AUDIENCE = "audience"
    MALFORMED = "malformed"


def _pack_str(s: str) -> bytes:
    raw = s.encode()
    return struct.pack(">H", len(raw)) + raw


def _unpack_str(buf: bytes, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from(">H", buf, off)
    off += 2
    if off + n > len(buf):
        raise ValueError("truncated string")
    return buf[off:off + n].decode(), off + n


@dataclass(frozen=True)
class AccessToken:
    subject: str
    audience: str
    scope: tuple[str, ...]
    issued_at: int
    expires_at: int
    signature: bytes = b""

    def __post_init__(self):
        if self.expires_at <= self.issued_at:
            raise ValueError("expires_at must be after issued_at")
        object.__setattr__(self, "scope", tuple(self.scope))

    def signed_part(self) -> bytes:
        out = [_pack_str(self.subject), _pack_str(self.audience),
               struct.pack(">H", len(self.scope))]
        out += [_pack_str(s) for s in self.scope]
        out.append(struct.pack(">QQ", self.issued_at, self.expires_at))
        return b"".join(out)

    def to_bytes(self) -> bytes:
        return self.signed_part() + struct.pack(">H", len(self.signature)) + self.signature

    @classmethod
    def from_bytes(cls, buf: bytes) -> "AccessToken":
        try:
            subject, off = _unpack_str(buf, 0)
            audience, off = _unpack_str(buf, off)
            (count,) = struct.unpack_from(">H", buf, off)
            off += 2
            scope = []
            for _ in range(count):
                s, off = _unpack_str(buf, off)
                scope.append(s)
            issued_at, expires_at = struct.unpack_from(">QQ", buf, off)
            off += 16
            (siglen,) = struct.unpack_from(">H", buf, off)
            off += 2
            signature = buf[off:off + siglen]
            if len(signature) != siglen or off + siglen != len(buf):
                raise ValueError("bad token length")
        except (struct.error, UnicodeDecodeError) as exc:
            raise ValueError(f"malformed token: {exc}") from exc
        return cls(subject, audience, tuple(scope), issued_at, expires_at, signature)

    def sign(self, key: Ed25519PrivateKey) -> "AccessToken":
        return replace(self, signature=key.sign(self.signed_part()))


@dataclass(frozen=True)
class TokenVerdict:
    ok: bool
    reason: TokenReject | None = None

    def __bool__(self) -> bool:
        return self.ok


ACCEPT = TokenVerdict(True)


def verify_token(tok: AccessToken | None, required_scope: str, now: int,
                 verify_key: Ed25519PublicKey, audience: str) -> TokenVerdict:
    """Accept iff signature valid, unexpired, scope covers the service and the
    audience names this producer type. Never raises."""
    if tok is None:
        return TokenVerdict(False, TokenReject.MALFORMED)
    try:
        verify_key.verify(tok.signature, tok.signed_part())
    except (InvalidSignature, ValueError):
        return TokenVerdict(False, TokenReject.SIGNATURE)
    if not now < tok.expires_at:
        return TokenVerdict(False, TokenReject.EXPIRED)
    if required_scope not in tok.scope:
        return TokenVerdict(False, TokenReject.SCOPE)
    if tok.audience != audience:
        return TokenVerdict(False, TokenReject.AUDIENCE)
    return ACCEPT


_GRANT_DOMAIN = b"confcore/vnfm-grant/v1"


@dataclass(frozen=True)
class BootstrapGrant:
    """VNFM-signed statement that ``subject`` is a deployed NF of ``nf_type``.

    The NRF accepts it in place of a prior registration so a new NF can
    obtain its first ``nnrf-nfm`` token.
    """

    subject: str
    nf_type: str
    signature: bytes = b""

    def signed_part(self) -> bytes:
        return _GRANT_DOMAIN + _pack_str(self.subject) + _pack_str(self.nf_type)

    def sign(self, key: Ed25519PrivateKey) -> "BootstrapGrant":
        return replace(self, signature=key.sign(self.signed_part()))

    def verify(self, key: Ed25519PublicKey) -> bool:
        try:
            key.verify(self.signature, self.signed_part())
        except (InvalidSignature, ValueError):
            return False
        return True

    def to_dict(self) -> dict:
        return {"subject": self.subject, "nf_type": self.nf_type, "signature": self.signature.hex()}

    @classmethod
    def from_dict(cls, d: dict) -> "BootstrapGrant":
        return cls(d["subject"], d["nf_type"], bytes.fromhex(d["signature"]))
