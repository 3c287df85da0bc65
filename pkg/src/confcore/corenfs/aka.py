"""Network-side AKA derivations.

A keyed PRF (HMAC-SHA256) with domain-separation labels stands in for
MILENAGE and the 33.501 KDF. The labels are part of the wire contract:
the UE simulator implements the same functions on its own code path.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass

SQN_BITS = 48
SQN_MAX = (1 << SQN_BITS) - 1
RESYNC_WINDOW = 32
AMF_FIELD = b"\x80\x00"
SERVING_NETWORK = "5G:mnc001.mcc001.3gppnetwork.org"


def _prf(key: bytes, label: str, *parts: bytes) -> bytes:
    msg = label.encode() + b"\x00" + b"".join(struct.pack(">H", len(p)) + p for p in parts)
    return hmac.new(key, msg, hashlib.sha256).digest()


def sqn_bytes(sqn: int) -> bytes:
    if not 0 <= sqn <= SQN_MAX:
        raise ValueError("sqn out of range")
    return sqn.to_bytes(6, "big")


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


def f1(k: bytes, rand: bytes, sqn: bytes, amf: bytes) -> bytes:
    return _prf(k, "f1", rand, sqn, amf)[:8]


def f1_star(k: bytes, rand: bytes, sqn: bytes) -> bytes:
    return _prf(k, "f1", rand, sqn, b"\x00\x00", b"resync")[:8]


def f2(k: bytes, rand: bytes) -> bytes:
    return _prf(k, "f2", rand)[:8]


def f3(k: bytes, rand: bytes) -> bytes:
    return _prf(k, "f3", rand)[:16]


def f4(k: bytes, rand: bytes) -> bytes:
    return _prf(k, "f4", rand)[:16]


def f5(k: bytes, rand: bytes) -> bytes:
    return _prf(k, "f5", rand)[:6]


def f5_star(k: bytes, rand: bytes) -> bytes:
    return _prf(k, "f5", rand, b"resync")[:6]


def res_star(ck: bytes, ik: bytes, snn: str, rand: bytes, res: bytes) -> bytes:
    return _prf(ck + ik, "f2", snn.encode(), rand, res)[:16]


def kausf(ck: bytes, ik: bytes, snn: str, sqn_xor_ak: bytes) -> bytes:
    return _prf(ck + ik, "kausf", snn.encode(), sqn_xor_ak)


def kseaf(k_ausf: bytes, snn: str) -> bytes:
    return _prf(k_ausf, "kseaf", snn.encode())


@dataclass(frozen=True)
class AuthVector:
    rand: bytes
    autn: bytes
    xres_star: bytes
    k_ausf: bytes


def generate_vector(k: bytes, sqn: int, rand: bytes, snn: str = SERVING_NETWORK) -> AuthVector:
    sqn_b = sqn_bytes(sqn)
    ak = f5(k, rand)
    mac_a = f1(k, rand, sqn_b, AMF_FIELD)
    conc = _xor(sqn_b, ak)
    ck, ik = f3(k, rand), f4(k, rand)
    xres = f2(k, rand)
    return AuthVector(rand, conc + AMF_FIELD + mac_a, res_star(ck, ik, snn, rand, xres),
                      kausf(ck, ik, snn, conc))


def recover_resync_sqn(k: bytes, rand: bytes, auts: bytes) -> int | None:
    """UE sequence number from AUTS, or None if its MAC does not verify."""
    if len(auts) != 14:
        return None
    sqn_ms = _xor(auts[:6], f5_star(k, rand))
    if not hmac.compare_digest(f1_star(k, rand, sqn_ms), auts[6:]):
        return None
    return int.from_bytes(sqn_ms, "big")
