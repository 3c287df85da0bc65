"""UE-side key derivations and SUPI concealment.

Deliberately a separate implementation from the network side (shared
labels, no shared code) so the two can be checked against each other.
"""

from __future__ import annotations

import hashlib
import hmac
import json

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.kdf.x963kdf import X963KDF

AMF_SEPARATION = bytes([0x80, 0x00])
WINDOW = 32


def _mac(key: bytes, label: bytes, fields: list[bytes], size: int) -> bytes:
    buf = bytearray(label)
    buf.append(0)
    for f in fields:
        buf += len(f).to_bytes(2, "big")
        buf += f
    return hmac.digest(key, bytes(buf), "sha256")[:size]


class UsimKeys:
    """What the USIM computes for one challenge."""

    def __init__(self, k: bytes, rand: bytes):
        self.k = k
        self.rand = rand
        self.res = _mac(k, b"f2", [rand], 8)
        self.ck = _mac(k, b"f3", [rand], 16)
        self.ik = _mac(k, b"f4", [rand], 16)
        self.ak = _mac(k, b"f5", [rand], 6)

    def mac_a(self, sqn: bytes, amf: bytes) -> bytes:
        return _mac(self.k, b"f1", [self.rand, sqn, amf], 8)

    def auts(self, sqn_ms: int) -> bytes:
        sqn = sqn_ms.to_bytes(6, "big")
        ak_star = _mac(self.k, b"f5", [self.rand, b"resync"], 6)
        mac_s = _mac(self.k, b"f1", [self.rand, sqn, b"\x00\x00", b"resync"], 8)
        return bytes(a ^ b for a, b in zip(sqn, ak_star)) + mac_s

    def res_star(self, snn: str) -> bytes:
        return _mac(self.ck + self.ik, b"f2", [snn.encode(), self.rand, self.res], 16)

    def k_ausf(self, snn: str, conc: bytes) -> bytes:
        return _mac(self.ck + self.ik, b"kausf", [snn.encode(), conc], 32)


def open_autn(keys: UsimKeys, autn: bytes) -> tuple[int, bool]:
    """(network sqn, MAC ok) from AUTN."""
    conc, amf, mac = autn[:6], autn[6:8], autn[8:16]
    sqn = bytes(a ^ b for a, b in zip(conc, keys.ak))
    return int.from_bytes(sqn, "big"), hmac.compare_digest(keys.mac_a(sqn, amf), mac)


def k_seaf(k_ausf: bytes, snn: str) -> bytes:
    return _mac(k_ausf, b"kseaf", [snn.encode()], 32)


def k_amf(kseaf: bytes, supi: str) -> bytes:
    return hmac.new(kseaf, b"kamf" + supi.encode(), hashlib.sha256).digest()


def smc_mac(kamf: bytes, algorithms_: dict) -> bytes:
    blob = json.dumps(algorithms_, sort_keys=True).encode()
    return hmac.new(kamf, b"smc" + blob, hashlib.sha256).digest()


def conceal_supi(supi: str, home_pub: bytes, key_id: int = 1) -> dict:
    """SUCI as the wire dict the AMF accepts."""
    eph = X25519PrivateKey.generate()
    eph_pub = eph.public_key().public_bytes_raw()
    shared = eph.exchange(X25519PublicKey.from_public_bytes(home_pub))
    okm = X963KDF(hashes.SHA256(), 64, sharedinfo=eph_pub).derive(shared)
    enc = Cipher(algorithms.AES(okm[:16]), modes.CTR(okm[16:32])).encryptor()
    ct = enc.update(supi.encode()) + enc.finalize()
    tag = hmac.new(okm[32:], ct, hashlib.sha256).digest()[:8]
    return {"scheme_id": 1, "home_pubkey_id": key_id, "ephemeral_pubkey": eph_pub.hex(),
            "ciphertext": ct.hex(), "mac": tag.hex()}
