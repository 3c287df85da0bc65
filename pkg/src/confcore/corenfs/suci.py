"""SUPI concealment modelled on ECIES profile A (X25519, AES-128-CTR,
HMAC-SHA256 truncated to 8 bytes)."""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.kdf.x963kdf import X963KDF

from .errors import MacFailure

SCHEME_PROFILE_A = 1


@dataclass(frozen=True)
class Suci:
    scheme_id: int
    home_pubkey_id: int
    ephemeral_pubkey: bytes
    ciphertext: bytes
    mac: bytes

    def to_dict(self) -> dict:
        return {"scheme_id": self.scheme_id, "home_pubkey_id": self.home_pubkey_id,
                "ephemeral_pubkey": self.ephemeral_pubkey.hex(),
                "ciphertext": self.ciphertext.hex(), "mac": self.mac.hex()}

    @classmethod
    def from_dict(cls, d: dict) -> "Suci":
        return cls(int(d["scheme_id"]), int(d["home_pubkey_id"]), bytes.fromhex(d["ephemeral_pubkey"]),
                   bytes.fromhex(d["ciphertext"]), bytes.fromhex(d["mac"]))


def _keys(shared: bytes, eph_pub: bytes) -> tuple[bytes, bytes, bytes]:
    okm = X963KDF(hashes.SHA256(), 64, sharedinfo=eph_pub).derive(shared)
    return okm[:16], okm[16:32], okm[32:]


def _ctr(key: bytes, icb: bytes, data: bytes) -> bytes:
    c = Cipher(algorithms.AES(key), modes.CTR(icb)).encryptor()
    return c.update(data) + c.finalize()


def conceal(supi: str, home_pubkey: bytes, home_pubkey_id: int = 1) -> Suci:
    eph = X25519PrivateKey.generate()
    eph_pub = eph.public_key().public_bytes_raw()
    enc_key, icb, mac_key = _keys(eph.exchange(X25519PublicKey.from_public_bytes(home_pubkey)), eph_pub)
    ct = _ctr(enc_key, icb, supi.encode())
    mac = hmac.new(mac_key, ct, hashlib.sha256).digest()[:8]
    return Suci(SCHEME_PROFILE_A, home_pubkey_id, eph_pub, ct, mac)


def deconceal(suci: Suci, home_privkey: bytes) -> str:
    priv = X25519PrivateKey.from_private_bytes(home_privkey)
    try:
        shared = priv.exchange(X25519PublicKey.from_public_bytes(suci.ephemeral_pubkey))
    except ValueError as exc:
        raise MacFailure("invalid ephemeral key") from exc
    enc_key, icb, mac_key = _keys(shared, suci.ephemeral_pubkey)
    expected = hmac.new(mac_key, suci.ciphertext, hashlib.sha256).digest()[:8]
    if not hmac.compare_digest(expected, suci.mac):
        raise MacFailure("SUCI MAC mismatch")
    try:
        return _ctr(enc_key, icb, suci.ciphertext).decode()
    except UnicodeDecodeError as exc:
        raise MacFailure("SUCI plaintext invalid") from exc


def new_home_keypair() -> tuple[bytes, bytes]:
    priv = X25519PrivateKey.generate()
    return priv.private_bytes_raw(), priv.public_key().public_bytes_raw()
