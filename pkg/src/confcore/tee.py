"""Software emulation of a VM-based TEE with SEV-style features.

A :class:`Manufacturer` holds the root key and endorses :class:`Platform`
keys. The platform launches secure VMs (SVMs), measures them, signs
attestation reports that carry a fresh channel public key, and keeps each
SVM's protected memory encrypted under its own key. :meth:`Platform.host_read`
is the adversary: it sees what a compromised hypervisor would see.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import os
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field, fields, replace
from enum import Enum, IntFlag
from typing import Iterable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

REPORT_VERSION = 1
NONCE_LEN = 16
_CERT_DOMAIN = b"confcore/platform-cert/v1"
_REPORT_DOMAIN = b"confcore/report/v1"
_CHANNEL_KEYS_RETAINED = 2


class Feature(IntFlag):
    NONE = 0
    MEMORY_ENCRYPTION = 1      # SEV
    REGISTER_ENCRYPTION = 2    # SEV-ES
    INTEGRITY_PROTECTION = 4   # SEV-SNP

    @classmethod
    def parse(cls, names: Iterable[str]) -> "Feature":
        out = cls.NONE
        for n in names:
            try:
                out |= cls[n.strip().upper()]
            except KeyError:
                raise ValueError(f"unknown feature {n!r}") from None
        return out

    def names(self) -> list[str]:
        return [f.name.lower() for f in Feature if f and f in self]


SNP = Feature.MEMORY_ENCRYPTION | Feature.REGISTER_ENCRYPTION | Feature.INTEGRITY_PROTECTION


class TeeError(Exception):
    pass


class UnsupportedFeature(TeeError):
    pass


class TerminatedSvm(TeeError):
    pass


class AlreadyTerminated(TerminatedSvm):
    pass


class NotAttested(TeeError):
    pass


class ChannelMismatch(TeeError):
    pass


def canonical_config(config: dict) -> bytes:
    return json.dumps(config, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()


def measure(code_image: bytes, launch_config: dict) -> bytes:
    """32-byte launch digest over the code image and canonical config."""
    h = hashlib.sha256()
    h.update(struct.pack(">Q", len(code_image)))
    h.update(code_image)
    h.update(canonical_config(launch_config))
    return h.digest()


def _lp(data: bytes) -> bytes:
    if len(data) > 0xFFFF:
        raise ValueError("field too long")
    return struct.pack(">H", len(data)) + data


@dataclass(frozen=True)
class AttestationReport:
    measurement: bytes
    nonce: bytes
    firmware_version: str
    features: Feature
    channel_pubkey: bytes
    platform_signature: bytes = b""
    platform_cert: bytes = b""
    version: int = REPORT_VERSION

    def signed_part(self) -> bytes:
        return (struct.pack(">B", self.version) + self.measurement + self.nonce
                + _lp(self.firmware_version.encode()) + struct.pack(">B", int(self.features) & 0xFF)
                + _lp(self.channel_pubkey))

    def to_bytes(self) -> bytes:
        if len(self.measurement) != 32 or len(self.nonce) != NONCE_LEN:
            raise ValueError("measurement must be 32 bytes and nonce 16 bytes")
        return self.signed_part() + _lp(self.platform_signature) + _lp(self.platform_cert)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "AttestationReport":
        try:
            version = buf[0]
            measurement = buf[1:33]
            nonce = buf[33:49]
            off = 49
            parts = []
            for i in range(4):
                if i == 1:
                    feats = buf[off]
                    off += 1
                (n,) = struct.unpack_from(">H", buf, off)
                off += 2
                part = buf[off:off + n]
                if len(part) != n:
                    raise ValueError("truncated field")
                parts.append(part)
                off += n
            if off != len(buf) or len(nonce) != NONCE_LEN:
                raise ValueError("length mismatch")
            fw = parts[0].decode()
        except (IndexError, struct.error, UnicodeDecodeError) as exc:
            raise ValueError(f"malformed report: {exc}") from exc
        if version != REPORT_VERSION:
            raise ValueError(f"unsupported report version {version}")
        return cls(measurement, nonce, fw, Feature(feats),
                   parts[1], parts[2], parts[3], version)


class Manufacturer:
    """Holder of the root signing key that endorses platforms."""

    def __init__(self, root_key: Ed25519PrivateKey | None = None):
        self._root = root_key or Ed25519PrivateKey.generate()

    @property
    def root_pubkey(self) -> bytes:
        return self._root.public_key().public_bytes_raw()

    def endorse(self, platform_pubkey: bytes) -> bytes:
        return platform_pubkey + self._root.sign(_CERT_DOMAIN + platform_pubkey)


class SvmState(str, Enum):
    LAUNCHED = "Launched"
    ATTESTED = "Attested"
    PROVISIONED = "Provisioned"
    RUNNING = "Running"
    TERMINATED = "Terminated"


@dataclass
class SvmHandle:
    svm_id: str
    measurement: bytes
    features: Feature
    launch_config: dict
    state: SvmState = SvmState.LAUNCHED
    # name -> nonce||ciphertext (or plaintext without memory encryption)
    protected_store: dict[str, bytes] = field(default_factory=dict, repr=False)
    unprotected_store: dict[str, bytes] = field(default_factory=dict, repr=False)

    @property
    def encrypted(self) -> bool:
        return Feature.MEMORY_ENCRYPTION in self.features


_CHAN_PREFIX = "\x00chan/"
_PAYLOAD = "\x00provisioned"
_LOG = "\x00log"


class Platform:
    """Emulated host CPU + firmware.

    Operations on one SVM are serialized by a per-SVM lock; distinct SVMs
    proceed independently.
    """

    def __init__(self, manufacturer: Manufacturer, supported: Feature = SNP,
                 firmware_version: str = "1.55.21"):
        self.supported = supported
        self.firmware_version = firmware_version
        self._key = Ed25519PrivateKey.generate()
        self.cert = manufacturer.endorse(self._key.public_key().public_bytes_raw())
        self._vm_keys: dict[str, bytes] = {}
        self._chan_fps: dict[str, list[bytes]] = {}
        self._locks: dict[str, threading.RLock] = {}
        self._svms: dict[str, SvmHandle] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self.provision_log: list[tuple[str, bytes]] = []

    # -- lifecycle -------------------------------------------------------

    def launch_svm(self, code_image: bytes, launch_config: dict,
                   features: Feature = SNP, svm_id: str | None = None) -> SvmHandle:
        features = Feature(features)
        if features & ~self.supported:
            raise UnsupportedFeature((features & ~self.supported).names())
        with self._lock:
            svm_id = svm_id or f"svm-{next(self._ids)}"
            if svm_id in self._svms:
                raise ValueError(f"duplicate svm id {svm_id}")
            handle = SvmHandle(svm_id, measure(code_image, launch_config), features,
                               dict(launch_config))
            self._svms[svm_id] = handle
            self._vm_keys[svm_id] = AESGCM.generate_key(256)
            self._locks[svm_id] = threading.RLock()
            self._chan_fps[svm_id] = []
        return handle

    def svms(self) -> list[SvmHandle]:
        with self._lock:
            return list(self._svms.values())

    def _live(self, svm: SvmHandle) -> None:
        if svm.state == SvmState.TERMINATED:
            raise TerminatedSvm(svm.svm_id)

    def generate_report(self, svm: SvmHandle, nonce: bytes) -> AttestationReport:
        if len(nonce) != NONCE_LEN:
            raise ValueError("nonce must be 16 bytes")
        with self._locks[svm.svm_id]:
            self._live(svm)
            chan = X25519PrivateKey.generate()
            pub = chan.public_key().public_bytes_raw()
            fp = hashlib.sha256(pub).digest()
            self._put(svm, _CHAN_PREFIX + fp.hex(), chan.private_bytes_raw())
            fps = self._chan_fps[svm.svm_id]
            fps.append(fp)
            while len(fps) > _CHANNEL_KEYS_RETAINED:
                svm.protected_store.pop(_CHAN_PREFIX + fps.pop(0).hex(), None)
            report = AttestationReport(svm.measurement, bytes(nonce), self.firmware_version,
                                       svm.features, pub, platform_cert=self.cert)
            report = replace(report, platform_signature=self._key.sign(_REPORT_DOMAIN + report.signed_part()))
            if svm.state == SvmState.LAUNCHED:
                svm.state = SvmState.ATTESTED
            return report

    def channel_exchange(self, svm: SvmHandle, key_fp: bytes, peer_pub: bytes) -> bytes:
        """ECDH with a report-bound channel key; the private half stays inside."""
        with self._locks[svm.svm_id]:
            self._live(svm)
            priv = self._get(svm, _CHAN_PREFIX + key_fp.hex())
            if priv is None:
                raise KeyError("unknown channel key")
            return X25519PrivateKey.from_private_bytes(priv).exchange(
                X25519PublicKey.from_public_bytes(peer_pub))

    def channel_fingerprints(self, svm: SvmHandle) -> list[bytes]:
        with self._locks[svm.svm_id]:
            return list(self._chan_fps[svm.svm_id])

    def provision(self, svm: SvmHandle, channel_fp: bytes, payload: bytes) -> bool:
        with self._locks[svm.svm_id]:
            self._live(svm)
            if svm.state == SvmState.LAUNCHED:
                raise NotAttested(svm.svm_id)
            if channel_fp not in self._chan_fps[svm.svm_id]:
                raise ChannelMismatch("payload did not arrive over a report-bound channel")
            self._put(svm, _PAYLOAD, bytes(payload))
            if svm.state == SvmState.ATTESTED:
                svm.state = SvmState.PROVISIONED
            self.provision_log.append((svm.svm_id, channel_fp))
            return True

    def provisioned_payload(self, svm: SvmHandle) -> bytes | None:
        with self._locks[svm.svm_id]:
            self._live(svm)
            return self._get(svm, _PAYLOAD)

    def mark_running(self, svm: SvmHandle) -> None:
        with self._locks[svm.svm_id]:
            self._live(svm)
            if svm.state != SvmState.PROVISIONED:
                raise NotAttested(f"{svm.svm_id} is {svm.state.value}")
            svm.state = SvmState.RUNNING

    def terminate(self, svm: SvmHandle) -> bytes:
        """Destroy the VM key and return the exported log region."""
        with self._locks[svm.svm_id]:
            if svm.state == SvmState.TERMINATED:
                raise AlreadyTerminated(svm.svm_id)
            logbuf = self._get(svm, _LOG) or b""
            svm.state = SvmState.TERMINATED
            self._vm_keys.pop(svm.svm_id, None)
            self._chan_fps[svm.svm_id] = []
            return logbuf

    def compromise(self, svm: SvmHandle, code_image: bytes) -> None:
        """Test hook: measured content changes underneath a running SVM."""
        with self._locks[svm.svm_id]:
            svm.measurement = measure(code_image, svm.launch_config)

    # -- guest memory ------------------------------------------------------

    def _put(self, svm: SvmHandle, name: str, value: bytes) -> None:
        if svm.encrypted:
            nonce = os.urandom(12)
            aad = svm.svm_id.encode() + b"/" + name.encode()
            value = nonce + AESGCM(self._vm_keys[svm.svm_id]).encrypt(nonce, value, aad)
        svm.protected_store[name] = value

    def _get(self, svm: SvmHandle, name: str) -> bytes | None:
        blob = svm.protected_store.get(name)
        if blob is None or not svm.encrypted:
            return blob
        key = self._vm_keys.get(svm.svm_id)
        if key is None:
            raise TerminatedSvm(svm.svm_id)
        aad = svm.svm_id.encode() + b"/" + name.encode()
        return AESGCM(key).decrypt(blob[:12], blob[12:], aad)

    def write_protected(self, svm: SvmHandle, name: str, value: bytes) -> None:
        with self._locks[svm.svm_id]:
            self._live(svm)
            self._put(svm, name, bytes(value))

    def read_protected(self, svm: SvmHandle, name: str) -> bytes | None:
        with self._locks[svm.svm_id]:
            self._live(svm)
            return self._get(svm, name)

    def delete_protected(self, svm: SvmHandle, name: str) -> None:
        with self._locks[svm.svm_id]:
            self._live(svm)
            svm.protected_store.pop(name, None)

    def write_unprotected(self, svm: SvmHandle, name: str, value: bytes) -> None:
        with self._locks[svm.svm_id]:
            self._live(svm)
            svm.unprotected_store[name] = bytes(value)

    def append_log(self, svm: SvmHandle, data: bytes) -> None:
        with self._locks[svm.svm_id]:
            self._live(svm)
            self._put(svm, _LOG, (self._get(svm, _LOG) or b"") + data)

    def host_read(self, svm: SvmHandle) -> bytes:
        """Point-in-time view of every host-visible byte of one SVM."""
        with self._locks[svm.svm_id]:
            parts = []
            for name, value in svm.unprotected_store.items():
                parts += [name.encode(), b"\x00", value, b"\x00"]
            for value in svm.protected_store.values():
                parts += [value, b"\x00"]
            return b"".join(parts)


# -- verification -------------------------------------------------------------

class RejectReason(str, Enum):
    MALFORMED = "malformed"
    SIGNATURE = "signature"
    NONCE = "nonce"
    MEASUREMENT = "measurement"
    FEATURES = "features"


@dataclass(frozen=True)
class Verdict:
    ok: bool
    reason: RejectReason | None = None
    detail: str = ""
    report: AttestationReport | None = None

    def __bool__(self) -> bool:
        return self.ok


class ReplayCache:
    """Last ``capacity`` (nonce, svm_id) pairs seen by a verifier."""

    def __init__(self, capacity: int = 1024):
        self.capacity = capacity
        self._seen: OrderedDict[tuple[bytes, str | None], None] = OrderedDict()
        self._lock = threading.Lock()

    def check_and_add(self, nonce: bytes, svm_id: str | None) -> bool:
        key = (bytes(nonce), svm_id)
        with self._lock:
            if key in self._seen:
                return False
            self._seen[key] = None
            if len(self._seen) > self.capacity:
                self._seen.popitem(last=False)
            return True


def verify_report(report: AttestationReport | bytes, root_pubkey: bytes, expected_nonce: bytes,
                  allowlist: Iterable[bytes], required_features: Feature = Feature.NONE,
                  replay: ReplayCache | None = None, svm_id: str | None = None) -> Verdict:
    """Check chain, freshness, identity and features in that order; the
    verdict names the first check that failed."""
    if isinstance(report, (bytes, bytearray)):
        try:
            report = AttestationReport.from_bytes(bytes(report))
        except ValueError as exc:
            return Verdict(False, RejectReason.MALFORMED, str(exc))
    cert = report.platform_cert
    if len(cert) != 96:
        return Verdict(False, RejectReason.SIGNATURE, "platform certificate malformed")
    platform_pub = cert[:32]
    try:
        Ed25519PublicKey.from_public_bytes(root_pubkey).verify(cert[32:], _CERT_DOMAIN + platform_pub)
    except (InvalidSignature, ValueError):
        return Verdict(False, RejectReason.SIGNATURE, "platform certificate not endorsed by root")
    try:
        Ed25519PublicKey.from_public_bytes(platform_pub).verify(
            report.platform_signature, _REPORT_DOMAIN + report.signed_part())
    except (InvalidSignature, ValueError):
        return Verdict(False, RejectReason.SIGNATURE, "report signature invalid")
    if report.nonce != expected_nonce:
        return Verdict(False, RejectReason.NONCE, "nonce does not match challenge")
    if replay is not None and not replay.check_and_add(report.nonce, svm_id):
        return Verdict(False, RejectReason.NONCE, "nonce replayed")
    if report.measurement not in set(allowlist):
        return Verdict(False, RejectReason.MEASUREMENT, report.measurement.hex())
    missing = Feature(required_features) & ~report.features
    if missing:
        return Verdict(False, RejectReason.FEATURES, ",".join(missing.names()))
    return Verdict(True, report=report)


class Verifier:
    """Local verifier holding the distributed root key and a replay cache."""

    def __init__(self, root_pubkey: bytes, replay_capacity: int = 1024):
        self.root_pubkey = root_pubkey
        self.replay = ReplayCache(replay_capacity)

    @staticmethod
    def fresh_nonce() -> bytes:
        return os.urandom(NONCE_LEN)

    def verify(self, report, expected_nonce: bytes, allowlist, required_features=Feature.NONE,
               svm_id: str | None = None) -> Verdict:
        return verify_report(report, self.root_pubkey, expected_nonce, allowlist,
                             required_features, self.replay, svm_id)


REPORT_FIELDS = tuple(f.name for f in fields(AttestationReport))
