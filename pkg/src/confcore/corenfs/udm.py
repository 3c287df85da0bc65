"""UDM: subscriber database, SUCI de-concealment and vector generation."""

from __future__ import annotations

import hashlib
import hmac
import io
import os
import random
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from ..sbi import Method, RequestContext, SbiMessage
from . import aka
from .errors import StorageFailure, UnknownKeyId, UnknownSubscriber
from .runtime import NetworkFunction, jload
from .suci import Suci, deconceal

SUPI_PREFIX = "imsi-00101"
_LOCK_STRIPES = 64
_REC = struct.Struct(">16s6sH")


def supi_for(index: int) -> str:
    return f"{SUPI_PREFIX}{index:010d}"


def generate_population(n: int, seed: int) -> list[tuple[str, bytes, int]]:
    """(supi, k, sqn) rows for a seeded population; the RAN simulator has its own copy."""
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = random.Random(seed)
    return [(supi_for(i + 1), rng.randbytes(16), 0) for i in range(n)]


def format_rows(rows: Iterable[tuple[str, bytes, int]]) -> str:
    return "".join(f"{s},{k.hex()},{q}\n" for s, k, q in rows)


def parse_rows(text: str) -> list[tuple[str, bytes, int]]:
    rows = []
    for lineno, line in enumerate(io.StringIO(text), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            supi, k_hex, sqn = line.split(",")
            k = bytes.fromhex(k_hex)
            sqn_i = int(sqn)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: expected supi,k_hex,sqn") from exc
        if len(k) != 16 or not 0 <= sqn_i <= aka.SQN_MAX or not supi:
            raise ValueError(f"line {lineno}: bad key length or sqn")
        rows.append((supi, k, sqn_i))
    return rows


@dataclass
class SubscriberRecord:
    supi: str
    k: bytes
    sqn: int
    home_network_keypair_ref: int = 1

    def pack(self) -> bytes:
        return _REC.pack(self.k, aka.sqn_bytes(self.sqn), self.home_network_keypair_ref) + self.supi.encode()

    @classmethod
    def unpack(cls, blob: bytes) -> "SubscriberRecord":
        k, sqn, ref = _REC.unpack_from(blob)
        return cls(blob[_REC.size:].decode(), k, int.from_bytes(sqn, "big"), ref)


@dataclass
class CreateReport:
    n: int
    elapsed_ms: float


class DiskStore:
    """Append-only sealed key-value log; later entries win on replay.

    Entry: u32 length | nonce(12) | AES-GCM(u16 name length | name | value).
    """

    def __init__(self, path: str | Path, key: bytes, flush: bool = True):
        self.path = Path(path)
        self._aead = AESGCM(key)
        self.flush = flush
        self._fh = None
        self._lock = threading.Lock()

    def _open(self):
        if self._fh is None:
            self._fh = open(self.path, "ab")
        return self._fh

    def append(self, name: str, value: bytes) -> None:
        nb = name.encode()
        nonce = os.urandom(12)
        blob = nonce + self._aead.encrypt(nonce, struct.pack(">H", len(nb)) + nb + value, None)
        try:
            with self._lock:
                fh = self._open()
                fh.write(struct.pack(">I", len(blob)) + blob)
                if self.flush:
                    fh.flush()
        except OSError as exc:
            raise StorageFailure(str(exc)) from exc

    def replay(self) -> Iterator[tuple[str, bytes]]:
        if not self.path.exists():
            return
        data = self.path.read_bytes()
        off = 0
        while off + 4 <= len(data):
            (n,) = struct.unpack_from(">I", data, off)
            blob = data[off + 4: off + 4 + n]
            off += 4 + n
            if len(blob) != n:
                raise StorageFailure("truncated store")
            try:
                plain = self._aead.decrypt(blob[:12], blob[12:], None)
            except InvalidTag as exc:
                raise StorageFailure("store entry failed authentication") from exc
            (nl,) = struct.unpack_from(">H", plain)
            yield plain[2:2 + nl].decode(), plain[2 + nl:]

    def truncate(self) -> None:
        with self._lock:
            self.close()
            self.path.write_bytes(b"")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class Udm(NetworkFunction):
    nf_type = "UDM"
    services = ("nudm-ueau", "nudm-sdm", "nudm-admin")

    def __init__(self, instance_id, memory, env, payload=None, *, store_path: str | Path | None = None):
        super().__init__(instance_id, memory, env, payload)
        self._index_key = os.urandom(32)
        self._names: set[str] = set()
        self._index_lock = threading.Lock()
        self._stripes = [threading.Lock() for _ in range(_LOCK_STRIPES)]
        self._home_key_ids = set()
        for kid, priv_hex in (self.payload.get("home_keys") or {}).items():
            self.memory.put(f"home-key/{int(kid)}", bytes.fromhex(priv_hex))
            self._home_key_ids.add(int(kid))
        self.store: DiskStore | None = None
        path = store_path or self.payload.get("store_path")
        if path:
            skey = bytes.fromhex(self.payload["storage_key"]) if self.payload.get("storage_key") \
                else AESGCM.generate_key(256)
            self.store = DiskStore(path, skey, flush=self.payload.get("flush_on_write", True))
            for name, value in self.store.replay():
                self._apply(name, value)

    # -- storage primitives ---------------------------------------------

    def _name(self, supi: str) -> str:
        return "sub/" + hmac.new(self._index_key, supi.encode(), hashlib.sha256).hexdigest()[:32]

    def _stripe(self, name: str) -> threading.Lock:
        return self._stripes[int(name[4:8], 16) % _LOCK_STRIPES]

    def _apply(self, name: str, value: bytes) -> None:
        self._write(SubscriberRecord.unpack(value), persist=False)

    def _write(self, rec: SubscriberRecord, persist: bool = True) -> None:
        name = self._name(rec.supi)
        blob = rec.pack()
        self.memory.put(name, blob)
        with self._index_lock:
            self._names.add(name)
        if persist and self.store is not None:
            self.store.append(rec.supi, blob)

    def _read(self, supi: str) -> SubscriberRecord:
        blob = self.memory.get(self._name(supi))
        if blob is None:
            raise UnknownSubscriber("subscriber not provisioned")
        return SubscriberRecord.unpack(blob)

    def __len__(self) -> int:
        with self._index_lock:
            return len(self._names)

    def has(self, supi: str) -> bool:
        with self._index_lock:
            return self._name(supi) in self._names

    # -- database administration -------------------------------------------

    def insert(self, supi: str, k: bytes, sqn: int = 0, key_ref: int = 1) -> None:
        if len(k) != 16:
            raise ValueError("k must be 16 bytes")
        name = self._name(supi)
        with self._stripe(name):
            if self.has(supi):
                raise StorageFailure("duplicate supi")
            self._write(SubscriberRecord(supi, bytes(k), sqn, key_ref))

    def create_subscribers(self, n: int, seed: int | None = None) -> CreateReport:
        if n < 0:
            raise ValueError("n must be >= 0")
        t0 = time.perf_counter()
        if seed is None:
            rows = [(supi_for(len(self) + i + 1), os.urandom(16), 0) for i in range(n)]
        else:
            rows = generate_population(n, seed)
        for supi, k, sqn in rows:
            self.insert(supi, k, sqn)
        return CreateReport(n, (time.perf_counter() - t0) * 1000.0)

    def import_rows(self, rows: Iterable[tuple[str, bytes, int]]) -> int:
        count = 0
        for supi, k, sqn in rows:
            self.insert(supi, k, sqn)
            count += 1
        return count

    def export_rows(self) -> list[tuple[str, bytes, int]]:
        with self._index_lock:
            names = list(self._names)
        rows = [SubscriberRecord.unpack(self.memory.get(n)) for n in names]
        rows = [(r.supi, r.k, r.sqn) for r in rows]
        return sorted(rows)

    def reset(self) -> None:
        with self._index_lock:
            names, self._names = self._names, set()
        for n in names:
            self.memory.delete(n)
            self.memory.delete("pend/" + n[4:])
        if self.store is not None:
            self.store.truncate()

    def sqn_of(self, supi: str) -> int:
        return self._read(supi).sqn

    # -- authentication ------------------------------------------------------

    def deconceal(self, suci: Suci) -> str:
        if suci.home_pubkey_id not in self._home_key_ids:
            raise UnknownKeyId(str(suci.home_pubkey_id))
        return deconceal(suci, self.memory.get(f"home-key/{suci.home_pubkey_id}"))

    def resync(self, supi: str, rand: bytes, auts: bytes) -> int:
        """Adopt the UE's sequence number if its AUTS verifies."""
        name = self._name(supi)
        with self._stripe(name):
            rec = self._read(supi)
            sqn_ms = aka.recover_resync_sqn(rec.k, rand, auts)
            if sqn_ms is None:
                return -1
            rec.sqn = sqn_ms
            self._write(rec)
            self.memory.delete("pend/" + name[4:])
            return sqn_ms

    def generate_auth_data(self, supi: str, snn: str = aka.SERVING_NETWORK,
                           rand: bytes | None = None) -> aka.AuthVector:
        """Vector for sqn+1; the counter only moves when the AUSF confirms success."""
        name = self._name(supi)
        rand = rand or os.urandom(16)
        with self._stripe(name):
            rec = self._read(supi)
            nxt = rec.sqn + 1
            if nxt > aka.SQN_MAX:
                raise StorageFailure("sqn exhausted")
            av = aka.generate_vector(rec.k, nxt, rand, snn)
            self.memory.put("pend/" + name[4:], rand + aka.sqn_bytes(nxt))
        return av

    def auth_event(self, supi: str, success: bool, rand: bytes) -> int:
        name = self._name(supi)
        with self._stripe(name):
            rec = self._read(supi)
            pend = self.memory.get("pend/" + name[4:])
            if success and pend is not None and hmac.compare_digest(pend[:16], rand):
                rec.sqn = int.from_bytes(pend[16:], "big")
                self._write(rec)
            self.memory.delete("pend/" + name[4:])
            return rec.sqn

    # -- SBI -------------------------------------------------------------------

    def mount(self, server) -> None:
        super().mount(server)
        server.route("nudm-ueau", Method.POST, self._h_ueau)
        server.route("nudm-sdm", Method.GET, self._h_sdm)
        server.route("nudm-admin", Method.POST, self._h_admin_create)
        server.route("nudm-admin", Method.DELETE, self._h_admin_reset)
        server.route("nudm-admin", Method.GET, self._h_admin_count)

    def _h_ueau(self, msg: SbiMessage, ctx: RequestContext):
        req = jload(msg.body)
        if msg.path.endswith("/auth-events"):
            sqn = self.auth_event(req["supi"], bool(req["success"]), bytes.fromhex(req["rand"]))
            return {"sqn": sqn}
        supi = req.get("supi") or self.deconceal(Suci.from_dict(req["suci"]))
        snn = req.get("serving_network_name", aka.SERVING_NETWORK)
        if req.get("resync"):
            sqn = self.resync(supi, bytes.fromhex(req["resync"]["rand"]), bytes.fromhex(req["resync"]["auts"]))
            return {"supi": supi, "resynced": sqn >= 0}
        av = self.generate_auth_data(supi, snn)
        return {"supi": supi, "rand": av.rand.hex(), "autn": av.autn.hex(),
                "xres_star": av.xres_star.hex(), "k_ausf": av.k_ausf.hex()}

    def _h_sdm(self, msg: SbiMessage, ctx: RequestContext):
        supi = msg.path.strip("/").split("/")[0]
        self._read(supi)
        return {"default_dnn": "internet", "subscribed_snssai": [], "ambr": {"ul": "1 Gbps", "dl": "2 Gbps"}}

    def _h_admin_create(self, msg: SbiMessage, ctx: RequestContext):
        req = jload(msg.body)
        if "rows" in req:
            return {"imported": self.import_rows(parse_rows(req["rows"]))}
        rep = self.create_subscribers(int(req["n"]), req.get("seed"))
        return {"n": rep.n, "elapsed_ms": rep.elapsed_ms}

    def _h_admin_reset(self, msg: SbiMessage, ctx: RequestContext):
        self.reset()
        return {"status": "ok"}

    def _h_admin_count(self, msg: SbiMessage, ctx: RequestContext):
        return {"count": len(self)}

    def stop(self) -> None:
        super().stop()
        if self.store is not None:
            self.store.close()
