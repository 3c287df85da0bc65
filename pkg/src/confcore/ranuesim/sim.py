"""Simulated UEs, registration storms and user-plane traffic."""

from __future__ import annotations

import hmac
import logging
import math
import random
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from ..corenfs.amf import RegistrationFailed
from ..corenfs.errors import SessionMissing as CoreSessionMissing
from . import uecrypto

log = logging.getLogger(__name__)

SQN_LIMIT = (1 << 48) - 1


class UeState(str, Enum):
    IDLE = "Idle"
    REGISTERING = "Registering"
    REGISTERED = "Registered"
    FAILED = "Failed"


class SeedMismatch(Exception):
    """Population and UDM disagree on some subscriber."""


class SessionMissing(Exception):
    pass


@dataclass
class SimUe:
    supi: str
    k: bytes
    sqn: int = 0
    state: UeState = UeState.IDLE
    home_pubkey: bytes = b""
    home_key_id: int = 1
    requested_nssai: list = field(default_factory=list)
    ue_id: str | None = None
    session_id: str | None = None
    last_error: str | None = None
    _kseaf: bytes | None = field(default=None, repr=False)
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    # the three calls the AMF makes into the UE

    def registration_request(self) -> dict:
        self.state = UeState.REGISTERING
        return {"suci": uecrypto.conceal_supi(self.supi, self.home_pubkey, self.home_key_id),
                "requested_nssai": list(self.requested_nssai)}

    def challenge(self, rand: bytes, autn: bytes, snn: str) -> dict:
        keys = uecrypto.UsimKeys(self.k, rand)
        sqn_net, mac_ok = uecrypto.open_autn(keys, autn)
        if not mac_ok:
            return {"mac_failure": True}
        if not self.sqn < sqn_net <= self.sqn + uecrypto.WINDOW:
            return {"auts": keys.auts(self.sqn).hex()}
        self.sqn = sqn_net
        self._kseaf = uecrypto.k_seaf(keys.k_ausf(snn, autn[:6]), snn)
        return {"res_star": keys.res_star(snn).hex()}

    def security_mode_command(self, algorithms: dict, mac: bytes) -> bool:
        if self._kseaf is None:
            return False
        expected = uecrypto.smc_mac(uecrypto.k_amf(self._kseaf, self.supi), algorithms)
        return hmac.compare_digest(mac, expected)

    def k_seaf(self) -> bytes | None:
        return self._kseaf


def generate_population(n: int, seed: int) -> list[tuple[str, bytes, int]]:
    """UE-side twin of the UDM generator: same seed, same subscribers."""
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = random.Random(seed)
    rows = []
    for i in range(1, n + 1):
        rows.append(("imsi-00101" + str(i).zfill(10), rng.randbytes(16), 0))
    return rows


def spawn_ues(n: int, seed: int, home_pubkey: bytes = b"", *, home_key_id: int = 1,
              udm_rows: Iterable[tuple[str, bytes, int]] | None = None) -> list[SimUe]:
    ues = [SimUe(s, k, q, home_pubkey=home_pubkey, home_key_id=home_key_id)
           for s, k, q in generate_population(n, seed)]
    if udm_rows is not None:
        net = {s: (k, q) for s, k, q in udm_rows}
        bad = [u.supi for u in ues if net.get(u.supi) != (u.k, u.sqn)]
        if bad:
            raise SeedMismatch(f"{len(bad)} UEs diverge from the UDM, first {bad[0]}")
    return ues


def write_population(path: str | Path, ues: Sequence[SimUe]) -> None:
    with open(path, "w") as fh:
        for u in ues:
            fh.write(f"{u.supi},{u.k.hex()},{u.sqn}\n")


def read_population(path: str | Path, home_pubkey: bytes = b"") -> list[SimUe]:
    ues = []
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            supi, k, sqn = line.strip().split(",")
            ues.append(SimUe(supi, bytes.fromhex(k), int(sqn), home_pubkey=home_pubkey))
    return ues


# -- registration storm ------------------------------------------------------------

@dataclass
class UeTiming:
    index: int
    supi: str
    trial: int
    arrival_ms: float
    ok: bool
    total_ms: float
    stages_ms: dict[str, float]
    failed_stage: str | None = None
    cause: str | None = None


def poisson_arrivals(n: int, rate_per_s: float, rng: random.Random) -> list[float]:
    """Arrival offsets (ms) by inverse-transform sampling of exponential gaps."""
    if rate_per_s <= 0:
        raise ValueError("rate must be positive")
    t, out = 0.0, []
    for _ in range(n):
        t += -math.log(1.0 - rng.random()) / rate_per_s * 1000.0
        out.append(t)
    return out


def register_ue(amf, ue: SimUe) -> tuple[bool, float, dict, str | None, str | None]:
    with ue._lock:
        t0 = time.perf_counter()
        try:
            res = amf.ue_register(ue)
        except RegistrationFailed as exc:
            ue.state = UeState.FAILED
            ue.last_error = f"{exc.stage}: {type(exc.cause).__name__}"
            return False, (time.perf_counter() - t0) * 1000.0, {}, exc.stage, type(exc.cause).__name__
        elapsed = (time.perf_counter() - t0) * 1000.0
        ue.state = UeState.REGISTERED
        ue.ue_id, ue.session_id = res.ue_id, res.session_id
        ue.last_error = None
        return True, elapsed, dict(res.timings_ms), None, None


def registration_storm(population: Sequence[SimUe], amf, arrival: str = "sequential", *,
                       trials: int = 1, rate_per_s: float = 100.0, seed: int = 0) -> list[UeTiming]:
    """Register every UE ``trials`` times; failures are recorded, never raised."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = random.Random(seed)
    rows: list[UeTiming] = []
    for trial in range(trials):
        if arrival == "sequential":
            times = [0.0] * len(population)
        elif arrival == "poisson":
            times = poisson_arrivals(len(population), rate_per_s, rng)
        else:
            raise ValueError(f"unknown arrival process {arrival!r}")
        for idx in sorted(range(len(population)), key=lambda i: times[i]):
            ue = population[idx]
            ok, total, stages, stage, cause = register_ue(amf, ue)
            rows.append(UeTiming(idx, ue.supi, trial, times[idx], ok, total, stages, stage, cause))
    return rows


# -- user plane --------------------------------------------------------------------

@dataclass
class ThroughputRecord:
    supi: str
    session_id: str
    sent_bytes: int
    delivered_bytes: int
    duration_s: float

    @property
    def goodput_bps(self) -> float:
        return self.delivered_bytes / self.duration_s if self.duration_s else 0.0


def traffic_session(ue: SimUe, upf, bytes_per_s: int, duration_s: float, *,
                    chunk: int = 64 * 1024, seed: int = 0) -> ThroughputRecord:
    """Push ``bytes_per_s * duration_s`` synthetic bytes through the UPF into a counting sink."""
    if ue.state != UeState.REGISTERED or ue.session_id is None:
        raise SessionMissing(f"{ue.supi} has no PDU session")
    if bytes_per_s < 0 or duration_s < 0:
        raise ValueError("rate and duration must be >= 0")
    rng = random.Random(seed)
    total = int(bytes_per_s * duration_s)
    sent = delivered = 0
    while sent < total:
        data = rng.randbytes(min(chunk, total - sent))
        try:
            out = upf.forward(ue.session_id, data)
        except CoreSessionMissing as exc:
            raise SessionMissing(str(exc)) from exc
        sent += len(data)
        delivered += len(out)
    return ThroughputRecord(ue.supi, ue.session_id, sent, delivered, duration_s)
