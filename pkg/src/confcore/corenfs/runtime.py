"""Shared NF plumbing: profiles, the SBI consumer client, and the NF base class."""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any
from urllib.parse import quote

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

from .. import sbi
from ..sbi import (
    PLAIN,
    AccessToken,
    AttestationLog,
    BootstrapGrant,
    ChannelIdentity,
    Method,
    Network,
    SbiMessage,
    SbiServer,
)
from .errors import ServiceUnavailable, reraise

log = logging.getLogger(__name__)

SERVICE_PRODUCERS = {
    "nnrf-nfm": "NRF",
    "nnrf-disc": "NRF",
    "nnrf-oauth2": "NRF",
    "nudm-ueau": "UDM",
    "nudm-sdm": "UDM",
    "nudm-admin": "UDM",
    "nausf-auth": "AUSF",
    "namf-comm": "AMF",
    "nsmf-pdusession": "SMF",
    "nnssf-nsselection": "NSSF",
    "nupf-n4": "UPF",
}

OPERATOR_SUBJECT = "vnfm"
TOKEN_RENEW_MARGIN_MS = 1_000


class NfStatus(str, Enum):
    REGISTERED = "Registered"
    SUSPENDED = "Suspended"
    DEREGISTERED = "Deregistered"


@dataclass
class NfProfile:
    instance_id: str
    nf_type: str
    services: tuple[str, ...]
    endpoint: str
    status: NfStatus = NfStatus.REGISTERED
    registered_at: int = 0

    def __post_init__(self):
        self.services = tuple(self.services)
        self.status = NfStatus(self.status)

    def same_content(self, other: "NfProfile") -> bool:
        return (self.instance_id, self.nf_type, self.services, self.endpoint) == \
            (other.instance_id, other.nf_type, other.services, other.endpoint)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["services"] = list(self.services)
        d["status"] = self.status.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NfProfile":
        return cls(d["instance_id"], d["nf_type"], tuple(d["services"]), d["endpoint"],
                   NfStatus(d.get("status", NfStatus.REGISTERED.value)), int(d.get("registered_at", 0)))


@dataclass
class NfEnv:
    """What an NF learns about its surroundings at start."""

    network: Network
    clock: Any
    trust: AttestationLog
    mode: str = PLAIN
    endpoint: str = ""
    nrf_endpoint: str = ""
    nrf_key: Ed25519PublicKey | None = None
    token_channel_attested: bool = True


def jdump(obj) -> bytes:
    return json.dumps(obj, separators=(",", ":")).encode()


def jload(body: bytes) -> Any:
    return json.loads(body) if body else None


class SbiClient:
    """Consumer side: discovery, token acquisition and channel reuse."""

    def __init__(self, subject: str, env: NfEnv, grant: BootstrapGrant | None = None):
        self.subject = subject
        self.env = env
        self.grant = grant
        self._channels: dict[tuple[str, str], sbi.Channel] = {}
        self._tokens: dict[tuple[str, tuple[str, ...]], AccessToken] = {}
        self._endpoints: dict[str, str] = {}
        self._lock = threading.RLock()

    def _channel(self, endpoint: str, mode: str) -> sbi.Channel:
        with self._lock:
            ch = self._channels.get((endpoint, mode))
            if ch is None or ch.closed:
                ch = sbi.open_channel(self.env.network, ChannelIdentity(self.subject), endpoint, mode,
                                      self.env.trust, self.env.clock)
                self._channels[(endpoint, mode)] = ch
            return ch

    def drop_channels(self, endpoint: str | None = None) -> None:
        with self._lock:
            for key in list(self._channels):
                if endpoint is None or key[0] == endpoint:
                    del self._channels[key]

    def raw(self, endpoint: str, service: str, method: Method, path: str = "",
            body: bytes = b"", token: AccessToken | None = None, mode: str | None = None) -> bytes:
        mode = mode or self.env.mode
        for attempt in (0, 1):
            ch = self._channel(endpoint, mode)
            msg = SbiMessage(ch.next_request_id(), method, service, path, body, token)
            try:
                return sbi.send_request(ch, msg).body
            except sbi.ChannelClosed:
                if attempt:
                    raise
                self.drop_channels(endpoint)
            except sbi.RemoteError as exc:
                reraise(exc)
        raise AssertionError("unreachable")

    def token(self, audience: str, scope: tuple[str, ...] | list[str]) -> AccessToken:
        key = (audience, tuple(sorted(scope)))
        now = self.env.clock.now_ms()
        with self._lock:
            tok = self._tokens.get(key)
            if tok is not None and now < tok.expires_at - TOKEN_RENEW_MARGIN_MS:
                return tok
        body = {"requester": self.subject, "audience": audience, "scope": list(key[1])}
        if self.grant is not None:
            body["grant"] = self.grant.to_dict()
        mode = self.env.mode if self.env.token_channel_attested else PLAIN
        raw = self.raw(self.env.nrf_endpoint, "nnrf-oauth2", Method.POST, "/token", jdump(body), mode=mode)
        tok = AccessToken.from_bytes(bytes.fromhex(jload(raw)["access_token"]))
        with self._lock:
            self._tokens[key] = tok
        return tok

    def discover(self, service: str) -> list[str]:
        tok = self.token("NRF", ("nnrf-disc",))
        raw = self.raw(self.env.nrf_endpoint, "nnrf-disc", Method.GET,
                       f"/nf-instances?service-names={quote(service)}", token=tok)
        return jload(raw)["endpoints"]

    def _resolve(self, service: str, refresh: bool = False) -> str:
        with self._lock:
            ep = None if refresh else self._endpoints.get(service)
        if ep is None:
            found = self.discover(service)
            if not found:
                raise ServiceUnavailable(f"no producer offers {service}")
            ep = found[0]
            with self._lock:
                self._endpoints[service] = ep
        return ep

    def call(self, service: str, method: Method, path: str = "", body: Any = None,
             endpoint: str | None = None) -> Any:
        """JSON request to whichever producer offers ``service``."""
        audience = SERVICE_PRODUCERS[service]
        tok = self.token(audience, (service,))
        payload = body if isinstance(body, (bytes, bytearray)) else (jdump(body) if body is not None else b"")
        if endpoint is not None:
            return jload(self.raw(endpoint, service, method, path, payload, tok))
        ep = self._resolve(service)
        try:
            raw = self.raw(ep, service, method, path, payload, tok)
        except (sbi.ConnectionRefused, sbi.AttestationMissing, sbi.Timeout):
            self.drop_channels(ep)
            ep = self._resolve(service, refresh=True)
            raw = self.raw(ep, service, method, path, payload, tok)
        return jload(raw)


class NetworkFunction:
    """Base for the control-plane NFs.

    ``memory`` holds everything the NF would keep in its VM's RAM that an
    attacker might want; ``payload`` is the provisioning document the VNFM
    delivered over the attested channel.
    """

    nf_type = ""
    services: tuple[str, ...] = ()

    def __init__(self, instance_id: str, memory, env: NfEnv, payload: dict | None = None):
        self.instance_id = instance_id
        self.memory = memory
        self.env = env
        self.payload = payload or {}
        grant = self.payload.get("grant")
        self.grant = BootstrapGrant.from_dict(grant) if grant else None
        self.client = SbiClient(instance_id, env, self.grant)
        self.server: SbiServer | None = None

    @property
    def clock(self):
        return self.env.clock

    def journal(self, event: str) -> None:
        self.memory.log(f"{self.clock.now_ms()} {self.instance_id} {event}\n".encode())

    def mount(self, server: SbiServer) -> None:
        self.server = server

    def start(self) -> dict:
        self.journal("started")
        return {}

    def profile(self) -> NfProfile:
        return NfProfile(self.instance_id, self.nf_type, self.services, self.env.endpoint,
                         registered_at=self.clock.now_ms())

    def register(self) -> None:
        self.client.call("nnrf-nfm", Method.PUT, f"/nf-instances/{self.instance_id}",
                         self.profile().to_dict(), endpoint=self.env.nrf_endpoint)
        self.journal("registered")

    def stop(self) -> None:
        self.journal("stopped")
