"""Compute hosts and the guest agent that runs inside every NF VM.

The agent is the VNFM's only handle on a guest: it answers attestation
challenges, accepts the provisioning payload (attested channels only, when
the VM is an SVM), starts the NF process and triggers NRF registration.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from typing import Any

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

from . import tee
from .corenfs import NetworkFunction, NfEnv, create_nf
from .memory import HostMemory, SvmMemory
from .sbi import ATTESTED, AttestationLog, Method, Network, RequestContext, SbiError, SbiMessage, SbiServer
from .sbi.channel import AttestationMissing

log = logging.getLogger(__name__)

AGENT_SERVICE = "vnfm-agent"


def endpoint_for(instance_id: str) -> str:
    return f"{instance_id}.sbi"


class AgentError(SbiError):
    status = 409


@dataclass
class Guest:
    instance_id: str
    nf_type: str
    endpoint: str
    memory: Any
    server: SbiServer
    svm: tee.SvmHandle | None = None
    nf: NetworkFunction | None = None
    extra: dict = field(default_factory=dict)

    @property
    def encrypted(self) -> bool:
        return self.memory.encrypted

    def host_read(self) -> bytes:
        return self.memory.host_read()


class GuestAgent:
    def __init__(self, host: "HostInfrastructure", guest: Guest):
        self.host = host
        self.guest = guest
        self._lock = threading.Lock()
        s = guest.server
        s.route(AGENT_SERVICE, Method.POST, self._h_post, protected=False)

    def _h_post(self, msg: SbiMessage, ctx: RequestContext):
        op = msg.path.strip("/")
        with self._lock:
            if op == "attestation":
                return self._attest(json.loads(msg.body))
            if op == "provision":
                return self._provision(msg.body, ctx)
            if op == "start":
                return self._start(json.loads(msg.body))
            if op == "register":
                if self.guest.nf is None:
                    raise AgentError("NF not started")
                self.guest.nf.register()
                return {"status": "ok"}
        raise AgentError(f"unknown agent operation {op!r}")

    def _attest(self, req: dict) -> dict:
        if self.guest.svm is None:
            raise AgentError("guest is not a secure VM")
        report = self.host.platform.generate_report(self.guest.svm, bytes.fromhex(req["nonce"]))
        return {"report": report.to_bytes().hex()}

    def _provision(self, payload: bytes, ctx: RequestContext) -> dict:
        if self.guest.svm is not None:
            if not ctx.peer_attested or ctx.channel_fp is None:
                raise AttestationMissing("provisioning requires an attested channel")
            try:
                self.guest.memory.provision(ctx.channel_fp, payload)
            except tee.TeeError as exc:
                raise AgentError(f"{type(exc).__name__}: {exc}") from exc
        else:
            self.guest.memory.provision(None, payload)
        return {"status": "ok"}

    def _start(self, req: dict) -> dict:
        raw = self.guest.memory.provisioned()
        if raw is None:
            raise AgentError("nothing provisioned")
        payload = json.loads(raw)
        nrf_key = Ed25519PublicKey.from_public_bytes(bytes.fromhex(req["nrf_key"])) if req.get("nrf_key") else None
        env = NfEnv(self.host.network, self.host.clock, self.host.trust, req.get("mode", self.host.mode),
                    self.guest.endpoint, req.get("nrf_endpoint", ""), nrf_key,
                    req.get("token_channel_attested", True))
        nf = create_nf(self.guest.nf_type, self.guest.instance_id, self.guest.memory, env, payload,
                       **self.host.nf_options.get(self.guest.nf_type, {}))
        nf.mount(self.guest.server)
        info = nf.start()
        if self.guest.nf_type == "NRF":
            env.nrf_key = nf.verify_key
            env.nrf_endpoint = self.guest.endpoint
        self.guest.server.token_key = env.nrf_key
        self.guest.memory.mark_running()
        self.guest.nf = nf
        return info


class HostInfrastructure:
    """A host with an optional TEE platform, attached to the SBI network."""

    def __init__(self, network: Network, clock, trust: AttestationLog, mode: str,
                 platform: tee.Platform | None = None, nf_options: dict | None = None):
        self.network = network
        self.clock = clock
        self.trust = trust
        self.mode = mode
        self.platform = platform
        self.nf_options = nf_options or {}
        self.guests: dict[str, Guest] = {}
        self._lock = threading.Lock()

    def launch(self, instance_id: str, nf_type: str, code_image: bytes, launch_config: dict,
               features: tee.Feature = tee.SNP) -> Guest:
        endpoint = endpoint_for(instance_id)
        if self.mode == ATTESTED:
            if self.platform is None:
                raise tee.UnsupportedFeature("host has no TEE platform")
            svm = self.platform.launch_svm(code_image, launch_config, features, svm_id=instance_id)
            memory = SvmMemory(self.platform, svm)
            platform = self.platform

            def exchange(fp: bytes, pub: bytes) -> bytes:
                return platform.channel_exchange(svm, fp, pub)

            server = SbiServer(instance_id, nf_type, self.clock, key_exchange=exchange)
        else:
            svm = None
            memory = HostMemory(instance_id)
            server = SbiServer(instance_id, nf_type, self.clock)
        guest = Guest(instance_id, nf_type, endpoint, memory, server, svm)
        GuestAgent(self, guest)
        with self._lock:
            self.guests[instance_id] = guest
        self.network.bind(endpoint, server)
        return guest

    def detach(self, instance_id: str) -> None:
        guest = self.guests.get(instance_id)
        if guest is not None:
            self.network.unbind(guest.endpoint)

    def terminate(self, instance_id: str) -> bytes:
        guest = self.guests[instance_id]
        self.network.unbind(guest.endpoint)
        if guest.nf is not None:
            try:
                guest.nf.stop()
            except tee.TerminatedSvm:
                pass
        return guest.memory.terminate()

    def host_read(self, instance_id: str) -> bytes:
        return self.guests[instance_id].host_read()

    def sweep(self) -> dict[str, bytes]:
        with self._lock:
            guests = list(self.guests.values())
        return {g.instance_id: g.host_read() for g in guests}
