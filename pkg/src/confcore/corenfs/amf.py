"""AMF/SEAF: UE registration entry point and security anchor."""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Protocol

from ..sbi import Method, RequestContext, SbiMessage
from . import aka
from .ausf import hxres_star
from .errors import CoreError, ResponseMismatch, SessionMissing
from .runtime import NetworkFunction
from .suci import Suci

log = logging.getLogger(__name__)

STAGES = ("suci", "auth", "security_context", "session")
DEFAULT_ALGORITHMS = {"ciphering": "NEA2", "integrity": "NIA2"}


class UeEndpoint(Protocol):
    def registration_request(self) -> dict: ...
    def challenge(self, rand: bytes, autn: bytes, snn: str) -> dict: ...
    def security_mode_command(self, algorithms: dict, mac: bytes) -> bool: ...


def kamf(k_seaf: bytes, supi: str) -> bytes:
    return hmac.new(k_seaf, b"kamf" + supi.encode(), hashlib.sha256).digest()


def smc_mac(k_amf: bytes, algorithms: dict) -> bytes:
    return hmac.new(k_amf, b"smc" + json.dumps(algorithms, sort_keys=True).encode(), hashlib.sha256).digest()


class RegistrationFailed(Exception):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"registration failed at {stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RegistrationResult:
    ue_id: str
    session_id: str
    allowed_nssai: list
    timings_ms: dict[str, float] = field(default_factory=dict)

    @property
    def total_ms(self) -> float:
        return sum(self.timings_ms.values())


class Amf(NetworkFunction):
    nf_type = "AMF"
    services = ("namf-comm",)

    def __init__(self, instance_id, memory, env, payload=None):
        super().__init__(instance_id, memory, env, payload)
        self.snn = self.payload.get("serving_network_name", aka.SERVING_NETWORK)
        self.algorithms = dict(self.payload.get("algorithms", DEFAULT_ALGORITHMS))

    def ue_register(self, ue: UeEndpoint) -> RegistrationResult:
        timings: dict[str, float] = {}

        def stage(name, fn):
            t0 = time.perf_counter()
            try:
                return fn()
            except Exception as exc:
                raise RegistrationFailed(name, exc) from exc
            finally:
                timings[name] = (time.perf_counter() - t0) * 1000.0

        def intake():
            req = ue.registration_request()
            suci = req["suci"]
            return (suci if isinstance(suci, Suci) else Suci.from_dict(suci)), list(req.get("requested_nssai") or [])

        suci, requested = stage("suci", intake)

        def authenticate():
            ch = self.client.call("nausf-auth", Method.POST, "/ue-authentications",
                                  {"suci": suci.to_dict(), "serving_network_name": self.snn})
            ctx_id = ch["auth_ctx_id"]
            rand = bytes.fromhex(ch["rand"])
            answer = ue.challenge(rand, bytes.fromhex(ch["autn"]), self.snn)
            if "auts" in answer:
                self.client.call("nausf-auth", Method.POST, f"/ue-authentications/{ctx_id}/resync",
                                 {"auts": answer["auts"]})
            res = answer.get("res_star")
            seaf_ok = res is not None and hmac.compare_digest(
                hxres_star(rand, bytes.fromhex(res)), bytes.fromhex(ch["hxres_star"]))
            out = self.client.call("nausf-auth", Method.PUT, f"/ue-authentications/{ctx_id}/5g-aka-confirmation",
                                   answer)
            if not seaf_ok:
                raise ResponseMismatch("HRES* does not match HXRES*")
            return out["supi"], bytes.fromhex(out["k_seaf"])

        supi, k_seaf = stage("auth", authenticate)

        def security_context():
            k_amf = kamf(k_seaf, supi)
            ue_id = "5g-guti-" + os.urandom(6).hex()
            self.memory.put("ue/" + ue_id, json.dumps(
                {"supi": supi, "k_amf": k_amf.hex(), "algorithms": self.algorithms}).encode())
            if not ue.security_mode_command(dict(self.algorithms), smc_mac(k_amf, self.algorithms)):
                self.memory.delete("ue/" + ue_id)
                raise CoreError("UE rejected security mode command")
            return ue_id

        ue_id = stage("security_context", security_context)

        def session():
            am = self.client.call("nudm-sdm", Method.GET, f"/{supi}/am-data")
            wanted = requested or am.get("subscribed_snssai") or []
            query = ";".join(f"{s['sst']}:{s.get('sd', '')}" for s in wanted)
            allowed = self.client.call("nnssf-nsselection", Method.GET,
                                       f"/network-slice-information?requested-nssai={query}")["allowed_nssai"]
            pdu = self.client.call("nsmf-pdusession", Method.POST, "/sm-contexts",
                                   {"ue_id": ue_id, "snssai": allowed[0], "dnn": am.get("default_dnn", "internet")})
            return pdu["session_id"], allowed

        session_id, allowed = stage("session", session)
        ctx = json.loads(self.memory.get("ue/" + ue_id))
        ctx["session_id"] = session_id
        self.memory.put("ue/" + ue_id, json.dumps(ctx).encode())
        return RegistrationResult(ue_id, session_id, allowed, timings)

    def context(self, ue_id: str) -> dict:
        raw = self.memory.get("ue/" + ue_id)
        if raw is None:
            raise SessionMissing(ue_id)
        return json.loads(raw)

    def mount(self, server) -> None:
        super().mount(server)
        server.route("namf-comm", Method.GET, self._h_context)

    def _h_context(self, msg: SbiMessage, ctx: RequestContext):
        ue_id = msg.path.rstrip("/").rsplit("/", 1)[-1]
        c = self.context(ue_id)
        return {"ue_id": ue_id, "algorithms": c["algorithms"], "session_id": c.get("session_id")}
