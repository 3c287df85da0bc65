"""AUSF: runs 5G-AKA against the UDM on behalf of the serving AMF."""

from __future__ import annotations

import hashlib
import hmac
import json
import os
from dataclasses import dataclass
from typing import Callable

from ..sbi import Method, RequestContext, SbiMessage
from . import aka
from .errors import ResponseMismatch, SessionMissing, SyncFailure
from .runtime import NetworkFunction, jload
from .suci import Suci

# UE answer to a challenge: {"res_star": hex} | {"auts": hex} | {"mac_failure": True}
UeResponder = Callable[[bytes, bytes, str], dict]


def hxres_star(rand: bytes, xres_star: bytes) -> bytes:
    return hashlib.sha256(rand + xres_star).digest()[:16]


@dataclass
class AuthOutcome:
    supi: str
    k_seaf: bytes


class Ausf(NetworkFunction):
    nf_type = "AUSF"
    services = ("nausf-auth",)

    def _ctx_name(self, ctx_id: str) -> str:
        return "ctx/" + ctx_id

    def start_authentication(self, suci: Suci, snn: str = aka.SERVING_NETWORK) -> dict:
        av = self.client.call("nudm-ueau", Method.POST, "/generate-auth-data",
                              {"suci": suci.to_dict(), "serving_network_name": snn})
        ctx_id = os.urandom(8).hex()
        ctx = {"supi": av["supi"], "rand": av["rand"], "xres_star": av["xres_star"],
               "k_ausf": av["k_ausf"], "snn": snn}
        self.memory.put(self._ctx_name(ctx_id), json.dumps(ctx).encode())
        rand = bytes.fromhex(av["rand"])
        return {"auth_ctx_id": ctx_id, "rand": av["rand"], "autn": av["autn"],
                "hxres_star": hxres_star(rand, bytes.fromhex(av["xres_star"])).hex()}

    def _take(self, ctx_id: str) -> dict:
        raw = self.memory.get(self._ctx_name(ctx_id))
        if raw is None:
            raise SessionMissing(f"no authentication context {ctx_id}")
        self.memory.delete(self._ctx_name(ctx_id))
        return json.loads(raw)

    def confirm(self, ctx_id: str, answer: dict) -> AuthOutcome:
        ctx = self._take(ctx_id)
        res = bytes.fromhex(answer.get("res_star", ""))
        ok = not answer.get("mac_failure") and hmac.compare_digest(res, bytes.fromhex(ctx["xres_star"]))
        self.client.call("nudm-ueau", Method.POST, f"/{ctx['supi']}/auth-events",
                         {"supi": ctx["supi"], "success": ok, "rand": ctx["rand"]})
        if not ok:
            raise ResponseMismatch("UE rejected the challenge" if answer.get("mac_failure")
                                   else "RES* does not match XRES*")
        return AuthOutcome(ctx["supi"], aka.kseaf(bytes.fromhex(ctx["k_ausf"]), ctx["snn"]))

    def resync(self, ctx_id: str, auts: bytes) -> None:
        """Forward AUTS to the UDM, then fail this attempt; the next one runs on the UE's sqn."""
        ctx = self._take(ctx_id)
        out = self.client.call("nudm-ueau", Method.POST, "/generate-auth-data",
                               {"supi": ctx["supi"], "resync": {"rand": ctx["rand"], "auts": auts.hex()}})
        raise SyncFailure("sqn resynchronised, retry" if out["resynced"] else "AUTS failed verification")

    def authenticate(self, suci: Suci, respond: UeResponder, snn: str = aka.SERVING_NETWORK) -> AuthOutcome:
        """Whole 5G-AKA run with ``respond`` playing the UE."""
        ch = self.start_authentication(suci, snn)
        answer = respond(bytes.fromhex(ch["rand"]), bytes.fromhex(ch["autn"]), snn)
        if "auts" in answer:
            self.resync(ch["auth_ctx_id"], bytes.fromhex(answer["auts"]))
        return self.confirm(ch["auth_ctx_id"], answer)

    # -- SBI -------------------------------------------------------------------

    def mount(self, server) -> None:
        super().mount(server)
        server.route("nausf-auth", Method.POST, self._h_post)
        server.route("nausf-auth", Method.PUT, self._h_confirm)

    def _h_post(self, msg: SbiMessage, ctx: RequestContext):
        req = jload(msg.body)
        if msg.path.endswith("/resync"):
            self.resync(msg.path.strip("/").split("/")[1], bytes.fromhex(req["auts"]))
        return self.start_authentication(Suci.from_dict(req["suci"]),
                                         req.get("serving_network_name", aka.SERVING_NETWORK))

    def _h_confirm(self, msg: SbiMessage, ctx: RequestContext):
        out = self.confirm(msg.path.strip("/").split("/")[1], jload(msg.body))
        return {"result": "success", "supi": out.supi, "k_seaf": out.k_seaf.hex()}
