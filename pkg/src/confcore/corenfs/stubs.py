"""SMF, NSSF and UPF: just enough behaviour for registrations to cross real SBI hops."""

from __future__ import annotations

import itertools
import threading
from urllib.parse import parse_qs, urlsplit

from ..sbi import Method, RequestContext, SbiMessage
from .errors import SessionMissing
from .runtime import NetworkFunction, jload

DEFAULT_SLICE = {"sst": 1, "sd": "010203"}
DEFAULT_QOS = {"5qi": 9, "arp": 8}


class Nssf(NetworkFunction):
    nf_type = "NSSF"
    services = ("nnssf-nsselection",)

    def select(self, requested: list[dict]) -> list[dict]:
        # no slice requested: hand out the default one
        return list(requested) if requested else [dict(DEFAULT_SLICE)]

    def mount(self, server) -> None:
        super().mount(server)
        server.route("nnssf-nsselection", Method.GET, self._h_select)

    def _h_select(self, msg: SbiMessage, ctx: RequestContext):
        q = parse_qs(urlsplit(msg.path).query)
        requested = []
        for item in (q.get("requested-nssai") or [""])[0].split(";"):
            if item:
                sst, _, sd = item.partition(":")
                requested.append({"sst": int(sst), "sd": sd})
        return {"allowed_nssai": self.select(requested)}


class Upf(NetworkFunction):
    nf_type = "UPF"
    services = ("nupf-n4",)

    def __init__(self, instance_id, memory, env, payload=None):
        super().__init__(instance_id, memory, env, payload)
        self._sessions: dict[str, dict] = {}
        self._lock = threading.Lock()
        self.forwarded = 0

    def establish(self, session_id: str, rule: dict) -> None:
        with self._lock:
            self._sessions[session_id] = dict(rule)

    def release(self, session_id: str) -> None:
        with self._lock:
            if self._sessions.pop(session_id, None) is None:
                raise SessionMissing(session_id)

    def has_session(self, session_id: str) -> bool:
        with self._lock:
            return session_id in self._sessions

    def forward(self, session_id: str, data: bytes) -> bytes:
        """N3 to N6: bytes leave unmodified."""
        with self._lock:
            if session_id not in self._sessions:
                raise SessionMissing(session_id)
            self.forwarded += len(data)
        return bytes(data)

    def mount(self, server) -> None:
        super().mount(server)
        server.route("nupf-n4", Method.POST, self._h_establish)
        server.route("nupf-n4", Method.DELETE, self._h_release)

    def _h_establish(self, msg: SbiMessage, ctx: RequestContext):
        req = jload(msg.body)
        self.establish(req["session_id"], req)
        return {"status": "ok"}

    def _h_release(self, msg: SbiMessage, ctx: RequestContext):
        self.release(msg.path.rsplit("/", 1)[-1])
        return {"status": "ok"}


class Smf(NetworkFunction):
    nf_type = "SMF"
    services = ("nsmf-pdusession",)

    def __init__(self, instance_id, memory, env, payload=None):
        super().__init__(instance_id, memory, env, payload)
        self._ids = itertools.count(1)
        self._lock = threading.Lock()

    def create_session(self, ue_id: str, snssai: dict, dnn: str, qos: dict | None) -> dict:
        with self._lock:
            session_id = f"{self.instance_id}-pdu-{next(self._ids)}"
        qos = dict(qos or DEFAULT_QOS)
        self.client.call("nupf-n4", Method.POST, "/sessions",
                         {"session_id": session_id, "ue_id": ue_id, "dnn": dnn, "qos": qos})
        return {"session_id": session_id, "snssai": snssai, "dnn": dnn, "qos": qos}

    def mount(self, server) -> None:
        super().mount(server)
        server.route("nsmf-pdusession", Method.POST, self._h_create)

    def _h_create(self, msg: SbiMessage, ctx: RequestContext):
        req = jload(msg.body)
        return self.create_session(req["ue_id"], req.get("snssai") or DEFAULT_SLICE,
                                   req.get("dnn", "internet"), req.get("qos"))
