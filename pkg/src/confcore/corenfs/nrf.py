"""NRF: NF registry, discovery and OAuth2 token issuer."""

from __future__ import annotations

import threading
from typing import Callable
from urllib.parse import parse_qs, urlsplit

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from ..sbi import AccessToken, BootstrapGrant, Method, RequestContext, SbiMessage, Unauthorized, verify_token
from .errors import DuplicateInstanceConflict, NotRegistered, ScopeNotOffered, UnknownRequester
from .runtime import OPERATOR_SUBJECT, NetworkFunction, NfProfile, NfStatus, jload

DEFAULT_TOKEN_TTL_MS = 600_000
_SIGNING_KEY = "nrf/signing-key"


class Nrf(NetworkFunction):
    nf_type = "NRF"
    services = ("nnrf-nfm", "nnrf-disc", "nnrf-oauth2")

    def __init__(self, instance_id, memory, env, payload=None, *,
                 pep: Callable[[str], bool] | None = None, token_ttl_ms: int = DEFAULT_TOKEN_TTL_MS):
        super().__init__(instance_id, memory, env, payload)
        key = Ed25519PrivateKey.generate()
        self.memory.put(_SIGNING_KEY, key.private_bytes_raw())
        self._signing_key = key
        self.verify_key: Ed25519PublicKey = key.public_key()
        vk = self.payload.get("vnfm_verify_key")
        self.vnfm_key = Ed25519PublicKey.from_public_bytes(bytes.fromhex(vk)) if vk else None
        self.pep = pep
        self.token_ttl_ms = token_ttl_ms
        self._registry: dict[str, NfProfile] = {}
        self._lock = threading.RLock()

    def start(self) -> dict:
        super().start()
        return {"nrf_verify_key": self.verify_key.public_bytes_raw().hex()}

    # -- token issuance --------------------------------------------------

    def issue_token(self, requester: str, audience: str, scope, grant: BootstrapGrant | None = None) -> AccessToken:
        scope = tuple(scope)
        if not scope:
            raise ScopeNotOffered("empty scope")
        granted = (grant is not None and self.vnfm_key is not None and grant.subject == requester
                   and grant.verify(self.vnfm_key))
        with self._lock:
            prof = self._registry.get(requester)
            registered = prof is not None and prof.status == NfStatus.REGISTERED
            if requester == OPERATOR_SUBJECT:
                if not granted:
                    raise UnknownRequester("operator requests need a VNFM grant")
            elif not registered and not (granted and set(scope) <= {"nnrf-nfm"}):
                raise UnknownRequester(requester)
            if requester != OPERATOR_SUBJECT and self.pep is not None and not self.pep(requester):
                raise Unauthorized(f"{requester} holds no valid trust session")
            offered = {s for p in self._registry.values()
                       if p.status == NfStatus.REGISTERED and p.nf_type == audience for s in p.services}
        missing = [s for s in scope if s not in offered]
        if missing:
            raise ScopeNotOffered(f"{audience} does not offer {missing}")
        now = self.clock.now_ms()
        return AccessToken(requester, audience, scope, now, now + self.token_ttl_ms).sign(self._signing_key)

    # -- registry ------------------------------------------------------------

    def _check(self, token, scope):
        verdict = verify_token(token, scope, self.clock.now_ms(), self.verify_key, self.nf_type)
        if not verdict:
            raise Unauthorized(verdict.reason.value)
        return token.subject

    def register_nf(self, profile: NfProfile, token: AccessToken) -> dict:
        return self._register(profile, self._check(token, "nnrf-nfm"))

    def _register(self, profile: NfProfile, subject: str) -> dict:
        if subject not in (profile.instance_id, OPERATOR_SUBJECT):
            raise Unauthorized(f"{subject} may not register {profile.instance_id}")
        with self._lock:
            cur = self._registry.get(profile.instance_id)
            if cur is not None and cur.status == NfStatus.REGISTERED:
                if cur.same_content(profile):
                    return {"status": "ok", "idempotent": True}
                raise DuplicateInstanceConflict(profile.instance_id)
            self._registry[profile.instance_id] = NfProfile(
                profile.instance_id, profile.nf_type, profile.services, profile.endpoint,
                NfStatus.REGISTERED, self.clock.now_ms())
        return {"status": "ok", "idempotent": False}

    def deregister_nf(self, instance_id: str, token: AccessToken) -> dict:
        return self._deregister(instance_id, self._check(token, "nnrf-nfm"))

    def _deregister(self, instance_id: str, subject: str) -> dict:
        if subject not in (instance_id, OPERATOR_SUBJECT):
            raise Unauthorized(f"{subject} may not deregister {instance_id}")
        with self._lock:
            cur = self._registry.get(instance_id)
            if cur is None or cur.status == NfStatus.DEREGISTERED:
                raise NotRegistered(instance_id)
            cur.status = NfStatus.DEREGISTERED
        return {"status": "ok"}

    def discover(self, service: str, token: AccessToken) -> list[str]:
        self._check(token, "nnrf-disc")
        return self._discover(service)

    def _discover(self, service: str) -> list[str]:
        with self._lock:
            return [p.endpoint for p in self._registry.values()
                    if p.status == NfStatus.REGISTERED and service in p.services]

    def profiles(self) -> list[NfProfile]:
        with self._lock:
            return list(self._registry.values())

    def register(self) -> None:
        self._register(self.profile(), self.instance_id)
        self.journal("registered")

    # -- SBI -------------------------------------------------------------------

    def mount(self, server) -> None:
        super().mount(server)
        server.route("nnrf-oauth2", Method.POST, self._h_token, protected=False)
        server.route("nnrf-nfm", Method.PUT, self._h_register)
        server.route("nnrf-nfm", Method.DELETE, self._h_deregister)
        server.route("nnrf-disc", Method.GET, self._h_discover)

    def _h_token(self, msg: SbiMessage, ctx: RequestContext):
        req = jload(msg.body)
        grant = BootstrapGrant.from_dict(req["grant"]) if req.get("grant") else None
        tok = self.issue_token(req["requester"], req["audience"], req["scope"], grant)
        return {"access_token": tok.to_bytes().hex(), "token_type": "Bearer",
                "expires_at": tok.expires_at}

    def _h_register(self, msg: SbiMessage, ctx: RequestContext):
        return self._register(NfProfile.from_dict(jload(msg.body)), ctx.subject)

    def _h_deregister(self, msg: SbiMessage, ctx: RequestContext):
        return self._deregister(msg.path.rsplit("/", 1)[-1], ctx.subject)

    def _h_discover(self, msg: SbiMessage, ctx: RequestContext):
        q = parse_qs(urlsplit(msg.path).query)
        service = (q.get("service-names") or [""])[0]
        return {"endpoints": self._discover(service)}
