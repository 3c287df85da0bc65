"""VNF manager: deployment, re-attestation and termination of NF instances.

Each instance is driven through an explicit lifecycle state machine whose
transitions are appended to an event log; :func:`replay` reconstructs the
state from that log alone.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from . import tee
from .corenfs import NfEnv, OPERATOR_SUBJECT, SbiClient
from .corenfs.errors import NotRegistered
from .host import AGENT_SERVICE, HostInfrastructure, endpoint_for
from .sbi import (
    ATTESTED,
    PLAIN,
    AttestationLog,
    BootstrapGrant,
    ChannelIdentity,
    Method,
    SbiError,
    SbiMessage,
    fingerprint,
    open_channel,
    send_request,
)
from .sbi.channel import ChannelClosed, ConnectionRefused, HandshakeFailure, IntegrityFailure, Timeout
from .ztepolicy import (
    DeploymentClass,
    Grant,
    PolicyAttributeSet,
    PolicyDocument,
    Renewed,
    TrustSession,
    access_decision,
    evaluate,
    reevaluate,
)

log = logging.getLogger(__name__)

DEFAULT_REATTEST_PERIOD_MS = 30_000
TRANSPORT_STRIKES = 3
TRANSPORT_ERRORS = (Timeout, ConnectionRefused, ChannelClosed, HandshakeFailure, IntegrityFailure)


class DeployStep(str, Enum):
    LAUNCH = "launch"
    CHALLENGE = "challenge"
    VERIFY = "verify"
    POLICY = "policy"
    CHANNEL = "channel"
    PROVISION = "provision"
    START = "start"
    REGISTER = "register"


DEPLOY_STEPS = tuple(DeployStep)


class LifecycleState(str, Enum):
    DEPLOYING = "Deploying"
    OPERATING = "Operating"
    REATTESTING = "Reattesting"
    TERMINATING = "Terminating"
    TERMINATED = "Terminated"


class EventKind(str, Enum):
    DEPLOY_REQUESTED = "deploy_requested"
    STEP = "step"
    OPERATING = "operating"
    DEPLOY_ABORTED = "deploy_aborted"
    REATTEST_STARTED = "reattest_started"
    RENEWED = "renewed"
    TRANSPORT_FAILURE = "transport_failure"
    REVOKED = "revoked"
    TERMINATE_REQUESTED = "terminate_requested"
    DEREGISTERED = "deregistered"
    TERMINATED = "terminated"


class BootstrapMode(str, Enum):
    TRUSTED_HOST = "trusted_host"
    SELF_ATTESTED = "self_attested"


S, E = LifecycleState, EventKind

# (state before, event) -> state after; None is "no instance yet"
TRANSITIONS: dict[tuple[LifecycleState | None, EventKind], LifecycleState] = {
    (None, E.DEPLOY_REQUESTED): S.DEPLOYING,
    (S.DEPLOYING, E.STEP): S.DEPLOYING,
    (S.DEPLOYING, E.OPERATING): S.OPERATING,
    (S.DEPLOYING, E.DEPLOY_ABORTED): S.TERMINATING,
    (S.OPERATING, E.REATTEST_STARTED): S.REATTESTING,
    (S.REATTESTING, E.RENEWED): S.OPERATING,
    (S.REATTESTING, E.TRANSPORT_FAILURE): S.OPERATING,
    (S.REATTESTING, E.REVOKED): S.TERMINATING,
    (S.OPERATING, E.TERMINATE_REQUESTED): S.TERMINATING,
    (S.TERMINATING, E.DEREGISTERED): S.TERMINATING,
    (S.TERMINATING, E.TERMINATED): S.TERMINATED,
}


class ReplayError(ValueError):
    pass


@dataclass(frozen=True)
class LifecycleEvent:
    seq: int
    at_ms: int
    kind: EventKind
    detail: str = ""

    def to_dict(self) -> dict:
        return {"seq": self.seq, "at_ms": self.at_ms, "kind": self.kind.value, "detail": self.detail}


def replay(events: Iterable[LifecycleEvent]) -> LifecycleState | None:
    state = None
    for ev in events:
        nxt = TRANSITIONS.get((state, ev.kind))
        if nxt is None:
            raise ReplayError(f"event {ev.seq} {ev.kind.value} invalid in state {state}")
        state = nxt
    return state


# -- errors ---------------------------------------------------------------------

class VnfmError(Exception):
    pass


class BootstrapError(VnfmError):
    pass


class InstanceNotOperating(VnfmError):
    pass


class AlreadyTerminated(VnfmError):
    pass


class DeploymentError(VnfmError):
    def __init__(self, step: DeployStep, detail, instance: "NfInstance | None" = None):
        super().__init__(f"{step.value}: {detail}")
        self.step = step
        self.detail = detail
        self.instance = instance


class AttestationRejected(DeploymentError):
    @property
    def reason(self):
        return self.detail


class PolicyDenied(DeploymentError):
    @property
    def reasons(self):
        return self.detail


class ProvisioningFailure(DeploymentError):
    pass


class RegistrationFailure(DeploymentError):
    pass


_STEP_ERRORS = {
    DeployStep.LAUNCH: AttestationRejected,
    DeployStep.CHALLENGE: AttestationRejected,
    DeployStep.VERIFY: AttestationRejected,
    DeployStep.POLICY: PolicyDenied,
    DeployStep.CHANNEL: ProvisioningFailure,
    DeployStep.PROVISION: ProvisioningFailure,
    DeployStep.START: ProvisioningFailure,
    DeployStep.REGISTER: RegistrationFailure,
}


# -- domain types -------------------------------------------------------------------

@dataclass
class NfSpec:
    nf_type: str
    code_image: bytes
    launch_config: dict = field(default_factory=dict)
    required_features: tee.Feature = tee.SNP
    provisioning_payload: bytes = b"{}"
    instance_id: str | None = None

    def measurement(self) -> bytes:
        return tee.measure(self.code_image, self.launch_config)

    def software_manifest(self) -> tuple[tuple[str, str], ...]:
        return tuple(sorted((self.launch_config.get("software") or {}).items()))


@dataclass
class NfInstance:
    instance_id: str
    spec: NfSpec
    endpoint: str
    svm: tee.SvmHandle | None = None
    session: TrustSession | None = None
    lifecycle_state: LifecycleState | None = None
    event_log: list[LifecycleEvent] = field(default_factory=list)
    strikes: int = 0
    registered: bool = False
    next_reattest_ms: int | None = None
    reattestations: int = 0
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    @property
    def resource(self) -> str:
        return f"execution:{self.instance_id}"

    def steps_logged(self) -> list[str]:
        return [e.detail.split(" ", 1)[0] for e in self.event_log if e.kind == EventKind.STEP]


@dataclass(frozen=True)
class RenewedOutcome:
    session: TrustSession
    ok = True


@dataclass(frozen=True)
class RevokedAndQuarantined:
    reasons: tuple
    logs: bytes = b""
    ok = False


@dataclass(frozen=True)
class TransportFailure:
    strikes: int
    error: str
    ok = False


FaultInjector = Callable[[DeployStep], bool]


class Vnfm:
    """Orchestrates NF instances on one host.

    The VNFM is the root of trust for everything it deploys; how the VNFM
    itself came to be trusted is explicit in ``bootstrap``.
    """

    def __init__(self, host: HostInfrastructure, policy: PolicyDocument, root_pubkey: bytes | None, *,
                 bootstrap: BootstrapMode | str, deployment_class: str = DeploymentClass.PRIVATE_CLOUD.value,
                 reattest_period_ms: int = DEFAULT_REATTEST_PERIOD_MS, token_channel_attested: bool = True):
        self.bootstrap = BootstrapMode(bootstrap)
        self.host = host
        self.policy = policy
        self.mode = host.mode
        self.clock = host.clock
        self.trust: AttestationLog = host.trust
        self.verifier = tee.Verifier(root_pubkey) if root_pubkey is not None else None
        if self.mode == ATTESTED and self.verifier is None:
            raise BootstrapError("attested mode needs the manufacturer root key")
        self.deployment_class = deployment_class
        self.reattest_period_ms = reattest_period_ms
        self.token_channel_attested = token_channel_attested
        self._key = Ed25519PrivateKey.generate()
        self.instances: dict[str, NfInstance] = {}
        self.behavior: dict[str, set[str]] = {}
        self._lock = threading.Lock()
        self._seq = 0
        self.nrf_endpoint = ""
        self.nrf_key = None
        self._operator: SbiClient | None = None
        self.origin: str | None = "pinned on-premises host" if self.bootstrap == BootstrapMode.TRUSTED_HOST else None
        if self.mode == ATTESTED:
            # token issuance doubles as the enforcement point for trust sessions
            host.nf_options.setdefault("NRF", {})["pep"] = self.session_allows

    @property
    def verify_key_hex(self) -> str:
        return self._key.public_key().public_bytes_raw().hex()

    # -- bootstrap ----------------------------------------------------------------

    def attest_self(self, platform: tee.Platform, operator_root: bytes, allowlist, code_image: bytes,
                    launch_config: dict) -> tee.Verdict:
        """Self-attested bootstrap: the VNFM runs in its own SVM and an
        operator-held verifier must accept it before any deployment."""
        if self.bootstrap != BootstrapMode.SELF_ATTESTED:
            raise BootstrapError("attest_self only applies to self_attested bootstrap")
        svm = platform.launch_svm(code_image, launch_config, tee.SNP, svm_id="vnfm-self")
        nonce = tee.Verifier.fresh_nonce()
        verdict = tee.verify_report(platform.generate_report(svm, nonce), operator_root, nonce, allowlist,
                                    tee.SNP)
        if not verdict:
            platform.terminate(svm)
            raise BootstrapError(f"VNFM self-attestation rejected: {verdict.reason.value}")
        self.origin = f"self-attested svm {svm.svm_id} measurement {svm.measurement.hex()[:16]}"
        return verdict

    def _require_origin(self) -> None:
        if self.origin is None:
            raise BootstrapError("VNFM has not established its own trust origin")

    # -- helpers -----------------------------------------------------------------

    def _event(self, inst: NfInstance, kind: EventKind, detail: str = "") -> None:
        nxt = TRANSITIONS.get((inst.lifecycle_state, kind))
        if nxt is None:
            raise ReplayError(f"{kind.value} invalid in state {inst.lifecycle_state}")
        with self._lock:
            self._seq += 1
            seq = self._seq
        inst.event_log.append(LifecycleEvent(seq, self.clock.now_ms(), kind, detail))
        inst.lifecycle_state = nxt

    def session_allows(self, instance_id: str) -> bool:
        inst = self.instances.get(instance_id)
        if inst is None:
            return False
        return access_decision(inst.session, inst.resource, self.clock.now_ms())

    def flag_behavior(self, instance_id: str, flag: str) -> None:
        self.behavior.setdefault(instance_id, set()).add(flag)

    def _agent(self, endpoint: str, path: str, body: bytes, mode: str = PLAIN) -> bytes:
        ch = open_channel(self.host.network, ChannelIdentity(OPERATOR_SUBJECT), endpoint, mode,
                          self.trust, self.clock)
        try:
            return self._agent_on(ch, path, body)
        finally:
            ch.close()

    @staticmethod
    def _agent_on(ch, path: str, body: bytes) -> bytes:
        msg = SbiMessage(ch.next_request_id(), Method.POST, AGENT_SERVICE, path, body)
        return send_request(ch, msg).body

    def _attrs(self, inst: NfInstance, report: tee.AttestationReport, verified_at: int) -> PolicyAttributeSet:
        manifest = inst.spec.software_manifest() + (("firmware", report.firmware_version),)
        return PolicyAttributeSet(report.measurement, self.clock.now_ms() - verified_at, report.features,
                                  manifest, frozenset(self.behavior.get(inst.instance_id, ())),
                                  self.deployment_class)

    def _challenge(self, inst: NfInstance) -> tuple[bytes, bytes]:
        nonce = tee.Verifier.fresh_nonce()
        out = json.loads(self._agent(inst.endpoint, "/attestation", json.dumps({"nonce": nonce.hex()}).encode()))
        return nonce, bytes.fromhex(out["report"])

    def _verify(self, inst: NfInstance, policy: PolicyDocument, nonce: bytes, raw: bytes) -> tee.Verdict:
        return self.verifier.verify(raw, nonce, policy.allowlist,
                                    policy.required_features | inst.spec.required_features,
                                    svm_id=inst.instance_id)

    def operator(self) -> SbiClient:
        if self._operator is None:
            env = NfEnv(self.host.network, self.clock, self.trust, self.mode, "", self.nrf_endpoint,
                        self.nrf_key, self.token_channel_attested)
            grant = BootstrapGrant(OPERATOR_SUBJECT, "VNFM").sign(self._key)
            self._operator = SbiClient(OPERATOR_SUBJECT, env, grant)
        return self._operator

    def _payload(self, inst: NfInstance) -> bytes:
        doc = json.loads(inst.spec.provisioning_payload or b"{}")
        doc["grant"] = BootstrapGrant(inst.instance_id, inst.spec.nf_type).sign(self._key).to_dict()
        if inst.spec.nf_type == "NRF":
            doc["vnfm_verify_key"] = self.verify_key_hex
        return json.dumps(doc).encode()

    # -- deployment ------------------------------------------------------------------

    def deploy_nf(self, spec: NfSpec, policy: PolicyDocument | None = None, *,
                  instance_id: str | None = None, fault_injector: FaultInjector | None = None) -> NfInstance:
        self._require_origin()
        policy = policy or self.policy
        iid = instance_id or spec.instance_id or f"{spec.nf_type.lower()}-{len(self.instances) + 1}"
        with self._lock:
            if iid in self.instances:
                raise VnfmError(f"instance {iid} exists")
        inst = NfInstance(iid, spec, endpoint_for(iid))
        with self._lock:
            self.instances[iid] = inst
        with inst.lock:
            self._event(inst, EventKind.DEPLOY_REQUESTED, spec.nf_type)
            try:
                self._deploy(inst, policy, fault_injector)
            except DeploymentError as exc:
                exc.instance = inst
                self._abort(inst, exc)
                raise
        return inst

    def _deploy(self, inst: NfInstance, policy: PolicyDocument, fault: FaultInjector | None) -> None:
        attested = self.mode == ATTESTED
        ctx: dict = {}

        def step(s: DeployStep, action, detail=""):
            if fault is not None and fault(s):
                raise _STEP_ERRORS[s](s, "injected fault")
            try:
                out = action()
            except DeploymentError:
                raise
            except (SbiError, tee.TeeError, ValueError, KeyError) as exc:
                raise _STEP_ERRORS[s](s, f"{type(exc).__name__}: {exc}") from exc
            self._event(inst, EventKind.STEP, f"{s.value} {detail}".strip())
            return out

        def launch():
            g = self.host.launch(inst.instance_id, inst.spec.nf_type, inst.spec.code_image,
                                 inst.spec.launch_config, inst.spec.required_features if attested else tee.Feature.NONE)
            inst.svm = g.svm

        step(DeployStep.LAUNCH, launch)

        if attested:
            nonce, raw = step(DeployStep.CHALLENGE, lambda: self._challenge(inst))

            def verify():
                v = self._verify(inst, policy, nonce, raw)
                if not v:
                    raise AttestationRejected(DeployStep.VERIFY, v.reason)
                ctx["verified_at"] = self.clock.now_ms()
                self.trust.record(inst.instance_id, inst.endpoint, v, ctx["verified_at"])
                return v

            verdict = step(DeployStep.VERIFY, verify)

            def decide():
                out = evaluate(self._attrs(inst, verdict.report, ctx["verified_at"]), policy,
                               self.clock.now_ms(), inst.instance_id, inst.resource)
                if not isinstance(out, Grant):
                    raise PolicyDenied(DeployStep.POLICY, out.reasons)
                inst.session = out.session

            step(DeployStep.POLICY, decide)

            def channel():
                ch = open_channel(self.host.network, ChannelIdentity(OPERATOR_SUBJECT), inst.endpoint,
                                  ATTESTED, self.trust, self.clock)
                if not ch.peer.attested or ch.peer.key_fingerprint != fingerprint(verdict.report.channel_pubkey):
                    raise ProvisioningFailure(DeployStep.CHANNEL, "channel not bound to the verified report")
                return ch

            ch = step(DeployStep.CHANNEL, channel)
        else:
            for s in (DeployStep.CHALLENGE, DeployStep.VERIFY, DeployStep.POLICY):
                step(s, lambda: None, "skipped (plain)")
            ch = step(DeployStep.CHANNEL, lambda: open_channel(
                self.host.network, ChannelIdentity(OPERATOR_SUBJECT), inst.endpoint, PLAIN), "plain")

        try:
            step(DeployStep.PROVISION, lambda: self._agent_on(ch, "/provision", self._payload(inst)))
            inst.spec = replace(inst.spec, provisioning_payload=b"")

            def start():
                req = {"mode": self.mode, "nrf_endpoint": self.nrf_endpoint,
                       "nrf_key": self.nrf_key.public_bytes_raw().hex() if self.nrf_key else None,
                       "token_channel_attested": self.token_channel_attested}
                info = json.loads(self._agent_on(ch, "/start", json.dumps(req).encode()))
                if inst.spec.nf_type == "NRF":
                    self.nrf_endpoint = inst.endpoint
                    self.nrf_key = Ed25519PublicKey.from_public_bytes(bytes.fromhex(info["nrf_verify_key"]))
                    self._operator = None

            step(DeployStep.START, start)

            def register():
                self._agent_on(ch, "/register", b"{}")
                inst.registered = True

            step(DeployStep.REGISTER, register)
        finally:
            ch.close()
        inst.next_reattest_ms = self.clock.now_ms() + self.reattest_period_ms
        self._event(inst, EventKind.OPERATING)

    def _abort(self, inst: NfInstance, exc: DeploymentError) -> None:
        self._event(inst, EventKind.DEPLOY_ABORTED, f"{exc.step.value}: {exc.detail}")
        self._teardown(inst)

    def _teardown(self, inst: NfInstance) -> bytes:
        # the NRF deregisters through its own endpoint, so its report must outlive that call
        is_nrf = inst.endpoint == self.nrf_endpoint
        if not is_nrf:
            self.trust.revoke(inst.instance_id)
        if inst.session is not None:
            inst.session.revoked = True
        if inst.registered:
            try:
                self.operator().call("nnrf-nfm", Method.DELETE, f"/nf-instances/{inst.instance_id}",
                                     endpoint=self.nrf_endpoint)
            except NotRegistered:
                pass
            inst.registered = False
            self._event(inst, EventKind.DEREGISTERED)
        if is_nrf:
            self.trust.revoke(inst.instance_id)
        logs = b""
        if inst.instance_id in self.host.guests:
            try:
                logs = self.host.terminate(inst.instance_id)
            except tee.AlreadyTerminated:
                pass
        self._event(inst, EventKind.TERMINATED)
        return logs

    # -- operation -----------------------------------------------------------------------

    def reattest(self, inst: NfInstance, policy: PolicyDocument | None = None):
        policy = policy or self.policy
        with inst.lock:
            if inst.lifecycle_state != LifecycleState.OPERATING:
                raise InstanceNotOperating(f"{inst.instance_id} is {inst.lifecycle_state}")
            self._event(inst, EventKind.REATTEST_STARTED)
            inst.reattestations += 1
            now = self.clock.now_ms()
            if self.mode != ATTESTED:
                inst.next_reattest_ms = now + self.reattest_period_ms
                self._event(inst, EventKind.RENEWED, "plain")
                return RenewedOutcome(inst.session)
            try:
                nonce, raw = self._challenge(inst)
            except TRANSPORT_ERRORS as exc:
                inst.strikes += 1
                if inst.strikes >= TRANSPORT_STRIKES:
                    return self._quarantine(inst, ("transport",), f"{inst.strikes} transport failures")
                # retry inside the current session so three strikes never outlive it
                inst.next_reattest_ms = now + max(1, self.reattest_period_ms // TRANSPORT_STRIKES)
                self._event(inst, EventKind.TRANSPORT_FAILURE, f"strike {inst.strikes}: {type(exc).__name__}")
                return TransportFailure(inst.strikes, type(exc).__name__)
            verdict = self._verify(inst, policy, nonce, raw)
            if not verdict:
                inst.session.revoked = True
                return self._quarantine(inst, (verdict.reason,), f"attestation {verdict.reason.value}")
            self.trust.record(inst.instance_id, inst.endpoint, verdict, now)
            out = reevaluate(inst.session, self._attrs(inst, verdict.report, now), policy, now)
            if not isinstance(out, Renewed):
                return self._quarantine(inst, out.reasons, "policy " + ",".join(r.value for r in out.reasons))
            inst.session = out.session
            inst.strikes = 0
            inst.next_reattest_ms = now + self.reattest_period_ms
            self._event(inst, EventKind.RENEWED)
            return RenewedOutcome(out.session)

    def _quarantine(self, inst: NfInstance, reasons: tuple, detail: str) -> RevokedAndQuarantined:
        log.warning("quarantining %s: %s", inst.instance_id, detail)
        self._event(inst, EventKind.REVOKED, detail)
        return RevokedAndQuarantined(tuple(reasons), self._teardown(inst))

    def terminate_nf(self, inst: NfInstance) -> bytes:
        """Deregister, then terminate and return the exported log.

        Serialized with re-attestation through the instance lock, so a
        request arriving mid-reattestation waits for it to resolve.
        """
        with inst.lock:
            if inst.lifecycle_state == LifecycleState.TERMINATED:
                raise AlreadyTerminated(inst.instance_id)
            self._event(inst, EventKind.TERMINATE_REQUESTED)
            return self._teardown(inst)

    def operating(self) -> list[NfInstance]:
        return [i for i in self.instances.values() if i.lifecycle_state == LifecycleState.OPERATING]


class ReattestScheduler:
    """Fires re-attestation for every operating instance on the simulated clock."""

    def __init__(self, vnfm: Vnfm, policy_source: Callable[[], PolicyDocument] | None = None):
        self.vnfm = vnfm
        self.policy_source = policy_source or (lambda: vnfm.policy)
        self.fired: list[tuple[int, str, str]] = []

    def _due(self) -> tuple[int, NfInstance] | None:
        best = None
        for inst in self.vnfm.operating():
            if inst.next_reattest_ms is not None and (best is None or inst.next_reattest_ms < best[0]):
                best = (inst.next_reattest_ms, inst)
        return best

    def run_until(self, t_ms: int) -> int:
        """Advance the clock to ``t_ms``, firing every re-attestation due on the way."""
        clock = self.vnfm.clock
        count = 0
        while True:
            due = self._due()
            if due is None or due[0] > t_ms:
                break
            if due[0] > clock.now_ms():
                clock.set(due[0])
            out = self.vnfm.reattest(due[1], self.policy_source())
            self.fired.append((clock.now_ms(), due[1].instance_id, type(out).__name__))
            count += 1
        if t_ms > clock.now_ms():
            clock.set(t_ms)
        return count
