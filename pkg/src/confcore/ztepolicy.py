"""Zero Trust Execution policy engine.

Evaluation is pure: (attributes, policy, now) in, a grant or the full list of
failing checks out. Sessions are bound to one subject and one resource and
are valid on the half-open interval ``[granted_at, granted_at + ttl_ms)``.

Policy file format, one decision per line, ``#`` starts a comment::

    allow_measurement = <64 hex chars>
    require_feature = integrity_protection
    max_attestation_age_ms = 300000
    session_ttl_ms = 60000
    min_version = nf-core 1.2.0
    deployment = private_cloud allow
    deny_flag = unexpected_syscall
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

from .tee import Feature

DEFAULT_SESSION_TTL_MS = 60_000
DEFAULT_MAX_ATTESTATION_AGE_MS = 300_000


class DeploymentClass(str, Enum):
    ON_PREMISES = "on_premises"
    PRIVATE_CLOUD = "private_cloud"
    PUBLIC_CLOUD = "public_cloud"


class DenyReason(str, Enum):
    MEASUREMENT = "measurement"
    FEATURES = "features"
    STALE_ATTESTATION = "stale_attestation"
    VERSION = "version"
    DEPLOYMENT = "deployment"
    BEHAVIOR = "behavior"


# -- versions -----------------------------------------------------------------

_VERSION_RE = re.compile(r"^(\d+(?:\.\d+)*)(?:-([0-9A-Za-z.\-]+))?$")


def parse_version(text: str) -> tuple[tuple[int, ...], str | None]:
    m = _VERSION_RE.match(text.strip())
    if not m:
        raise ValueError(f"unparseable version {text!r}")
    return tuple(int(p) for p in m.group(1).split(".")), m.group(2)


def compare_versions(a: str, b: str) -> int:
    """Dotted numeric, shorter side zero-padded; a pre-release tag sorts
    below the bare release, tags compare as strings."""
    (na, ta), (nb, tb) = parse_version(a), parse_version(b)
    width = max(len(na), len(nb))
    na += (0,) * (width - len(na))
    nb += (0,) * (width - len(nb))
    if na != nb:
        return -1 if na < nb else 1
    if ta == tb:
        return 0
    if ta is None:
        return 1
    if tb is None:
        return -1
    return -1 if ta < tb else 1


# -- types ----------------------------------------------------------------------

@dataclass(frozen=True)
class PolicyAttributeSet:
    measurement: bytes
    attestation_age_ms: int
    platform_features: Feature
    software_manifest: tuple[tuple[str, str], ...] = ()
    behavior_flags: frozenset[str] = frozenset()
    deployment_class: str = DeploymentClass.PRIVATE_CLOUD.value

    def __post_init__(self):
        if self.attestation_age_ms < 0:
            raise ValueError("attestation_age_ms must be >= 0")
        object.__setattr__(self, "software_manifest", tuple(tuple(p) for p in self.software_manifest))
        object.__setattr__(self, "behavior_flags", frozenset(self.behavior_flags))
        dc = self.deployment_class
        object.__setattr__(self, "deployment_class", dc.value if isinstance(dc, DeploymentClass) else dc)


@dataclass
class PolicyDocument:
    allowlist: frozenset[bytes] = frozenset()
    required_features: Feature = Feature.NONE
    max_attestation_age_ms: int = DEFAULT_MAX_ATTESTATION_AGE_MS
    min_versions: dict[str, str] = field(default_factory=dict)
    deployment_rules: dict[str, str] = field(default_factory=dict)  # class -> allow|deny
    session_ttl_ms: int = DEFAULT_SESSION_TTL_MS
    deny_on_behavior_flags: frozenset[str] = frozenset()

    def __post_init__(self):
        self.allowlist = frozenset(self.allowlist)
        self.deny_on_behavior_flags = frozenset(self.deny_on_behavior_flags)
        self.required_features = Feature(self.required_features)

    def violations(self) -> list[str]:
        """Broken document invariants; empty means the policy is usable."""
        out = []
        if self.session_ttl_ms <= 0:
            out.append("session_ttl_ms must be positive")
        if self.max_attestation_age_ms < 0:
            out.append("max_attestation_age_ms must be non-negative")
        if self.session_ttl_ms > self.max_attestation_age_ms:
            out.append("session_ttl_exceeds_attestation_age: a grant cannot outlive its evidence "
                       f"({self.session_ttl_ms} > {self.max_attestation_age_ms})")
        for cls, verdict in self.deployment_rules.items():
            if verdict not in ("allow", "deny"):
                out.append(f"deployment rule for {cls} must be allow or deny")
            if cls not in {d.value for d in DeploymentClass}:
                out.append(f"unknown deployment class {cls}")
        for comp, ver in self.min_versions.items():
            try:
                parse_version(ver)
            except ValueError:
                out.append(f"min_version for {comp} is not comparable: {ver}")
        for m in self.allowlist:
            if len(m) != 32:
                out.append(f"allowlisted measurement has {len(m)} bytes, expected 32")
        if not self.allowlist:
            out.append("empty allowlist denies every measurement")
        return out


@dataclass
class TrustSession:
    subject: str
    resource: str
    granted_at: int
    ttl_ms: int
    justification: PolicyAttributeSet
    revoked: bool = False

    def valid_at(self, now: int) -> bool:
        return not self.revoked and self.granted_at <= now < self.granted_at + self.ttl_ms

    @property
    def expires_at(self) -> int:
        return self.granted_at + self.ttl_ms


@dataclass(frozen=True)
class Grant:
    session: TrustSession
    ok = True


@dataclass(frozen=True)
class Deny:
    reasons: tuple[DenyReason, ...]
    ok = False


@dataclass(frozen=True)
class Renewed:
    session: TrustSession
    ok = True


@dataclass(frozen=True)
class Revoked:
    reasons: tuple[DenyReason, ...]
    ok = False


# -- individual checks -----------------------------------------------------------

def check_measurement(attrs: PolicyAttributeSet, policy: PolicyDocument) -> bool:
    return attrs.measurement in policy.allowlist


def check_features(attrs: PolicyAttributeSet, policy: PolicyDocument) -> bool:
    return not (policy.required_features & ~attrs.platform_features)


def check_freshness(attrs: PolicyAttributeSet, policy: PolicyDocument) -> bool:
    return attrs.attestation_age_ms <= policy.max_attestation_age_ms


def check_versions(attrs: PolicyAttributeSet, policy: PolicyDocument) -> bool:
    installed = dict(attrs.software_manifest)
    for comp, minimum in policy.min_versions.items():
        have = installed.get(comp)
        if have is None:
            return False
        try:
            if compare_versions(have, minimum) < 0:
                return False
        except ValueError:
            return False
    return True


def check_deployment(attrs: PolicyAttributeSet, policy: PolicyDocument) -> bool:
    # no rule means deny, on-premises included
    return policy.deployment_rules.get(attrs.deployment_class) == "allow"


def check_behavior(attrs: PolicyAttributeSet, policy: PolicyDocument) -> bool:
    return not (attrs.behavior_flags & policy.deny_on_behavior_flags)


CHECKS = (
    (DenyReason.MEASUREMENT, check_measurement),
    (DenyReason.FEATURES, check_features),
    (DenyReason.STALE_ATTESTATION, check_freshness),
    (DenyReason.VERSION, check_versions),
    (DenyReason.DEPLOYMENT, check_deployment),
    (DenyReason.BEHAVIOR, check_behavior),
)


def failing_checks(attrs: PolicyAttributeSet, policy: PolicyDocument) -> tuple[DenyReason, ...]:
    return tuple(reason for reason, check in CHECKS if not check(attrs, policy))


def evaluate(attrs: PolicyAttributeSet, policy: PolicyDocument, now: int,
             subject: str = "", resource: str = "") -> Grant | Deny:
    reasons = failing_checks(attrs, policy)
    if reasons:
        return Deny(reasons)
    return Grant(TrustSession(subject, resource, now, policy.session_ttl_ms, attrs))


_revoke_lock = threading.Lock()


def reevaluate(session: TrustSession, fresh_attrs: PolicyAttributeSet, policy: PolicyDocument,
               now: int) -> Renewed | Revoked:
    """Issue a replacement session or revoke the old one; never extends."""
    outcome = evaluate(fresh_attrs, policy, now, session.subject, session.resource)
    if isinstance(outcome, Grant):
        return Renewed(outcome.session)
    with _revoke_lock:
        session.revoked = True
    return Revoked(outcome.reasons)


def access_decision(session: TrustSession | None, resource: str, now: int) -> bool:
    if session is None:
        return False
    with _revoke_lock:
        return session.valid_at(now) and session.resource == resource


# -- policy files -------------------------------------------------------------------

class PolicyFileError(ValueError):
    pass


_KEYS = {"allow_measurement", "require_feature", "max_attestation_age_ms", "session_ttl_ms",
         "min_version", "deployment", "deny_flag"}


def loads_policy(text: str) -> PolicyDocument:
    allow: set[bytes] = set()
    features = Feature.NONE
    min_versions: dict[str, str] = {}
    rules: dict[str, str] = {}
    flags: set[str] = set()
    scalars: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (p.strip() for p in line.partition("="))
        if not sep or not value:
            raise PolicyFileError(f"line {lineno}: expected 'key = value'")
        if key not in _KEYS:
            raise PolicyFileError(f"line {lineno}: unknown key {key!r}")
        try:
            if key == "allow_measurement":
                allow.add(bytes.fromhex(value))
            elif key == "require_feature":
                features |= Feature.parse([value])
            elif key in ("max_attestation_age_ms", "session_ttl_ms"):
                if key in scalars:
                    raise PolicyFileError(f"line {lineno}: {key} given twice")
                scalars[key] = int(value)
            elif key == "min_version":
                comp, ver = value.split()
                min_versions[comp] = ver
            elif key == "deployment":
                cls, verdict = value.split()
                rules[cls] = verdict
            elif key == "deny_flag":
                flags.add(value)
        except PolicyFileError:
            raise
        except ValueError as exc:
            raise PolicyFileError(f"line {lineno}: {exc}") from exc
    return PolicyDocument(
        allowlist=frozenset(allow),
        required_features=features,
        max_attestation_age_ms=scalars.get("max_attestation_age_ms", DEFAULT_MAX_ATTESTATION_AGE_MS),
        min_versions=min_versions,
        deployment_rules=rules,
        session_ttl_ms=scalars.get("session_ttl_ms", DEFAULT_SESSION_TTL_MS),
        deny_on_behavior_flags=frozenset(flags),
    )


def load_policy(path: str | Path) -> PolicyDocument:
    return loads_policy(Path(path).read_text())


def dumps_policy(policy: PolicyDocument) -> str:
    lines = [f"allow_measurement = {m.hex()}" for m in sorted(policy.allowlist)]
    lines += [f"require_feature = {n}" for n in policy.required_features.names()]
    lines.append(f"max_attestation_age_ms = {policy.max_attestation_age_ms}")
    lines.append(f"session_ttl_ms = {policy.session_ttl_ms}")
    lines += [f"min_version = {c} {v}" for c, v in sorted(policy.min_versions.items())]
    lines += [f"deployment = {c} {v}" for c, v in sorted(policy.deployment_rules.items())]
    lines += [f"deny_flag = {f}" for f in sorted(policy.deny_on_behavior_flags)]
    return "\n".join(lines) + "\n"


def tighten(policy: PolicyDocument, *, drop: Iterable[bytes] = (), require: Feature = Feature.NONE,
            max_age_ms: int | None = None, min_versions: Mapping[str, str] | None = None,
            deny_classes: Iterable[str] = (), deny_flags: Iterable[str] = ()) -> PolicyDocument:
    """A policy at least as strict as ``policy``."""
    rules = dict(policy.deployment_rules)
    for c in deny_classes:
        rules[c] = "deny"
    mins = dict(policy.min_versions)
    for comp, ver in (min_versions or {}).items():
        if comp not in mins or compare_versions(ver, mins[comp]) > 0:
            mins[comp] = ver
    return replace(
        policy,
        allowlist=policy.allowlist - frozenset(drop),
        required_features=policy.required_features | require,
        max_attestation_age_ms=min(policy.max_attestation_age_ms, max_age_ms)
        if max_age_ms is not None else policy.max_attestation_age_ms,
        min_versions=mins,
        deployment_rules=rules,
        deny_on_behavior_flags=policy.deny_on_behavior_flags | frozenset(deny_flags),
    )
