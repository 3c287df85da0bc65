import os

import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from confcore import ztepolicy as zp
from confcore.tee import SNP, Feature
from confcore.ztepolicy import (
    Deny,
    DenyReason,
    Grant,
    PolicyAttributeSet,
    PolicyDocument,
    Renewed,
    Revoked,
    access_decision,
    compare_versions,
    dumps_policy,
    evaluate,
    loads_policy,
    reevaluate,
    tighten,
)

M1, M2, M3 = (bytes([i]) * 32 for i in (1, 2, 3))
CLASSES = ["on_premises", "private_cloud", "public_cloud"]


def policy(**kw):
    base = dict(allowlist={M1, M2}, required_features=SNP, max_attestation_age_ms=300_000,
                min_versions={"confcore": "1.0.0"}, deployment_rules={"private_cloud": "allow"},
                session_ttl_ms=60_000, deny_on_behavior_flags={"unexpected_egress"})
    base.update(kw)
    return PolicyDocument(**base)


def attrs(**kw):
    base = dict(measurement=M1, attestation_age_ms=0, platform_features=SNP,
                software_manifest=(("confcore", "1.0.0"),), behavior_flags=frozenset(),
                deployment_class="private_cloud")
    base.update(kw)
    return PolicyAttributeSet(**base)


# -- independent oracle, one predicate per check ------------------------------------------

def _vkey(v):
    core, _, tag = v.partition("-")
    nums = [int(x) for x in core.split(".")]
    return nums, tag


def oracle_version_ok(have, need):
    (hn, ht), (nn, nt) = _vkey(have), _vkey(need)
    width = max(len(hn), len(nn))
    hn, nn = hn + [0] * (width - len(hn)), nn + [0] * (width - len(nn))
    if hn != nn:
        return hn > nn
    if ht == nt:
        return True
    if not ht:
        return True
    if not nt:
        return False
    return ht > nt


def oracle_reasons(a, p):
    out = []
    if a.measurement not in p.allowlist:
        out.append("measurement")
    if int(p.required_features) & ~int(a.platform_features):
        out.append("features")
    if a.attestation_age_ms > p.max_attestation_age_ms:
        out.append("stale_attestation")
    man = dict(a.software_manifest)
    if any(c not in man or not oracle_version_ok(man[c], v) for c, v in p.min_versions.items()):
        out.append("version")
    if p.deployment_rules.get(a.deployment_class) != "allow":
        out.append("deployment")
    if set(a.behavior_flags) & set(p.deny_on_behavior_flags):
        out.append("behavior")
    return out


# -- strategies ------------------------------------------------------------------------------

measurements = st.sampled_from([M1, M2, M3])
features = st.integers(0, 7).map(Feature)
versions = st.builds(lambda a, b, c, tag: f"{a}.{b}.{c}" + (f"-{tag}" if tag else ""),
                     st.integers(0, 3), st.integers(0, 3), st.integers(0, 3),
                     st.sampled_from(["", "rc1", "rc2", "alpha"]))
flags = st.frozensets(st.sampled_from(["unexpected_egress", "privilege_escalation", "cpu_spike"]), max_size=3)

attr_sets = st.builds(
    PolicyAttributeSet,
    measurement=measurements,
    attestation_age_ms=st.integers(0, 600_000),
    platform_features=features,
    software_manifest=st.lists(st.tuples(st.sampled_from(["confcore", "firmware", "libc"]), versions),
                               max_size=3, unique_by=lambda t: t[0]).map(tuple),
    behavior_flags=flags,
    deployment_class=st.sampled_from(CLASSES),
)

policies = st.builds(
    PolicyDocument,
    allowlist=st.frozensets(measurements, max_size=3),
    required_features=features,
    max_attestation_age_ms=st.integers(0, 600_000),
    min_versions=st.dictionaries(st.sampled_from(["confcore", "firmware"]), versions, max_size=2),
    deployment_rules=st.dictionaries(st.sampled_from(CLASSES), st.sampled_from(["allow", "deny"]), max_size=3),
    session_ttl_ms=st.integers(1, 120_000),
    deny_on_behavior_flags=flags,
)


# -- examples -----------------------------------------------------------------------------------

def test_compliant_attributes_are_granted():
    out = evaluate(attrs(), policy(), now=5_000, subject="amf-1", resource="execution:amf-1")
    assert isinstance(out, Grant)
    assert out.session.ttl_ms == 60_000 and out.session.granted_at == 5_000
    assert out.session.justification == attrs()


def test_on_premises_not_implicitly_trusted():
    out = evaluate(attrs(deployment_class="on_premises"), policy(), 0)
    assert isinstance(out, Deny) and out.reasons == (DenyReason.DEPLOYMENT,)


def test_explicit_deny_rule():
    p = policy(deployment_rules={"private_cloud": "deny"})
    assert evaluate(attrs(), p, 0).reasons == (DenyReason.DEPLOYMENT,)


@pytest.mark.parametrize("delta, ok", [(-1, True), (0, True), (1, False)])
def test_freshness_boundary(delta, ok):
    out = evaluate(attrs(attestation_age_ms=300_000 + delta), policy(), 0)
    assert isinstance(out, Grant) == ok
    if not ok:
        assert out.reasons == (DenyReason.STALE_ATTESTATION,)


@pytest.mark.parametrize("have, ok", [("1.0.0", True), ("1.0", True), ("0.9.9", False), ("1.0.1", True),
                                      ("1.0.0-rc1", False), ("10.0.0", True)])
def test_version_boundary(have, ok):
    out = evaluate(attrs(software_manifest=(("confcore", have),)), policy(), 0)
    assert isinstance(out, Grant) == ok


def test_missing_component_is_denied():
    assert evaluate(attrs(software_manifest=()), policy(), 0).reasons == (DenyReason.VERSION,)


def test_all_failures_reported():
    bad = attrs(measurement=M3, attestation_age_ms=10**6, platform_features=Feature.NONE,
                software_manifest=(), behavior_flags={"unexpected_egress"}, deployment_class="public_cloud")
    assert set(evaluate(bad, policy(), 0).reasons) == set(DenyReason)


def test_negative_age_rejected():
    with pytest.raises(ValueError):
        attrs(attestation_age_ms=-1)


# -- properties ------------------------------------------------------------------------------------

@given(attr_sets, policies)
def test_reasons_equal_per_check_oracle(a, p):
    out = evaluate(a, p, 0)
    expected = oracle_reasons(a, p)
    if expected:
        assert isinstance(out, Deny) and [r.value for r in out.reasons] == expected
    else:
        assert isinstance(out, Grant)


@given(attr_sets, policies)
def test_no_implicit_trust(a, p):
    assume(p.deployment_rules.get(a.deployment_class) != "allow")
    out = evaluate(a, p, 0)
    assert isinstance(out, Deny) and DenyReason.DEPLOYMENT in out.reasons


tightenings = st.fixed_dictionaries({}, optional={
    "drop": st.frozensets(measurements, max_size=2),
    "require": features,
    "max_age_ms": st.integers(0, 600_000),
    "min_versions": st.dictionaries(st.sampled_from(["confcore", "firmware"]), versions, max_size=2),
    "deny_classes": st.lists(st.sampled_from(CLASSES), max_size=2),
    "deny_flags": st.lists(st.sampled_from(["cpu_spike", "unexpected_egress"]), max_size=2),
})


@given(attr_sets, policies, tightenings)
def test_denial_is_monotone_under_tightening(a, p, t):
    assume(isinstance(evaluate(a, p, 0), Deny))
    before = set(evaluate(a, p, 0).reasons)
    out = evaluate(a, tighten(p, **t), 0)
    assert isinstance(out, Deny)
    assert before <= set(out.reasons)


@given(st.integers(0, 10**9), st.integers(1, 10**6))
def test_session_validity_is_half_open(granted, ttl):
    s = zp.TrustSession("nf", "execution:nf", granted, ttl, attrs())
    for t in (granted - 1, granted, granted + ttl - 1, granted + ttl, granted + ttl + 1):
        assert access_decision(s, "execution:nf", t) == (granted <= t < granted + ttl)


def test_session_is_per_resource():
    s = evaluate(attrs(), policy(), 0, "nrf-1", "nrf:register").session
    assert access_decision(s, "nrf:register", 1)
    assert not access_decision(s, "udm:sdm", 1)
    assert not access_decision(None, "nrf:register", 1)


# -- re-evaluation ------------------------------------------------------------------------------------

def test_reevaluate_renews_with_new_session():
    s = evaluate(attrs(), policy(), 1_000, "a", "r").session
    out = reevaluate(s, attrs(attestation_age_ms=5), policy(), 31_000)
    assert isinstance(out, Renewed)
    assert out.session is not s and out.session.granted_at > s.granted_at
    assert s.granted_at == 1_000 and s.ttl_ms == 60_000 and not s.revoked


def test_reevaluate_revokes_on_behavior_flag():
    s = evaluate(attrs(), policy(), 0, "a", "r").session
    out = reevaluate(s, attrs(behavior_flags={"unexpected_egress"}), policy(), 10)
    assert isinstance(out, Revoked) and out.reasons == (DenyReason.BEHAVIOR,)
    assert s.revoked and not access_decision(s, "r", 11)


def test_reevaluate_revokes_after_policy_raise():
    s = evaluate(attrs(), policy(), 0, "a", "r").session
    stricter = tighten(policy(), min_versions={"confcore": "1.1.0"})
    out = reevaluate(s, attrs(), stricter, 10)
    assert isinstance(out, Revoked) and out.reasons == (DenyReason.VERSION,)


# -- versions ---------------------------------------------------------------------------------------

@given(versions, versions)
def test_version_order_antisymmetric(a, b):
    assert compare_versions(a, b) == -compare_versions(b, a)
    assert (compare_versions(a, b) >= 0) == oracle_version_ok(a, b)


def test_version_parse_errors():
    with pytest.raises(ValueError):
        compare_versions("one", "1.0")


# -- policy documents -----------------------------------------------------------------------------------

def test_policy_invariant_ttl_within_age():
    assert any("session_ttl_exceeds_attestation_age" in v
               for v in policy(session_ttl_ms=400_000).violations())
    assert policy().violations() == []


def test_policy_violations_listing():
    bad = policy(deployment_rules={"orbit": "maybe"}, allowlist=set(), min_versions={"x": "abc"})
    text = " ".join(bad.violations())
    for needle in ("orbit", "allow or deny", "empty allowlist", "not comparable"):
        assert needle in text


@given(policies)
def test_policy_file_round_trip(p):
    back = loads_policy(dumps_policy(p))
    assert back == p


def test_policy_file_parsing():
    text = f"""
# comment
allow_measurement = {M1.hex()}
require_feature = memory_encryption
require_feature = integrity_protection
max_attestation_age_ms = 1000
session_ttl_ms = 500
min_version = confcore 1.2
deployment = public_cloud deny
deny_flag = cpu_spike   # trailing comment
"""
    p = loads_policy(text)
    assert p.allowlist == {M1}
    assert p.required_features == Feature.MEMORY_ENCRYPTION | Feature.INTEGRITY_PROTECTION
    assert (p.max_attestation_age_ms, p.session_ttl_ms) == (1000, 500)
    assert p.min_versions == {"confcore": "1.2"}
    assert p.deployment_rules == {"public_cloud": "deny"}
    assert p.deny_on_behavior_flags == {"cpu_spike"}


@pytest.mark.parametrize("text", [
    "trust_everything = yes",
    "allow_measurement",
    "allow_measurement = zz",
    "require_feature = warp",
    "session_ttl_ms = 1\nsession_ttl_ms = 2",
    "min_version = confcore",
])
def test_policy_file_rejects_bad_lines(text):
    with pytest.raises(zp.PolicyFileError):
        loads_policy(text)


def test_defaults_when_omitted():
    p = loads_policy(f"allow_measurement = {os.urandom(32).hex()}")
    assert p.session_ttl_ms == 60_000 and p.max_attestation_age_ms == 300_000
    assert p.deployment_rules == {}
