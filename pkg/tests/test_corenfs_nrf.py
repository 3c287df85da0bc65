import random

import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import SERVICES, nrf_bisimulation, standalone_nrf

from confcore.clock import SimClock
from confcore.corenfs import (
    OPERATOR_SUBJECT,
    DuplicateInstanceConflict,
    NfProfile,
    NfStatus,
    NotRegistered,
    ScopeNotOffered,
    UnknownRequester,
)
from confcore.sbi import BootstrapGrant, Method, TokenReject, Unauthorized, verify_token
from confcore.sbi.tokens import AccessToken
from confcore.vnfm import LifecycleState


def amf(iid="amf-1", services=("namf-comm",)):
    return NfProfile(iid, "AMF", services, f"{iid}.sbi")


def udm(iid="udm-1"):
    return NfProfile(iid, "UDM", ("nudm-sdm", "nudm-ueau"), f"{iid}.sbi")


@pytest.fixture
def vnfm_key():
    from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
    return Ed25519PrivateKey.generate()


@pytest.fixture
def nrf(vnfm_key):
    return standalone_nrf(SimClock(1_000), vnfm_key)


def test_register_then_discover(nrf):
    assert nrf._register(amf(), "amf-1") == {"status": "ok", "idempotent": False}
    assert nrf._discover("namf-comm") == ["amf-1.sbi"]
    assert nrf.profiles()[0].registered_at == 1_000


def test_reregister_identical_is_idempotent(nrf):
    nrf._register(amf(), "amf-1")
    assert nrf._register(amf(), "amf-1")["idempotent"]
    assert len(nrf.profiles()) == 1


def test_conflicting_content(nrf):
    nrf._register(amf(), "amf-1")
    with pytest.raises(DuplicateInstanceConflict):
        nrf._register(amf(services=("namf-comm", "namf-evts")), "amf-1")


def test_deregistered_profiles_hidden(nrf):
    nrf._register(amf(), "amf-1")
    nrf._deregister("amf-1", "amf-1")
    assert nrf._discover("namf-comm") == []
    assert nrf.profiles()[0].status == NfStatus.DEREGISTERED
    with pytest.raises(NotRegistered):
        nrf._deregister("amf-1", OPERATOR_SUBJECT)
    nrf._register(amf(services=("namf-evts",)), "amf-1")
    assert nrf._discover("namf-evts") == ["amf-1.sbi"]


def test_subject_must_own_the_profile(nrf):
    with pytest.raises(Unauthorized):
        nrf._register(amf(), "smf-1")
    nrf._register(amf(), OPERATOR_SUBJECT)
    with pytest.raises(Unauthorized):
        nrf._deregister("amf-1", "smf-1")


def test_register_nf_requires_nfm_scope(nrf):
    nrf._register(udm(), "udm-1")
    nrf.register()
    tok = nrf.issue_token("udm-1", "NRF", ("nnrf-disc",))
    with pytest.raises(Unauthorized, match="scope"):
        nrf.register_nf(udm(), tok)
    good = nrf.issue_token("udm-1", "NRF", ("nnrf-nfm",))
    assert nrf.register_nf(udm(), good)["idempotent"]
    assert nrf.discover("nudm-sdm", nrf.issue_token("udm-1", "NRF", ("nnrf-disc",))) == ["udm-1.sbi"]


def test_ten_random_profiles_match_ground_truth(nrf):
    rng = random.Random(11)
    truth = {}
    for i in range(10):
        services = tuple(rng.sample(SERVICES, rng.randint(1, 3)))
        p = NfProfile(f"nf-{i}", "AMF", services, f"nf-{i}.sbi")
        nrf._register(p, OPERATOR_SUBJECT)
        for s in services:
            truth.setdefault(s, []).append(p.endpoint)
    for s in SERVICES:
        assert nrf._discover(s) == truth.get(s, [])


@given(st.integers(0, 2**32), st.integers(1, 300))
def test_registry_bisimulates_mirror_map(seed, n):
    assert nrf_bisimulation(n, seed, pool=8) == 0


# -- token issuance -----------------------------------------------------------------------

def test_registered_amf_gets_udm_token(nrf):
    nrf._register(amf(), "amf-1")
    nrf._register(udm(), "udm-1")
    tok = nrf.issue_token("amf-1", "UDM", ["nudm-sdm"])
    assert tok.audience == "UDM" and tok.subject == "amf-1" and tok.scope == ("nudm-sdm",)
    assert verify_token(tok, "nudm-sdm", 1_001, nrf.verify_key, "UDM")
    assert tok.expires_at - tok.issued_at == nrf.token_ttl_ms


def test_unknown_requester(nrf):
    nrf._register(udm(), "udm-1")
    with pytest.raises(UnknownRequester):
        nrf.issue_token("ghost", "UDM", ["nudm-sdm"])


def test_scope_not_offered(nrf):
    nrf._register(amf(), "amf-1")
    with pytest.raises(ScopeNotOffered):
        nrf.issue_token("amf-1", "UDM", ["nudm-sdm"])
    with pytest.raises(ScopeNotOffered):
        nrf.issue_token("amf-1", "AMF", [])


def test_bootstrap_grant_exempts_only_first_registration(nrf, vnfm_key):
    nrf.register()
    grant = BootstrapGrant("smf-1", "SMF").sign(vnfm_key)
    assert nrf.issue_token("smf-1", "NRF", ["nnrf-nfm"], grant).scope == ("nnrf-nfm",)
    with pytest.raises(UnknownRequester):
        nrf.issue_token("smf-1", "NRF", ["nnrf-disc"], grant)
    with pytest.raises(UnknownRequester):
        nrf.issue_token("smf-2", "NRF", ["nnrf-nfm"], grant)


def test_forged_grant_refused(nrf):
    from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
    nrf.register()
    forged = BootstrapGrant("smf-1", "SMF").sign(Ed25519PrivateKey.generate())
    with pytest.raises(UnknownRequester):
        nrf.issue_token("smf-1", "NRF", ["nnrf-nfm"], forged)


def test_operator_needs_grant(nrf, vnfm_key):
    nrf.register()
    with pytest.raises(UnknownRequester):
        nrf.issue_token(OPERATOR_SUBJECT, "NRF", ["nnrf-nfm"])
    g = BootstrapGrant(OPERATOR_SUBJECT, "VNFM").sign(vnfm_key)
    assert nrf.issue_token(OPERATOR_SUBJECT, "NRF", ["nnrf-disc"], g)


def test_policy_enforcement_point(nrf):
    nrf._register(amf(), "amf-1")
    nrf._register(udm(), "udm-1")
    nrf.pep = lambda iid: iid != "amf-1"
    with pytest.raises(Unauthorized):
        nrf.issue_token("amf-1", "UDM", ["nudm-sdm"])
    assert nrf.issue_token("udm-1", "UDM", ["nudm-sdm"])


def test_issue_verify_round_trip_1000(nrf):
    rng = random.Random(5)
    offered = {}
    for i, t in enumerate(["AMF", "UDM", "AUSF", "SMF", "UPF"]):
        svcs = tuple(f"svc-{t.lower()}-{j}" for j in range(6))
        nrf._register(NfProfile(f"{t.lower()}-1", t, svcs, f"{t.lower()}-1.sbi"), OPERATOR_SUBJECT)
        offered[t] = svcs
    requesters = [f"{t.lower()}-1" for t in offered]
    accepted = 0
    for _ in range(1000):
        aud = rng.choice(list(offered))
        scope = rng.sample(offered[aud], rng.randint(1, 4))
        tok = AccessToken.from_bytes(nrf.issue_token(rng.choice(requesters), aud, scope).to_bytes())
        accepted += all(verify_token(tok, s, nrf.clock.now_ms(), nrf.verify_key, aud) for s in scope)
    assert accepted == 1000


def test_token_expiry_after_ttl(nrf):
    nrf._register(amf(), "amf-1")
    nrf._register(udm(), "udm-1")
    tok = nrf.issue_token("amf-1", "UDM", ["nudm-sdm"])
    nrf.clock.advance(nrf.token_ttl_ms)
    assert verify_token(tok, "nudm-sdm", nrf.clock.now_ms(), nrf.verify_key, "UDM").reason == TokenReject.EXPIRED


# -- over the SBI, in a deployed core ------------------------------------------------------------

def test_deployed_core_discovery_and_removal(make_testbed, any_mode):
    tb = make_testbed(any_mode)
    op = tb.vnfm.operator()
    assert op.discover("namf-comm") == ["amf-1.sbi"]
    assert sorted(p.instance_id for p in tb.nrf.profiles()) == sorted(e.instance_id for e in tb.topology.nfs)
    tb.vnfm.terminate_nf(tb.instances["amf-1"])
    assert op.discover("namf-comm") == []
    assert tb.instances["amf-1"].lifecycle_state == LifecycleState.TERMINATED


def test_sbi_register_and_disc_routes(attested_tb):
    op = attested_tb.vnfm.operator()
    nrf_ep = attested_tb.vnfm.nrf_endpoint
    p = NfProfile("extra-amf", "AMF", ("namf-comm",), "extra-amf.sbi")
    op.call("nnrf-nfm", Method.PUT, "/nf-instances/extra-amf", p.to_dict(), endpoint=nrf_ep)
    assert "extra-amf.sbi" in op.discover("namf-comm")
    with pytest.raises(DuplicateInstanceConflict):
        op.call("nnrf-nfm", Method.PUT, "/nf-instances/extra-amf",
                NfProfile("extra-amf", "AMF", ("x",), "e.sbi").to_dict(), endpoint=nrf_ep)
    op.call("nnrf-nfm", Method.DELETE, "/nf-instances/extra-amf", endpoint=nrf_ep)
    with pytest.raises(NotRegistered):
        op.call("nnrf-nfm", Method.DELETE, "/nf-instances/extra-amf", endpoint=nrf_ep)
