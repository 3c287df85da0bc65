import hashlib
import hmac
import os
import random
import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from confcore.corenfs import MacFailure, ResponseMismatch, StorageFailure, SyncFailure, UnknownKeyId, UnknownSubscriber
from confcore.corenfs import aka
from confcore.corenfs.amf import RegistrationFailed
from confcore.corenfs.stubs import DEFAULT_QOS, DEFAULT_SLICE
from confcore.corenfs.suci import Suci, conceal, deconceal, new_home_keypair
from confcore.corenfs.udm import DiskStore, SubscriberRecord, format_rows, generate_population, parse_rows, supi_for
from confcore.ranuesim import SimUe, UeState, spawn_ues
from confcore.ranuesim import generate_population as ue_population
from confcore.ranuesim import uecrypto

SNN = aka.SERVING_NETWORK


def hand_prf(key, label, *parts, size):
    msg = label + b"\x00" + b"".join(struct.pack(">H", len(p)) + p for p in parts)
    return hmac.new(key, msg, hashlib.sha256).digest()[:size]


# -- SUCI ------------------------------------------------------------------------------------------

def test_suci_round_trip_and_freshness():
    priv, pub = new_home_keypair()
    a, b = conceal("imsi-001010000000001", pub), conceal("imsi-001010000000001", pub)
    assert a.ephemeral_pubkey != b.ephemeral_pubkey and a.ciphertext != b.ciphertext
    assert deconceal(a, priv) == deconceal(b, priv) == "imsi-001010000000001"
    assert b"0000000001" not in a.ciphertext


@pytest.mark.parametrize("field", ["ciphertext", "mac", "ephemeral_pubkey"])
def test_flipped_bit_is_mac_failure(field):
    priv, pub = new_home_keypair()
    s = conceal(supi_for(7), pub)
    d = s.to_dict()
    raw = bytearray(bytes.fromhex(d[field]))
    raw[0] ^= 0x01
    d[field] = raw.hex()
    with pytest.raises(MacFailure):
        deconceal(Suci.from_dict(d), priv)


def test_wrong_home_key_is_mac_failure():
    _, pub = new_home_keypair()
    other, _ = new_home_keypair()
    with pytest.raises(MacFailure):
        deconceal(conceal(supi_for(1), pub), other)


@given(st.text(alphabet="0123456789", min_size=5, max_size=20))
def test_ue_concealment_opens_on_network_side(digits):
    priv, pub = _HOME
    supi = "imsi-" + digits
    assert deconceal(Suci.from_dict(uecrypto.conceal_supi(supi, pub)), priv) == supi


_HOME = new_home_keypair()


def test_udm_unknown_key_id(attested_tb):
    s = conceal(supi_for(1), attested_tb.home_pub, home_pubkey_id=9)
    with pytest.raises(UnknownKeyId):
        attested_tb.udm.deconceal(s)


def test_suci_round_trip_1000_subscribers(attested_tb):
    udm = attested_tb.udm
    rows = generate_population(1000, 3)
    assert sum(udm.deconceal(Suci.from_dict(uecrypto.conceal_supi(s, attested_tb.home_pub))) == s
               for s, _, _ in rows) == 1000


# -- AKA: network derivations vs the UE's own code path -----------------------------------------

def _ue_view(k, rand, autn):
    keys = uecrypto.UsimKeys(k, rand)
    sqn, ok = uecrypto.open_autn(keys, autn)
    return keys, sqn, ok


@given(st.binary(min_size=16, max_size=16), st.binary(min_size=16, max_size=16), st.integers(0, aka.SQN_MAX))
def test_ue_and_network_agree(k, rand, sqn):
    av = aka.generate_vector(k, sqn, rand)
    keys, got_sqn, ok = _ue_view(k, rand, av.autn)
    assert ok and got_sqn == sqn
    assert keys.res_star(SNN) == av.xres_star
    assert keys.k_ausf(SNN, av.autn[:6]) == av.k_ausf
    assert uecrypto.k_seaf(av.k_ausf, SNN) == aka.kseaf(av.k_ausf, SNN)


def test_derivations_match_hand_hmac():
    k, rand = os.urandom(16), os.urandom(16)
    assert aka.f2(k, rand) == hand_prf(k, b"f2", rand, size=8)
    assert aka.f5(k, rand) == hand_prf(k, b"f5", rand, size=6)
    sqn = (12345).to_bytes(6, "big")
    assert aka.f1(k, rand, sqn, b"\x80\x00") == hand_prf(k, b"f1", rand, sqn, b"\x80\x00", size=8)


def test_wrong_key_never_verifies():
    rng = random.Random(2)
    failures = 0
    for _ in range(1000):
        k, bad, rand = rng.randbytes(16), rng.randbytes(16), rng.randbytes(16)
        av = aka.generate_vector(k, rng.randrange(aka.SQN_MAX), rand)
        keys, _, ok = _ue_view(bad, rand, av.autn)
        failures += (not ok) and keys.res_star(SNN) != av.xres_star
    assert failures == 1000


def test_auts_round_trip_and_forgery():
    k, rand = os.urandom(16), os.urandom(16)
    auts = uecrypto.UsimKeys(k, rand).auts(777)
    assert aka.recover_resync_sqn(k, rand, auts) == 777
    assert aka.recover_resync_sqn(os.urandom(16), rand, auts) is None
    assert aka.recover_resync_sqn(k, rand, auts[:-1]) is None


def test_sqn_range():
    with pytest.raises(ValueError):
        aka.sqn_bytes(aka.SQN_MAX + 1)


# -- UDM storage ----------------------------------------------------------------------------------

def test_population_generators_agree():
    assert generate_population(50, 9) == ue_population(50, 9)


@pytest.mark.parametrize("n", [0, 1000])
def test_create_subscribers_unique(attested_tb, n):
    udm = attested_tb.udm
    udm.reset()
    rep = udm.create_subscribers(n, seed=1)
    rows = udm.export_rows()
    assert rep.n == n == len(udm) == len({s for s, _, _ in rows})
    assert rep.elapsed_ms >= 0


def test_duplicate_insert(attested_tb):
    udm = attested_tb.udm
    udm.insert("imsi-001019999999999", os.urandom(16))
    with pytest.raises(StorageFailure):
        udm.insert("imsi-001019999999999", os.urandom(16))
    with pytest.raises(ValueError):
        udm.insert("imsi-x", b"short")


def test_rows_text_round_trip():
    rows = generate_population(20, 4)
    assert parse_rows("# header\n" + format_rows(rows) + "\n") == rows
    for bad in ("a,b", "imsi-1,00,0", f"imsi-1,{'00' * 16},-1"):
        with pytest.raises(ValueError):
            parse_rows(bad)


def test_record_pack():
    r = SubscriberRecord("imsi-0010100001", os.urandom(16), 42, 3)
    assert SubscriberRecord.unpack(r.pack()) == r


def test_disk_store_replay_and_tamper(tmp_path):
    key = os.urandom(32)
    st_ = DiskStore(tmp_path / "s.log", key)
    st_.append("a", b"1")
    st_.append("b", b"2")
    st_.append("a", b"3")
    st_.close()
    assert list(DiskStore(tmp_path / "s.log", key).replay()) == [("a", b"1"), ("b", b"2"), ("a", b"3")]
    raw = bytearray((tmp_path / "s.log").read_bytes())
    assert b"\x00\x01a1" not in raw
    raw[-1] ^= 1
    (tmp_path / "s.log").write_bytes(bytes(raw))
    with pytest.raises(StorageFailure):
        list(DiskStore(tmp_path / "s.log", key).replay())
    (tmp_path / "s.log").write_bytes(bytes(raw[:-3]))
    with pytest.raises(StorageFailure):
        list(DiskStore(tmp_path / "s.log", key).replay())


def test_sqn_only_moves_on_confirmed_success(attested_tb):
    udm = attested_tb.udm
    supi = "imsi-001018888888888"
    udm.insert(supi, os.urandom(16), sqn=5)
    av = udm.generate_auth_data(supi)
    assert udm.sqn_of(supi) == 5
    assert udm.auth_event(supi, False, av.rand) == 5
    av = udm.generate_auth_data(supi)
    assert udm.auth_event(supi, True, os.urandom(16)) == 5
    av = udm.generate_auth_data(supi)
    assert udm.auth_event(supi, True, av.rand) == 6
    with pytest.raises(UnknownSubscriber):
        udm.sqn_of("imsi-nobody")


# -- end-to-end through AUSF and AMF ---------------------------------------------------------------

def _ues(tb, n, seed=1):
    tb.udm.create_subscribers(n, seed=seed)
    return spawn_ues(n, seed, tb.home_pub, udm_rows=tb.udm.export_rows())


def test_ausf_honest_ue(make_testbed, any_mode):
    tb = make_testbed(any_mode)
    ue = _ues(tb, 1)[0]
    out = tb.ausf.authenticate(conceal(ue.supi, tb.home_pub), ue.challenge)
    assert out.supi == ue.supi and out.k_seaf == ue.k_seaf()
    assert tb.udm.sqn_of(ue.supi) == 1 == ue.sqn


def test_ausf_wrong_key(attested_tb):
    ue = _ues(attested_tb, 1)[0]
    ue.k = bytes(16)
    with pytest.raises(ResponseMismatch):
        attested_tb.ausf.authenticate(conceal(ue.supi, attested_tb.home_pub), ue.challenge)
    assert attested_tb.udm.sqn_of(ue.supi) == 0


def test_resync_then_success(attested_tb):
    ue = _ues(attested_tb, 1)[0]
    ue.sqn = 500
    with pytest.raises(SyncFailure):
        attested_tb.ausf.authenticate(conceal(ue.supi, attested_tb.home_pub), ue.challenge)
    assert attested_tb.udm.sqn_of(ue.supi) == 500
    attested_tb.ausf.authenticate(conceal(ue.supi, attested_tb.home_pub), ue.challenge)
    assert ue.sqn == attested_tb.udm.sqn_of(ue.supi) == 501


def test_amf_registration_stages(make_testbed, any_mode):
    tb = make_testbed(any_mode)
    ue = _ues(tb, 1)[0]
    res = tb.amf.ue_register(ue)
    assert set(res.timings_ms) == {"suci", "auth", "security_context", "session"}
    assert all(v >= 0 for v in res.timings_ms.values())
    assert res.allowed_nssai == [DEFAULT_SLICE]
    ctx = tb.amf.context(res.ue_id)
    assert ctx["supi"] == ue.supi and ctx["session_id"] == res.session_id
    assert tb.upf.has_session(res.session_id)
    assert tb.upf._sessions[res.session_id]["qos"] == DEFAULT_QOS


def test_absent_ue_fails_at_auth(attested_tb):
    ghost = SimUe("imsi-001017777777777", os.urandom(16), home_pubkey=attested_tb.home_pub)
    with pytest.raises(RegistrationFailed) as ei:
        attested_tb.amf.ue_register(ghost)
    assert ei.value.stage == "auth"


def test_wrong_key_fails_at_auth_and_keeps_sqn(attested_tb):
    ue = _ues(attested_tb, 1)[0]
    ue.k = os.urandom(16)
    with pytest.raises(RegistrationFailed) as ei:
        attested_tb.amf.ue_register(ue)
    assert ei.value.stage == "auth" and isinstance(ei.value.cause, ResponseMismatch)
    assert attested_tb.udm.sqn_of(ue.supi) == 0
    assert ue.state == UeState.REGISTERING


def test_requested_slice_is_honoured(attested_tb):
    ue = _ues(attested_tb, 1)[0]
    ue.requested_nssai = [{"sst": 2, "sd": "aa"}]
    assert attested_tb.amf.ue_register(ue).allowed_nssai == [{"sst": 2, "sd": "aa"}]
