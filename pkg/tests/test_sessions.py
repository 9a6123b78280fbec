import ipaddress

import pytest
from hypothesis import given, settings, strategies as st

from ntpowd.codec import NtpPacket, decode_packet
from ntpowd.sessions import (
    build_sessions,
    detect_one_shot,
    extract_gtrtt,
    read_sessions_jsonl,
    refid_for,
    write_sessions_jsonl,
)
from ntpowd.synth import ClientProfile, simulate_trace

from conftest import CLIENT, SERVER, exchanges, request, response


def test_worked_example():
    prev_req = request(0)
    prev_rsp = response(prev_req, "99.480", "99.500")
    req = request("100.000", origin="99.500", receive="99.530", at="100.020")
    rsp = response(req, "100.020", "100.021")
    (sess,) = build_sessions([prev_req, prev_rsp, req, rsp], [SERVER])
    s = sess.samples[-1]
    assert s.c2s_owd == pytest.approx(0.020, abs=1e-9)
    assert s.s2c_owd == pytest.approx(0.030, abs=1e-9)


def test_t1_from_capture_when_response_missing():
    req = request("100.000", at="100.025")
    (sess,) = build_sessions([req], [SERVER])
    assert sess.samples[0].c2s_owd == pytest.approx(0.025, abs=1e-9)
    assert sess.diagnostics.unpaired_requests == 1
    (sess,) = build_sessions([req], [SERVER], t1_source="response")
    assert sess.samples[0].c2s_owd is None


def test_capture_policy_ignores_response():
    req = request("100.000", at="100.025")
    rsp = response(req, "100.020", "100.021")
    (sess,) = build_sessions([req, rsp], [SERVER], t1_source="capture")
    assert sess.samples[0].c2s_owd == pytest.approx(0.025, abs=1e-9)
    (sess,) = build_sessions([req, rsp], [SERVER])
    assert sess.samples[0].c2s_owd == pytest.approx(0.020, abs=1e-9)


def test_sntp_request_has_no_owd():
    p = decode_packet(bytes([0x23]) + bytes(47))
    from dataclasses import replace
    p = replace(p, src_addr=CLIENT, dst_addr=SERVER, capture_ts=(1_433_116_800, 0))
    (sess,) = build_sessions([p], [SERVER])
    s = sess.samples[0]
    assert s.c2s_owd is None and s.s2c_owd is None
    assert sess.one_shot_count == 1
    assert detect_one_shot(sess)


def test_rotated_session_exact():
    (sess,) = build_sessions(exchanges(20), [SERVER])
    assert len(sess.samples) == 20
    assert all(abs(s.c2s_owd - 0.010) < 1e-9 for s in sess.samples)
    assert sess.samples[0].s2c_owd is None
    assert all(abs(s.s2c_owd - 0.015) < 1e-9 for s in sess.samples[1:])
    assert not detect_one_shot(sess)


def test_single_request_is_one_shot():
    (sess,) = build_sessions([request(0)], [SERVER])
    assert detect_one_shot(sess)


def test_duplicate_request_counted_once():
    pkts = exchanges(3)
    pkts.insert(1, pkts[0])
    (sess,) = build_sessions(pkts, [SERVER])
    assert len(sess.samples) == 3
    assert sess.diagnostics.duplicate_requests == 1


def test_rotation_survives_lost_request():
    pkts = exchanges(4)
    del pkts[2]  # request 1 lost before the server; its response absent too
    del pkts[2]
    (sess,) = build_sessions(pkts, [SERVER])
    # request 2 still echoes response 1 which was never captured, so no s2c
    assert sess.samples[1].s2c_owd is None
    assert sess.samples[2].s2c_owd == pytest.approx(0.015, abs=1e-9)


def test_sessions_split_by_pair():
    other = ipaddress.ip_address("192.0.2.2")
    a = exchanges(3)
    b = [request(t, server=other) for t in (1, 65)]
    sessions = build_sessions(a + b, [SERVER, other])
    assert sorted((str(s.server), len(s.samples)) for s in sessions) == [("192.0.2.1", 3), ("192.0.2.2", 2)]


def test_unknown_server_ignored():
    pkts = [request(0, server=ipaddress.ip_address("203.0.113.5"))]
    assert build_sessions(pkts, [SERVER]) == []


def test_gtrtt_matching_ref_id():
    p = request(0, ref_id=bytes([192, 0, 2, 1]), root_delay=0x800 / 65536)
    assert extract_gtrtt(p, [SERVER]) == 0.03125


def test_gtrtt_refclock_tag():
    p = request(0, ref_id=b"LOCL", stratum=1, root_delay=0.03125)
    assert extract_gtrtt(p, [SERVER]) is None


def test_gtrtt_other_server():
    p = request(0, ref_id=bytes([203, 0, 113, 9]), root_delay=0.03125)
    assert extract_gtrtt(p, [SERVER]) is None


def test_gtrtt_rejects_responses():
    with pytest.raises(ValueError):
        extract_gtrtt(NtpPacket(mode=4), [SERVER])


def test_ipv6_refid():
    # first four bytes of MD5 over the 16-byte address, from an independent hash run
    assert refid_for(ipaddress.ip_address("2001:db8::1")) == bytes.fromhex("39ab9b37")


def test_gtrtt_scope():
    other = ipaddress.ip_address("192.0.2.2")
    pkts = [request(0, ref_id=other.packed, root_delay=0.03125)]
    (sess,) = build_sessions(pkts, [SERVER, other])
    assert sess.samples[0].gt_rtt is None
    (sess,) = build_sessions(pkts, [SERVER, other], gtrtt_scope="any")
    assert sess.samples[0].gt_rtt == 0.03125


def test_jsonl_round_trip(tmp_path):
    sessions = build_sessions(exchanges(5), [SERVER])
    path = tmp_path / "s.jsonl"
    assert write_sessions_jsonl(path, sessions) == 5
    back = read_sessions_jsonl(path)
    assert back[0].samples == sessions[0].samples


def test_simulated_session_matches_truth():
    prof = ClientProfile("WellSyncConstant", "10.0.0.1", "192.0.2.1", true_c2s_ms=10, true_s2c_ms=15,
                         duration_s=1800)
    trace = simulate_trace([prof], seed=2)
    pkts = [decode_packet(r.payload, r) for r in trace.records]
    (sess,) = build_sessions(pkts, ["192.0.2.1"])
    for s in sess.samples:
        assert abs(s.c2s_owd - 0.010) <= 1e-6
        if s.s2c_owd is not None:
            assert abs(s.s2c_owd - 0.015) <= 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 30), st.sampled_from([4, 6, 8]), st.integers(1, 400), st.integers(1, 400))
def test_rotation_links_everything(n, poll, c2s_ms, s2c_ms):
    (sess,) = build_sessions(exchanges(n, poll=poll, c2s=c2s_ms / 1000, s2c=s2c_ms / 1000), [SERVER])
    assert sum(s.s2c_owd is not None for s in sess.samples) == n - 1
    assert sess.diagnostics.unpaired_requests == 0
    # only the final response is never echoed
    assert sess.diagnostics.unlinked_responses == 1
    when = [s.when_ns for s in sess.samples]
    assert when == sorted(when)
