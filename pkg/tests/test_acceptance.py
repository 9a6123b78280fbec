"""Acceptance criteria 1-11.

Each test records a one-line verdict (printed in the terminal summary by
conftest.py) before asserting, so a failing criterion still reports its
measured value.
"""
import filecmp
import ipaddress
import json
import math
from collections import Counter

import numpy as np
import pytest

from ntpowd.cli import main as cli_main
from ntpowd.codec import NtpPacket, NtpTimestamp, decode_packet, encode_packet
from ntpowd.errors import DataError
from ntpowd.estimator.completion import closed_form_C, holdout_evaluate, ihtsvd_complete
from ntpowd.estimator.geodesy import GeoCoordinate, vincenty_distance
from ntpowd.estimator.matrix import ServerMeta, build_A, geo_matrix
from ntpowd.sessions import build_sessions
from ntpowd.synth import ClientProfile, generate_geometry, simulate_trace
from ntpowd.tiers import assign_tiers, required_samples

from conftest import record_criterion

QUANT = 2.0 ** -32
CAPTURE_QUANT = 1e-6  # microsecond pcap timestamps


def sq_dist(points):
    diff = points[:, None, :] - points[None, :, :]
    return (diff ** 2).sum(-1)


# 1 -------------------------------------------------------------------------

def random_packet(rng):
    ts = lambda: NtpTimestamp(int(rng.integers(0, 2**32)), int(rng.integers(0, 2**32)))
    return NtpPacket(
        leap=int(rng.integers(0, 4)), version=int(rng.integers(1, 5)), mode=int(rng.integers(0, 8)),
        stratum=int(rng.integers(0, 256)), poll_exponent=int(rng.integers(-128, 128)),
        precision=int(rng.integers(-128, 128)),
        root_delay=int(rng.integers(-(2**31), 2**31)) / 65536,
        root_dispersion=int(rng.integers(0, 2**32)) / 65536,
        ref_id=rng.bytes(4), reference_ts=ts(), origin_ts=ts(), receive_ts=ts(), transmit_ts=ts(),
    )


def test_c01_codec_round_trip():
    rng = np.random.default_rng(1)
    mismatches = 0
    for _ in range(10_000):
        p = random_packet(rng)
        raw = encode_packet(p)
        if decode_packet(raw) != p or encode_packet(decode_packet(raw)) != raw:
            mismatches += 1
    crashes = 0
    for _ in range(10_000):
        buf = rng.bytes(int(rng.integers(0, 97)))
        try:
            decode_packet(buf)
        except DataError:
            pass
        except Exception:
            crashes += 1
    ok = mismatches == 0 and crashes == 0
    record_criterion(1, "codec round-trip", ok, f"{mismatches} mismatches / 10000, {crashes} crashes / 10000 fuzz")
    assert ok


# 2 -------------------------------------------------------------------------

def test_c02_run_length_table():
    def brute(p):
        n = 1
        while n * p < 30:
            n += 1
        return n

    table = {p: brute(p) for p in range(1, 18)}
    got = {p: required_samples(p) for p in range(1, 18)}
    ok = got == table and got[6] == 5 and got[4] == 8
    record_criterion(2, "N = ceil(30/P)", ok, f"P=1..17 -> {[got[p] for p in range(1, 18)]}")
    assert ok


# 3 and 4 -------------------------------------------------------------------

SERVERS = ["192.0.2.1", "192.0.2.2"]


def population():
    rng = np.random.default_rng(33)
    profiles = []

    def add(kind, base, count, **kw):
        for i in range(count):
            c2s, s2c = rng.uniform(2, 80, 2)
            profiles.append(ClientProfile(kind, str(ipaddress.ip_address(base) + i), SERVERS[i % 2],
                                          true_c2s_ms=float(c2s), true_s2c_ms=float(s2c), **kw))

    add("WellSyncConstant", "10.1.0.1", 20, duration_s=7200)
    add("OutOfSync", "10.2.0.1", 20, duration_s=7200, jitter_ms=2.0,
        offset_ms=float(rng.choice([-1, 1])) * 120.0)
    add("SntpOneShot", "10.3.0.1", 10)
    add("WellSyncBackoff", "10.4.0.1", 20, duration_s=7200)
    # out-of-sync offsets at least 50 ms and larger than the true OWDs
    for p in profiles:
        if p.kind == "OutOfSync":
            p.offset_ms = math.copysign(max(50.0, abs(p.offset_ms)), p.offset_ms)
    return profiles


@pytest.fixture(scope="module")
def labelled_population():
    profiles = population()
    trace = simulate_trace(profiles, seed=2024)
    packets = [decode_packet(r.payload, r) for r in trace.records]
    sessions = [assign_tiers(s) for s in build_sessions(packets, SERVERS)]
    return profiles, trace, sessions


def test_c03_classifier_vs_simulation(labelled_population):
    profiles, trace, sessions = labelled_population
    kind = {ipaddress.ip_address(p.client): p.kind for p in profiles}
    requests = Counter(t["client"] for t in trace.truth if t["mode"] == 3)
    per_kind = {k: Counter() for k in ("WellSyncConstant", "OutOfSync", "SntpOneShot", "WellSyncBackoff")}
    labelled_once = True
    oos_gtrtt_tier3 = 0
    for sess in sessions:
        k = kind[sess.client]
        labelled_once &= len(sess.samples) == requests[str(sess.client)]
        for s in sess.samples:
            labelled_once &= s.tier in (0, 1, 2, 3)
            per_kind[k][s.tier] += 1
            if k == "OutOfSync" and s.tier == 3 and any(x.gt_rtt is not None for x in sess.samples):
                oos_gtrtt_tier3 += 1
    labelled_once &= sum(len(s.samples) for s in sessions) == sum(requests.values())

    sntp = per_kind["SntpOneShot"]
    sntp_ok = sntp[0] == sum(sntp.values()) > 0
    synced = per_kind["WellSyncConstant"] + per_kind["WellSyncBackoff"]
    rate = synced[3] / sum(synced.values())
    rate_c = per_kind["WellSyncConstant"][3] / sum(per_kind["WellSyncConstant"].values())
    rate_b = per_kind["WellSyncBackoff"][3] / sum(per_kind["WellSyncBackoff"].values())
    ok = oos_gtrtt_tier3 == 0 and sntp_ok and rate >= 0.95 and labelled_once
    record_criterion(3, "classifier soundness", ok,
                     f"out-of-sync Tier3={oos_gtrtt_tier3}; SNTP Tier0={sntp[0]}/{sum(sntp.values())}; "
                     f"well-synced Tier3={rate:.2%} (constant {rate_c:.2%}, backoff {rate_b:.2%}); "
                     f"labelled once={labelled_once}")
    assert ok


def test_c04_owd_fidelity(labelled_population):
    profiles, trace, sessions = labelled_population
    zero_offset = {p.client for p in profiles if p.offset_ms == 0 and p.drift_ppm == 0 and p.kind != "SntpOneShot"}
    truth = {}
    for t in trace.truth:
        if t["mode"] == 3 and t["client"] in zero_offset:
            truth.setdefault(t["client"], []).append(t)
    bound = QUANT + CAPTURE_QUANT
    worst, matched = 0.0, 0
    for sess in sessions:
        rows = truth.get(str(sess.client))
        if rows is None:
            continue
        assert len(rows) == len(sess.samples)
        for s, t in zip(sess.samples, rows):
            if s.c2s_owd is not None:
                worst = max(worst, abs(s.c2s_owd - t["true_c2s"] / 1000))
                matched += 1
            if s.s2c_owd is not None:
                worst = max(worst, abs(s.s2c_owd - t["true_s2c"] / 1000))
                matched += 1
    ok = matched > 0 and worst <= bound
    record_criterion(4, "OWD fidelity", ok, f"{matched} OWDs, max |error| = {worst:.3g} s (bound {bound:.3g} s)")
    assert ok


# 5 -------------------------------------------------------------------------

def test_c05_closed_form():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        m, n = int(rng.integers(4, 9)), int(rng.integers(2, 11))
        D = sq_dist(rng.uniform(0, 1000, (m + n, 2)))
        C = closed_form_C(D[:m, :m], D[:m, m:], D[m:, :m])
        true = D[m:, m:]
        off = ~np.eye(n, dtype=bool)
        rel = np.abs(C - true)[off] / true[off]
        diag = np.abs(np.diag(C)).max() / true.max()
        worst = max(worst, rel.max(initial=0.0), diag)
    ok = worst <= 1e-8
    record_criterion(5, "closed form C = B' A+ B", ok, f"max relative error {worst:.3g} over 20 configurations")
    assert ok


# 6 -------------------------------------------------------------------------

def test_c06_ihtsvd_recovery():
    results = []
    preserved = True
    for seed in range(3):
        rng = np.random.default_rng(600 + seed)
        D = sq_dist(rng.uniform(0, 1000, (40, 2)))
        mask = rng.random((40, 40)) >= 0.4
        np.fill_diagonal(mask, True)
        res = ihtsvd_complete(np.where(mask, D, np.nan), mask, rank=4, max_iter=10_000)
        hidden = ~mask
        results.append((float((np.abs(res.matrix[hidden] - D[hidden]) / D[hidden]).mean()), res.iterations))
        preserved &= bool(np.array_equal(res.matrix[mask], D[mask]))
    worst = max(e for e, _ in results)
    ok = worst < 1e-3 and preserved
    record_criterion(6, "IHTSVD recovery", ok,
                     f"mean relative error {[f'{e:.2g}' for e, _ in results]}, iterations "
                     f"{[i for _, i in results]}, observed preserved={preserved}")
    assert ok


# 7 -------------------------------------------------------------------------

def holdout_runs(noise, seeds):
    out = []
    for seed in seeds:
        geo = generate_geometry(6, 50, mask_density=1.0, noise=noise, seed=seed)
        rep = holdout_evaluate(geo.observed, 0.1, seed=seed, squared=True, max_iter=50_000)
        out.append(rep.mean_error)
    return out


def test_c07_holdout_noiseless():
    errs = holdout_runs(0.0, [70, 71, 72])
    ok = max(errs) <= 1e-3
    record_criterion(7, "hold-out, zero noise", ok, f"mean relative error {[f'{e:.2g}' for e in errs]} (<= 0.1%)")
    assert ok


def test_c07_holdout_noisy():
    errs = holdout_runs(0.05, [70, 71, 72])
    ok = max(errs) <= 0.10
    record_criterion(7, "hold-out, 5% noise", ok, f"mean relative error {[f'{e:.3f}' for e in errs]} (<= 10%)")
    assert ok


# 8 -------------------------------------------------------------------------

def test_c08_build_A_regression():
    worst_beta, worst_fill, floor_ok = 0.0, 0.0, True
    for seed in range(5):
        rng = np.random.default_rng(800 + seed)
        m = int(rng.integers(6, 15))
        srv = [ServerMeta(f"s{i}", ipaddress.ip_address("192.0.2.1") + i,
                          GeoCoordinate(float(rng.uniform(25, 49)), float(rng.uniform(-124, -67)))) for i in range(m)]
        geo = geo_matrix(srv)
        iu = np.triu_indices(m, 1)
        pick = rng.permutation(len(iu[0]))[: len(iu[0]) // 2]
        a_rtt = np.full((m, m), np.nan)
        a_rtt[iu[0][pick], iu[1][pick]] = 2 * geo[iu[0][pick], iu[1][pick]] + 5
        A, coeffs = build_A(srv, a_rtt)
        worst_beta = max(worst_beta, abs(coeffs.beta0 - 5), abs(coeffs.beta1 - 2))
        off = ~np.eye(m, dtype=bool)
        worst_fill = max(worst_fill, float(np.abs(A - (2 * geo + 5))[off].max()))
        floor_ok &= bool((A >= geo).all())
    ok = worst_beta <= 1e-9 and worst_fill <= 1e-9 and floor_ok
    record_criterion(8, "build_A regression", ok,
                     f"max beta error {worst_beta:.2g}, max fill error {worst_fill:.2g} ms, >= A_geo: {floor_ok}")
    assert ok


# 9 -------------------------------------------------------------------------

def test_c09_vincenty():
    geodesic = pytest.importorskip("geographiclib.geodesic").Geodesic.WGS84
    rng = np.random.default_rng(9)
    worst, pairs = 0.0, 0
    while pairs < 1000:
        lat1, lat2 = np.degrees(np.arcsin(rng.uniform(-1, 1, 2)))
        lon1, lon2 = rng.uniform(-180, 180, 2)
        a, b = GeoCoordinate(float(lat1), float(lon1)), GeoCoordinate(float(lat2), float(lon2))
        # skip pairs within one degree of each other's antipode
        anti = GeoCoordinate.normalized(-a.lat, a.lon + 180)
        cos_ang = (math.sin(math.radians(anti.lat)) * math.sin(math.radians(b.lat))
                   + math.cos(math.radians(anti.lat)) * math.cos(math.radians(b.lat))
                   * math.cos(math.radians(b.lon - anti.lon)))
        if math.degrees(math.acos(max(-1.0, min(1.0, cos_ang)))) < 1.0:
            continue
        ref = geodesic.Inverse(a.lat, a.lon, b.lat, b.lon)["s12"]
        worst = max(worst, abs(vincenty_distance(a, b) - ref) / ref)
        pairs += 1
    eq = vincenty_distance(GeoCoordinate(0, 0), GeoCoordinate(0, 1))
    ok = worst <= 1e-6 and abs(eq - 111_319.4908) <= 1e-3
    record_criterion(9, "Vincenty", ok, f"max relative deviation {worst:.2g} over {pairs} pairs; 1 deg equator = {eq:.4f} m")
    assert ok


# 10 ------------------------------------------------------------------------

def test_c10_rank_premise():
    worst = 0.0
    for seed in range(100):
        geo = generate_geometry(4, 26, seed=1000 + seed)
        s = np.linalg.svd(geo.distance ** 2, compute_uv=False)
        worst = max(worst, s[4] / s[0])
    ok = worst < 1e-9
    record_criterion(10, "rank premise", ok, f"max sigma5/sigma1 = {worst:.2g} over 100 point sets")
    assert ok


# 11 ------------------------------------------------------------------------

def test_c11_determinism(tmp_path, labelled_population):
    profiles, trace, _ = labelled_population
    from ntpowd.capture import write_pcap
    write_pcap(tmp_path / "trace.pcap", trace.records)
    servers = tmp_path / "servers.csv"
    servers.write_text("id,address,lat,lon\ns0,192.0.2.1,40.0,-100.0\ns1,192.0.2.2,35.0,-90.0\n")
    scen = tmp_path / "geo.json"
    scen.write_text(json.dumps({"geometry": {"m": 6, "n": 40, "mask_density": 1.0, "noise": 0.02}}))
    assert cli_main(["simulate", str(scen), "--seed", "8", "--out", str(tmp_path / "g")]) == 0

    same = True
    for run in ("a", "b"):
        assert cli_main(["classify", str(tmp_path / "trace.pcap"), "--servers", str(servers),
                         "--out", str(tmp_path / run / "classify")]) == 0
        assert cli_main(["complete", str(tmp_path / "g" / "geometry.json"), "--squared", "--seed", "8",
                         "--holdout", "0.05", "--max-iter", "3000", "--out", str(tmp_path / run / "complete")]) == 0
    compared = 0
    for sub in ("classify", "complete"):
        names = sorted(p.name for p in (tmp_path / "a" / sub).iterdir())
        match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / sub, tmp_path / "b" / sub, names, shallow=False)
        same &= not mismatch and not errors
        compared += len(match)
    record_criterion(11, "determinism", same, f"{compared} output files byte-identical across reruns")
    assert same
