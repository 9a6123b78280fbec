"""Ground-truth NTP traces and synthetic latency geometries.

Traces are captured at the server: every request is recorded on arrival and
every response on departure. All clock arithmetic is done with exact
fractions so the only error in a derived OWD is timestamp quantisation.
"""
from __future__ import annotations

import dataclasses
import ipaddress
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .capture import CaptureRecord
from .codec import MODE_CLIENT, MODE_SERVER, NtpPacket, NtpTimestamp, encode_packet
from .estimator.geodesy import GeoCoordinate, distance_m, geo_latency
from .estimator.matrix import LatencyMatrix, ServerMeta
from .sessions import refid_for
from .tiers import required_samples

PROFILE_KINDS = ("WellSyncConstant", "WellSyncBackoff", "OutOfSync", "SntpOneShot")
SYNC_STATE = {
    "WellSyncConstant": "synced",
    "WellSyncBackoff": "synced",
    "OutOfSync": "unsynced",
    "SntpOneShot": "oneshot",
}

DEFAULT_EPOCH = 1_433_116_800  # 2015-06-01T00:00:00Z
SERVER_PROCESSING = Fraction(50, 1_000_000)
UPSTREAM_REFID = refid_for(ipaddress.ip_address("203.0.113.250"))


@dataclass
class ClientProfile:
    kind: str
    client: str
    server: str
    true_c2s_ms: float = 10.0
    true_s2c_ms: float = 15.0
    jitter_ms: float = 0.0
    idle_prob: float = 0.25  # chance a packet sees no queueing delay at all
    offset_ms: float = 0.0
    drift_ppm: float = 0.0
    poll_exponent: int = 6
    max_poll: int = 10
    emits_gtrtt: bool = True
    duration_s: float = 3600.0
    start_s: float = 0.0

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise ValueError(f"unknown profile kind {self.kind!r}; expected one of {PROFILE_KINDS}")
        if self.true_c2s_ms <= 0 or self.true_s2c_ms <= 0:
            raise ValueError("true OWDs must be positive")
        if self.jitter_ms < 0 or not 0 <= self.idle_prob <= 1:
            raise ValueError("jitter_ms must be >= 0 and idle_prob in [0, 1]")
        if self.duration_s < 0:
            raise ValueError("duration_s must be >= 0")
        if self.kind == "WellSyncBackoff" and not 0 < self.poll_exponent <= self.max_poll:
            raise ValueError("backoff needs 0 < poll_exponent <= max_poll")
        if self.jitter_ms / 1000 >= 2 ** self.poll_exponent:
            raise ValueError("jitter must stay below the poll interval")

    @classmethod
    def from_dict(cls, obj: dict) -> ClientProfile:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ValueError(f"unknown profile keys {sorted(unknown)}")
        return cls(**obj)

    def poll_schedule(self) -> list[int]:
        """Poll exponent of every request the client sends."""
        if self.kind == "SntpOneShot":
            return [self.poll_exponent] if self.duration_s > 0 else []
        out: list[int] = []
        elapsed = 0
        p = self.poll_exponent
        left = required_samples(p) if self.kind == "WellSyncBackoff" else None
        while elapsed < self.duration_s:
            out.append(p)
            elapsed += 2 ** p
            if left is not None and p < self.max_poll:
                left -= 1
                if left == 0:
                    p += 1
                    left = required_samples(p)
        return out


@dataclass
class SimulatedTrace:
    records: list = field(default_factory=list)
    truth: list = field(default_factory=list)  # one dict per record, same order


def _quantize(t: Fraction) -> NtpTimestamp:
    return NtpTimestamp.from_seconds(t)


def _capture(t_unix: Fraction) -> tuple[int, int]:
    us = math.floor(t_unix * 1_000_000)
    return us // 1_000_000, (us % 1_000_000) * 1000


def _delay(rng, base_ms: float, jitter_ms: float, idle_prob: float) -> Fraction:
    extra = 0.0
    if jitter_ms > 0 and rng.random() >= idle_prob:
        extra = rng.uniform(0.0, jitter_ms)
    return Fraction(base_ms + extra) / 1000


def _simulate_client(prof: ClientProfile, rng, epoch: int):
    client = ipaddress.ip_address(prof.client)
    server = ipaddress.ip_address(prof.server)
    ntp_epoch = Fraction(epoch + 2_208_988_800)
    start = Fraction(prof.start_s) + Fraction(rng.uniform(0.0, 1.0))
    offset0 = Fraction(prof.offset_ms) / 1000
    drift = Fraction(prof.drift_ppm) / 1_000_000

    def client_clock(t):
        return t + offset0 + drift * (t - start)

    events = []
    sync_state = SYNC_STATE[prof.kind]
    prev = None  # (response transmit stamp, client receive stamp, true s2c, gtRTT)
    t = start
    for k, poll in enumerate(prof.poll_schedule()):
        c2s = _delay(rng, prof.true_c2s_ms, prof.jitter_ms, prof.idle_prob)
        s2c = _delay(rng, prof.true_s2c_ms, prof.jitter_ms, prof.idle_prob)
        t_arr = t + c2s
        t_resp = t_arr + SERVER_PROCESSING
        t_back = t_resp + s2c
        offset_ms = float(client_clock(t) - t) * 1000

        if prof.kind == "SntpOneShot":
            req = NtpPacket(version=4, mode=MODE_CLIENT)
        else:
            xmt = _quantize(ntp_epoch + client_clock(t))
            if prev is None:
                req = NtpPacket(leap=3, version=4, mode=MODE_CLIENT, stratum=16, poll_exponent=poll,
                                precision=-20, ref_id=b"INIT", transmit_ts=xmt)
            else:
                if prof.emits_gtrtt:
                    ref_id, root_delay = refid_for(server), prev[3]
                else:
                    ref_id, root_delay = UPSTREAM_REFID, 0.03125
                req = NtpPacket(version=4, mode=MODE_CLIENT, stratum=2, poll_exponent=poll,
                                precision=-20, root_delay=root_delay, root_dispersion=0.0078125,
                                ref_id=ref_id, reference_ts=prev[1], origin_ts=prev[0],
                                receive_ts=prev[1], transmit_ts=xmt)
        recv_stamp = _quantize(ntp_epoch + t_arr)
        resp_stamp = _quantize(ntp_epoch + t_resp)
        resp = NtpPacket(version=4, mode=MODE_SERVER, stratum=1, poll_exponent=req.poll_exponent,
                         precision=-23, root_dispersion=0.0001220703125, ref_id=b"GPS\x00",
                         reference_ts=_quantize(ntp_epoch + t_arr - 16), origin_ts=req.transmit_ts,
                         receive_ts=recv_stamp, transmit_ts=resp_stamp)

        truth_req = dict(client=str(client), server=str(server), kind=prof.kind, mode=MODE_CLIENT,
                         true_c2s=float(c2s) * 1000, true_s2c=prev[2] if prev else None,
                         offset=offset_ms, sync_state=sync_state, poll_exponent=poll)
        truth_resp = dict(truth_req, mode=MODE_SERVER, true_s2c=float(s2c) * 1000)
        events.append((epoch + t_arr, CaptureRecord(*_capture(epoch + t_arr), client, server,
                                                     40000 + k % 20000, 123, encode_packet(req)), truth_req))
        events.append((epoch + t_resp, CaptureRecord(*_capture(epoch + t_resp), server, client,
                                                     123, 40000 + k % 20000, encode_packet(resp)), truth_resp))

        # the client's own delay estimate from its four timestamps
        client_recv = _quantize(ntp_epoch + client_clock(t_back))
        if not req.transmit_ts.is_unset:
            delta = ((client_recv.to_seconds() - req.transmit_ts.to_seconds())
                     - (resp_stamp.to_seconds() - recv_stamp.to_seconds()))
            gt_rtt = math.ceil(max(delta, Fraction(0)) * 65536) / 65536
            prev = (resp_stamp, client_recv, float(s2c) * 1000, gt_rtt)
        t += 2 ** poll
    return events


def simulate_trace(profiles: Sequence[ClientProfile], seed: int, epoch: int = DEFAULT_EPOCH) -> SimulatedTrace:
    """Simulate every profile and merge the packets in capture order."""
    if not profiles:
        raise ValueError("need at least one profile")
    seqs = np.random.SeedSequence(seed).spawn(len(profiles))
    events = []
    for idx, (prof, ss) in enumerate(zip(profiles, seqs)):
        rng = np.random.default_rng(ss)
        for order, (t, rec, truth) in enumerate(_simulate_client(prof, rng, epoch)):
            events.append((t, idx, order, rec, truth))
    events.sort(key=lambda e: (e[0], e[1], e[2]))
    trace = SimulatedTrace()
    for i, (_, _, _, rec, truth) in enumerate(events):
        trace.records.append(rec)
        trace.truth.append(dict(packet_index=i, **truth))
    return trace


def expand_profiles(entries: Sequence[dict]) -> list[ClientProfile]:
    """Build profiles from dicts; ``count`` replicates an entry with consecutive client addresses."""
    out = []
    for entry in entries:
        entry = dict(entry)
        count = int(entry.pop("count", 1))
        base = ipaddress.ip_address(entry["client"])
        for i in range(count):
            out.append(ClientProfile.from_dict(dict(entry, client=str(base + i))))
    return out


# ---------------------------------------------------------------------------
# geometry

@dataclass
class GeometryInstance:
    servers: list  # ServerMeta
    client_ids: list
    server_xy: np.ndarray  # km (planar) or (lat, lon) degrees
    client_xy: np.ndarray
    planar: bool
    distance: np.ndarray  # metres, (m+n) x (m+n)
    latency: np.ndarray  # ms, noiseless
    mask: np.ndarray
    observed: LatencyMatrix
    mask_density: float
    noise: float
    rank_deficient: bool

    @property
    def m(self) -> int:
        return len(self.servers)

    @property
    def n(self) -> int:
        return len(self.client_ids)


def _degenerate(points: np.ndarray, planar: bool) -> bool:
    if planar:
        centred = points - points.mean(axis=0)
        s = np.linalg.svd(centred, compute_uv=False)
        return s.size < 2 or s[1] <= 1e-9 * max(s[0], 1e-300)
    lat, lon = np.radians(points[:, 0]), np.radians(points[:, 1])
    xyz = np.column_stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])
    s = np.linalg.svd(xyz, compute_uv=False)
    return s.size < 3 or s[2] <= 1e-9 * s[0]


def generate_geometry(
    m: int,
    n: int,
    region=None,
    mask_density: float = 1.0,
    noise: float = 0.0,
    seed: int = 0,
    *,
    planar: bool = True,
    server_coords=None,
) -> GeometryInstance:
    """Random servers and clients with their latency matrix.

    ``region`` is ``(width_km, height_km)`` for planar instances and
    ``(lat_min, lat_max, lon_min, lon_max)`` for WGS-84 ones. Each
    (client, server) pair is measured with probability ``mask_density``,
    which reveals both directions. Observed off-diagonal entries are scaled
    by ``1 + noise * N(0, 1)``.
    """
    if m < 4:
        raise ValueError("need m >= 4 servers")
    if n < 1:
        raise ValueError("need n >= 1 clients")
    if not 0 < mask_density <= 1:
        raise ValueError("mask_density must be in (0, 1]")
    rng = np.random.default_rng(seed)
    if planar:
        w, h = region or (4500.0, 2500.0)
        draw = lambda k: rng.uniform(0.0, 1.0, size=(k, 2)) * np.array([w, h])
    else:
        lat0, lat1, lon0, lon1 = region or (25.0, 49.0, -124.0, -67.0)
        draw = lambda k: np.column_stack([rng.uniform(lat0, lat1, k), rng.uniform(lon0, lon1, k)])
    server_xy = np.asarray(server_coords, dtype=float) if server_coords is not None else draw(m)
    if server_xy.shape != (m, 2):
        raise ValueError("server_coords must be m x 2")
    client_xy = draw(n)
    pts = np.vstack([server_xy, client_xy])
    size = m + n

    if planar:
        dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)) * 1000.0
    else:
        coords = [GeoCoordinate(float(a), float(b)) for a, b in pts]
        dist = np.zeros((size, size))
        for i in range(size):
            for j in range(i + 1, size):
                dist[i, j] = dist[j, i] = distance_m(coords[i], coords[j])[0]
    latency = np.vectorize(geo_latency, otypes=[float])(dist)

    mask = np.zeros((size, size), dtype=bool)
    mask[:m, :m] = True
    pairs = rng.random((m, n)) < mask_density
    mask[:m, m:] = pairs
    mask[m:, :m] = pairs.T
    np.fill_diagonal(mask, True)

    obs = latency.copy()
    if noise > 0:
        obs = np.clip(obs * (1.0 + noise * rng.standard_normal(obs.shape)), 0.0, None)
    np.fill_diagonal(obs, 0.0)
    obs[~mask] = np.nan

    servers = []
    for i in range(m):
        addr = ipaddress.ip_address("192.0.2.1") + i if m < 250 else ipaddress.ip_address("172.16.0.1") + i
        coord = None if planar else GeoCoordinate(float(server_xy[i, 0]), float(server_xy[i, 1]))
        servers.append(ServerMeta(f"s{i}", addr, coord))
    client_ids = [str(ipaddress.ip_address("10.0.0.1") + j) for j in range(n)]
    observed = LatencyMatrix(m, n, [s.id for s in servers] + client_ids, obs, mask)
    return GeometryInstance(servers, client_ids, server_xy, client_xy, planar, dist, latency, mask,
                            observed, mask_density, noise, _degenerate(server_xy, planar))
