"""Per-(client, server) session reconstruction from captured NTP packets.

A request R from client C to server S yields one :class:`OwdSample`:

* ``c2s_owd = t1 - t0``: ``t0`` is R's transmit timestamp (client clock),
  ``t1`` its arrival at the server. ``t1`` is the receive timestamp of the
  server's response to R when that response is in the trace and the
  ``t1_source`` policy allows it, otherwise R's capture time.
* ``s2c_owd``: R echoes the transmit timestamp of S's previous response in
  its origin field (timestamp rotation) and carries the client's receipt
  time of that response in its receive field, so
  ``s2c_owd = R.receive_ts - previous_response.transmit_ts``.

Both values are raw differences of two unsynchronised clocks and may be
negative.
"""
from __future__ import annotations

import hashlib
import ipaddress
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional

from .codec import DEFAULT_ERA_PIVOT, MODE_CLIENT, MODE_SERVER, IPAddress, NtpPacket

log = logging.getLogger(__name__)

SESSION_SCHEMA_VERSION = 1
T1_SOURCES = ("auto", "capture", "response")


@dataclass(frozen=True)
class OwdSample:
    client: IPAddress
    server: IPAddress
    when_ns: int  # capture time of the request, unix nanoseconds
    c2s_owd: Optional[float]  # seconds
    s2c_owd: Optional[float]
    poll_exponent: int
    gt_rtt: Optional[float] = None
    tier: Optional[int] = None
    reason: str = ""
    smoothed_c2s: Optional[float] = None
    smoothed_s2c: Optional[float] = None
    unrotated: bool = False  # request carried no origin timestamp

    @property
    def has_owd(self) -> bool:
        return self.c2s_owd is not None or self.s2c_owd is not None

    @property
    def has_both(self) -> bool:
        return self.c2s_owd is not None and self.s2c_owd is not None

    def to_json(self) -> dict:
        return {
            "schema": SESSION_SCHEMA_VERSION,
            "client": str(self.client),
            "server": str(self.server),
            "when_ns": self.when_ns,
            "c2s_owd": self.c2s_owd,
            "s2c_owd": self.s2c_owd,
            "poll_exponent": self.poll_exponent,
            "gt_rtt": self.gt_rtt,
            "tier": self.tier,
            "reason": self.reason,
            "smoothed_c2s": self.smoothed_c2s,
            "smoothed_s2c": self.smoothed_s2c,
            "unrotated": self.unrotated,
        }

    @classmethod
    def from_json(cls, obj: dict) -> OwdSample:
        return cls(
            client=ipaddress.ip_address(obj["client"]),
            server=ipaddress.ip_address(obj["server"]),
            when_ns=int(obj["when_ns"]),
            c2s_owd=obj.get("c2s_owd"),
            s2c_owd=obj.get("s2c_owd"),
            poll_exponent=int(obj["poll_exponent"]),
            gt_rtt=obj.get("gt_rtt"),
            tier=obj.get("tier"),
            reason=obj.get("reason", ""),
            smoothed_c2s=obj.get("smoothed_c2s"),
            smoothed_s2c=obj.get("smoothed_s2c"),
            unrotated=bool(obj.get("unrotated", False)),
        )


@dataclass
class SessionDiagnostics:
    requests: int = 0
    responses: int = 0
    duplicate_requests: int = 0
    unlinked_responses: int = 0  # never echoed by a later request
    unpaired_requests: int = 0  # no response observed for the request
    evicted_responses: int = 0  # dropped from the rotation window


@dataclass
class ClientSession:
    client: IPAddress
    server: IPAddress
    samples: list[OwdSample] = field(default_factory=list)
    one_shot_count: int = 0
    kind: Optional[str] = None  # set by the tier classifier
    alpha_c2s: Optional[float] = None
    alpha_s2c: Optional[float] = None
    diagnostics: SessionDiagnostics = field(default_factory=SessionDiagnostics)

    @property
    def key(self):
        return (self.client, self.server)

    @property
    def polls(self) -> list[int]:
        return [s.poll_exponent for s in self.samples]


def refid_for(addr: IPAddress) -> bytes:
    """Reference id a client puts in its packets when synchronised to ``addr``."""
    if addr.version == 4:
        return addr.packed
    return hashlib.md5(addr.packed).digest()[:4]


def extract_gtrtt(request: NtpPacket, server_addrs) -> Optional[float]:
    """Client-reported round trip time to one of ``server_addrs``, if present.

    The root delay is only meaningful as a round trip estimate when the ref
    id names the server it was measured against.
    """
    if request.mode != MODE_CLIENT:
        raise ValueError("gtRTT is carried by client requests only")
    if request.root_delay < 0:
        return None
    for addr in server_addrs:
        if request.ref_id == refid_for(addr):
            return request.root_delay
    return None


def _owd(later: Fraction, earlier: Fraction) -> float:
    return float(later - earlier)


def build_sessions(
    packets: Iterable[NtpPacket],
    server_addrs,
    *,
    t1_source: str = "auto",
    rotation_depth: int = 4,
    gtrtt_scope: str = "session",
    era_pivot: int = DEFAULT_ERA_PIVOT,
) -> list[ClientSession]:
    """Group packets into sessions and compute raw OWD samples.

    ``gtrtt_scope="session"`` only accepts a root delay whose ref id names
    the session's own server; ``"any"`` accepts any of ``server_addrs``.
    """
    servers = {ipaddress.ip_address(a) for a in server_addrs}
    if not servers:
        raise ValueError("server_addrs must not be empty")
    if t1_source not in T1_SOURCES:
        raise ValueError(f"t1_source must be one of {T1_SOURCES}")
    if gtrtt_scope not in ("session", "any"):
        raise ValueError("gtrtt_scope must be 'session' or 'any'")

    per_key: dict[tuple, list[NtpPacket]] = {}
    ignored = 0
    for pkt in packets:
        if pkt.mode == MODE_CLIENT and pkt.dst_addr in servers:
            key = (pkt.src_addr, pkt.dst_addr)
        elif pkt.mode == MODE_SERVER and pkt.src_addr in servers:
            key = (pkt.dst_addr, pkt.src_addr)
        else:
            ignored += 1
            continue
        per_key.setdefault(key, []).append(pkt)
    if ignored:
        log.debug("ignored %d packets not exchanged with a known server", ignored)

    sessions = []
    for (client, server), pkts in per_key.items():
        gt_servers = (server,) if gtrtt_scope == "session" else tuple(servers)
        sessions.append(_build_one(client, server, pkts, gt_servers, t1_source,
                                   rotation_depth, era_pivot))
    return sessions


def _build_one(client, server, pkts, gt_servers, t1_source, depth, era_pivot) -> ClientSession:
    sess = ClientSession(client, server)
    diag = sess.diagnostics

    # responses by the request transmit timestamp they answer; first wins
    answer: dict[int, NtpPacket] = {}
    for p in pkts:
        if p.mode == MODE_SERVER and not p.origin_ts.is_unset:
            answer.setdefault(p.origin_ts.raw, p)

    recent: OrderedDict[int, NtpPacket] = OrderedDict()
    seen_xmt: set[int] = set()
    for p in pkts:
        if p.mode == MODE_SERVER:
            diag.responses += 1
            if p.transmit_ts.is_unset:
                diag.unlinked_responses += 1
                continue
            recent[p.transmit_ts.raw] = p
            recent.move_to_end(p.transmit_ts.raw)
            while len(recent) > depth:
                recent.popitem(last=False)
                diag.evicted_responses += 1
            continue

        diag.requests += 1
        xmt = p.transmit_ts
        if not xmt.is_unset:
            if xmt.raw in seen_xmt:
                diag.duplicate_requests += 1
                continue
            seen_xmt.add(xmt.raw)

        c2s = None
        if not xmt.is_unset:
            resp = answer.get(xmt.raw)
            if resp is None:
                diag.unpaired_requests += 1
            if t1_source != "capture" and resp is not None and not resp.receive_ts.is_unset:
                t1 = resp.receive_ts.to_seconds(era_pivot)
            elif t1_source == "response":
                t1 = None
            else:
                t1 = p.capture_ntp_seconds()
            if t1 is not None:
                c2s = _owd(t1, xmt.to_seconds(era_pivot))

        s2c = None
        unrotated = p.origin_ts.is_unset
        if unrotated:
            sess.one_shot_count += 1
        else:
            prev = recent.pop(p.origin_ts.raw, None)
            if prev is not None and not p.receive_ts.is_unset:
                s2c = _owd(p.receive_ts.to_seconds(era_pivot), prev.transmit_ts.to_seconds(era_pivot))

        sess.samples.append(OwdSample(
            client=client,
            server=server,
            when_ns=p.capture_ns,
            c2s_owd=c2s,
            s2c_owd=s2c,
            poll_exponent=p.poll_exponent,
            gt_rtt=extract_gtrtt(p, gt_servers),
            unrotated=unrotated,
        ))
    diag.unlinked_responses += len(recent)
    return sess


def detect_one_shot(session: ClientSession) -> bool:
    """True when the client never sustained a rotated exchange.

    That is the case for a lone request, and for clients (typically SNTP)
    whose requests never echo a server transmit timestamp.
    """
    if len(session.samples) <= 1:
        return True
    return all(s.unrotated for s in session.samples)


def write_sessions_jsonl(path, sessions: Iterable[ClientSession]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for sess in sessions:
            for s in sess.samples:
                fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")
                n += 1
    return n


def read_sessions_jsonl(path) -> list[ClientSession]:
    """Regroup a sample JSONL file into sessions, keeping file order."""
    by_key: dict[tuple, ClientSession] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if obj.get("schema", SESSION_SCHEMA_VERSION) != SESSION_SCHEMA_VERSION:
                raise ValueError(f"unsupported sample schema {obj.get('schema')}")
            s = OwdSample.from_json(obj)
            sess = by_key.get((s.client, s.server))
            if sess is None:
                sess = by_key[(s.client, s.server)] = ClientSession(s.client, s.server)
            sess.samples.append(s)
            sess.one_shot_count += s.unrotated
    return list(by_key.values())
