"""Reading and writing packet captures.

Two on-disk formats are understood:

* classic libpcap files (either byte order, microsecond or nanosecond
  magic) carrying Ethernet, Linux cooked (SLL), BSD loopback or raw IP
  frames;
* a JSON-lines trace, one object per UDP datagram::

      {"ts_sec": 1433116800, "ts_nsec": 250000, "src": "198.51.100.7",
       "dst": "192.0.2.1", "sport": 40123, "dport": 123,
       "payload_hex": "23000000..."}

Only UDP datagrams with source or destination port 123 are yielded.
Everything else is counted in :attr:`CaptureReader.skipped`.
"""
from __future__ import annotations

import ipaddress
import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from .codec import IPAddress
from .errors import BadMagic, CorruptRecordHeader

log = logging.getLogger(__name__)

NTP_PORT = 123

PCAP_MAGIC_US = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D

LINKTYPE_NULL = 0
LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_LINUX_SLL = 113
# some platforms use the DLT value instead of the LINKTYPE value for raw IP
_RAW_ALIASES = {LINKTYPE_RAW, 12, 14}

ETH_P_IP = 0x0800
ETH_P_IPV6 = 0x86DD
_VLAN_TYPES = {0x8100, 0x88A8}

IPPROTO_HOPOPTS = 0
IPPROTO_UDP = 17
IPPROTO_FRAGMENT = 44


@dataclass(frozen=True)
class CaptureRecord:
    ts_sec: int
    ts_nsec: int
    src: IPAddress
    dst: IPAddress
    sport: int
    dport: int
    payload: bytes

    @property
    def ts_ns(self) -> int:
        return self.ts_sec * 1_000_000_000 + self.ts_nsec

    def to_json(self) -> dict:
        return {
            "ts_sec": self.ts_sec,
            "ts_nsec": self.ts_nsec,
            "src": str(self.src),
            "dst": str(self.dst),
            "sport": self.sport,
            "dport": self.dport,
            "payload_hex": self.payload.hex(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> CaptureRecord:
        return cls(
            ts_sec=int(obj["ts_sec"]),
            ts_nsec=int(obj["ts_nsec"]),
            src=ipaddress.ip_address(obj["src"]),
            dst=ipaddress.ip_address(obj["dst"]),
            sport=int(obj["sport"]),
            dport=int(obj["dport"]),
            payload=bytes.fromhex(obj["payload_hex"]),
        )


class _Skip(Exception):
    """Internal: frame is valid but not an NTP datagram."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def _parse_ipv4(buf: bytes):
    if len(buf) < 20:
        raise _Skip("truncated-ip")
    ihl = (buf[0] & 0x0F) * 4
    if ihl < 20 or len(buf) < ihl:
        raise _Skip("truncated-ip")
    total_len = struct.unpack_from("!H", buf, 2)[0]
    flags_frag = struct.unpack_from("!H", buf, 6)[0]
    if flags_frag & 0x2000 or flags_frag & 0x1FFF:
        raise _Skip("fragment")
    proto = buf[9]
    src = ipaddress.IPv4Address(buf[12:16])
    dst = ipaddress.IPv4Address(buf[16:20])
    end = total_len if ihl <= total_len <= len(buf) else len(buf)
    return proto, src, dst, buf[ihl:end]


def _parse_ipv6(buf: bytes):
    if len(buf) < 40:
        raise _Skip("truncated-ip")
    nxt = buf[6]
    plen = struct.unpack_from("!H", buf, 4)[0]
    src = ipaddress.IPv6Address(buf[8:24])
    dst = ipaddress.IPv6Address(buf[24:40])
    body = buf[40:40 + plen] if plen else buf[40:]
    if nxt == IPPROTO_HOPOPTS:
        if len(body) < 8:
            raise _Skip("truncated-ip")
        nxt, hlen = body[0], (body[1] + 1) * 8
        body = body[hlen:]
    if nxt == IPPROTO_FRAGMENT:
        if len(body) < 8:
            raise _Skip("truncated-ip")
        offset_m = struct.unpack_from("!H", body, 2)[0]
        # only atomic fragments (offset 0, no more fragments) carry a full datagram
        if offset_m & 0xFFF9:
            raise _Skip("fragment")
        nxt, body = body[0], body[8:]
    return nxt, src, dst, body


def _parse_ip(buf: bytes):
    if not buf:
        raise _Skip("truncated-ip")
    version = buf[0] >> 4
    if version == 4:
        return _parse_ipv4(buf)
    if version == 6:
        return _parse_ipv6(buf)
    raise _Skip("not-ip")


def _strip_link(linktype: int, frame: bytes) -> bytes:
    if linktype == LINKTYPE_ETHERNET:
        if len(frame) < 14:
            raise _Skip("truncated-link")
        off = 12
        ethertype = struct.unpack_from("!H", frame, off)[0]
        while ethertype in _VLAN_TYPES:
            off += 4
            if len(frame) < off + 2:
                raise _Skip("truncated-link")
            ethertype = struct.unpack_from("!H", frame, off)[0]
        if ethertype not in (ETH_P_IP, ETH_P_IPV6):
            raise _Skip("not-ip")
        return frame[off + 2:]
    if linktype == LINKTYPE_LINUX_SLL:
        if len(frame) < 16:
            raise _Skip("truncated-link")
        if struct.unpack_from("!H", frame, 14)[0] not in (ETH_P_IP, ETH_P_IPV6):
            raise _Skip("not-ip")
        return frame[16:]
    if linktype == LINKTYPE_NULL:
        return frame[4:]
    if linktype in _RAW_ALIASES:
        return frame
    raise _Skip(f"linktype-{linktype}")


def frame_to_record(linktype: int, ts_sec: int, ts_nsec: int, frame: bytes) -> CaptureRecord:
    """Turn one link-layer frame into a record, or raise ``_Skip``."""
    proto, src, dst, body = _parse_ip(_strip_link(linktype, frame))
    if proto != IPPROTO_UDP:
        raise _Skip("not-udp")
    if len(body) < 8:
        raise _Skip("truncated-udp")
    sport, dport, ulen = struct.unpack_from("!HHH", body)
    if NTP_PORT not in (sport, dport):
        raise _Skip("not-ntp")
    payload = body[8:ulen] if 8 <= ulen <= len(body) else body[8:]
    return CaptureRecord(ts_sec, ts_nsec, src, dst, sport, dport, bytes(payload))


class CaptureReader:
    """Iterable over the NTP datagrams of one capture file.

    After (or during) iteration ``total`` counts every record in the file,
    ``skipped`` the ones that were not yielded and ``skip_reasons`` why.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.total = 0
        self.skipped = 0
        self.skip_reasons: Counter = Counter()
        with open(self.path, "rb") as fh:
            head = fh.read(4)
        if len(head) == 4 and struct.unpack("<I", head)[0] in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
            self.format = "pcap"
        elif len(head) == 4 and struct.unpack(">I", head)[0] in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
            self.format = "pcap"
        elif not head.strip() or head.lstrip()[:1] == b"{":
            self.format = "jsonl"
        else:
            raise BadMagic(f"{self.path}: unrecognised capture magic {head.hex()}")

    @property
    def yielded(self) -> int:
        return self.total - self.skipped

    def _skip(self, reason: str):
        self.skipped += 1
        self.skip_reasons[reason] += 1

    def __iter__(self) -> Iterator[CaptureRecord]:
        if self.format == "pcap":
            return self._iter_pcap()
        return self._iter_jsonl()

    def _iter_pcap(self):
        with open(self.path, "rb") as fh:
            header = fh.read(24)
            if len(header) < 24:
                raise CorruptRecordHeader(f"{self.path}: short global header")
            magic_le = struct.unpack("<I", header[:4])[0]
            endian = "<" if magic_le in (PCAP_MAGIC_US, PCAP_MAGIC_NS) else ">"
            magic = struct.unpack(endian + "I", header[:4])[0]
            nano = magic == PCAP_MAGIC_NS
            linktype = struct.unpack(endian + "I", header[20:24])[0] & 0x0FFFFFFF
            rec_hdr = struct.Struct(endian + "IIII")
            while True:
                raw = fh.read(16)
                if not raw:
                    return
                if len(raw) < 16:
                    raise CorruptRecordHeader(f"{self.path}: truncated record header after {self.total} records")
                ts_sec, ts_frac, incl_len, _orig_len = rec_hdr.unpack(raw)
                if incl_len > 0x40000 or (nano and ts_frac >= 10**9) or (not nano and ts_frac >= 10**6):
                    raise CorruptRecordHeader(f"{self.path}: implausible record header after {self.total} records")
                frame = fh.read(incl_len)
                if len(frame) < incl_len:
                    raise CorruptRecordHeader(f"{self.path}: truncated record data after {self.total} records")
                self.total += 1
                ts_nsec = ts_frac if nano else ts_frac * 1000
                try:
                    rec = frame_to_record(linktype, ts_sec, ts_nsec, frame)
                except _Skip as exc:
                    self._skip(exc.reason)
                    continue
                yield rec

    def _iter_jsonl(self):
        with open(self.path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                self.total += 1
                try:
                    rec = CaptureRecord.from_json(json.loads(line))
                except (ValueError, KeyError, TypeError) as exc:
                    log.debug("%s:%d: bad record: %s", self.path, lineno, exc)
                    self._skip("bad-json")
                    continue
                if NTP_PORT not in (rec.sport, rec.dport):
                    self._skip("not-ntp")
                    continue
                yield rec


def read_capture(path) -> CaptureReader:
    return CaptureReader(path)


def write_jsonl(path, records: Iterable[CaptureRecord]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
            n += 1
    return n


def _ipv4_checksum(header: bytes) -> int:
    s = sum(struct.unpack("!10H", header))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def build_frame(rec: CaptureRecord) -> bytes:
    """Ethernet + IP + UDP framing for ``rec``; UDP checksum left at zero."""
    udp = struct.pack("!HHHH", rec.sport, rec.dport, 8 + len(rec.payload), 0) + rec.payload
    if rec.src.version == 4:
        hdr = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20 + len(udp), 0, 0x4000, 64,
                          IPPROTO_UDP, 0, rec.src.packed, rec.dst.packed)
        hdr = hdr[:10] + struct.pack("!H", _ipv4_checksum(hdr)) + hdr[12:]
        ethertype = ETH_P_IP
    else:
        hdr = struct.pack("!IHBB16s16s", 6 << 28, len(udp), IPPROTO_UDP, 64,
                          rec.src.packed, rec.dst.packed)
        ethertype = ETH_P_IPV6
    eth = b"\x02\x00\x00\x00\x00\x02" + b"\x02\x00\x00\x00\x00\x01" + struct.pack("!H", ethertype)
    return eth + hdr + udp


def write_pcap(path, records: Iterable[CaptureRecord], nanosecond: bool = False,
               frames: Iterable[tuple[int, int, bytes]] = ()) -> int:
    """Write a little-endian classic pcap with Ethernet framing.

    ``frames`` may supply extra pre-built (ts_sec, ts_nsec, frame) tuples,
    appended after ``records``; tests use it to inject non-NTP traffic.
    """
    magic = PCAP_MAGIC_NS if nanosecond else PCAP_MAGIC_US
    n = 0
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IHHiIII", magic, 2, 4, 0, 0, 65535, LINKTYPE_ETHERNET))
        items = [(r.ts_sec, r.ts_nsec, build_frame(r)) for r in records]
        for ts_sec, ts_nsec, frame in [*items, *frames]:
            frac = ts_nsec if nanosecond else ts_nsec // 1000
            fh.write(struct.pack("<IIII", ts_sec, frac, len(frame), len(frame)))
            fh.write(frame)
            n += 1
    return n
