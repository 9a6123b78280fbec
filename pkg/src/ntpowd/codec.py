"""NTP header codec.

Only the fixed 48-byte header is handled; extension fields and MACs that may
follow it are ignored on decode and never produced on encode.
"""
from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Union

from .errors import FieldOutOfRange, TruncatedPacket, UnsupportedVersion

IPAddress = Union[ipaddress.IPv4Address, ipaddress.IPv6Address]

HEADER_LEN = 48
NTP_UNIX_OFFSET = 2_208_988_800  # seconds from 1900-01-01 to 1970-01-01
ERA_SECONDS = 1 << 32
# 32-bit seconds below this are taken to be in era 1 (after 2036-02-07)
DEFAULT_ERA_PIVOT = NTP_UNIX_OFFSET // 2

MODE_CLIENT = 3
MODE_SERVER = 4

_HEADER = struct.Struct("!BBbbiI4s8s8s8s8s")


@dataclass(frozen=True, order=True)
class NtpTimestamp:
    seconds: int = 0
    fraction: int = 0

    def __post_init__(self):
        if not 0 <= self.seconds < ERA_SECONDS or not 0 <= self.fraction < ERA_SECONDS:
            raise FieldOutOfRange(f"timestamp fields out of range: {self.seconds}, {self.fraction}")

    @classmethod
    def from_raw(cls, raw: int) -> NtpTimestamp:
        return cls(raw >> 32, raw & 0xFFFFFFFF)

    @classmethod
    def from_bytes(cls, data: bytes) -> NtpTimestamp:
        sec, frac = struct.unpack("!II", data)
        return cls(sec, frac)

    @classmethod
    def from_seconds(cls, value, era_pivot: int = DEFAULT_ERA_PIVOT) -> NtpTimestamp:
        """Inverse of :meth:`to_seconds`; truncates toward zero to 2**-32 s."""
        units = int(Fraction(value) * ERA_SECONDS)
        sec = (units >> 32) % ERA_SECONDS
        return cls(sec, units & 0xFFFFFFFF)

    @classmethod
    def from_unix(cls, sec: int, nsec: int = 0) -> NtpTimestamp:
        return cls.from_seconds(Fraction(sec + NTP_UNIX_OFFSET) + Fraction(nsec, 10**9))

    @property
    def raw(self) -> int:
        return (self.seconds << 32) | self.fraction

    @property
    def is_unset(self) -> bool:
        return self.seconds == 0 and self.fraction == 0

    def to_bytes(self) -> bytes:
        return struct.pack("!II", self.seconds, self.fraction)

    def to_seconds(self, era_pivot: int = DEFAULT_ERA_PIVOT) -> Fraction:
        """Exact seconds since 1900-01-01, unfolding the 2036 wrap at ``era_pivot``."""
        if self.is_unset:
            raise ValueError("unset NTP timestamp has no wall-clock value")
        sec = self.seconds
        if sec < era_pivot:
            sec += ERA_SECONDS
        return sec + Fraction(self.fraction, ERA_SECONDS)

    def to_unix(self, era_pivot: int = DEFAULT_ERA_PIVOT) -> Fraction:
        return self.to_seconds(era_pivot) - NTP_UNIX_OFFSET


UNSET = NtpTimestamp(0, 0)


def fixed_16_16_to_seconds(raw: int) -> float:
    """Signed 16.16 fixed point to seconds. Accepts the unsigned wire form too."""
    if raw >= 1 << 31:
        raw -= 1 << 32
    return raw / 65536


def seconds_to_fixed_16_16(value: float, signed: bool = True) -> int:
    raw = round(value * 65536)
    lo, hi = (-(1 << 31), (1 << 31) - 1) if signed else (0, (1 << 32) - 1)
    if not lo <= raw <= hi:
        raise FieldOutOfRange(f"{value} s does not fit 16.16 fixed point")
    return raw


@dataclass(frozen=True)
class NtpPacket:
    leap: int = 0
    version: int = 4
    mode: int = MODE_CLIENT
    stratum: int = 0
    poll_exponent: int = 0
    precision: int = 0
    root_delay: float = 0.0
    root_dispersion: float = 0.0
    ref_id: bytes = b"\x00\x00\x00\x00"
    reference_ts: NtpTimestamp = UNSET
    origin_ts: NtpTimestamp = UNSET
    receive_ts: NtpTimestamp = UNSET
    transmit_ts: NtpTimestamp = UNSET
    # capture metadata, not part of the wire header
    capture_ts: tuple[int, int] = (0, 0)
    src_addr: Optional[IPAddress] = field(default=None)
    dst_addr: Optional[IPAddress] = field(default=None)
    src_port: int = 0
    dst_port: int = 0

    @property
    def capture_ns(self) -> int:
        return self.capture_ts[0] * 1_000_000_000 + self.capture_ts[1]

    def capture_ntp_seconds(self) -> Fraction:
        sec, nsec = self.capture_ts
        return Fraction(sec + NTP_UNIX_OFFSET) + Fraction(nsec, 1_000_000_000)


def decode_packet(payload: bytes, meta=None) -> NtpPacket:
    """Decode the 48-byte header of ``payload``.

    ``meta`` is an optional :class:`~ntpowd.capture.CaptureRecord` whose
    timestamp and addressing are copied onto the packet.
    """
    if len(payload) < HEADER_LEN:
        raise TruncatedPacket(f"{len(payload)} bytes, need {HEADER_LEN}")
    (
        livnmode, stratum, poll, precision, root_delay, root_disp, ref_id,
        ref_ts, org_ts, rec_ts, xmt_ts,
    ) = _HEADER.unpack_from(payload)
    version = (livnmode >> 3) & 0x7
    if version == 0 or version > 4:
        raise UnsupportedVersion(f"NTP version {version}")
    extra = {}
    if meta is not None:
        extra = dict(
            capture_ts=(meta.ts_sec, meta.ts_nsec),
            src_addr=meta.src, dst_addr=meta.dst,
            src_port=meta.sport, dst_port=meta.dport,
        )
    return NtpPacket(
        leap=livnmode >> 6,
        version=version,
        mode=livnmode & 0x7,
        stratum=stratum,
        poll_exponent=poll,
        precision=precision,
        root_delay=root_delay / 65536,
        root_dispersion=root_disp / 65536,
        ref_id=ref_id,
        reference_ts=NtpTimestamp.from_bytes(ref_ts),
        origin_ts=NtpTimestamp.from_bytes(org_ts),
        receive_ts=NtpTimestamp.from_bytes(rec_ts),
        transmit_ts=NtpTimestamp.from_bytes(xmt_ts),
        **extra,
    )


def _check(name, value, lo, hi):
    if not isinstance(value, int) or not lo <= value <= hi:
        raise FieldOutOfRange(f"{name}={value!r} outside [{lo}, {hi}]")


def encode_packet(p: NtpPacket) -> bytes:
    _check("leap", p.leap, 0, 3)
    _check("version", p.version, 1, 4)
    _check("mode", p.mode, 0, 7)
    _check("stratum", p.stratum, 0, 255)
    _check("poll_exponent", p.poll_exponent, -128, 127)
    _check("precision", p.precision, -128, 127)
    if len(p.ref_id) != 4:
        raise FieldOutOfRange(f"ref_id must be 4 bytes, got {len(p.ref_id)}")
    return _HEADER.pack(
        (p.leap << 6) | (p.version << 3) | p.mode,
        p.stratum,
        p.poll_exponent,
        p.precision,
        seconds_to_fixed_16_16(p.root_delay),
        seconds_to_fixed_16_16(p.root_dispersion, signed=False),
        bytes(p.ref_id),
        p.reference_ts.to_bytes(),
        p.origin_ts.to_bytes(),
        p.receive_ts.to_bytes(),
        p.transmit_ts.to_bytes(),
    )
