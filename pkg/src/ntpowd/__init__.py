"""Passive one-way delay estimation from server-side NTP captures."""
from .codec import NtpPacket, NtpTimestamp, decode_packet, encode_packet
from .capture import CaptureRecord, read_capture
from .sessions import ClientSession, OwdSample, build_sessions
from .tiers import ClassifierConfig, Tier, assign_tiers, min_owd

__version__ = "0.1.0"

__all__ = [
    "NtpPacket", "NtpTimestamp", "decode_packet", "encode_packet", "CaptureRecord",
    "read_capture", "ClientSession", "OwdSample", "build_sessions", "ClassifierConfig",
    "Tier", "assign_tiers", "min_owd",
]
