import ipaddress

import pytest
from hypothesis import strategies as st

from ntpowd.codec import MODE_CLIENT, MODE_SERVER, NtpPacket, NtpTimestamp

ACCEPTANCE_RESULTS: list = []


def record_criterion(number, name, passed, detail=""):
    ACCEPTANCE_RESULTS.append((number, name, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {name}: {detail}")


timestamps = st.builds(NtpTimestamp, st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))

packets = st.builds(
    NtpPacket,
    leap=st.integers(0, 3),
    version=st.integers(1, 4),
    mode=st.integers(0, 7),
    stratum=st.integers(0, 255),
    poll_exponent=st.integers(-128, 127),
    precision=st.integers(-128, 127),
    root_delay=st.integers(-(2**31), 2**31 - 1).map(lambda r: r / 65536),
    root_dispersion=st.integers(0, 2**32 - 1).map(lambda r: r / 65536),
    ref_id=st.binary(min_size=4, max_size=4),
    reference_ts=timestamps,
    origin_ts=timestamps,
    receive_ts=timestamps,
    transmit_ts=timestamps,
)

CLIENT = ipaddress.ip_address("198.51.100.7")
SERVER = ipaddress.ip_address("192.0.2.1")
EPOCH = 3_640_000_000  # an NTP second in 2015


def ts(seconds):
    """NtpTimestamp for ``EPOCH + seconds``."""
    from fractions import Fraction
    return NtpTimestamp.from_seconds(Fraction(EPOCH) + Fraction(str(seconds)))


def capture_of(seconds):
    from fractions import Fraction
    from ntpowd.codec import NTP_UNIX_OFFSET
    ns = int((Fraction(EPOCH - NTP_UNIX_OFFSET) + Fraction(str(seconds))) * 10**9)
    return divmod(ns, 10**9)


def request(t0, *, origin=None, receive=None, poll=6, client=CLIENT, server=SERVER, at=None, **kw):
    return NtpPacket(mode=MODE_CLIENT, poll_exponent=poll, transmit_ts=ts(t0),
                     origin_ts=ts(origin) if origin is not None else NtpTimestamp(),
                     receive_ts=ts(receive) if receive is not None else NtpTimestamp(),
                     capture_ts=capture_of(at if at is not None else t0),
                     src_addr=client, dst_addr=server, src_port=40000, dst_port=123, **kw)


def response(req, t_recv, t_xmt, *, client=CLIENT, server=SERVER):
    return NtpPacket(mode=MODE_SERVER, stratum=1, poll_exponent=req.poll_exponent,
                     origin_ts=req.transmit_ts, receive_ts=ts(t_recv), transmit_ts=ts(t_xmt),
                     capture_ts=capture_of(t_xmt), src_addr=server, dst_addr=client,
                     src_port=123, dst_port=40000)


def exchanges(n, *, poll=6, c2s=0.010, s2c=0.015, start=0.0, polls=None):
    """A well-behaved rotated session with exact OWDs (decimal seconds)."""
    from decimal import Decimal
    polls = polls or [poll] * n
    out = []
    t = Decimal(str(start))
    prev = None
    for p in polls:
        t_arr = t + Decimal(str(c2s))
        t_resp = t_arr + Decimal("0.00005")
        req = request(t, origin=prev[0] if prev else None, receive=prev[1] if prev else None,
                      poll=p, at=t_arr)
        rsp = response(req, t_arr, t_resp)
        out += [req, rsp]
        prev = (t_resp, t_resp + Decimal(str(s2c)))
        t += 2 ** p
    return out


@pytest.fixture
def tmp_out(tmp_path):
    return tmp_path
