"""Precision tier assignment for OWD samples.

Tiers:

0
    one-shot requests from which no OWD can be inferred
1
    unverifiable OWDs from one-shot style clients, and rejected OWDs of a
    second or more
2
    rejected OWDs below the tier boundary
3
    OWDs accepted by the polling run rule (non-constant polling) or by the
    gtRTT / mean+sigma filters (constant polling), then EWMA smoothed
"""
from __future__ import annotations

import dataclasses
import enum
import math
import statistics
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .errors import InvalidPoll, NoQualifyingSamples, TooFewSamples
from .sessions import ClientSession, OwdSample, detect_one_shot


class Tier(enum.IntEnum):
    TIER0 = 0
    TIER1 = 1
    TIER2 = 2
    TIER3 = 3


class PollingKind(str, enum.Enum):
    CONSTANT = "constant"
    NON_CONSTANT = "non-constant"
    ONE_SHOT = "one-shot"


DEFAULT_ALPHA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))


@dataclass(frozen=True)
class ClassifierConfig:
    tier_boundary_ms: float = 1000.0
    ewma_alpha_grid: tuple = DEFAULT_ALPHA_GRID
    sigma_k: float = 1.0

    def __post_init__(self):
        if not self.tier_boundary_ms > 0:
            raise ValueError("tier_boundary_ms must be positive")
        if not self.ewma_alpha_grid or not all(0 < a < 1 for a in self.ewma_alpha_grid):
            raise ValueError("ewma_alpha_grid must be a non-empty set of values in (0, 1)")


@dataclass(frozen=True)
class PollRun:
    poll_exponent: int
    samples: tuple  # indices into the session's sample list
    next_exponent: Optional[int] = None

    @property
    def n(self) -> int:
        return len(self.samples)


def required_samples(poll_exponent: int) -> int:
    """Samples NTP wants at one poll exponent before changing it: ceil(30 / P)."""
    if poll_exponent <= 0:
        raise InvalidPoll(f"poll exponent {poll_exponent} has no run length")
    return -(-30 // poll_exponent)


def classify_polling(session: ClientSession) -> PollingKind:
    if not session.samples:
        raise ValueError("cannot classify an empty session")
    if detect_one_shot(session):
        return PollingKind.ONE_SHOT
    if len(set(session.polls)) == 1:
        return PollingKind.CONSTANT
    return PollingKind.NON_CONSTANT


def segment_runs(session_or_polls) -> list[PollRun]:
    polls = session_or_polls.polls if isinstance(session_or_polls, ClientSession) else list(session_or_polls)
    runs = []
    start = 0
    for i in range(1, len(polls) + 1):
        if i == len(polls) or polls[i] != polls[start]:
            nxt = polls[i] if i < len(polls) else None
            runs.append(PollRun(polls[start], tuple(range(start, i)), nxt))
            start = i
    return runs


def apply_run_rule(run: PollRun) -> tuple[bool, str]:
    """Accept or reject one poll run; returns (accepted, reason)."""
    n_req = required_samples(run.poll_exponent)
    if run.n < n_req:
        return False, "short-run"
    if run.n > n_req:
        return False, "oscillating"
    if run.next_exponent is None:
        return False, "unconfirmed-run"
    if run.next_exponent > run.poll_exponent:
        return True, "run-accepted"
    return False, "poll-decrease"


def _positive(s: OwdSample) -> bool:
    if s.c2s_owd is not None and s.c2s_owd <= 0:
        return False
    if s.s2c_owd is not None and s.s2c_owd <= 0:
        return False
    return s.has_owd


def apply_gtrtt_filter(samples: Sequence[OwdSample], gt_rtt: Optional[float] = None) -> list[int]:
    """Indices of samples whose OWD sum fits under the client's RTT estimate.

    ``gt_rtt`` overrides the per-sample value when given.
    """
    keep = []
    for i, s in enumerate(samples):
        rtt = s.gt_rtt if gt_rtt is None else gt_rtt
        if rtt is None or not s.has_both:
            continue
        if s.c2s_owd > 0 and s.s2c_owd > 0 and s.c2s_owd + s.s2c_owd <= rtt:
            keep.append(i)
    return keep


def apply_mean_sigma_filter(samples: Sequence[OwdSample], sigma_k: float = 1.0) -> list[int]:
    both = [i for i, s in enumerate(samples) if s.has_both]
    if len(both) < 2:
        raise TooFewSamples(f"{len(both)} samples with both directions, need 2")
    c2s = [samples[i].c2s_owd for i in both]
    s2c = [samples[i].s2c_owd for i in both]
    lim_c = statistics.fmean(c2s) + sigma_k * statistics.stdev(c2s)
    lim_s = statistics.fmean(s2c) + sigma_k * statistics.stdev(s2c)
    return [i for i, c, s in zip(both, c2s, s2c) if 0 < c <= lim_c and 0 < s <= lim_s]


def ewma(series: Sequence[float], alpha: float) -> list[float]:
    out = [series[0]]
    for x in series[1:]:
        y = out[-1]
        out.append(y + alpha * (x - y))
    return out


def smooth_ewma(series: Sequence[float], grid: Iterable[float] = DEFAULT_ALPHA_GRID) -> tuple[list[float], float]:
    """EWMA with the grid alpha minimising one-step-ahead squared error.

    Ties go to the smaller alpha. Smoothed values are clipped to the range
    of the input so rounding can never push them outside it.
    """
    series = list(series)
    if not series:
        raise ValueError("cannot smooth an empty series")
    lo, hi = min(series), max(series)
    best = None
    for alpha in sorted(grid):
        y = ewma(series, alpha)
        if len(series) > 1:
            mse = math.fsum((p - x) ** 2 for p, x in zip(y[:-1], series[1:])) / (len(series) - 1)
        else:
            mse = 0.0
        if best is None or mse < best[0]:
            best = (mse, alpha, y)
    _, alpha, y = best
    return [min(max(v, lo), hi) for v in y], alpha


def _reject_tier(s: OwdSample, boundary_s: float) -> Tier:
    mags = [abs(v) for v in (s.c2s_owd, s.s2c_owd) if v is not None]
    return Tier.TIER2 if max(mags) < boundary_s else Tier.TIER1


def assign_tiers(session: ClientSession, config: ClassifierConfig = ClassifierConfig()) -> ClientSession:
    """Return a copy of ``session`` with every sample labelled."""
    samples = session.samples
    kind = classify_polling(session) if samples else PollingKind.ONE_SHOT
    boundary_s = config.tier_boundary_ms / 1000.0
    tiers: list[Optional[Tier]] = [None] * len(samples)
    reasons = [""] * len(samples)

    for i, s in enumerate(samples):
        if not s.has_owd:
            tiers[i], reasons[i] = Tier.TIER0, "no-owd"

    accepted: list[int] = []
    if kind is PollingKind.ONE_SHOT:
        for i in range(len(samples)):
            if tiers[i] is None:
                if len(samples) > 1:
                    tiers[i], reasons[i] = Tier.TIER1, "one-shot-unverified"
                else:
                    tiers[i], reasons[i] = Tier.TIER0, "one-shot"
    elif kind is PollingKind.NON_CONSTANT:
        for run in segment_runs(session):
            try:
                ok, why = apply_run_rule(run)
            except InvalidPoll:
                ok, why = False, "invalid-poll"
            for i in run.samples:
                if tiers[i] is not None:
                    continue
                if ok and not _positive(samples[i]):
                    reasons[i] = "non-positive"
                elif ok:
                    accepted.append(i)
                else:
                    reasons[i] = why
    else:
        if any(s.gt_rtt is not None for s in samples):
            accepted = apply_gtrtt_filter(samples)
            default_reason = "gtrtt-rejected"
        else:
            try:
                accepted = apply_mean_sigma_filter(samples, config.sigma_k)
            except TooFewSamples:
                accepted = []
            default_reason = "mean-sigma-rejected"
        for i, s in enumerate(samples):
            if tiers[i] is not None:
                continue
            if not s.has_both:
                reasons[i] = "missing-direction"
            elif (s.c2s_owd <= 0 or s.s2c_owd <= 0):
                reasons[i] = "non-positive"
            else:
                reasons[i] = default_reason

    accepted = [i for i in accepted if tiers[i] is None]
    smoothed: dict[int, dict[str, float]] = {i: {} for i in accepted}
    alphas: dict[str, Optional[float]] = {"c2s": None, "s2c": None}
    for direction in ("c2s", "s2c"):
        idx = [i for i in accepted if getattr(samples[i], direction + "_owd") is not None]
        if not idx:
            continue
        values, alpha = smooth_ewma([getattr(samples[i], direction + "_owd") for i in idx],
                                    config.ewma_alpha_grid)
        alphas[direction] = alpha
        for i, v in zip(idx, values):
            smoothed[i][direction] = v
    accept_reason = {PollingKind.NON_CONSTANT: "run-accepted"}.get(kind)
    for i in accepted:
        tiers[i] = Tier.TIER3
        if accept_reason:
            reasons[i] = accept_reason
        elif samples[i].gt_rtt is not None:
            reasons[i] = "gtrtt-accepted"
        else:
            reasons[i] = "mean-sigma-accepted"

    for i, s in enumerate(samples):
        if tiers[i] is None:
            tiers[i] = _reject_tier(s, boundary_s)

    labelled = [
        dataclasses.replace(
            s, tier=int(tiers[i]), reason=reasons[i],
            smoothed_c2s=smoothed.get(i, {}).get("c2s"),
            smoothed_s2c=smoothed.get(i, {}).get("s2c"),
        )
        for i, s in enumerate(samples)
    ]
    return dataclasses.replace(session, samples=labelled, kind=kind.value,
                               alpha_c2s=alphas["c2s"], alpha_s2c=alphas["s2c"])


@dataclass(frozen=True)
class MinOwd:
    c2s_ms: Optional[float]
    s2c_ms: Optional[float]

    @property
    def best_ms(self) -> float:
        return min(v for v in (self.c2s_ms, self.s2c_ms) if v is not None)


def session_min_owd(session: ClientSession, tier_floor: int = Tier.TIER3, smoothed: bool = False) -> MinOwd:
    """Directional minimum OWD (ms) over samples at or above ``tier_floor``."""
    picked = [s for s in session.samples if s.tier is not None and s.tier >= tier_floor]
    if not picked:
        raise NoQualifyingSamples(f"{session.client} -> {session.server}: no samples at tier >= {int(tier_floor)}")

    def dmin(attr):
        vals = [getattr(s, attr) for s in picked if getattr(s, attr) is not None]
        return min(vals) * 1000.0 if vals else None

    if smoothed:
        return MinOwd(dmin("smoothed_c2s"), dmin("smoothed_s2c"))
    return MinOwd(dmin("c2s_owd"), dmin("s2c_owd"))


def min_owd(sessions: Iterable[ClientSession], tier_floor: int = Tier.TIER3, smoothed: bool = False) -> dict:
    """Map (client, server) to :class:`MinOwd`; pairs without qualifying samples are left out."""
    out = {}
    for sess in sessions:
        try:
            m = session_min_owd(sess, tier_floor, smoothed)
        except NoQualifyingSamples:
            continue
        if m.c2s_ms is None and m.s2c_ms is None:
            continue
        out[(sess.client, sess.server)] = m
    if not out:
        raise NoQualifyingSamples(f"no pair has samples at tier >= {int(tier_floor)}")
    return out


def tier_counts(sessions: Iterable[ClientSession]) -> dict[int, int]:
    counts = {int(t): 0 for t in Tier}
    for sess in sessions:
        for s in sess.samples:
            counts[s.tier] += 1
    return counts
