"""Block latency matrix ``X = [[A, B], [B', C]]`` and its server block.

Rows and columns ``0..m`` are servers and ``m..m+n`` clients. Entry
``X[i, j]`` is the one-way latency from node ``i`` to node ``j`` in
milliseconds, so the top-right block holds server-to-client minimum OWDs
and the bottom-left block client-to-server ones.
"""
from __future__ import annotations

import ipaddress
import logging
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from ..errors import InsufficientObservationsWarning, NoEligibleClients
from .geodesy import GeoCoordinate, distance_m, geo_latency

log = logging.getLogger(__name__)

SYMMETRIZE_MODES = ("none", "min", "mean")


@dataclass(frozen=True)
class ServerMeta:
    id: str
    address: object  # ipaddress object
    coordinate: Optional[GeoCoordinate] = None


@dataclass
class LatencyMatrix:
    m: int
    n: int
    ids: list
    entries: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        size = self.m + self.n
        self.entries = np.asarray(self.entries, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.entries.shape != (size, size) or self.mask.shape != (size, size):
            raise ValueError(f"matrix must be {size}x{size}")
        if len(self.ids) != size:
            raise ValueError("need one id per row")
        np.fill_diagonal(self.entries, 0.0)
        np.fill_diagonal(self.mask, True)
        self.entries[~self.mask] = np.nan
        if np.any(self.entries[self.mask] < 0):
            raise ValueError("observed latencies must be non-negative")

    @property
    def size(self) -> int:
        return self.m + self.n

    @property
    def A(self) -> np.ndarray:
        return self.entries[: self.m, : self.m]

    @property
    def B(self) -> np.ndarray:
        return self.entries[: self.m, self.m:]

    @property
    def B_lower(self) -> np.ndarray:
        return self.entries[self.m:, : self.m]

    @property
    def C(self) -> np.ndarray:
        return self.entries[self.m:, self.m:]

    def block_of(self, i: int, j: int) -> str:
        if i < self.m and j < self.m:
            return "A"
        if i >= self.m and j >= self.m:
            return "C"
        return "B"

    def offdiag_observed(self) -> np.ndarray:
        return self.mask & ~np.eye(self.size, dtype=bool)

    def copy(self) -> LatencyMatrix:
        return LatencyMatrix(self.m, self.n, list(self.ids), self.entries.copy(), self.mask.copy())

    def to_json(self) -> dict:
        return {
            "m": self.m,
            "n": self.n,
            "ids": [str(i) for i in self.ids],
            "entries": [[None if np.isnan(v) else float(v) for v in row] for row in self.entries],
            "mask": self.mask.astype(int).tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> LatencyMatrix:
        entries = np.array([[np.nan if v is None else v for v in row] for row in obj["entries"]], dtype=float)
        return cls(int(obj["m"]), int(obj["n"]), list(obj["ids"]), entries, np.array(obj["mask"], dtype=bool))


@dataclass(frozen=True)
class RegressionCoeffs:
    beta0: float  # ms
    beta1: float
    n_points: int = 0

    def apply(self, x):
        return self.beta0 + self.beta1 * np.asarray(x)


def geo_matrix(servers: Sequence[ServerMeta]) -> np.ndarray:
    """Speed-of-light latency floor between every pair of servers (ms)."""
    m = len(servers)
    out = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            d, fallback = distance_m(servers[i].coordinate, servers[j].coordinate)
            if fallback:
                log.warning("great-circle fallback for %s - %s", servers[i].id, servers[j].id)
            out[i, j] = out[j, i] = geo_latency(d)
    return out


def fit_line(x, y) -> RegressionCoeffs:
    """Ordinary least squares y = b0 + b1 x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2:
        raise ValueError("need at least two points")
    dx = x - x.mean()
    sxx = float(dx @ dx)
    if sxx == 0.0:
        # no spread in x: keep unit slope, fit the offset
        return RegressionCoeffs(float((y - x).mean()), 1.0, len(x))
    b1 = float(dx @ (y - y.mean())) / sxx
    return RegressionCoeffs(float(y.mean() - b1 * x.mean()), b1, len(x))


def build_A(servers: Sequence[ServerMeta], a_rtt=None) -> tuple[np.ndarray, RegressionCoeffs]:
    """Complete server-server latency block from geography and partial pings.

    ``a_rtt`` holds half of the minimum ping RTT (ms) with NaN where no
    measurement exists. Missing pairs get ``beta0 + beta1 * A_geo`` from a
    straight-line fit of observed pings against the geographic floor; every
    entry is then clamped to the floor.
    """
    m = len(servers)
    if m < 2:
        raise ValueError("need at least two servers")
    a_geo = geo_matrix(servers)
    if a_rtt is None:
        a_rtt = np.full((m, m), np.nan)
    a_rtt = np.array(a_rtt, dtype=float)
    if a_rtt.shape != (m, m):
        raise ValueError(f"a_rtt must be {m}x{m}")

    # merge the two triangles; where both are present use their mean
    upper = np.triu_indices(m, 1)
    obs_u, obs_l = a_rtt[upper], a_rtt.T[upper]
    pair_val = np.where(np.isnan(obs_u), obs_l, np.where(np.isnan(obs_l), obs_u, (obs_u + obs_l) / 2))
    observed = ~np.isnan(pair_val)

    if observed.sum() >= 2:
        coeffs = fit_line(a_geo[upper][observed], pair_val[observed])
    else:
        warnings.warn(f"only {int(observed.sum())} observed server pairs; using geographic latencies",
                      InsufficientObservationsWarning, stacklevel=2)
        coeffs = RegressionCoeffs(0.0, 1.0, int(observed.sum()))

    A = np.zeros((m, m))
    filled = np.where(observed, pair_val, coeffs.apply(a_geo[upper]))
    A[upper] = filled
    A.T[upper] = filled
    below = A < a_geo
    np.fill_diagonal(below, False)
    clamped_obs = below[upper] & observed
    if clamped_obs.any():
        log.warning("%d observed server pairs below the speed-of-light floor were clamped", int(clamped_obs.sum()))
    A = np.maximum(A, a_geo)
    np.fill_diagonal(A, 0.0)
    return A, coeffs


def load_exclusions(lines: Iterable[str]) -> list:
    """Parse an exclusion list: one address or CIDR prefix per line, '#' comments."""
    nets = []
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if line:
            nets.append(ipaddress.ip_network(line, strict=False))
    return nets


def _excluded(addr, nets) -> bool:
    return any(addr.version == net.version and addr in net for net in nets)


def assemble_X(
    A: np.ndarray,
    min_owds: Mapping,
    servers: Sequence[ServerMeta],
    *,
    min_servers: int = 4,
    exclude=(),
    symmetrize: str = "none",
) -> LatencyMatrix:
    """Place servers and eligible clients into a :class:`LatencyMatrix`.

    ``min_owds`` maps (client, server_address) to an object with ``c2s_ms``
    and ``s2c_ms`` (either may be None). A client is eligible when it has a
    minimum OWD to at least ``min_servers`` servers and is not covered by
    ``exclude`` (addresses or networks).
    """
    if symmetrize not in SYMMETRIZE_MODES:
        raise ValueError(f"symmetrize must be one of {SYMMETRIZE_MODES}")
    m = len(servers)
    A = np.asarray(A, dtype=float)
    if A.shape != (m, m) or np.isnan(A).any():
        raise ValueError("A must be a complete m x m matrix")
    col = {s.address: k for k, s in enumerate(servers)}
    nets = [n if isinstance(n, (ipaddress.IPv4Network, ipaddress.IPv6Network))
            else ipaddress.ip_network(n, strict=False) for n in exclude]

    per_client: dict = {}
    for (client, server), mo in min_owds.items():
        if server not in col or (mo.c2s_ms is None and mo.s2c_ms is None):
            continue
        per_client.setdefault(client, {})[col[server]] = mo

    clients = sorted(
        (c for c, row in per_client.items() if len(row) >= min_servers and not _excluded(c, nets)),
        key=lambda a: (a.version, int(a)),
    )
    if not clients:
        raise NoEligibleClients(f"no client reaches {min_servers} servers")

    n = len(clients)
    size = m + n
    entries = np.full((size, size), np.nan)
    mask = np.zeros((size, size), dtype=bool)
    entries[:m, :m] = A
    mask[:m, :m] = True
    for ci, client in enumerate(clients):
        r = m + ci
        for sj, mo in per_client[client].items():
            up, down = mo.s2c_ms, mo.c2s_ms
            if symmetrize != "none":
                both = [v for v in (up, down) if v is not None]
                up = down = min(both) if symmetrize == "min" else sum(both) / len(both)
            if up is not None:
                entries[sj, r] = up
                mask[sj, r] = True
            if down is not None:
                entries[r, sj] = down
                mask[r, sj] = True
    ids = [s.id for s in servers] + [str(c) for c in clients]
    return LatencyMatrix(m, n, ids, entries, mask)
