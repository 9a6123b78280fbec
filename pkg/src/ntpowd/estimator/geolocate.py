"""Disc-based client geolocation from minimum OWDs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

from .geodesy import GeoCoordinate, latency_to_distance
from .matrix import ServerMeta


@dataclass(frozen=True)
class Geolocation:
    client: object
    coordinate: Optional[GeoCoordinate]
    server_id: Optional[str]
    distance_km: Optional[float]  # implied by the smallest minimum OWD
    bound_km: Optional[float]  # error bound when located
    reason: str = ""

    @property
    def located(self) -> bool:
        return self.coordinate is not None


def disc_geolocate(min_owds: Mapping, servers: Sequence[ServerMeta], radius_km: float) -> list[Geolocation]:
    """Snap each client onto the nearest server whose disc of ``radius_km`` contains it.

    The distance to a server is what light in fibre covers in the smaller
    of the two directional minimum OWDs. Clients outside every disc are
    reported with ``coordinate=None``.
    """
    if radius_km <= 0:
        raise ValueError("radius_km must be positive")
    by_addr = {s.address: s for s in servers}
    reach: dict = {}
    for (client, server), mo in min_owds.items():
        srv = by_addr.get(server)
        vals = [v for v in (mo.c2s_ms, mo.s2c_ms) if v is not None]
        if srv is None or not vals:
            continue
        km = latency_to_distance(min(vals)) / 1000.0
        reach.setdefault(client, []).append((km, srv.id, srv))

    out = []
    for client in sorted(reach, key=lambda a: (a.version, int(a)) if hasattr(a, "version") else (0, str(a))):
        km, sid, srv = min(reach[client], key=lambda t: (t[0], t[1]))
        if km <= radius_km and srv.coordinate is not None:
            out.append(Geolocation(client, srv.coordinate, sid, km, radius_km))
        elif km <= radius_km:
            out.append(Geolocation(client, None, sid, km, None, "server has no coordinates"))
        else:
            out.append(Geolocation(client, None, sid, km, None,
                                   f"nearest server {sid} is {km:.1f} km away, beyond {radius_km:g} km"))
    return out
