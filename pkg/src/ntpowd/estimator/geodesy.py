"""WGS-84 distances and the speed-of-light latency floor."""
from __future__ import annotations

import math
from dataclasses import dataclass

from ..errors import NoConvergence

WGS84_A = 6378137.0
WGS84_F = 1 / 298.257223563
WGS84_B = WGS84_A * (1 - WGS84_F)
MEAN_RADIUS = (2 * WGS84_A + WGS84_B) / 3

# roughly 2/3 of c, the usual figure for propagation in fibre
PROPAGATION_SPEED = 2e8  # m/s


@dataclass(frozen=True)
class GeoCoordinate:
    lat: float
    lon: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} out of range")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} out of range")

    @classmethod
    def normalized(cls, lat: float, lon: float) -> GeoCoordinate:
        lon = (lon + 180.0) % 360.0 - 180.0
        return cls(lat, lon)


def vincenty_distance(a: GeoCoordinate, b: GeoCoordinate, tol: float = 1e-12, max_iter: int = 200) -> float:
    """Inverse geodesic distance in metres on the WGS-84 ellipsoid.

    Raises NoConvergence for (near-)antipodal pairs where the lambda
    iteration does not settle.
    """
    f = WGS84_F
    L = math.radians(b.lon - a.lon)
    U1 = math.atan((1 - f) * math.tan(math.radians(a.lat)))
    U2 = math.atan((1 - f) * math.tan(math.radians(b.lat)))
    sinU1, cosU1 = math.sin(U1), math.cos(U1)
    sinU2, cosU2 = math.sin(U2), math.cos(U2)

    lam = L
    for _ in range(max_iter):
        sin_lam, cos_lam = math.sin(lam), math.cos(lam)
        sin_sigma = math.hypot(cosU2 * sin_lam, cosU1 * sinU2 - sinU1 * cosU2 * cos_lam)
        cos_sigma = sinU1 * sinU2 + cosU1 * cosU2 * cos_lam
        if sin_sigma == 0.0:
            if cos_sigma > 0:
                return 0.0  # coincident points
            raise NoConvergence(f"antipodal points {a} -> {b}")
        sigma = math.atan2(sin_sigma, cos_sigma)
        sin_alpha = cosU1 * cosU2 * sin_lam / sin_sigma
        cos2_alpha = 1 - sin_alpha ** 2
        # equatorial line: cos2_alpha == 0
        cos_2sm = cos_sigma - 2 * sinU1 * sinU2 / cos2_alpha if cos2_alpha != 0 else 0.0
        C = f / 16 * cos2_alpha * (4 + f * (4 - 3 * cos2_alpha))
        lam_prev = lam
        lam = L + (1 - C) * f * sin_alpha * (
            sigma + C * sin_sigma * (cos_2sm + C * cos_sigma * (-1 + 2 * cos_2sm ** 2)))
        if abs(lam - lam_prev) < tol:
            break
    else:
        raise NoConvergence(f"vincenty did not converge for {a} -> {b}")

    u2 = cos2_alpha * (WGS84_A ** 2 - WGS84_B ** 2) / WGS84_B ** 2
    A = 1 + u2 / 16384 * (4096 + u2 * (-768 + u2 * (320 - 175 * u2)))
    B = u2 / 1024 * (256 + u2 * (-128 + u2 * (74 - 47 * u2)))
    delta_sigma = B * sin_sigma * (cos_2sm + B / 4 * (
        cos_sigma * (-1 + 2 * cos_2sm ** 2)
        - B / 6 * cos_2sm * (-3 + 4 * sin_sigma ** 2) * (-3 + 4 * cos_2sm ** 2)))
    return WGS84_B * A * (sigma - delta_sigma)


def great_circle_distance(a: GeoCoordinate, b: GeoCoordinate, radius: float = MEAN_RADIUS) -> float:
    lat1, lat2 = math.radians(a.lat), math.radians(b.lat)
    dlat = lat2 - lat1
    dlon = math.radians(b.lon - a.lon)
    h = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2
    return 2 * radius * math.asin(min(1.0, math.sqrt(h)))


def distance_m(a: GeoCoordinate, b: GeoCoordinate) -> tuple[float, bool]:
    """Vincenty distance, or the spherical fallback; second item flags the fallback."""
    try:
        return vincenty_distance(a, b), False
    except NoConvergence:
        return great_circle_distance(a, b), True


def geo_latency(distance: float) -> float:
    """Propagation latency in ms for ``distance`` metres."""
    if distance < 0:
        raise ValueError("distance must be non-negative")
    return distance / PROPAGATION_SPEED * 1000.0


def latency_to_distance(latency_ms: float) -> float:
    """Metres covered in ``latency_ms`` at the propagation speed."""
    return latency_ms / 1000.0 * PROPAGATION_SPEED
