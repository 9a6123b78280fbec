"""Latency matrix assembly, completion and geolocation."""
from .completion import (
    CompletionResult,
    HoldoutReport,
    closed_form_C,
    complete,
    holdout_evaluate,
    ihtsvd_complete,
    pinv,
)
from .geodesy import GeoCoordinate, distance_m, geo_latency, great_circle_distance, vincenty_distance
from .geolocate import Geolocation, disc_geolocate
from .matrix import LatencyMatrix, RegressionCoeffs, ServerMeta, assemble_X, build_A, geo_matrix

__all__ = [
    "CompletionResult", "HoldoutReport", "closed_form_C", "complete", "holdout_evaluate",
    "ihtsvd_complete", "pinv", "GeoCoordinate", "distance_m", "geo_latency",
    "great_circle_distance", "vincenty_distance", "Geolocation", "disc_geolocate",
    "LatencyMatrix", "RegressionCoeffs", "ServerMeta", "assemble_X", "build_A", "geo_matrix",
]
