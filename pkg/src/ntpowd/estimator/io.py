"""CSV/JSON readers and writers for matrices, server metadata and reports."""
from __future__ import annotations

import csv
import ipaddress
import json
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import DataError
from ..tiers import MinOwd
from .geodesy import GeoCoordinate
from .matrix import LatencyMatrix, ServerMeta


def fmt(v: Optional[float]) -> str:
    """Shortest round-tripping text for a float; empty for missing."""
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return repr(float(v))


def read_servers_csv(path, require_coords: bool = False) -> list[ServerMeta]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"id", "address"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            lat, lon = (row.get("lat") or "").strip(), (row.get("lon") or "").strip()
            coord = GeoCoordinate(float(lat), float(lon)) if lat and lon else None
            if require_coords and coord is None:
                raise DataError(f"{path}: server {row['id']} has no coordinates")
            out.append(ServerMeta(row["id"].strip(), ipaddress.ip_address(row["address"].strip()), coord))
    if len({s.id for s in out}) != len(out):
        raise DataError(f"{path}: duplicate server ids")
    return out


def write_servers_csv(path, servers) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "address", "lat", "lon"])
        for s in servers:
            c = s.coordinate
            w.writerow([s.id, str(s.address), fmt(c.lat if c else None), fmt(c.lon if c else None)])


def write_matrix_csv(path, ids, values: np.ndarray, mask: Optional[np.ndarray] = None) -> None:
    """Square matrix with a header row of ids; blank cells are unobserved."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *ids])
        for i, rid in enumerate(ids):
            row = [fmt(v) if mask is None or mask[i, j] else "" for j, v in enumerate(values[i])]
            w.writerow([rid, *row])


def read_matrix_csv(path) -> tuple[list, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty matrix file")
    ids = rows[0][1:]
    vals = np.full((len(ids), len(ids)), np.nan)
    if len(rows) - 1 != len(ids):
        raise DataError(f"{path}: expected {len(ids)} rows, got {len(rows) - 1}")
    for i, row in enumerate(rows[1:]):
        if row[0] != ids[i]:
            raise DataError(f"{path}: row {i} id {row[0]!r} does not match header {ids[i]!r}")
        for j, cell in enumerate(row[1:]):
            if cell.strip():
                vals[i, j] = float(cell)
    return ids, vals


def read_a_rtt_csv(path, servers) -> np.ndarray:
    """A_rtt in the server order of ``servers``; pairs missing from the file are NaN."""
    ids, vals = read_matrix_csv(path)
    pos = {sid: k for k, sid in enumerate(ids)}
    m = len(servers)
    out = np.full((m, m), np.nan)
    for i, si in enumerate(servers):
        for j, sj in enumerate(servers):
            if si.id in pos and sj.id in pos:
                out[i, j] = vals[pos[si.id], pos[sj.id]]
    return out


def write_matrix_json(path, X: LatencyMatrix) -> None:
    Path(path).write_text(json.dumps(X.to_json(), sort_keys=True) + "\n", encoding="utf-8")


def read_matrix_json(path) -> LatencyMatrix:
    return LatencyMatrix.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def write_min_owd_csv(path, min_owds) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client", "server", "min_c2s_ms", "min_s2c_ms"])
        for (client, server), mo in sorted(min_owds.items(), key=lambda kv: (str(kv[0][0]), str(kv[0][1]))):
            w.writerow([str(client), str(server), fmt(mo.c2s_ms), fmt(mo.s2c_ms)])


def read_min_owd_csv(path) -> dict:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            c2s = row.get("min_c2s_ms", "").strip()
            s2c = row.get("min_s2c_ms", "").strip()
            out[(ipaddress.ip_address(row["client"]), ipaddress.ip_address(row["server"]))] = MinOwd(
                float(c2s) if c2s else None, float(s2c) if s2c else None)
    return out


def write_cdf_csv(path, cdf) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["error", "cumulative_fraction"])
        for err, frac in cdf:
            w.writerow([fmt(err), fmt(frac)])


def write_holdout_csv(path, report, ids) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "true_ms", "predicted_ms", "relative_error"])
        for i, j, t, p, e in report.entries:
            w.writerow([ids[i], ids[j], fmt(t), fmt(p), fmt(e)])
