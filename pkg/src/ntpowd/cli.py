"""Command line front end.

Subcommands::

    ntpowd classify TRACE... --servers servers.csv --out DIR
    ntpowd complete INPUT --servers servers.csv [--a-rtt a_rtt.csv] --out DIR
    ntpowd geolocate INPUT --servers servers.csv --radius-km 50 --out DIR
    ntpowd simulate SCENARIO.json --seed 1 --out DIR
    ntpowd evaluate COMPLETED.csv --truth truth.json [--out DIR]

Every option may also come from a JSON file given with ``--config``; keys
are the option names with underscores (``max_iter``, ``radius_km`` ...) and
flags given on the command line win. Exit status is 0 on success, 1 for
usage or configuration errors and 2 for bad input data.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import ipaddress
import json
import logging
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .capture import read_capture, write_jsonl, write_pcap
from .codec import decode_packet
from .errors import ConfigError, DataError, NoQualifyingSamples
from .estimator.completion import METHODS, complete, holdout_evaluate
from .estimator.geolocate import disc_geolocate
from .estimator.io import (
    fmt,
    read_a_rtt_csv,
    read_matrix_csv,
    read_matrix_json,
    read_min_owd_csv,
    read_servers_csv,
    write_cdf_csv,
    write_holdout_csv,
    write_matrix_csv,
    write_matrix_json,
    write_min_owd_csv,
    write_servers_csv,
)
from .estimator.matrix import SYMMETRIZE_MODES, LatencyMatrix, assemble_X, build_A, load_exclusions
from .sessions import T1_SOURCES, build_sessions, read_sessions_jsonl, write_sessions_jsonl
from .synth import expand_profiles, generate_geometry, simulate_trace
from .tiers import ClassifierConfig, Tier, assign_tiers, min_owd, tier_counts

log = logging.getLogger("ntpowd")


class UsageError(ConfigError):
    pass


@dataclass
class PipelineConfig:
    servers: Optional[str] = None
    server: list = field(default_factory=list)  # extra server addresses for classify
    a_rtt: Optional[str] = None
    exclude: Optional[str] = None
    rank: int = 4
    tol: float = 1e-9
    max_iter: int = 10_000
    holdout: float = 0.1
    seed: int = 0
    radius_km: Optional[float] = None
    min_servers: int = 4
    tier_floor: int = 3
    symmetrize: str = "none"
    squared: bool = False
    method: str = "ihtsvd"
    tier_boundary_ms: float = 1000.0
    sigma_k: float = 1.0
    t1_source: str = "auto"
    gtrtt_scope: str = "session"
    out: str = "."
    format: str = "pcap"
    truth: Optional[str] = None

    @classmethod
    def keys(cls) -> set:
        return {f.name for f in dataclasses.fields(cls)}

    def validate(self) -> None:
        for name in ("servers", "a_rtt", "exclude", "truth"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{name}: file not found: {path}")
        checks = [
            (self.rank >= 1, "rank must be >= 1"),
            (self.tol > 0, "tol must be positive"),
            (self.max_iter >= 1, "max_iter must be >= 1"),
            (0 <= self.holdout < 1, "holdout must be in [0, 1)"),
            (self.seed >= 0, "seed must be >= 0"),
            (self.radius_km is None or self.radius_km > 0, "radius_km must be positive"),
            (self.min_servers >= 1, "min_servers must be >= 1"),
            (self.tier_floor in (0, 1, 2, 3), "tier_floor must be 0..3"),
            (self.symmetrize in SYMMETRIZE_MODES, f"symmetrize must be one of {SYMMETRIZE_MODES}"),
            (self.method in METHODS, f"method must be one of {METHODS}"),
            (self.tier_boundary_ms > 0, "tier_boundary_ms must be positive"),
            (self.sigma_k > 0, "sigma_k must be positive"),
            (self.t1_source in T1_SOURCES, f"t1_source must be one of {T1_SOURCES}"),
            (self.gtrtt_scope in ("session", "any"), "gtrtt_scope must be 'session' or 'any'"),
            (self.format in ("pcap", "jsonl"), "format must be pcap or jsonl"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            for addr in self.server:
                ipaddress.ip_address(addr)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def classifier(self) -> ClassifierConfig:
        return ClassifierConfig(tier_boundary_ms=self.tier_boundary_ms, sigma_k=self.sigma_k)


def load_config(path: Optional[str], overrides: dict) -> PipelineConfig:
    values: dict = {}
    if path:
        try:
            values = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        unknown = set(values) - PipelineConfig.keys()
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = PipelineConfig(**values)
        cfg.rank, cfg.max_iter, cfg.seed = int(cfg.rank), int(cfg.max_iter), int(cfg.seed)
        cfg.min_servers, cfg.tier_floor = int(cfg.min_servers), int(cfg.tier_floor)
        cfg.tol, cfg.holdout = float(cfg.tol), float(cfg.holdout)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad configuration value: {exc}") from None
    cfg.validate()
    return cfg


def _out_dir(cfg: PipelineConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _servers(cfg: PipelineConfig, require_coords: bool = False):
    if cfg.servers is None:
        raise ConfigError("--servers is required")
    servers = read_servers_csv(cfg.servers, require_coords=require_coords)
    if not servers:
        raise ConfigError(f"{cfg.servers}: no servers listed")
    return servers


def _addr_key(a):
    return (a.version, int(a))


# ---------------------------------------------------------------------------
# classify

def cmd_classify(traces, cfg: PipelineConfig) -> dict:
    addrs = [s.address for s in read_servers_csv(cfg.servers)] if cfg.servers else []
    addrs += [ipaddress.ip_address(a) for a in cfg.server]
    if not addrs:
        raise ConfigError("no servers given: use --servers or --server")
    if not traces:
        raise ConfigError("no trace files given")

    packets = []
    for path in traces:
        if not Path(path).is_file():
            raise DataError(f"trace not readable: {path}")
        reader = read_capture(path)
        bad = 0
        for rec in reader:
            try:
                packets.append(decode_packet(rec.payload, rec))
            except DataError:
                bad += 1
        log.info("%s: %d records, %d skipped %s, %d undecodable", path, reader.total, reader.skipped,
                 dict(sorted(reader.skip_reasons.items())), bad)
    packets.sort(key=lambda p: p.capture_ns)

    sessions = build_sessions(packets, addrs, t1_source=cfg.t1_source, gtrtt_scope=cfg.gtrtt_scope)
    sessions.sort(key=lambda s: (_addr_key(s.client), _addr_key(s.server)))
    conf = cfg.classifier()
    labelled = [assign_tiers(s, conf) for s in sessions]

    out = _out_dir(cfg)
    write_sessions_jsonl(out / "labeled.jsonl", labelled)

    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client", "server", "polling", "samples", "tier0", "tier1", "tier2", "tier3",
                    "min_c2s_ms", "min_s2c_ms", "alpha_c2s", "alpha_s2c"])
        for s in labelled:
            counts = tier_counts([s])
            try:
                mo = min_owd([s], cfg.tier_floor)[(s.client, s.server)]
                mins = (mo.c2s_ms, mo.s2c_ms)
            except NoQualifyingSamples:
                mins = (None, None)
            w.writerow([str(s.client), str(s.server), s.kind, len(s.samples),
                        *(counts[t] for t in range(4)), fmt(mins[0]), fmt(mins[1]),
                        fmt(s.alpha_c2s), fmt(s.alpha_s2c)])

    # one row per tier, one column per server, like a per-tier measurement table
    server_cols = sorted(set(addrs), key=_addr_key)
    with open(out / "tiers.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tier", *map(str, server_cols), "total"])
        totals = tier_counts(labelled)
        for t in Tier:
            row = [tier_counts([s for s in labelled if s.server == a])[int(t)] for a in server_cols]
            w.writerow([int(t), *row, totals[int(t)]])

    try:
        write_min_owd_csv(out / "min_owd.csv", min_owd(labelled, cfg.tier_floor))
    except NoQualifyingSamples:
        write_min_owd_csv(out / "min_owd.csv", {})

    totals = tier_counts(labelled)
    for t in Tier:
        print(f"tier{int(t)}\t{totals[int(t)]}")
    print(f"total\t{sum(totals.values())}")
    return totals


# ---------------------------------------------------------------------------
# complete / evaluate

def _load_min_owds(path: Path, cfg: PipelineConfig) -> dict:
    if path.suffix == ".jsonl":
        sessions = read_sessions_jsonl(path)
        return min_owd(sessions, cfg.tier_floor)
    return read_min_owd_csv(path)


def _load_X(input_path, cfg: PipelineConfig) -> tuple[LatencyMatrix, dict]:
    path = Path(input_path)
    if not path.is_file():
        raise DataError(f"input not readable: {path}")
    if path.suffix == ".json":
        return read_matrix_json(path), {}
    servers = _servers(cfg, require_coords=True)
    a_rtt = read_a_rtt_csv(cfg.a_rtt, servers) if cfg.a_rtt else None
    A, coeffs = build_A(servers, a_rtt)
    exclude = load_exclusions(Path(cfg.exclude).read_text(encoding="utf-8").splitlines()) if cfg.exclude else ()
    X = assemble_X(A, _load_min_owds(path, cfg), servers, min_servers=cfg.min_servers,
                   exclude=exclude, symmetrize=cfg.symmetrize)
    info = {"regression": {"beta0": coeffs.beta0, "beta1": coeffs.beta1, "n_points": coeffs.n_points}}
    return X, info


def cmd_complete(input_path, cfg: PipelineConfig) -> dict:
    X, info = _load_X(input_path, cfg)
    out = _out_dir(cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        res = complete(X, cfg.method, cfg.rank, cfg.tol, cfg.max_iter, cfg.squared)
        report = holdout_evaluate(X, cfg.holdout, cfg.seed, cfg.method, rank=cfg.rank, tol=cfg.tol,
                                  max_iter=cfg.max_iter, squared=cfg.squared)

    negative = int((res.matrix < 0).sum())
    if negative:
        log.warning("%d predicted entries are negative; the rank-%d model fits the data poorly",
                    negative, cfg.rank)
    write_matrix_csv(out / "completed.csv", X.ids, res.matrix)
    completed = {"m": X.m, "n": X.n, "ids": [str(i) for i in X.ids],
                 "entries": res.matrix.tolist(), "mask": X.mask.astype(int).tolist()}
    (out / "completed.json").write_text(json.dumps(completed, sort_keys=True) + "\n", encoding="utf-8")
    write_holdout_csv(out / "holdout_errors.csv", report, X.ids)
    write_cdf_csv(out / "cdf.csv", report.cdf())
    summary = {
        "m": X.m,
        "n": X.n,
        "observed_fraction": float(X.offdiag_observed().sum() / max(X.size * (X.size - 1), 1)),
        "method": cfg.method,
        "rank": cfg.rank,
        "squared": cfg.squared,
        "tol": cfg.tol,
        "max_iter": cfg.max_iter,
        "completion": {"iterations": res.iterations, "converged": res.converged,
                       "last_change": res.last_change, "negative_predictions": negative},
        "holdout": {"fraction": cfg.holdout, "seed": cfg.seed, "entries": len(report.entries),
                    "retries": report.retries, "iterations": report.iterations,
                    "converged": report.converged,
                    "mean_relative_error": None if not report.entries else report.mean_error,
                    "median_relative_error": None if not report.entries else report.median_error},
        **info,
    }
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if report.entries:
        print(f"holdout entries\t{len(report.entries)}")
        print(f"mean relative error\t{report.mean_error:.6g}")
        print(f"median relative error\t{report.median_error:.6g}")
    print(f"completion iterations\t{res.iterations}\tconverged\t{res.converged}")
    return summary


def cmd_evaluate(completed_path, cfg: PipelineConfig) -> dict:
    """Score a completed matrix against a ground-truth matrix on the entries it had to predict."""
    if cfg.truth is None:
        raise ConfigError("--truth is required")
    if not Path(completed_path).is_file():
        raise DataError(f"input not readable: {completed_path}")
    truth = read_matrix_json(cfg.truth)
    if str(completed_path).endswith(".json"):
        obj = json.loads(Path(completed_path).read_text(encoding="utf-8"))
        ids, vals = obj["ids"], np.array(obj["entries"], dtype=float)
    else:
        ids, vals = read_matrix_csv(completed_path)
    pos = {k: i for i, k in enumerate(ids)}
    rows = []
    for i, a in enumerate(truth.ids):
        for j, b in enumerate(truth.ids):
            if i == j or not truth.mask[i, j] or a not in pos or b not in pos:
                continue
            t, p = truth.entries[i, j], vals[pos[a], pos[b]]
            if t > 0 and np.isfinite(p):
                rows.append((a, b, t, p, abs(p - t) / t))
    if not rows:
        raise DataError("no comparable entries between prediction and truth")
    errs = np.array([r[4] for r in rows])
    if cfg.out:
        out = _out_dir(cfg)
        with open(out / "evaluation.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "col", "true_ms", "predicted_ms", "relative_error"])
            for r in rows:
                w.writerow([r[0], r[1], fmt(r[2]), fmt(r[3]), fmt(r[4])])
    summary = {"entries": len(rows), "mean_relative_error": float(errs.mean()),
               "median_relative_error": float(np.median(errs)), "max_relative_error": float(errs.max())}
    for k, v in summary.items():
        print(f"{k}\t{v:.6g}" if isinstance(v, float) else f"{k}\t{v}")
    return summary


# ---------------------------------------------------------------------------
# geolocate

def cmd_geolocate(input_path, cfg: PipelineConfig) -> list:
    if cfg.radius_km is None:
        raise ConfigError("--radius-km is required")
    path = Path(input_path)
    if not path.is_file():
        raise DataError(f"input not readable: {path}")
    servers = _servers(cfg)
    result = disc_geolocate(_load_min_owds(path, cfg), servers, cfg.radius_km)
    out = _out_dir(cfg)
    with open(out / "locations.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client", "lat", "lon", "server", "distance_km", "bound_km", "reason"])
        for g in result:
            c = g.coordinate
            w.writerow([str(g.client), fmt(c.lat if c else None), fmt(c.lon if c else None),
                        g.server_id or "", fmt(g.distance_km), fmt(g.bound_km), g.reason])
    located = sum(g.located for g in result)
    print(f"located\t{located}\nunlocated\t{len(result) - located}")
    return result


# ---------------------------------------------------------------------------
# simulate

def cmd_simulate(scenario_path, cfg: PipelineConfig) -> dict:
    """Write a trace and its ground truth from a JSON scenario.

    The scenario holds ``profiles`` (a list of client profiles; ``count``
    replicates one with consecutive client addresses), an optional ``epoch``
    in unix seconds and an optional ``geometry`` object with the arguments
    of :func:`ntpowd.synth.generate_geometry`.
    """
    try:
        scenario = json.loads(Path(scenario_path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"scenario not found: {scenario_path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{scenario_path}: invalid JSON: {exc}") from None
    if not isinstance(scenario, dict):
        raise ConfigError(f"{scenario_path}: expected a JSON object")
    try:
        profiles = expand_profiles(scenario.get("profiles", []))
        if not profiles and "geometry" not in scenario:
            raise ValueError("scenario has no profiles")
        kwargs = {"epoch": int(scenario["epoch"])} if "epoch" in scenario else {}
        trace = simulate_trace(profiles, cfg.seed, **kwargs) if profiles else None
        geo = None
        if "geometry" in scenario:
            g = dict(scenario["geometry"])
            g.setdefault("seed", cfg.seed)
            geo = generate_geometry(**g)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{scenario_path}: {exc}") from None

    out = _out_dir(cfg)
    summary: dict = {}
    if trace is not None:
        if cfg.format == "pcap":
            write_pcap(out / "trace.pcap", trace.records)
        else:
            write_jsonl(out / "trace.jsonl", trace.records)
        with open(out / "truth.jsonl", "w", encoding="utf-8") as fh:
            for row in trace.truth:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        summary["packets"] = len(trace.records)
        print(f"packets\t{len(trace.records)}")
    if geo is not None:
        write_matrix_json(out / "geometry.json", geo.observed)
        full = LatencyMatrix(geo.m, geo.n, geo.observed.ids, geo.latency, np.ones_like(geo.mask))
        write_matrix_json(out / "geometry_truth.json", full)
        write_servers_csv(out / "servers.csv", geo.servers)
        summary["geometry"] = {"m": geo.m, "n": geo.n, "rank_deficient": geo.rank_deficient}
        print(f"geometry\t{geo.m} servers\t{geo.n} clients\trank_deficient\t{geo.rank_deficient}")
    return summary


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with option values")
    common.add_argument("--out", help="output directory (default: .)")
    common.add_argument("--seed", type=int)
    common.add_argument("--json-errors", action="store_true", help="report errors as JSON on stderr")
    common.add_argument("-v", "--verbose", action="count", default=0)

    servers = argparse.ArgumentParser(add_help=False)
    servers.add_argument("--servers", help="CSV with id,address,lat,lon")
    servers.add_argument("--tier-floor", type=int)

    est = argparse.ArgumentParser(add_help=False)
    est.add_argument("--a-rtt", help="server-to-server RTT matrix CSV")
    est.add_argument("--exclude", help="file of addresses / prefixes to leave out")
    est.add_argument("--rank", type=int)
    est.add_argument("--tol", type=float)
    est.add_argument("--max-iter", type=int)
    est.add_argument("--holdout", type=float)
    est.add_argument("--min-servers", type=int)
    est.add_argument("--symmetrize", choices=SYMMETRIZE_MODES)
    est.add_argument("--squared", action="store_true", default=None,
                     help="complete element-wise squared latencies")
    est.add_argument("--method", choices=METHODS)

    p = _Parser(prog="ntpowd", description="One-way delay estimation from server-side NTP captures.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("classify", parents=[common, servers], help="label OWD samples with precision tiers")
    c.add_argument("traces", nargs="*")
    c.add_argument("--server", action="append", help="server address (repeatable)")
    c.add_argument("--tier-boundary-ms", type=float)
    c.add_argument("--sigma-k", type=float)
    c.add_argument("--t1-source", choices=T1_SOURCES)
    c.add_argument("--gtrtt-scope", choices=("session", "any"))

    c = sub.add_parser("complete", parents=[common, servers, est], help="complete the latency matrix")
    c.add_argument("input", help="labeled JSONL, min-OWD CSV or matrix JSON")

    c = sub.add_parser("geolocate", parents=[common, servers], help="place clients near servers")
    c.add_argument("input", help="labeled JSONL or min-OWD CSV")
    c.add_argument("--radius-km", type=float)

    c = sub.add_parser("simulate", parents=[common], help="generate a synthetic trace or geometry")
    c.add_argument("scenario", help="scenario JSON")
    c.add_argument("--format", choices=("pcap", "jsonl"))

    c = sub.add_parser("evaluate", parents=[common], help="score a completed matrix against ground truth")
    c.add_argument("input", help="completed matrix CSV or JSON")
    c.add_argument("--truth", help="ground-truth matrix JSON")
    return p


COMMANDS = {
    "classify": (cmd_classify, "traces"),
    "complete": (cmd_complete, "input"),
    "geolocate": (cmd_geolocate, "input"),
    "simulate": (cmd_simulate, "scenario"),
    "evaluate": (cmd_evaluate, "input"),
}


def _report(exc: Exception, code: int, as_json: bool) -> int:
    if as_json:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    else:
        sys.stderr.write(f"ntpowd: error: {type(exc).__name__}: {exc}\n")
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--json-errors" in argv
    try:
        ns = build_parser().parse_args(argv)
    except UsageError as exc:
        return _report(exc, 1, as_json)
    logging.basicConfig(level=logging.WARNING - 10 * min(ns.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    fn, target = COMMANDS[ns.command]
    overrides = {k: v for k, v in vars(ns).items()
                 if k in PipelineConfig.keys() and k not in ("traces", "input", "scenario")}
    try:
        cfg = load_config(ns.config, overrides)
        fn(getattr(ns, target), cfg)
    except ConfigError as exc:
        return _report(exc, 1, as_json)
    except (DataError, OSError, UnicodeDecodeError) as exc:
        return _report(exc, 2, as_json)
    return 0


if __name__ == "__main__":
    sys.exit(main())
