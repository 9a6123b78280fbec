"""Low-rank completion of the latency matrix and hold-out evaluation."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import (
    DegenerateAfterHoldout,
    MaskDegenerate,
    NonFinite,
    RankDeficientWarning,
)
from .matrix import LatencyMatrix

log = logging.getLogger(__name__)

PINV_RCOND = 1e-10
METHODS = ("ihtsvd", "closed-form")


@dataclass
class CompletionResult:
    matrix: np.ndarray  # observed entries restored
    iterations: int = 0
    converged: bool = True
    last_change: float = 0.0
    truncated: Optional[np.ndarray] = None  # last rank-k estimate


def truncate_svd(Z: np.ndarray, k: int) -> np.ndarray:
    U, s, Vt = np.linalg.svd(Z, full_matrices=False)
    return (U[:, :k] * s[:k]) @ Vt[:k]


def check_mask(mask: np.ndarray, min_per_line: int = 1) -> None:
    """Every row and column needs ``min_per_line`` observed off-diagonal entries."""
    off = mask & ~np.eye(len(mask), dtype=bool)
    if off.sum(axis=0).min(initial=min_per_line) < min_per_line or off.sum(axis=1).min(initial=min_per_line) < min_per_line:
        raise MaskDegenerate(f"some row or column has fewer than {min_per_line} observed entries")


def ihtsvd_complete(
    values: np.ndarray,
    mask: np.ndarray,
    rank: int = 4,
    tol: float = 1e-9,
    max_iter: int = 10_000,
    init: Optional[float] = None,
) -> CompletionResult:
    """Iterative hard-thresholded SVD.

    Missing entries start at the mean of the observed off-diagonal entries
    (or ``init``). Each step truncates the SVD of the estimate to ``rank``
    and writes the observed entries back; iteration stops once the relative
    Frobenius change of the estimate drops below ``tol``.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    values = np.asarray(values, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    check_mask(mask)
    observed = np.where(mask, values, 0.0)
    if not np.isfinite(observed).all():
        raise NonFinite("observed entries must be finite")
    if init is None:
        off = mask & ~np.eye(len(mask), dtype=bool)
        init = float(values[off].mean()) if off.any() else 0.0
    est = np.where(mask, observed, init)
    Z = est
    change = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        Z = truncate_svd(est, rank)
        new = np.where(mask, observed, Z)
        if not np.isfinite(new).all():
            raise NonFinite(f"estimate blew up at iteration {it}")
        denom = np.linalg.norm(est)
        change = np.linalg.norm(new - est) / denom if denom > 0 else np.linalg.norm(new - est)
        est = new
        if change < tol:
            break
    converged = bool(change < tol)
    if not converged:
        log.info("ihtsvd stopped at max_iter=%d with relative change %.3g", max_iter, change)
    return CompletionResult(est, it, converged, float(change), Z)


def pinv(A: np.ndarray, rcond: float = PINV_RCOND) -> tuple[np.ndarray, int]:
    """Moore-Penrose pseudo-inverse via SVD; returns (A_pinv, effective rank)."""
    U, s, Vt = np.linalg.svd(np.asarray(A, dtype=float), full_matrices=False)
    keep = s > rcond * (s[0] if s.size else 0.0)
    inv = (Vt[keep].T / s[keep]) @ U[:, keep].T
    return inv, int(keep.sum())


def closed_form_C(A: np.ndarray, B: np.ndarray, B_lower: Optional[np.ndarray] = None,
                  rank: int = 4, rcond: float = PINV_RCOND) -> np.ndarray:
    """Client block of a rank-consistent matrix from its server rows/columns.

    ``B`` is the m x n server-to-client block and ``B_lower`` the n x m
    client-to-server block (defaults to ``B.T``); the result is
    ``B_lower @ pinv(A) @ B``.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    B_lower = B.T if B_lower is None else np.asarray(B_lower, dtype=float)
    if np.isnan(A).any() or np.isnan(B).any() or np.isnan(B_lower).any():
        raise MaskDegenerate("closed form needs fully observed A and B blocks")
    A_inv, eff = pinv(A, rcond)
    if eff < rank:
        warnings.warn(f"server block has effective rank {eff} < {rank}", RankDeficientWarning, stacklevel=2)
    return B_lower @ A_inv @ B


def complete(X: LatencyMatrix, method: str = "ihtsvd", rank: int = 4, tol: float = 1e-9,
             max_iter: int = 10_000, squared: bool = False) -> CompletionResult:
    """Fill every unobserved entry of ``X``.

    With ``squared`` the element-wise squares are completed and the square
    root taken afterwards; squared planar distances are exactly rank 4.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    vals = np.where(X.mask, X.entries, 0.0)
    if squared:
        vals = vals ** 2
    if method == "ihtsvd":
        res = ihtsvd_complete(vals, X.mask, rank, tol, max_iter)
    else:
        m = X.m
        if not X.mask[:m, :].all() or not X.mask[:, :m].all():
            raise MaskDegenerate("closed form needs fully observed A and B blocks")
        out = vals.copy()
        C = closed_form_C(vals[:m, :m], vals[:m, m:], vals[m:, :m], rank=rank)
        cmask = X.mask[m:, m:]
        out[m:, m:] = np.where(cmask, vals[m:, m:], C)
        res = CompletionResult(out, 1, True, 0.0, None)
    if squared:
        res.matrix = np.sqrt(np.clip(res.matrix, 0.0, None))
        res.matrix[X.mask] = X.entries[X.mask]
    return res


@dataclass
class HoldoutReport:
    entries: list = field(default_factory=list)  # (row, col, true, predicted, rel_error)
    iterations: int = 0
    converged: bool = True
    retries: int = 0

    @property
    def errors(self) -> np.ndarray:
        return np.array([e[4] for e in self.entries], dtype=float)

    @property
    def mean_error(self) -> float:
        return float(self.errors.mean()) if self.entries else float("nan")

    @property
    def median_error(self) -> float:
        return float(np.median(self.errors)) if self.entries else float("nan")

    def cdf(self) -> list[tuple[float, float]]:
        errs = np.sort(self.errors)
        n = len(errs)
        return [(float(e), (i + 1) / n) for i, e in enumerate(errs)]


def holdout_candidates(X: LatencyMatrix, method: str) -> np.ndarray:
    """Observed, positive, off-diagonal entries outside the server block.

    The closed form needs complete A and B blocks, so it can only be scored
    on observed client-client entries.
    """
    cand = X.offdiag_observed().copy()
    cand[: X.m, : X.m] = False
    if method == "closed-form":
        cand[: X.m, :] = False
        cand[:, : X.m] = False
    vals = np.where(X.mask, X.entries, 0.0)
    return np.argwhere(cand & (vals > 0))


def holdout_evaluate(
    X: LatencyMatrix,
    holdout_fraction: float,
    seed: int,
    method: str = "ihtsvd",
    *,
    rank: int = 4,
    tol: float = 1e-9,
    max_iter: int = 10_000,
    squared: bool = False,
    min_per_line: Optional[int] = None,
    max_retries: int = 200,
) -> HoldoutReport:
    """Hide a random subset of observed entries, complete, and score them.

    A draw is rejected and redrawn (up to ``max_retries`` times) when it
    leaves some row or column with fewer than ``min_per_line`` observed
    off-diagonal entries; the default is ``rank``, below which the hidden
    entries of that line are not determined by a rank-``rank`` model.
    """
    if not 0.0 <= holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must be in [0, 1)")
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    cand = holdout_candidates(X, method)
    n_hold = int(round(holdout_fraction * len(cand)))
    if n_hold == 0:
        return HoldoutReport()
    need = rank if min_per_line is None else min_per_line
    rng = np.random.default_rng(seed)
    for attempt in range(max_retries + 1):
        pick = cand[np.sort(rng.choice(len(cand), size=n_hold, replace=False))]
        mask = X.mask.copy()
        mask[pick[:, 0], pick[:, 1]] = False
        try:
            check_mask(mask, need if method == "ihtsvd" else 1)
        except MaskDegenerate:
            continue
        break
    else:
        raise DegenerateAfterHoldout(f"no admissible hold-out set after {max_retries} retries")

    hidden = X.copy()
    hidden.mask = mask
    hidden.entries[~mask] = np.nan
    res = complete(hidden, method, rank, tol, max_iter, squared)
    report = HoldoutReport(iterations=res.iterations, converged=res.converged, retries=attempt)
    for i, j in pick:
        truth = float(X.entries[i, j])
        pred = float(res.matrix[i, j])
        report.entries.append((int(i), int(j), truth, pred, abs(pred - truth) / truth))
    return report
