"""Exhaustive constrained search over (alpha, beta, gamma).

For a fixed gamma the test pairs split into an incentive set (cluster average
>= gamma) and a penalty set; within each, recommended counts depend on a single
threshold, so every (alpha, beta) cell is a sum of two cumulative counts. This
evaluates the full grid exactly without re-scanning the pairs per point.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from cbcf.errors import ConfigError
from cbcf.ipu import (ConfusionCounts, EvaluationReport, EvalInputs, ThresholdConfig,
                      align)

OBJECTIVES = ("f1", "recall", "precision")
MAX_THRESHOLD = 5.1


def grid_values(lo: float, hi: float, step: float) -> np.ndarray:
    """``lo, lo+step, ... <= hi`` rounded to 10 decimals so 0.1-steps land on
    their decimal values."""
    if step <= 0:
        raise ConfigError("grid step must be positive")
    if lo > hi:
        raise ConfigError("grid min exceeds max")
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return np.round(lo + step * np.arange(n), 10)


@dataclass
class GridSpec:
    alpha_range: tuple = (0.0, 5.0, 0.1)
    beta_range: tuple = (0.0, 5.0, 0.1)
    gamma_range: tuple = (0.0, 5.0, 0.1)
    objective: str = "f1"
    precision_floor: float | None = 0.0
    recall_floor: float | None = None

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.precision_floor is not None and self.recall_floor is not None:
            raise ConfigError("give a precision floor or a recall floor, not both")
        for name in ("alpha_range", "beta_range", "gamma_range"):
            lo, hi, step = getattr(self, name)
            if lo < 0 or hi > MAX_THRESHOLD + 1e-9:
                raise ConfigError(f"{name} must lie within [0, {MAX_THRESHOLD}]")
            grid_values(lo, hi, step)
            setattr(self, name, (float(lo), float(hi), float(step)))

    @property
    def alphas(self):
        return grid_values(*self.alpha_range)

    @property
    def betas(self):
        return grid_values(*self.beta_range)

    @property
    def gammas(self):
        return grid_values(*self.gamma_range)

    @classmethod
    def single(cls, alpha, beta, gamma, **kw) -> "GridSpec":
        return cls((alpha, alpha, 1.0), (beta, beta, 1.0), (gamma, gamma, 1.0), **kw)


def _ratios(tp, fp, fn):
    tp, fp, fn = (np.asarray(x, dtype=np.int64) for x in (tp, fp, fn))
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
        r = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), 0.0)
        f1 = np.where(tp > 0, 2 * tp / np.maximum(2 * tp + fp + fn, 1), 0.0)
    return p, r, f1


@dataclass
class SweepTable:
    """One row per evaluated grid point (only points with alpha >= beta)."""

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    feasible: np.ndarray

    COLUMNS = ("alpha", "beta", "gamma", "tp", "fp", "fn", "tn",
               "precision", "recall", "f1", "feasible")

    def __len__(self):
        return len(self.alpha)


@dataclass
class SweepResult:
    best: dict | None
    report: EvaluationReport | None
    feasible_found: bool
    evaluated: int
    feasible: int
    table: SweepTable = field(repr=False, default=None)
    frontier: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "best": self.best,
            "report": None if self.report is None else json.loads(self.report.to_json()),
            "feasible_found": self.feasible_found,
            "evaluated": self.evaluated,
            "feasible": self.feasible,
            "frontier": self.frontier,
        }


def _count_at_least(sorted_vals: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    return len(sorted_vals) - np.searchsorted(sorted_vals, thresholds, side="left")


def sweep_table(x: EvalInputs, grid: GridSpec, delta_pref: float = 4.0) -> SweepTable:
    alphas, betas, gammas = grid.alphas, grid.betas, grid.gammas
    good = x.r >= delta_pref
    n_good, n_bad = int(good.sum()), int((~good).sum())
    cb = np.nan_to_num(x.cbar, nan=-np.inf)
    A, B = np.meshgrid(alphas, betas, indexing="ij")
    valid = A >= B
    cols = {k: [] for k in SweepTable.COLUMNS[:7]}
    for g in gammas:
        inc = cb >= g
        hi_good = np.sort(x.r_hat[inc & good])
        hi_bad = np.sort(x.r_hat[inc & ~good])
        lo_good = np.sort(x.r_hat[~inc & good])
        lo_bad = np.sort(x.r_hat[~inc & ~good])
        tp = (_count_at_least(lo_good, alphas)[:, None]
              + _count_at_least(hi_good, betas)[None, :])
        fp = (_count_at_least(lo_bad, alphas)[:, None]
              + _count_at_least(hi_bad, betas)[None, :])
        cols["alpha"].append(A[valid])
        cols["beta"].append(B[valid])
        cols["gamma"].append(np.full(int(valid.sum()), g))
        cols["tp"].append(tp[valid])
        cols["fp"].append(fp[valid])
        cols["fn"].append(n_good - tp[valid])
        cols["tn"].append(n_bad - fp[valid])
    arr = {k: np.concatenate(v) if v else np.array([]) for k, v in cols.items()}
    p, r, f1 = _ratios(arr["tp"], arr["fp"], arr["fn"])
    if grid.recall_floor is not None:
        feas = r >= grid.recall_floor
    else:
        feas = p >= (grid.precision_floor or 0.0)
    return SweepTable(arr["alpha"], arr["beta"], arr["gamma"], arr["tp"], arr["fp"],
                      arr["fn"], arr["tn"], p, r, f1, feas)


def _select(t: SweepTable, rows: np.ndarray, key: np.ndarray) -> int:
    """Row maximising ``key``; ties -> higher precision, lower alpha, beta, gamma."""
    order = np.lexsort((t.gamma[rows], t.beta[rows], t.alpha[rows],
                        -t.precision[rows], -key[rows]))
    return int(rows[order[0]])


def sweep_inputs(x: EvalInputs, grid: GridSpec, delta_pref: float = 4.0) -> SweepResult:
    t = sweep_table(x, grid, delta_pref)
    if len(t) == 0:
        return SweepResult(None, None, False, 0, 0, t)
    feas = np.flatnonzero(t.feasible)
    if len(feas):
        k = _select(t, feas, getattr(t, grid.objective))
    else:
        # no feasible point: report the highest-precision point, flagged
        k = _select(t, np.arange(len(t)), t.precision)
    best = {"alpha": float(t.alpha[k]), "beta": float(t.beta[k]), "gamma": float(t.gamma[k])}
    counts = ConfusionCounts(int(t.tp[k]), int(t.fp[k]), int(t.fn[k]), int(t.tn[k]))
    cfg = ThresholdConfig(best["alpha"], best["beta"], best["gamma"], delta_pref,
                          grid.precision_floor or 0.0, grid.recall_floor)
    report = EvaluationReport.from_counts(counts, asdict(cfg), x.skipped)
    return SweepResult(best, report, bool(len(feas)), len(t), int(len(feas)), t)


def sweep(test, preds, averages, model, grid: GridSpec, delta_pref: float = 4.0) -> SweepResult:
    """Best (alpha, beta, gamma) on ``grid`` for the IPU rule."""
    return sweep_inputs(align(test, preds, averages, model), grid, delta_pref)


@dataclass
class BaselineTable:
    threshold: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray

    def best_f1(self) -> int:
        order = np.lexsort((self.threshold, -self.precision, -self.f1))
        return int(order[0])


def baseline_sweep(x: EvalInputs, thresholds, delta_pref: float = 4.0) -> BaselineTable:
    """Baseline rule (recommend iff prediction >= t) at every threshold."""
    th = np.asarray(thresholds, dtype=float)
    good = x.r >= delta_pref
    tp = _count_at_least(np.sort(x.r_hat[good]), th)
    fp = _count_at_least(np.sort(x.r_hat[~good]), th)
    fn = int(good.sum()) - tp
    tn = int((~good).sum()) - fp
    p, r, f1 = _ratios(tp, fp, fn)
    return BaselineTable(th, tp, fp, fn, tn, p, r, f1)


def precision_frontier(table, precision_levels, tol: float = 0.005) -> list[dict]:
    """Best recall and F1 among points whose precision is within ``tol`` of
    each level. ``table`` is a SweepTable or BaselineTable."""
    rows = []
    for level in precision_levels:
        hit = np.abs(table.precision - level) <= tol
        if not hit.any():
            rows.append({"precision": float(level), "recall": None, "f1": None,
                         "points": 0, "empty": True})
            continue
        rows.append({"precision": float(level),
                     "recall": float(table.recall[hit].max()),
                     "f1": float(table.f1[hit].max()),
                     "points": int(hit.sum()), "empty": False})
    return rows


def write_sweep_csv(table: SweepTable, path, feasible_only: bool = False) -> None:
    rows = np.flatnonzero(table.feasible) if feasible_only else np.arange(len(table))
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SweepTable.COLUMNS)
        for k in rows:
            w.writerow([f"{table.alpha[k]:g}", f"{table.beta[k]:g}", f"{table.gamma[k]:g}",
                        int(table.tp[k]), int(table.fp[k]), int(table.fn[k]), int(table.tn[k]),
                        f"{table.precision[k]:.6f}", f"{table.recall[k]:.6f}",
                        f"{table.f1[k]:.6f}", int(bool(table.feasible[k]))])


def write_baseline_csv(table: BaselineTable, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "tp", "fp", "fn", "tn", "precision", "recall", "f1"])
        for k in range(len(table.threshold)):
            w.writerow([f"{table.threshold[k]:g}", int(table.tp[k]), int(table.fp[k]),
                        int(table.fn[k]), int(table.tn[k]), f"{table.precision[k]:.6f}",
                        f"{table.recall[k]:.6f}", f"{table.f1[k]:.6f}"])
