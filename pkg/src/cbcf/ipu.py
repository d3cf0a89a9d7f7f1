"""Incentive/penalty decision rule, per-cluster item averages and
confusion-count metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field

import numpy as np

from cbcf.dataset import RatingsDataset
from cbcf.errors import ConfigError, DataError

TP, FP, FN, TN = "tp", "fp", "fn", "tn"
RECOMMEND, DROP = "recommend", "drop"


@dataclass(frozen=True)
class ThresholdConfig:
    """``alpha``: bar for penalised items; ``beta``: bar for incentivised
    items; ``gamma``: cluster-average gate; ``delta_pref``: true-rating cutoff
    for a satisfied user."""

    alpha: float
    beta: float
    gamma: float
    delta_pref: float = 4.0
    delta_precision: float = 0.0
    delta_recall: float | None = None

    def __post_init__(self):
        if self.alpha < self.beta:
            raise ConfigError(f"alpha ({self.alpha}) must be >= beta ({self.beta})")
        if min(self.alpha, self.beta, self.gamma, self.delta_pref) < 0:
            raise ConfigError("thresholds must be non-negative")


@dataclass(frozen=True)
class ClusterItemAverages:
    """``table[c, i]`` is the mean training rating of item ``i`` among
    cluster ``c`` (NaN when nobody in ``c`` rated it)."""

    table: np.ndarray
    counts: np.ndarray

    def get(self, cluster: int, item: int) -> float | None:
        v = self.table[cluster, item]
        return None if np.isnan(v) else float(v)

    def relabel(self, perm) -> "ClusterItemAverages":
        perm = np.asarray(perm)
        t = np.empty_like(self.table)
        n = np.empty_like(self.counts)
        t[perm] = self.table
        n[perm] = self.counts
        return ClusterItemAverages(t, n)


def cluster_item_average(train: RatingsDataset, model) -> ClusterItemAverages:
    """Mean training rating per (cluster, item)."""
    n_users, m = train.shape
    if len(model.assignment) < n_users:
        raise DataError("cluster model does not cover every training user")
    cl = model.assignment[train.users]
    tot = np.zeros((model.c, m))
    cnt = np.zeros((model.c, m), dtype=np.int64)
    np.add.at(tot, (cl, train.items), train.ratings)
    np.add.at(cnt, (cl, train.items), 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        table = np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)
    return ClusterItemAverages(table, cnt)


def ipu_decide(r_hat: float, cbar: float | None, cfg: ThresholdConfig) -> str:
    """Incentivised items (cluster average >= gamma) need ``r_hat >= beta``;
    everything else, including items with no cluster average, needs
    ``r_hat >= alpha``."""
    if cbar is not None and cbar >= cfg.gamma:
        return RECOMMEND if r_hat >= cfg.beta else DROP
    return RECOMMEND if r_hat >= cfg.alpha else DROP


def classify_pair(r_hat: float, r: float, cbar: float | None, cfg: ThresholdConfig) -> str:
    rec = ipu_decide(r_hat, cbar, cfg) == RECOMMEND
    good = r >= cfg.delta_pref
    if rec:
        return TP if good else FP
    return FN if good else TN


def decide_many(r_hat: np.ndarray, cbar: np.ndarray, alpha, beta, gamma) -> np.ndarray:
    """Vectorised ``ipu_decide``; NaN in ``cbar`` means absent."""
    incentive = ~np.isnan(cbar) & (np.nan_to_num(cbar, nan=-np.inf) >= gamma)
    return np.where(incentive, r_hat >= beta, r_hat >= alpha)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_masks(cls, rec: np.ndarray, good: np.ndarray) -> "ConfusionCounts":
        return cls(int(np.sum(rec & good)), int(np.sum(rec & ~good)),
                   int(np.sum(~rec & good)), int(np.sum(~rec & ~good)))


def metrics(tp: int, fp: int, fn: int) -> tuple[float, float, float, list[str]]:
    """(precision, recall, f1, degenerate flags); undefined ratios are 0."""
    flags = []
    if tp + fp:
        p = tp / (tp + fp)
    else:
        p = 0.0
        flags.append("precision")
    if tp + fn:
        r = tp / (tp + fn)
    else:
        r = 0.0
        flags.append("recall")
    if tp:
        # same value as 2pr/(p+r), computed with a single rounding
        f1 = 2 * tp / (2 * tp + fp + fn)
    else:
        f1 = 0.0
        flags.append("f1")
    return p, r, f1, flags


@dataclass
class EvaluationReport:
    counts: ConfusionCounts
    precision: float
    recall: float
    f1: float
    config: dict
    pairs_evaluated: int
    pairs_skipped: int
    degenerate: list = field(default_factory=list)

    @classmethod
    def from_counts(cls, counts, config, skipped=0) -> "EvaluationReport":
        p, r, f1, flags = metrics(counts.tp, counts.fp, counts.fn)
        return cls(counts, p, r, f1, config, counts.total, skipped, flags)

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    CSV_HEADER = ("alpha", "beta", "gamma", "delta_pref", "tp", "fp", "fn", "tn",
                  "precision", "recall", "f1", "pairs_evaluated", "pairs_skipped")

    def csv_row(self) -> list:
        c = self.config
        return [c.get("alpha"), c.get("beta"), c.get("gamma"), c.get("delta_pref"),
                self.counts.tp, self.counts.fp, self.counts.fn, self.counts.tn,
                repr(self.precision), repr(self.recall), repr(self.f1),
                self.pairs_evaluated, self.pairs_skipped]


@dataclass
class EvalInputs:
    """Test pairs with a prediction, aligned: predicted, true rating and the
    user's cluster average for the item (NaN if absent)."""

    r_hat: np.ndarray
    r: np.ndarray
    cbar: np.ndarray
    skipped: int


def align(test: RatingsDataset, preds, averages: ClusterItemAverages | None = None,
          model=None) -> EvalInputs:
    """Join predictions onto test ratings by internal (user, item) index."""
    m = max(test.shape[1], 1)
    tkey = test.users * m + test.items
    pkey = preds.users * m + preds.items
    order = np.argsort(tkey)
    sk = tkey[order]
    pos = np.searchsorted(sk, pkey)
    ok = pos < len(sk)
    ok[ok] = sk[pos[ok]] == pkey[ok]
    if not np.all(ok):
        raise DataError(f"{int((~ok).sum())} predictions are not test pairs")
    r = test.ratings[order][pos]
    if averages is not None:
        cbar = averages.table[model.assignment[preds.users], preds.items]
    else:
        cbar = np.full(len(pkey), np.nan)
    return EvalInputs(np.asarray(preds.predicted, float), r, cbar, len(test) - len(pkey))


def evaluate(test, preds, averages, model, cfg: ThresholdConfig, _inputs=None) -> EvaluationReport:
    """Confusion counts and metrics of the IPU rule over predicted test pairs."""
    x = _inputs or align(test, preds, averages, model)
    rec = decide_many(x.r_hat, x.cbar, cfg.alpha, cfg.beta, cfg.gamma)
    counts = ConfusionCounts.from_masks(rec, x.r >= cfg.delta_pref)
    return EvaluationReport.from_counts(counts, asdict(cfg), x.skipped)


def evaluate_baseline(test, preds, threshold: float, delta_pref: float = 4.0,
                      _inputs=None) -> EvaluationReport:
    """Recommend iff the prediction reaches ``threshold``; no clustering."""
    if math.isnan(threshold) or threshold < 0.0:
        raise ConfigError("baseline threshold must be non-negative")
    x = _inputs or align(test, preds)
    counts = ConfusionCounts.from_masks(x.r_hat >= threshold, x.r >= delta_pref)
    cfg = {"alpha": threshold, "beta": threshold, "gamma": 0.0, "delta_pref": delta_pref,
           "baseline": True}
    return EvaluationReport.from_counts(counts, cfg, x.skipped)
