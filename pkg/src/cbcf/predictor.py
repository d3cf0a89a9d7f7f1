"""Memory-based rating prediction (user-based and item-based neighbourhoods)."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cbcf.dataset import RatingsDataset, RATING_MIN, RATING_MAX
from cbcf.errors import ConfigError
from cbcf.similarity import SimilarityMatrix, user_means

METHODS = ("user_based", "item_based")

# reason codes for undefined predictions
COLD_USER = "cold_user"
COLD_ITEM = "cold_item"
NO_NEIGHBOURS = "no_neighbours"
ZERO_WEIGHT = "zero_weight"


class _Index:
    """Per-user / per-item views of the training ratings."""

    def __init__(self, train: RatingsDataset):
        n, m = train.shape
        self.means = user_means(train)
        self.by_user = _group(train.users, n, train.items, train.ratings)
        self.by_item = _group(train.items, m, train.users, train.ratings)


def _group(keys, size, other, ratings):
    order = np.argsort(keys, kind="stable")
    bounds = np.searchsorted(keys[order], np.arange(size + 1))
    o, r = other[order], ratings[order]
    return [(o[bounds[k]:bounds[k + 1]], r[bounds[k]:bounds[k + 1]]) for k in range(size)]


def _top_k(weights: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest ``|weights|``; ties keep the lower index."""
    if len(weights) <= k:
        return np.arange(len(weights))
    return np.argsort(-np.abs(weights), kind="stable")[:k]


def _clamp(x: float) -> float:
    return float(min(max(x, RATING_MIN), RATING_MAX))


def _user_based(u, i, idx: _Index, sims: SimilarityMatrix, k):
    if u >= len(idx.by_user) or len(idx.by_user[u][0]) == 0:
        return None, COLD_USER
    raters, r = idx.by_item[i]
    keep = (raters != u) & sims.defined[u, raters]
    raters, r = raters[keep], r[keep]
    if len(raters) == 0:
        return None, COLD_ITEM if len(idx.by_item[i][0]) == 0 else NO_NEIGHBOURS
    s = sims.scores[u, raters]
    top = _top_k(s, k)
    s, dev = s[top], r[top] - idx.means[raters[top]]
    den = np.abs(s).sum()
    if den == 0:
        return None, ZERO_WEIGHT
    return _clamp(idx.means[u] + (s @ dev) / den), None


def _item_based(u, i, idx: _Index, sims: SimilarityMatrix, k):
    if u >= len(idx.by_user) or len(idx.by_user[u][0]) == 0:
        return None, COLD_USER
    rated, r = idx.by_user[u]
    keep = (rated != i) & sims.defined[i, rated]
    rated, r = rated[keep], r[keep]
    s = sims.scores[i, rated]
    pos = s > 0
    s, r = s[pos], r[pos]
    if len(s) == 0:
        return None, NO_NEIGHBOURS
    top = _top_k(s, k)
    s, r = s[top], r[top]
    den = np.abs(s).sum()
    if den == 0:
        return None, ZERO_WEIGHT
    return _clamp((s @ r) / den), None


def predict_user_based(u, i, train, sims, k=50, _idx=None):
    """Mean-centred PCC-weighted neighbour prediction for internal indices
    ``(u, i)``. Returns ``(prediction or None, reason or None)``."""
    if sims.kind != "user_pcc":
        raise ConfigError("user-based prediction needs user_pcc similarities")
    return _user_based(u, i, _idx or _Index(train), sims, k)


def predict_item_based(u, i, train, sims, k=50, _idx=None):
    """Positive-similarity weighted average of ``u``'s own ratings."""
    if sims.kind != "item_cosine":
        raise ConfigError("item-based prediction needs item_cosine similarities")
    return _item_based(u, i, _idx or _Index(train), sims, k)


@dataclass
class PredictionSet:
    """Predictions for requested (user, item) index pairs.

    ``users``/``items``/``predicted`` hold the defined predictions only;
    ``skipped`` maps each reason code to the number of pairs it dropped.
    """

    users: np.ndarray
    items: np.ndarray
    predicted: np.ndarray
    method: str
    k: int
    requested: int
    skipped: dict = field(default_factory=dict)

    @property
    def coverage(self) -> float:
        return len(self.predicted) / self.requested if self.requested else 0.0

    def as_dict(self) -> dict:
        return {(int(u), int(i)): float(p)
                for u, i, p in zip(self.users, self.items, self.predicted)}


def predict_all(test_pairs, train: RatingsDataset, sims: SimilarityMatrix,
                method: str = "item_based", k: int = 50, jobs: int = 1) -> PredictionSet:
    """Attempt every ``(u, i)`` index pair; failures are recorded, not raised.

    ``jobs > 1`` spreads the pairs over worker threads; output order is the
    input order regardless.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown prediction method {method!r}")
    if k < 1:
        raise ConfigError("neighbourhood size k must be >= 1")
    pairs = np.asarray(test_pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise ConfigError("no test pairs to predict")
    fn = predict_user_based if method == "user_based" else predict_item_based
    idx = _Index(train)

    def run(chunk):
        return [fn(int(u), int(i), train, sims, k, _idx=idx) for u, i in chunk]

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            outs = [o for part in pool.map(run, np.array_split(pairs, jobs)) for o in part]
    else:
        outs = run(pairs)
    us, its, ps = [], [], []
    skipped: dict[str, int] = {}
    for (u, i), (p, why) in zip(pairs, outs):
        if p is None:
            skipped[why] = skipped.get(why, 0) + 1
        else:
            us.append(u)
            its.append(i)
            ps.append(p)
    return PredictionSet(np.array(us, dtype=np.int64), np.array(its, dtype=np.int64),
                         np.array(ps, dtype=float), method, k, len(pairs),
                         dict(sorted(skipped.items())))


def pairs_of(test: RatingsDataset) -> np.ndarray:
    return np.column_stack([test.users, test.items])


def save_predictions(preds: PredictionSet, path, dataset: RatingsDataset,
                     dataset_hash: str) -> None:
    """CSV ``user,item,predicted`` (raw ids) plus a ``.json`` sidecar."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "item", "predicted"])
        for u, i, p in zip(preds.users, preds.items, preds.predicted):
            w.writerow([dataset.user_ids[u], dataset.item_ids[i], repr(float(p))])
    side = {"method": preds.method, "k": preds.k, "coverage": preds.coverage,
            "requested": preds.requested, "skipped": preds.skipped,
            "dataset_hash": dataset_hash}
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
