"""User Pearson correlation, shifted-PCC distance and item adjusted cosine."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cbcf.dataset import RatingsDataset
from cbcf.errors import ConfigError, DataError

MIN_CO_RATINGS = 2
# relative tolerance under which a centred sum of squares counts as zero
_ZERO_VAR = 1e-10

KINDS = ("user_pcc", "item_cosine")


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    """Dense symmetric similarity table over the dataset's index space.

    Undefined entries hold score 0 (so they drop out of weighted sums); the
    diagonal is 1 and marked defined.
    """

    kind: str
    scores: np.ndarray
    co_count: np.ndarray
    defined: np.ndarray

    @property
    def n(self) -> int:
        return self.scores.shape[0]


# -- pairwise reference forms ------------------------------------------------

def _common(a: dict, b: dict):
    keys = sorted(set(a) & set(b))
    return keys, np.array([a[k] for k in keys], float), np.array([b[k] for k in keys], float)


def pcc_from_vectors(a: dict, b: dict) -> float | None:
    """Pearson correlation over co-rated keys with means taken over the
    common keys only. ``None`` when undefined."""
    keys, x, y = _common(a, b)
    if len(keys) < MIN_CO_RATINGS:
        return None
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx <= _ZERO_VAR * float(x @ x) or syy <= _ZERO_VAR * float(y @ y):
        return None
    return float(np.clip(dx @ dy / math.sqrt(sxx * syy), -1.0, 1.0))


def pcc(u1: int, u2: int, train: RatingsDataset) -> float | None:
    """PCC between raw user ids ``u1`` and ``u2`` on ``train``."""
    if u1 == u2:
        raise ValueError("pcc needs two distinct users")
    return pcc_from_vectors(train.user_vector(u1), train.user_vector(u2))


def shift_pcc(s):
    """Map a correlation in [-1, 1] to a distance in [0, 2] (1 - s)."""
    arr = np.asarray(s, dtype=float)
    if np.any(arr < -1.0) | np.any(arr > 1.0) | np.any(np.isnan(arr)):
        raise ValueError(f"correlation outside [-1, 1]: {s!r}")
    # both branches (s >= 0: 1 - s; s < 0: -(s - 1)) are the same line
    out = np.where(arr >= 0, 1.0 - arr, -(arr - 1.0))
    return float(out) if out.ndim == 0 else out


def _item_columns(train: RatingsDataset, i: int):
    means = user_means(train)
    sel = train.items == i
    return {int(u): float(r - means[u]) for u, r in zip(train.users[sel], train.ratings[sel])}


def cosine_from_vectors(a: dict, b: dict) -> float | None:
    keys, x, y = _common(a, b)
    if len(keys) < MIN_CO_RATINGS:
        return None
    nx, ny = float(x @ x), float(y @ y)
    if nx <= 1e-12 or ny <= 1e-12:
        return None
    return float(np.clip(x @ y / math.sqrt(nx * ny), -1.0, 1.0))


def cosine_items(i1: int, i2: int, train: RatingsDataset) -> float | None:
    """Adjusted cosine between raw item ids: ratings centred by each user's
    training mean, summed over users who rated both."""
    if i1 == i2:
        raise ValueError("cosine_items needs two distinct items")
    a = _item_columns(train, train.item_index(i1))
    b = _item_columns(train, train.item_index(i2))
    return cosine_from_vectors(a, b)


# -- matrix forms --------------------------------------------------------------

def user_means(train: RatingsDataset) -> np.ndarray:
    """Mean training rating per internal user (NaN for users with none)."""
    n = train.shape[0]
    cnt = np.bincount(train.users, minlength=n)
    tot = np.bincount(train.users, weights=train.ratings, minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)


def _user_pcc(train: RatingsDataset):
    R, M = train.dense()
    # per-user offsets leave the common-item PCC unchanged and shrink cancellation
    mu = np.nan_to_num(user_means(train))
    X = (R - mu[:, None]) * M
    Mf = M.astype(float)
    N = Mf @ Mf.T
    S = X @ Mf.T            # S[a, b]: sum of a's ratings over items both rated
    Q = (X * X) @ Mf.T
    P = X @ X.T
    with np.errstate(invalid="ignore", divide="ignore"):
        Nsafe = np.maximum(N, 1)
        cov = P - S * S.T / Nsafe
        var = Q - S * S / Nsafe
        var_t = var.T
        ok = ((N >= MIN_CO_RATINGS) & (var > _ZERO_VAR * np.maximum(Q, 1e-300))
              & (var_t > _ZERO_VAR * np.maximum(Q.T, 1e-300)))
        scores = np.where(ok, cov / np.sqrt(np.where(ok, var * var_t, 1.0)), 0.0)
    return np.clip(scores, -1.0, 1.0), N, ok


def _item_cosine(train: RatingsDataset):
    R, M = train.dense()
    mu = np.nan_to_num(user_means(train))
    C = (R - mu[:, None]) * M
    Mf = M.astype(float)
    N = Mf.T @ Mf
    num = C.T @ C
    A = (C * C).T @ Mf      # A[i, j]: sum of c_ui^2 over users rating i and j
    den = A * A.T
    ok = (N >= MIN_CO_RATINGS) & (A > 1e-12) & (A.T > 1e-12)
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = np.where(ok, num / np.sqrt(np.where(ok, den, 1.0)), 0.0)
    return np.clip(scores, -1.0, 1.0), N, ok


def build_similarity_matrix(train: RatingsDataset, kind: str) -> SimilarityMatrix:
    """All-pairs similarity over the training index space."""
    if kind not in KINDS:
        raise ConfigError(f"unknown similarity kind {kind!r}")
    if len(train) == 0:
        raise DataError("cannot build similarities from an empty training set")
    scores, N, ok = _user_pcc(train) if kind == "user_pcc" else _item_cosine(train)
    # exact symmetry: mirror the upper triangle
    iu = np.triu_indices_from(scores, 1)
    scores[iu[1], iu[0]] = scores[iu]
    ok[iu[1], iu[0]] = ok[iu]
    np.fill_diagonal(scores, 1.0)
    np.fill_diagonal(ok, True)
    return SimilarityMatrix(kind, scores, np.rint(N).astype(np.int64), ok)


def distance_matrix(sims: SimilarityMatrix) -> np.ndarray:
    """Shifted-PCC distances; undefined pairs get the neutral distance 1."""
    if sims.kind != "user_pcc":
        raise ConfigError("distances are derived from user_pcc similarities")
    d = np.where(sims.defined, shift_pcc(sims.scores), 1.0)
    np.fill_diagonal(d, 0.0)
    return d


# -- cache file ------------------------------------------------------------------

def save_matrix(path, sims: SimilarityMatrix, dataset_hash: str) -> None:
    """One JSON header line, then row-major float64 scores (NaN = undefined)
    and int64 co-rating counts, little-endian."""
    header = {"kind": sims.kind, "n": sims.n, "dataset_hash": dataset_hash}
    vals = np.where(sims.defined, sims.scores, np.nan)
    with Path(path).open("wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(np.ascontiguousarray(vals, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(sims.co_count, dtype="<i8").tobytes())


def load_matrix(path, dataset_hash: str | None = None) -> SimilarityMatrix | None:
    """Read a cached matrix; ``None`` if absent or built from other data."""
    path = Path(path)
    if not path.exists():
        return None
    with path.open("rb") as fh:
        header = json.loads(fh.readline())
        if dataset_hash is not None and header["dataset_hash"] != dataset_hash:
            return None
        n = header["n"]
        vals = np.frombuffer(fh.read(8 * n * n), dtype="<f8").reshape(n, n).copy()
        co = np.frombuffer(fh.read(8 * n * n), dtype="<i8").reshape(n, n).copy()
    defined = ~np.isnan(vals)
    return SimilarityMatrix(header["kind"], np.nan_to_num(vals), co, defined)
