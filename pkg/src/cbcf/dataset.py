"""Rating data ingestion, sparsity and train/test splitting.

Ratings are held as parallel numpy arrays over dense 0-based user/item
indices; the raw MovieLens ids are kept in ``user_ids`` / ``item_ids`` so
that ``user_ids[u]`` is the raw id of internal user ``u``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from cbcf.errors import DataError, ConfigError

log = logging.getLogger(__name__)

RATING_MIN = 1.0
RATING_MAX = 5.0

_SPLIT_RE = re.compile(r"[\t|]")


@dataclass(frozen=True, eq=False)
class RatingsDataset:
    """Immutable sparse user x item rating table.

    ``users``/``items`` index into ``user_ids``/``item_ids``. The id maps may
    list ids without ratings (a split shares its parent's index space), so
    ``n_users``/``n_items`` count the ids that actually occur in ``ratings``.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray | None
    user_ids: np.ndarray
    item_ids: np.ndarray
    duplicates: int = 0

    def __post_init__(self):
        for name in ("users", "items", "ratings", "timestamps"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)
        self.user_ids.setflags(write=False)
        self.item_ids.setflags(write=False)

    def __len__(self):
        return len(self.ratings)

    @property
    def n_users(self) -> int:
        return len(np.unique(self.users))

    @property
    def n_items(self) -> int:
        return len(np.unique(self.items))

    @property
    def shape(self) -> tuple[int, int]:
        """Size of the shared index space, (users, items)."""
        return len(self.user_ids), len(self.item_ids)

    @classmethod
    def from_triples(cls, triples, timestamps=None) -> "RatingsDataset":
        """Build from ``(raw_user, raw_item, rating)`` triples.

        Duplicate pairs keep the last occurrence.
        """
        triples = list(triples)
        if not triples:
            empty = np.array([], dtype=np.int64)
            return cls(empty, empty.copy(), np.array([], dtype=float), None,
                       empty.copy(), empty.copy())
        raw_u = np.array([t[0] for t in triples], dtype=np.int64)
        raw_i = np.array([t[1] for t in triples], dtype=np.int64)
        r = np.array([t[2] for t in triples], dtype=float)
        ts = None if timestamps is None else np.asarray(timestamps, dtype=np.int64)
        return _build(raw_u, raw_i, r, ts)

    def subset(self, mask: np.ndarray) -> "RatingsDataset":
        """Ratings selected by ``mask``, keeping this dataset's index space."""
        ts = None if self.timestamps is None else self.timestamps[mask]
        return RatingsDataset(self.users[mask].copy(), self.items[mask].copy(),
                              self.ratings[mask].copy(), ts, self.user_ids,
                              self.item_ids)

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense rating matrix (0 where unrated) and boolean rated mask."""
        n, m = self.shape
        R = np.zeros((n, m))
        M = np.zeros((n, m), dtype=bool)
        R[self.users, self.items] = self.ratings
        M[self.users, self.items] = True
        return R, M

    def user_vector(self, user_id: int) -> dict[int, float]:
        """Sparse row of raw ``user_id`` as ``{raw_item_id: rating}``."""
        u = self.user_index(user_id)
        sel = self.users == u
        return {int(self.item_ids[i]): float(r)
                for i, r in zip(self.items[sel], self.ratings[sel])}

    def user_index(self, user_id: int) -> int:
        idx = np.searchsorted(self.user_ids, user_id)
        if idx >= len(self.user_ids) or self.user_ids[idx] != user_id:
            raise KeyError(f"unknown user id {user_id}")
        return int(idx)

    def item_index(self, item_id: int) -> int:
        idx = np.searchsorted(self.item_ids, item_id)
        if idx >= len(self.item_ids) or self.item_ids[idx] != item_id:
            raise KeyError(f"unknown item id {item_id}")
        return int(idx)

    def triples(self) -> set[tuple[int, int, float]]:
        """Ratings as a set of raw ``(user, item, rating)``."""
        return set(zip(self.user_ids[self.users].tolist(),
                       self.item_ids[self.items].tolist(),
                       self.ratings.tolist()))

    def user_counts(self) -> np.ndarray:
        return np.bincount(self.users, minlength=len(self.user_ids))

    def content_hash(self) -> str:
        """Stable hash of the rating content in canonical (user, item) order."""
        raw_u = self.user_ids[self.users]
        raw_i = self.item_ids[self.items]
        order = np.lexsort((raw_i, raw_u))
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(raw_u[order], dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(raw_i[order], dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.ratings[order], dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.user_ids, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.item_ids, dtype="<i8").tobytes())
        return h.hexdigest()[:16]


def _build(raw_u, raw_i, r, ts) -> RatingsDataset:
    # last-wins dedup: reverse, keep first occurrence, restore order
    keys = raw_u.astype(np.int64) * (int(raw_i.max()) + 1) + raw_i
    _, first_rev = np.unique(keys[::-1], return_index=True)
    keep = np.sort(len(keys) - 1 - first_rev)
    dupes = len(keys) - len(keep)
    if dupes:
        log.warning("%d duplicate (user, item) ratings; kept the last of each", dupes)
    raw_u, raw_i, r = raw_u[keep], raw_i[keep], r[keep]
    if ts is not None:
        ts = ts[keep]
    user_ids, users = np.unique(raw_u, return_inverse=True)
    item_ids, items = np.unique(raw_i, return_inverse=True)
    return RatingsDataset(users.astype(np.int64), items.astype(np.int64), r, ts,
                          user_ids, item_ids, duplicates=dupes)


def load_movielens(path) -> RatingsDataset:
    """Read a MovieLens ``u.data``-style file (tab or ``|`` separated)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"rating file not found: {path}")
    us, its, rs, tss = [], [], [], []
    with_ts = True
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = _SPLIT_RE.split(line)
            if len(parts) < 3:
                raise DataError(f"{path}:{lineno}: expected at least 3 fields, got {len(parts)}")
            try:
                u, i, r = int(parts[0]), int(parts[1]), float(parts[2])
                t = int(float(parts[3])) if len(parts) > 3 and parts[3] else None
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: cannot parse {line!r}: {exc}") from None
            if not RATING_MIN <= r <= RATING_MAX:
                raise DataError(f"{path}:{lineno}: rating {r} outside [1, 5]")
            us.append(u)
            its.append(i)
            rs.append(r)
            if t is None:
                with_ts = False
            tss.append(t)
    if not rs:
        return RatingsDataset.from_triples([])
    ts = np.array(tss, dtype=np.int64) if with_ts else None
    ds = _build(np.array(us, dtype=np.int64), np.array(its, dtype=np.int64),
                np.array(rs, dtype=float), ts)
    log.info("loaded %d ratings (%d users, %d items) from %s",
             len(ds), ds.n_users, ds.n_items, path)
    return ds


def _fmt_rating(r: float) -> str:
    return str(int(r)) if float(r).is_integer() else repr(float(r))


def write_movielens(ds: RatingsDataset, path) -> None:
    """Write ratings as tab-separated ``user item rating [timestamp]`` lines,
    sorted by (user, item)."""
    raw_u = ds.user_ids[ds.users]
    raw_i = ds.item_ids[ds.items]
    order = np.lexsort((raw_i, raw_u))
    with Path(path).open("w") as fh:
        for k in order:
            fields = [str(raw_u[k]), str(raw_i[k]), _fmt_rating(ds.ratings[k])]
            if ds.timestamps is not None:
                fields.append(str(ds.timestamps[k]))
            fh.write("\t".join(fields) + "\n")


def sparsity(ds: RatingsDataset) -> float:
    """Fraction of empty cells in the (distinct users) x (distinct items) matrix."""
    cells = ds.n_users * ds.n_items
    if cells == 0:
        raise DataError("sparsity undefined for an empty rating matrix")
    return 1.0 - len(ds) / cells


@dataclass
class SplitSpec:
    mode: str = "random_holdout"
    test_fraction: float = 0.2
    seed: int = 0
    test_user_rating_range: tuple[int, int] = (20, 30)
    retained_ratings_range: tuple[int, int] = (3, 20)

    def __post_init__(self):
        if self.mode not in ("random_holdout", "cold_start_mask"):
            raise ConfigError(f"unknown split mode {self.mode!r}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in [0, 1)")
        self.test_user_rating_range = tuple(self.test_user_rating_range)
        self.retained_ratings_range = tuple(self.retained_ratings_range)
        lo, hi = self.retained_ratings_range
        if not 0 <= lo <= hi:
            raise ConfigError("retained_ratings_range must satisfy 0 <= lo <= hi")


def _by_user(ds: RatingsDataset) -> list[np.ndarray]:
    order = np.argsort(ds.users, kind="stable")
    bounds = np.searchsorted(ds.users[order], np.arange(len(ds.user_ids) + 1))
    return [order[bounds[u]:bounds[u + 1]] for u in range(len(ds.user_ids))]


def split_random(ds: RatingsDataset, spec: SplitSpec):
    """Per-user stratified holdout: ceil(fraction * n_u) of each user's
    ratings go to test, never emptying a user's training row."""
    if spec.mode != "random_holdout":
        raise ConfigError("split_random requires mode 'random_holdout'")
    rng = np.random.default_rng(spec.seed)
    test_mask = np.zeros(len(ds), dtype=bool)
    singles = 0
    for rows in _by_user(ds):
        n = len(rows)
        if n == 0:
            continue
        k = math.ceil(spec.test_fraction * n)
        if k >= n:
            if n == 1:
                singles += 1
            k = n - 1
        if k:
            test_mask[rng.choice(rows, size=k, replace=False)] = True
    if singles:
        log.warning("%d users with a single rating kept wholly in train", singles)
    return ds.subset(~test_mask), ds.subset(test_mask)


def split_cold_start(ds: RatingsDataset, spec: SplitSpec):
    """Simulated cold-start masking.

    Users whose rating count lies in ``test_user_rating_range`` become test
    users. Each keeps ``k ~ U{retained_ratings_range}`` random ratings in
    train; the rest move to test. Everyone else stays wholly in train.
    Returns ``(train, test, test_users)`` with raw test user ids.
    """
    if spec.mode != "cold_start_mask":
        raise ConfigError("split_cold_start requires mode 'cold_start_mask'")
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.test_user_rating_range
    keep_lo, keep_hi = spec.retained_ratings_range
    test_mask = np.zeros(len(ds), dtype=bool)
    test_users = set()
    for u, rows in enumerate(_by_user(ds)):
        if not lo <= len(rows) <= hi:
            continue
        test_users.add(int(ds.user_ids[u]))
        k = min(int(rng.integers(keep_lo, keep_hi + 1)), len(rows))
        perm = rng.permutation(rows)
        test_mask[perm[k:]] = True
    if not test_users:
        log.warning("no user has %d-%d ratings; cold-start test set is empty", lo, hi)
    return ds.subset(~test_mask), ds.subset(test_mask), test_users


def write_split(train: RatingsDataset, test: RatingsDataset, spec: SplitSpec,
                out_dir, test_users=None) -> dict:
    """Write ``train.data``/``test.data`` plus ``split.json`` manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_movielens(train, out / "train.data")
    write_movielens(test, out / "test.data")
    manifest = {
        "spec": asdict(spec),
        "seed": spec.seed,
        "train": {"ratings": len(train), "users": train.n_users, "items": train.n_items,
                  "hash": train.content_hash()},
        "test": {"ratings": len(test), "users": test.n_users, "items": test.n_items,
                 "hash": test.content_hash()},
    }
    if test_users is not None:
        manifest["test_users"] = len(test_users)
        manifest["train_only_users"] = len(set(train.user_ids[np.unique(train.users)].tolist())
                                           - set(test_users))
    (out / "split.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
