"""User clustering on shifted-PCC distances: spectral and fuzzy C-means."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from sklearn.cluster import KMeans

from cbcf.errors import ConfigError, NumericalError


@dataclass
class SpectralConfig:
    c: int = 10
    sigma: float | None = None       # None -> median pairwise distance
    laplacian: str = "normalized_symmetric"
    kmeans_restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.sigma is not None and self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.laplacian != "normalized_symmetric":
            raise ConfigError(f"unsupported laplacian {self.laplacian!r}")
        if self.c < 1:
            raise ConfigError("c must be >= 1")


@dataclass
class FcmConfig:
    c: int = 10
    m: float = 2.0
    epsilon: float = 1e-4
    max_iters: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.m <= 1:
            raise ConfigError("fuzzy degree m must exceed 1")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.c < 1:
            raise ConfigError("c must be >= 1")


@dataclass
class ClusterModel:
    assignment: np.ndarray               # cluster id per internal user index
    c: int
    method: str
    memberships: np.ndarray | None = None
    config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)   # fcm objective per iteration

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.c)

    def empty_clusters(self) -> list[int]:
        return [int(k) for k in np.flatnonzero(self.sizes() == 0)]

    def relabel(self, perm) -> "ClusterModel":
        """Model with cluster ``k`` renamed to ``perm[k]``."""
        perm = np.asarray(perm)
        mem = None
        if self.memberships is not None:
            mem = np.empty_like(self.memberships)
            mem[:, perm] = self.memberships
        return ClusterModel(perm[self.assignment], self.c, self.method, mem,
                            dict(self.config), list(self.history))


def median_distance(dist: np.ndarray) -> float:
    iu = np.triu_indices_from(dist, 1)
    return float(np.median(dist[iu])) if len(iu[0]) else 1.0


def affinity_from_distance(dist: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian affinity ``exp(-d^2 / (2 sigma^2))`` with a zero diagonal."""
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    d = np.asarray(dist, dtype=float)
    A = np.exp(-(d * d) / (2.0 * sigma * sigma))
    np.fill_diagonal(A, 0.0)
    return A


def normalized_laplacian(A: np.ndarray) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2``; isolated nodes get a zero row."""
    deg = A.sum(axis=1)
    with np.errstate(divide="ignore"):
        inv = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    L = np.eye(len(A)) - inv[:, None] * A * inv[None, :]
    return (L + L.T) / 2.0


def spectral_cluster(dist: np.ndarray, cfg: SpectralConfig) -> ClusterModel:
    """Ng-Jordan-Weiss spectral clustering of a distance matrix."""
    n = len(dist)
    if n < cfg.c:
        raise ConfigError(f"cannot form {cfg.c} clusters from {n} users")
    sigma = cfg.sigma if cfg.sigma is not None else median_distance(dist)
    if sigma <= 0:
        sigma = 1.0
    L = normalized_laplacian(affinity_from_distance(dist, sigma))
    try:
        evals, evecs = np.linalg.eigh(L)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed for n={n}: {exc}") from exc
    if not np.all(np.isfinite(evals)):
        raise NumericalError("non-finite Laplacian eigenvalues")
    U = evecs[:, :cfg.c]
    norms = np.linalg.norm(U, axis=1, keepdims=True)
    T = U / np.where(norms > 0, norms, 1.0)
    km = KMeans(n_clusters=cfg.c, n_init=cfg.kmeans_restarts, random_state=cfg.seed)
    labels = km.fit_predict(T)
    conf = asdict(cfg) | {"sigma_used": sigma}
    return ClusterModel(labels.astype(np.int64), cfg.c, "spectral", None, conf)


def _fcm_memberships(D: np.ndarray, m: float) -> np.ndarray:
    zero = D == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = D ** (-2.0 / (m - 1.0))
        U = inv / inv.sum(axis=1, keepdims=True)
    hit = zero.any(axis=1)
    if hit.any():
        # a point sitting on a centroid belongs to it fully
        U[hit] = 0.0
        U[hit, np.argmax(zero[hit], axis=1)] = 1.0
    return U


def fcm_features(dist: np.ndarray, pca_components: int | None = None) -> np.ndarray:
    """Each user's row of the distance matrix, optionally projected onto its
    leading principal components."""
    X = np.asarray(dist, dtype=float)
    if not pca_components:
        return X
    Xc = X - X.mean(axis=0)
    U, S, _ = np.linalg.svd(Xc, full_matrices=False)
    k = int(pca_components)
    # fix the sign of each component so the projection is deterministic
    signs = np.sign(U[np.argmax(np.abs(U[:, :k]), axis=0), np.arange(k)])
    return U[:, :k] * S[:k] * signs


def fcm_objective(X, U, V, m) -> float:
    D2 = ((X[:, None, :] - V[None, :, :]) ** 2).sum(axis=2)
    return float(((U ** m) * D2).sum())


def fcm_cluster(features: np.ndarray, cfg: FcmConfig) -> ClusterModel:
    """Fuzzy C-means from a seeded random membership start.

    Stops when the largest membership change drops below ``epsilon``.
    """
    X = np.asarray(features, dtype=float)
    n = len(X)
    if n < cfg.c:
        raise ConfigError(f"cannot form {cfg.c} clusters from {n} points")
    rng = np.random.default_rng(cfg.seed)
    U = rng.random((n, cfg.c))
    U /= U.sum(axis=1, keepdims=True)
    history = []
    for _ in range(cfg.max_iters):
        W = U ** cfg.m
        V = (W.T @ X) / W.sum(axis=0)[:, None]
        D = np.sqrt(np.maximum(
            (X * X).sum(1)[:, None] - 2 * X @ V.T + (V * V).sum(1)[None, :], 0.0))
        U_new = _fcm_memberships(D, cfg.m)
        if not np.all(np.isfinite(U_new)):
            raise NumericalError("fcm memberships became non-finite")
        history.append(float(((U_new ** cfg.m) * D * D).sum()))
        delta = np.abs(U_new - U).max()
        U = U_new
        if delta < cfg.epsilon:
            break
    labels = np.argmax(U, axis=1).astype(np.int64)
    return ClusterModel(labels, cfg.c, "fcm", U, asdict(cfg), history)


def cluster_validity(dist: np.ndarray, model: ClusterModel) -> dict:
    """Mean intra-cluster and pairwise inter-cluster distances."""
    d = np.asarray(dist, dtype=float)
    lab = model.assignment
    if len(lab) != len(d):
        raise ConfigError("cluster model does not cover the distance matrix")
    c = model.c
    onehot = np.zeros((len(lab), c))
    onehot[np.arange(len(lab)), lab] = 1.0
    sums = onehot.T @ d @ onehot
    sizes = onehot.sum(axis=0)
    pairs = np.outer(sizes, sizes)
    np.fill_diagonal(pairs, sizes * (sizes - 1))   # diagonal of d excluded
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(pairs > 0, sums / np.maximum(pairs, 1), np.nan)
    clusters = []
    for k in range(c):
        others = [means[k, j] for j in range(c) if j != k and not np.isnan(means[k, j])]
        intra = 0.0 if sizes[k] < 2 else float(means[k, k])
        inter = float(np.mean(others)) if others else None
        clusters.append({
            "cluster": k, "size": int(sizes[k]), "intra": intra,
            "mean_inter": inter, "singleton": bool(sizes[k] == 1),
            "empty": bool(sizes[k] == 0),
            "intra_below_inter": bool(sizes[k] > 0 and inter is not None and intra < inter),
        })
    inter_rows = [[None if (j == k or np.isnan(means[k, j])) else float(means[k, j])
                   for j in range(c)] for k in range(c)]
    nonempty = [x for x in clusters if not x["empty"]]
    return {
        "clusters": clusters,
        "inter": inter_rows,
        "fraction_intra_below_inter": (sum(x["intra_below_inter"] for x in nonempty)
                                       / len(nonempty)) if nonempty else 0.0,
    }


def save_clusters(model: ClusterModel, path, user_ids, dataset_hash: str) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["user", "cluster"]
        if model.memberships is not None:
            head += [f"membership_{k}" for k in range(model.c)]
        w.writerow(head)
        for u, lab in enumerate(model.assignment):
            row = [int(user_ids[u]), int(lab)]
            if model.memberships is not None:
                row += [repr(float(x)) for x in model.memberships[u]]
            w.writerow(row)
    side = {"method": model.method, "c": model.c, "config": model.config,
            "seed": model.config.get("seed"), "dataset_hash": dataset_hash,
            "sizes": model.sizes().tolist(), "empty_clusters": model.empty_clusters()}
    if model.history:
        side["iterations"] = len(model.history)
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
