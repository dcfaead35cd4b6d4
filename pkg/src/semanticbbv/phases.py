"""K-means phase clustering, representative selection and cluster diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class TooFewPoints(ValueError):
    pass


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    feature_kind: str
    seed: int
    iterations: int
    inertia: float
    labels: np.ndarray
    inertia_history: list[float] = field(default_factory=list)

    def to_meta(self) -> dict:
        return {"k": self.k, "width": int(self.centroids.shape[1]), "feature_kind": self.feature_kind,
                "seed": self.seed, "iterations": self.iterations, "inertia": self.inertia}


@dataclass(frozen=True)
class Representative:
    cluster: int
    program_id: str
    interval_index: int
    distance: float
    row: int


def l2_normalize(points: np.ndarray) -> np.ndarray:
    X = np.asarray(points, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(norms > 0, norms, 1.0)


def _sqdist(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # explicit differences rather than the expanded dot-product form: exact zeros stay zero
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)


def _plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = _sqdist(X, X[chosen]).min(1)
    while len(chosen) < k:
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with chosen centers; take unused rows in order
            nxt = next(i for i in range(n) if i not in chosen)
        else:
            nxt = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        chosen.append(nxt)
        d2 = np.minimum(d2, _sqdist(X, X[[nxt]])[:, 0])
    return X[chosen].copy()


def _lloyd(X: np.ndarray, C: np.ndarray, max_iter: int) -> tuple[np.ndarray, np.ndarray, int, list[float]]:
    k = len(C)
    labels = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sqdist(X, C)
        new = d.argmin(1)
        for c in range(k):
            if not np.any(new == c):
                # reseed an empty cluster at the point farthest from its own centroid
                own = d[np.arange(len(X)), new].copy()
                sizes = np.bincount(new, minlength=k)
                own[sizes[new] < 2] = -1.0
                far = int(own.argmax())
                new[far] = c
                d[far] = _sqdist(X[[far]], X[[far]])[0, 0]
        history.append(float(d[np.arange(len(X)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        C = np.stack([X[labels == c].mean(0) for c in range(k)])
    inertia = float(_sqdist(X, C)[np.arange(len(X)), labels].sum())
    history.append(inertia)
    return C, labels, it, history


def kmeans_fit(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 300, n_init: int = 30,
               feature_kind: str = "semantic") -> ClusterModel:
    """k-means++ seeding then Lloyd iterations to an assignment fixpoint; the best of
    ``n_init`` seeded restarts (lowest inertia, earliest on ties) is kept."""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("points must be a 2-D array")
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(X) < k:
        raise TooFewPoints(f"{len(X)} points cannot form {k} clusters")
    if not np.all(np.isfinite(X)):
        raise ValueError("points must be finite")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        C, labels, it, hist = _lloyd(X, _plusplus(X, k, rng), max_iter)
        if best is None or hist[-1] < best[3][-1]:
            best = (C, labels, it, hist)
    C, labels, it, hist = best
    return ClusterModel(k, C, feature_kind, seed, it, hist[-1], labels, hist)


def assign(model: ClusterModel, point: np.ndarray) -> int:
    """Nearest centroid; the lowest index wins ties."""
    return int(_sqdist(np.asarray(point, dtype=np.float64)[None, :], model.centroids)[0].argmin())


def assign_all(model: ClusterModel, points: np.ndarray) -> np.ndarray:
    return _sqdist(np.asarray(points, dtype=np.float64), model.centroids).argmin(1)


def pick_representatives(model: ClusterModel, points: np.ndarray,
                         keys: Sequence[tuple[str, int]]) -> list[Representative]:
    """Per cluster, the member closest to the centroid; ties go to the lowest
    (program_id, interval_index)."""
    X = np.asarray(points, dtype=np.float64)
    labels = assign_all(model, X)
    dist = np.sqrt(_sqdist(X, model.centroids)[np.arange(len(X)), labels])
    reps = []
    for c in range(model.k):
        members = np.flatnonzero(labels == c)
        if len(members) == 0:
            continue
        i = min(members, key=lambda r: (dist[r], keys[r][0], keys[r][1]))
        reps.append(Representative(c, keys[i][0], keys[i][1], float(dist[i]), int(i)))
    return reps


def silhouette(model: ClusterModel, points: np.ndarray) -> float:
    X = np.asarray(points, dtype=np.float64)
    labels = assign_all(model, X)
    if len(set(labels.tolist())) < 2:
        return 0.0
    D = np.sqrt(_sqdist(X, X))
    s = np.zeros(len(X))
    for i in range(len(X)):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a = D[i, own].sum() / (own.sum() - 1)
        b = min(D[i, labels == c].mean() for c in set(labels.tolist()) if c != labels[i])
        s[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(s.mean())


def scan_k(points: np.ndarray, k_max: int, seed: int = 0) -> list[dict]:
    """Inertia and silhouette for k = 2..k_max, for choosing k by eye or elbow."""
    out = []
    for k in range(2, min(k_max, len(points)) + 1):
        m = kmeans_fit(points, k, seed)
        out.append({"k": k, "inertia": m.inertia, "silhouette": silhouette(m, points)})
    return out
