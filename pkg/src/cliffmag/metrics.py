"""Classification, ranking and clustering metrics, plus k-means."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError


def _nonempty(*arrays: np.ndarray) -> None:
    if any(len(a) == 0 for a in arrays):
        raise ArgumentError("metric inputs must be non-empty")
    if len({len(a) for a in arrays}) != 1:
        raise ArgumentError(f"length mismatch {[len(a) for a in arrays]}")


def accuracy(preds: np.ndarray, labels: np.ndarray) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    _nonempty(preds, labels)
    return float(np.mean(preds == labels))


def macro_f1(preds: np.ndarray, labels: np.ndarray) -> float:
    """Unweighted mean of per-class F1 over every class seen in either array."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    _nonempty(preds, labels)
    scores = []
    for c in np.union1d(preds, labels):
        tp = np.sum((preds == c) & (labels == c))
        fp = np.sum((preds == c) & (labels != c))
        fn = np.sum((preds != c) & (labels == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def pessimistic_ranks(scores: np.ndarray, target: np.ndarray) -> np.ndarray:
    """1-based rank of ``scores[i, target[i]]`` in row i; tied candidates all rank ahead of it."""
    scores = np.asarray(scores, dtype=float)
    target = np.asarray(target)
    _nonempty(scores, target)
    true = scores[np.arange(len(scores)), target]
    return np.sum(scores >= true[:, None], axis=1)


def mrr(ranks: np.ndarray) -> float:
    ranks = np.asarray(ranks, dtype=float)
    _nonempty(ranks)
    return float(np.mean(1.0 / ranks))


def hits_at_k(ranks: np.ndarray, k: int) -> float:
    if k <= 0:
        raise ArgumentError(f"k must be positive, got {k}")
    ranks = np.asarray(ranks)
    _nonempty(ranks)
    return float(np.mean(ranks <= k))


def contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    return table


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(assignments: np.ndarray, labels: np.ndarray) -> float:
    """``2 I(Y; C) / (H(Y) + H(C))``; two single-cluster labellings count as identical."""
    _nonempty(np.asarray(assignments), np.asarray(labels))
    table = contingency(labels, assignments)
    hy, hc = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    if hy == 0.0 and hc == 0.0:
        return 1.0
    n = table.sum()
    pij = table / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0)) / n**2
    nz = pij > 0
    mi = float(np.sum(pij[nz] * np.log(pij[nz] / outer[nz])))
    return max(0.0, 2.0 * mi / (hy + hc))


def ari(assignments: np.ndarray, labels: np.ndarray) -> float:
    _nonempty(np.asarray(assignments), np.asarray(labels))
    table = contingency(labels, assignments)
    n = table.sum()

    def pairs(x):
        return np.sum(x * (x - 1) / 2.0)

    index = pairs(table)
    a, b = pairs(table.sum(axis=1)), pairs(table.sum(axis=0))
    expected = a * b / (n * (n - 1) / 2.0) if n > 1 else 0.0
    top = 0.5 * (a + b)
    if top == expected:
        return 1.0
    return float((index - expected) / (top - expected))


# ---------------------------------------------------------------- k-means


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    history: np.ndarray  # inertia after every assignment step of the winning restart


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = np.sum(X * X, axis=1)[:, None] - 2.0 * X @ C.T + np.sum(C * C, axis=1)[None, :]
    return np.maximum(d, 0.0)


def _plus_plus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(len(X))]]
    closest = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        idx = rng.integers(len(X)) if total <= 0 else rng.choice(len(X), p=closest / total)
        centers.append(X[idx])
        closest = np.minimum(closest, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def _lloyd(X: np.ndarray, centers: np.ndarray, max_iter: int, tol: float) -> KMeansResult:
    history = []
    for _ in range(max_iter):
        dist = _sq_dists(X, centers)
        labels = np.argmin(dist, axis=1)
        history.append(float(dist[np.arange(len(X)), labels].sum()))
        new = centers.copy()
        for c in range(len(centers)):
            members = labels == c
            if members.any():
                new[c] = X[members].mean(axis=0)
        shift = np.sum((new - centers) ** 2)
        centers = new
        if shift <= tol:
            break
    dist = _sq_dists(X, centers)
    labels = np.argmin(dist, axis=1)
    inertia = float(dist[np.arange(len(X)), labels].sum())
    history.append(inertia)
    return KMeansResult(labels, centers, inertia, np.array(history))


def kmeans(X: np.ndarray, k: int, seed: int = 0, n_init: int = 50, max_iter: int = 300, tol: float = 1e-10) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds; the restart with the lowest inertia wins."""
    X = np.asarray(X, dtype=float)
    if k < 1 or k > len(X):
        raise ArgumentError(f"need 1 <= k <= n_points, got k={k}, n={len(X)}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        res = _lloyd(X, _plus_plus(X, k, rng), max_iter, tol)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


# ---------------------------------------------------------------- retrieval


def cosine_similarity(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    def unit(M):
        n = np.linalg.norm(M, axis=1, keepdims=True)
        return M / np.where(n > 0, n, 1.0)

    return unit(np.asarray(A, dtype=float)) @ unit(np.asarray(B, dtype=float)).T


def retrieval_eval(queries: np.ndarray, candidates: np.ndarray, ground_truth: np.ndarray | None = None, ks=(1, 3, 10)) -> dict:
    """Cosine ranking of candidates per query; one correct candidate per query."""
    sim = cosine_similarity(queries, candidates)
    gt = np.arange(len(queries)) if ground_truth is None else np.asarray(ground_truth)
    ranks = pessimistic_ranks(sim, gt)
    out = {"mrr": mrr(ranks)}
    out.update({f"hits@{k}": hits_at_k(ranks, k) for k in ks})
    return out
