"""Pseudo-labelling: k-reciprocal Jaccard distances, DBSCAN and cluster centroids.

Re-ranked distance (k-reciprocal encoding), for embeddings x_1..x_N:

* ``R(i, k)``: the members of the k+1 nearest neighbours of i (self included)
  that also have i among their own k+1 nearest neighbours.
* Expansion: start from ``R(i, k1)``; for every candidate c in it, add
  ``R(c, round(k1/2))`` when more than 2/3 of that set already lies in
  ``R(i, k1)``.
* Encoding: ``V[i, j] = softmax_j(-||x_i - x_j||^2)`` over the expanded set,
  zero elsewhere. With ``k2 > 1`` each row is replaced by the mean of the rows
  of its k2 nearest neighbours (local query expansion).
* Distance: ``d(i, j) = 1 - sum_l min(V[i,l], V[j,l]) / sum_l max(V[i,l], V[j,l])``,
  optionally mixed with the normalised squared Euclidean distance by
  ``lambda_value``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.cluster import DBSCAN

from .data import ConfigurationError


@dataclass(frozen=True)
class ClusterConfig:
    eps: float = 0.4
    k1: int = 30
    k2: int = 6
    min_samples: int = 4
    lambda_value: float = 0.0
    features: str = "final"  # "final": z_4 only; "concat": all layers in layer_set

    def __post_init__(self):
        if not 0.0 < self.eps <= 1.0:
            raise ConfigurationError(f"eps must be in (0, 1], got {self.eps}")
        if not self.k1 > self.k2 >= 1:
            raise ConfigurationError(f"need k1 > k2 >= 1, got k1={self.k1}, k2={self.k2}")
        if self.min_samples < 1:
            raise ConfigurationError("min_samples must be >= 1")
        if not 0.0 <= self.lambda_value <= 1.0:
            raise ConfigurationError("lambda_value must be in [0, 1]")
        if self.features not in ("final", "concat"):
            raise ConfigurationError(f"features must be 'final' or 'concat', got {self.features!r}")


@dataclass
class ClusterAssignment:
    """Pseudo-labels in ``{-1} U {1..m}``; -1 marks noise."""

    pseudo_labels: np.ndarray

    def __post_init__(self):
        self.pseudo_labels = np.asarray(self.pseudo_labels, dtype=np.int64)
        ids = np.unique(self.pseudo_labels[self.pseudo_labels != -1])
        if len(ids) and (ids[0] < 1 or not np.array_equal(ids, np.arange(1, len(ids) + 1))):
            raise ValueError("cluster ids must be exactly 1..m")

    def __len__(self):
        return len(self.pseudo_labels)

    @property
    def m(self) -> int:
        return int(self.pseudo_labels.max(initial=0))

    @property
    def members(self) -> list[np.ndarray]:
        """Member index arrays C_1..C_m."""
        return [np.flatnonzero(self.pseudo_labels == j) for j in range(1, self.m + 1)]

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.pseudo_labels[self.pseudo_labels > 0], minlength=self.m + 1)[1:]

    @property
    def n_clustered(self) -> int:
        return int((self.pseudo_labels != -1).sum())


def squared_distances(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sq = (x * x).sum(1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _k_reciprocal(rank: np.ndarray, i: int, k: int) -> np.ndarray:
    forward = rank[i, : k + 1]
    backward = rank[forward, : k + 1]
    return forward[(backward == i).any(axis=1)]


def jaccard_distance_matrix(embeddings, k1: int = 30, k2: int = 6, lambda_value: float = 0.0) -> np.ndarray:
    """Symmetric (N, N) k-reciprocal Jaccard distances in [0, 1] with zero diagonal."""
    x = np.asarray(embeddings, dtype=np.float64)
    n = len(x)
    if n <= k1:
        raise ConfigurationError(f"k1={k1} must be smaller than the number of samples N={n}; lower k1")
    if not k1 > k2 >= 1:
        raise ConfigurationError(f"need k1 > k2 >= 1, got k1={k1}, k2={k2}")
    dist = squared_distances(x)
    rank = np.argsort(dist, axis=1, kind="stable")
    half = int(np.around(k1 / 2))
    recip = [_k_reciprocal(rank, i, k1) for i in range(n)]
    recip_half = [_k_reciprocal(rank, i, half) for i in range(n)]

    V = np.zeros((n, n))
    for i in range(n):
        base = recip[i]
        expansion = [base]
        for c in base:
            cand = recip_half[c]
            if len(np.intersect1d(cand, base)) > 2.0 / 3.0 * len(cand):
                expansion.append(cand)
        idx = np.unique(np.concatenate(expansion))
        w = -dist[i, idx]
        w = np.exp(w - w.max())
        V[i, idx] = w / w.sum()

    if k2 != 1:
        V = V[rank[:, :k2]].mean(axis=1)

    jac = np.empty((n, n))
    block = max(1, int(2**24 // (n * n)))
    for s in range(0, n, block):
        vi = V[s:s + block, None, :]
        inter = np.minimum(vi, V[None]).sum(-1)
        union = np.maximum(vi, V[None]).sum(-1)
        jac[s:s + block] = 1.0 - inter / union
    jac = 0.5 * (jac + jac.T)
    if lambda_value > 0:
        jac = (1.0 - lambda_value) * jac + lambda_value * dist / max(dist.max(), 1e-12)
    np.clip(jac, 0.0, 1.0, out=jac)
    np.fill_diagonal(jac, 0.0)
    return jac


def relabel_by_first_member(labels: np.ndarray) -> np.ndarray:
    """Map non-negative cluster ids to 1..m in order of first appearance; noise stays -1."""
    labels = np.asarray(labels)
    out = np.full(len(labels), -1, dtype=np.int64)
    mapping: dict[int, int] = {}
    for i, lab in enumerate(labels):
        if lab < 0:
            continue
        if lab not in mapping:
            mapping[lab] = len(mapping) + 1
        out[i] = mapping[lab]
    return out


def dbscan(distances: np.ndarray, eps: float = 0.4, min_samples: int = 4) -> ClusterAssignment:
    """DBSCAN on a precomputed distance matrix.

    A core point has at least ``min_samples`` points (itself included) within
    ``eps``. Border points join the first cluster, in index order of cluster
    seeds, that reaches them.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError("distance matrix must be square")
    labels = DBSCAN(eps=eps, min_samples=min_samples, metric="precomputed").fit_predict(d)
    return ClusterAssignment(relabel_by_first_member(labels))


def cluster_features(embeddings: dict, config: ClusterConfig, layer_set) -> np.ndarray:
    if config.features == "final":
        return embeddings[4]
    parts = [embeddings[k] for k in sorted(layer_set)]
    z = np.concatenate(parts, axis=1)
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def pseudo_label(embeddings: dict, config: ClusterConfig, layer_set=(4,)) -> ClusterAssignment:
    """Jaccard distances over the clustering features, then DBSCAN."""
    feats = cluster_features(embeddings, config, layer_set)
    dist = jaccard_distance_matrix(feats, config.k1, config.k2, config.lambda_value)
    return dbscan(dist, config.eps, config.min_samples)


def centroids(embeddings: dict, assignment: ClusterAssignment, normalize: bool = True) -> dict[int, np.ndarray]:
    """Per-layer (m, d) cluster means over non-noise members, unit-normalised by default."""
    labels = assignment.pseudo_labels
    m = assignment.m
    out = {}
    for k, z in embeddings.items():
        z = np.asarray(z)
        if len(z) != len(labels):
            raise ValueError(f"layer {k}: {len(z)} embeddings but {len(labels)} labels")
        if m == 0:
            out[k] = np.zeros((0, z.shape[1]), dtype=z.dtype)
            continue
        keep = labels > 0
        sums = np.zeros((m, z.shape[1]), dtype=np.float64)
        np.add.at(sums, labels[keep] - 1, z[keep])
        means = sums / assignment.sizes[:, None]
        if normalize:
            means = means / np.maximum(np.linalg.norm(means, axis=1, keepdims=True), 1e-12)
        out[k] = means.astype(z.dtype)
    return out
