"""Seeded Gaussian-cluster datasets for tests, benchmarks and experiments.

Each cluster has a center on a sphere of radius ``radius`` and isotropic
Gaussian spread. Two labelling modes:

* ``"cluster"``: the label is the cluster id.
* ``"local"``: cluster ``c`` splits along its own random direction into
  labels ``c`` and ``(c + 1) % n_clusters``. No single global linear rule
  fits every cluster, so a model customized to one cluster beats a generic
  one there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class ClusterTask:
    centers: np.ndarray      # (n_clusters, d)
    directions: np.ndarray   # (n_clusters, d), unit, orthogonal to the center
    spread: float
    label_mode: str = "local"

    @property
    def n_clusters(self) -> int:
        return int(self.centers.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centers.shape[1])

    @property
    def num_classes(self) -> int:
        return self.n_clusters

    def label(self, X: np.ndarray, cluster_ids: np.ndarray) -> np.ndarray:
        if self.label_mode == "cluster":
            return cluster_ids.astype(np.int64)
        side = np.einsum("ij,ij->i", X - self.centers[cluster_ids], self.directions[cluster_ids]) > 0
        return np.where(side, (cluster_ids + 1) % self.n_clusters, cluster_ids).astype(np.int64)

    def sample(self, n: int, rng: np.random.Generator, cluster: int | None = None):
        """Draw ``n`` points (one cluster, or balanced round-robin over all)."""
        if cluster is None:
            cids = np.arange(n) % self.n_clusters
        else:
            cids = np.full(n, cluster)
        X = self.centers[cids] + self.spread * rng.standard_normal((n, self.dim))
        return X, self.label(X, cids), cids


def make_task(d: int = 16, n_clusters: int = 4, seed: int = 0, radius: float = 1.0,
              spread: float = 0.2, label_mode: str = "local") -> ClusterTask:
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_clusters, d))
    centers *= radius / np.linalg.norm(centers, axis=1, keepdims=True)
    dirs = rng.standard_normal((n_clusters, d))
    for c in range(n_clusters):
        u = centers[c] / np.linalg.norm(centers[c])
        dirs[c] -= (dirs[c] @ u) * u
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return ClusterTask(centers=centers, directions=dirs, spread=spread, label_mode=label_mode)


def make_corpus(n: int = 400, d: int = 16, n_clusters: int = 4, seed: int = 0, **task_kw):
    """Return ``(task, X, labels, cluster_ids)`` for a balanced corpus."""
    task = make_task(d=d, n_clusters=n_clusters, seed=seed, **task_kw)
    X, y, cids = task.sample(n, np.random.default_rng([seed, 1]))
    return task, X, y, cids
