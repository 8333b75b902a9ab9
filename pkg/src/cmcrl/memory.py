"""Per-layer centroid memory, initialised from cluster means and momentum-updated per batch."""
from __future__ import annotations

import numpy as np
import torch

from .data import ConfigurationError


class CentroidBank:
    """``centroids[k]`` is an (m, d) tensor of unit rows for layer k; cluster j is row j-1.

    Rows never receive gradients. ``momentum_update`` applies
    ``row <- alpha * row + (1 - alpha) * z`` and renormalises.
    """

    def __init__(self, centroids: dict, alpha: float = 0.1, epoch_id: int = 0):
        if not 0.0 <= alpha <= 1.0:
            raise ConfigurationError(f"momentum alpha must be in [0, 1], got {alpha}")
        if not centroids:
            raise ConfigurationError("centroid set has no layers")
        self.centroids = {int(k): torch.as_tensor(v).detach().clone() for k, v in centroids.items()}
        ms = {v.shape[0] for v in self.centroids.values()}
        if len(ms) != 1:
            raise ValueError(f"layers disagree on cluster count: {sorted(ms)}")
        if ms == {0}:
            raise ConfigurationError("cannot initialise memory from an empty centroid set")
        self.alpha = float(alpha)
        self.epoch_id = epoch_id

    @classmethod
    def init_from(cls, centroids: dict, alpha: float = 0.1, epoch_id: int = 0) -> "CentroidBank":
        return cls({k: torch.from_numpy(np.asarray(v)) if isinstance(v, np.ndarray) else v
                    for k, v in centroids.items()}, alpha, epoch_id)

    @property
    def m(self) -> int:
        return next(iter(self.centroids.values())).shape[0]

    @property
    def layers(self) -> tuple:
        return tuple(sorted(self.centroids))

    @property
    def num_rows(self) -> int:
        return sum(v.shape[0] for v in self.centroids.values())

    def __getitem__(self, k: int) -> torch.Tensor:
        return self.centroids[k]

    def snapshot(self) -> dict:
        return {k: v.clone() for k, v in self.centroids.items()}

    @torch.no_grad()
    def momentum_update(self, k: int, j: int, z) -> None:
        if not 1 <= j <= self.m:
            raise ValueError(f"cluster id {j} outside 1..{self.m}; noise samples must not reach the memory")
        if self.alpha == 1.0:
            return
        row = self.centroids[k][j - 1]
        z = torch.as_tensor(z, dtype=row.dtype)
        if self.alpha == 0.0:
            row.copy_(z)  # z is unit-norm by contract
            return
        new = self.alpha * row + (1.0 - self.alpha) * z
        row.copy_(new / new.norm())

    @torch.no_grad()
    def update(self, embeddings: dict, pseudo_labels, mode: str = "sequential") -> None:
        """Apply a batch of updates.

        ``sequential``: one update per sample, in batch order.
        ``hardest``: per cluster in the batch, one update with the member whose
        summed similarity to its centroids is lowest.
        """
        labels = [int(j) for j in np.asarray(pseudo_labels).tolist()]
        layers = [k for k in self.layers if k in embeddings]
        if mode == "sequential":
            for i, j in enumerate(labels):
                for k in layers:
                    self.momentum_update(k, j, embeddings[k][i].detach())
        elif mode == "hardest":
            for j in dict.fromkeys(labels):
                idx = [i for i, lab in enumerate(labels) if lab == j]
                sims = sum(embeddings[k][idx].detach() @ self.centroids[k][j - 1] for k in layers)
                i = idx[int(torch.argmin(sims))]
                for k in layers:
                    self.momentum_update(k, j, embeddings[k][i].detach())
        else:
            raise ConfigurationError(f"unknown memory update mode {mode!r}")
