"""Multi-layer InfoNCE against cluster centroids.

For a sample with per-layer unit vectors z_k and pseudo-label j+, the logit
of cluster j is ``s_j = sum_k <z_k, c_{j,k}> / tau`` and the loss is
``logsumexp_j(s_j) - s_{j+}``. The layer sum sits inside the exponent; the
``averaged`` variant instead averages one InfoNCE term per layer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import ConfigurationError


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.05
    layer_set: tuple = (1, 2, 3, 4)
    variant: str = "summed"  # or "averaged"

    def __post_init__(self):
        object.__setattr__(self, "layer_set", tuple(sorted({int(k) for k in self.layer_set})))
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")
        if self.variant not in ("summed", "averaged"):
            raise ConfigurationError(f"unknown loss variant {self.variant!r}")


def _as_layer_arrays(bank) -> dict:
    src = bank.centroids if hasattr(bank, "centroids") else bank
    return {k: np.asarray(v.detach().numpy() if torch.is_tensor(v) else v, dtype=np.float64) for k, v in src.items()}


def logits(sample: dict, bank, layer_set, temperature: float) -> np.ndarray:
    """Summed per-cluster logits (m,) for one sample."""
    c = _as_layer_arrays(bank)
    return sum(c[k] @ np.asarray(sample[k], dtype=np.float64) for k in layer_set) / temperature


def mlnce(sample: dict, label: int, bank, config: LossConfig) -> float:
    """Loss for one sample; ``label`` is the 1-based pseudo-label."""
    c = _as_layer_arrays(bank)
    m = next(iter(c.values())).shape[0]
    if m == 0:
        raise ValueError("empty centroid memory")
    if not 1 <= label <= m:
        raise ValueError(f"pseudo-label {label} outside 1..{m}; noise samples are excluded upstream")
    missing = set(config.layer_set) - set(c)
    if missing:
        raise ValueError(f"memory lacks layers {sorted(missing)}")
    if config.variant == "averaged":
        terms = [_nce(logits(sample, c, (k,), config.temperature), label) for k in config.layer_set]
        return float(np.mean(terms))
    return _nce(logits(sample, c, config.layer_set, config.temperature), label)


def _nce(s: np.ndarray, label: int) -> float:
    top = s.max()
    return float(top + np.log(np.exp(s - top).sum()) - s[label - 1])


def mlnce_gradient(sample: dict, label: int, bank, config: LossConfig) -> dict:
    """Analytic d loss / d z_k = (sum_j p_j c_{j,k} - c_{j+,k}) / tau, summed variant."""
    c = _as_layer_arrays(bank)
    s = logits(sample, c, config.layer_set, config.temperature)
    p = np.exp(s - s.max())
    p /= p.sum()
    p[label - 1] -= 1.0
    return {k: (p @ c[k]) / config.temperature for k in config.layer_set}


def mlnce_gradient_check(sample: dict, label: int, bank, config: LossConfig, h: float = 1e-4) -> float:
    """Max relative error between the analytic gradient and central differences.

    The error of each layer's gradient is measured against the largest
    gradient magnitude across all layers (norm-wise relative error), which
    stays meaningful when individual components are near zero.
    """
    analytic = mlnce_gradient(sample, label, bank, config)
    base = {k: np.asarray(v, dtype=np.float64).copy() for k, v in sample.items()}
    numeric = {}
    for k in config.layer_set:
        g = np.zeros_like(base[k])
        for i in range(base[k].size):
            plus = {kk: vv.copy() for kk, vv in base.items()}
            minus = {kk: vv.copy() for kk, vv in base.items()}
            plus[k][i] += h
            minus[k][i] -= h
            g[i] = (mlnce(plus, label, bank, config) - mlnce(minus, label, bank, config)) / (2 * h)
        numeric[k] = g
    scale = max(max(np.abs(analytic[k]).max(), np.abs(numeric[k]).max()) for k in config.layer_set)
    if scale == 0.0:
        return 0.0
    return float(max(np.abs(analytic[k] - numeric[k]).max() for k in config.layer_set) / scale)


def batch_logits(z: dict, centroids: dict, layer_set, temperature: float) -> torch.Tensor:
    return sum(z[k] @ centroids[k].T for k in layer_set) / temperature


def mlnce_batch(z: dict, labels: torch.Tensor, centroids: dict, config: LossConfig) -> torch.Tensor:
    """Mean loss over a batch of non-noise samples; ``labels`` are 1-based.

    ``centroids`` are treated as constants (no gradient flows into the memory).
    """
    if (labels < 1).any():
        raise ValueError("noise samples (label -1) must be removed before the loss")
    target = labels - 1
    cents = {k: centroids[k].detach() for k in config.layer_set}
    if config.variant == "averaged":
        return torch.stack(
            [F.cross_entropy(batch_logits(z, cents, (k,), config.temperature), target) for k in config.layer_set]
        ).mean()
    return F.cross_entropy(batch_logits(z, cents, config.layer_set, config.temperature), target)
