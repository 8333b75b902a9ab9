"""Four-stage convolutional encoder with per-stage projection heads and a linear classifier."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ConfigurationError

ALL_LAYERS = (1, 2, 3, 4)


@dataclass(frozen=True)
class EncoderConfig:
    stage_channel_widths: tuple = (32, 64, 128, 256)
    embedding_dim: int = 512
    use_ibn: bool = False
    projection: str = "nonlinear"
    layer_set: tuple = ALL_LAYERS
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_channel_widths", tuple(int(w) for w in self.stage_channel_widths))
        object.__setattr__(self, "layer_set", tuple(sorted({int(k) for k in self.layer_set})))
        if len(self.stage_channel_widths) != 4 or min(self.stage_channel_widths) < 1:
            raise ConfigurationError("stage_channel_widths must be 4 positive integers")
        if self.embedding_dim < 1:
            raise ConfigurationError("embedding_dim must be positive")
        if not self.layer_set or not set(self.layer_set) <= set(ALL_LAYERS):
            raise ConfigurationError(f"layer_set must be a nonempty subset of {ALL_LAYERS}, got {self.layer_set}")
        if self.projection not in ("linear", "nonlinear"):
            raise ConfigurationError(f"projection must be 'linear' or 'nonlinear', got {self.projection!r}")

    @property
    def head_layers(self) -> tuple:
        # layer 4 is always built: fine-tuning and clustering read z_4
        return tuple(sorted(set(self.layer_set) | {4}))


class IBN(nn.Module):
    """Instance norm on the first half of the channels, batch norm on the rest."""

    def __init__(self, planes: int):
        super().__init__()
        self.half = planes // 2
        self.IN = nn.InstanceNorm2d(self.half, affine=True)
        self.BN = nn.BatchNorm2d(planes - self.half)

    def forward(self, x):
        a, b = torch.split(x, [self.half, x.shape[1] - self.half], dim=1)
        return torch.cat([self.IN(a.contiguous()), self.BN(b.contiguous())], dim=1)


class Stage(nn.Module):
    def __init__(self, cin: int, cout: int, ibn: bool):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False)
        self.norm1 = IBN(cout) if ibn and cout >= 2 else nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = nn.BatchNorm2d(cout)

    def forward(self, x):
        x = F.relu(self.norm1(self.conv1(x)))
        return F.relu(self.norm2(self.conv2(x)))


def projection_head(cin: int, dim: int, kind: str) -> nn.Module:
    if kind == "linear":
        return nn.Linear(cin, dim)
    return nn.Sequential(nn.Linear(cin, dim), nn.ReLU(inplace=True), nn.Linear(dim, dim))


class Encoder(nn.Module):
    """Stage maps -> global average pooling -> projection head -> L2 normalisation.

    ``forward`` returns ``{k: (B, d) unit vectors}`` for every k in
    ``config.head_layers``. The main path (stages and head 4) does not depend
    on which other heads exist.
    """

    downsample = 16

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        widths = config.stage_channel_widths
        cins = (config.in_channels,) + widths[:3]
        # IBN only in the two shallow stages
        self.stages = nn.ModuleList(
            Stage(ci, co, config.use_ibn and k < 2) for k, (ci, co) in enumerate(zip(cins, widths))
        )
        self.heads = nn.ModuleDict(
            {str(k): projection_head(widths[k - 1], config.embedding_dim, config.projection) for k in config.head_layers}
        )

    def check_input(self, x: torch.Tensor):
        h, w = x.shape[-2:]
        if h % self.downsample or w % self.downsample:
            raise ConfigurationError(
                f"image size {h}x{w} is not divisible by the encoder downsampling factor {self.downsample}"
            )
        if x.shape[1] != self.config.in_channels:
            raise ConfigurationError(f"expected {self.config.in_channels} channels, got {x.shape[1]}")

    def forward(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        self.check_input(x)
        out = {}
        for k, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if str(k) in self.heads:
                pooled = x.mean(dim=(2, 3))
                out[k] = F.normalize(self.heads[str(k)](pooled), dim=1)
        return out


@torch.no_grad()
def encode(model: Encoder, images: np.ndarray, batch_size: int = 128) -> dict[int, np.ndarray]:
    """Eval-mode embeddings of (N, H, W, C) images: ``{k: (N, d) float32}``."""
    if len(images) == 0:
        raise ConfigurationError("cannot encode an empty batch")
    was_training = model.training
    model.eval()
    chunks: dict[int, list] = {}
    try:
        for start in range(0, len(images), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(images[start:start + batch_size].transpose(0, 3, 1, 2)))
            for k, v in model(x.float()).items():
                chunks.setdefault(k, []).append(v.numpy())
    finally:
        model.train(was_training)
    return {k: np.concatenate(v) for k, v in chunks.items()}


class LinearHead(nn.Module):
    """Affine classifier g: R^d -> R^K on the final-layer embedding."""

    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        if num_classes < 2:
            raise ConfigurationError("LinearHead needs at least 2 classes")
        self.fc = nn.Linear(dim, num_classes)

    @property
    def dim(self) -> int:
        return self.fc.in_features

    @property
    def num_classes(self) -> int:
        return self.fc.out_features

    def forward(self, z):
        return self.fc(z)


def classify(embedding, head: LinearHead) -> np.ndarray:
    """Scores ``W z + b`` for one embedding (d,) or a batch (N, d)."""
    z = np.asarray(embedding, dtype=np.float32)
    if z.shape[-1] != head.dim:
        raise ValueError(f"embedding length {z.shape[-1]} does not match head input dim {head.dim}")
    w = head.fc.weight.detach().numpy()
    b = head.fc.bias.detach().numpy()
    return z @ w.T + b


def predict(scores: np.ndarray) -> np.ndarray:
    """1-based class predictions; ties go to the lowest index."""
    return np.argmax(scores, axis=-1) + 1


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
