"""Clustering-guided multi-layer contrastive representation learning (CMCRL).

Pipeline: embed unlabeled images with a four-stage encoder, pseudo-label them
with DBSCAN over k-reciprocal Jaccard distances, contrast every exposed layer
against momentum-updated cluster centroids, then fit a linear head on the
frozen encoder with a few labeled images.
"""
from .config import RunConfig, load_config
from .data import ConfigurationError, IngestionError, LabeledImageSet, load_corpus, make_synthetic, split
from .model import Encoder, EncoderConfig, LinearHead

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "load_config",
    "ConfigurationError",
    "IngestionError",
    "LabeledImageSet",
    "load_corpus",
    "make_synthetic",
    "split",
    "Encoder",
    "EncoderConfig",
    "LinearHead",
]
