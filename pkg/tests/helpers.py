"""Small configurations and corpora for fast training tests."""
from cmcrl.config import load_config
from cmcrl.data import SplitSpec, make_synthetic, split

TINY_OVERRIDES = {
    "data.image_size": "16",
    "model.stage_channel_widths": "4,8,8,16",
    "model.embedding_dim": "16",
    "cluster.k1": "6",
    "cluster.k2": "2",
    "cluster.min_samples": "2",
    "cluster.eps": "0.6",
    "train.epochs": "2",
    "train.iters": "3",
    "train.optimizer": "adam",
    "train.lr": "1e-3",
    "augment.pad_pixels": "2",
}


def tiny_config(**extra):
    overrides = dict(TINY_OVERRIDES)
    overrides.update({k.replace("__", "."): str(v) for k, v in extra.items()})
    return load_config(overrides=overrides)


def tiny_corpus(seed=0):
    ds = make_synthetic(3, 16, 16, seed)
    return ds, split(ds, SplitSpec(0.6, 0.2, 0.2, 0))
