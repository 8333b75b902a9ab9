"""Clustering-guided multi-layer contrastive pre-training and frozen-encoder fine-tuning."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import augment as aug
from .checkpoint import (
    CheckpointError,
    arrays_to_state_dict,
    read_blobs,
    read_manifest,
    state_dict_to_arrays,
    write_blobs,
    write_manifest,
)
from .cluster import ClusterAssignment, centroids, pseudo_label
from .config import RunConfig, config_from_flat, flat_items
from .data import ConfigurationError, LabeledImageSet
from .loss import mlnce_batch
from .memory import CentroidBank
from .metrics import EvaluationError, MetricsReport, ari, cacc, classification_metrics
from .model import Encoder, LinearHead, classify, encode, predict

logger = logging.getLogger(__name__)

EPOCH_COLUMNS = ["epoch", "m", "n_clustered", "loss", "cacc", "ari", "lr", "layer_set", "wall_time"]


@dataclass
class TrainState:
    config: RunConfig
    model: Encoder
    optimizer: torch.optim.Optimizer
    epoch: int = 0  # completed epochs
    bank: CentroidBank | None = None
    assignment: ClusterAssignment | None = None
    history: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)


def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


def build_optimizer(model: Encoder, config: RunConfig) -> torch.optim.Optimizer:
    t = config.train
    if t.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=t.lr, weight_decay=t.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=t.lr, momentum=t.momentum, weight_decay=t.weight_decay)


def init_state(config: RunConfig) -> TrainState:
    torch.manual_seed(config.train.seed)
    model = Encoder(config.model)
    return TrainState(config, model, build_optimizer(model, config))


def untrained_encoder(config: RunConfig, images: np.ndarray) -> Encoder:
    """A seeded, never-optimised encoder with BatchNorm statistics taken from ``images``.

    This is the no-pretraining baseline: the same network a pretraining run
    starts from, as seen by its first clustering step.
    """
    torch.manual_seed(config.train.seed)
    model = Encoder(config.model)
    recalibrate_batchnorm(model, images)
    return model


def epoch_lr(config: RunConfig, epoch: int) -> float:
    t = config.train
    step_at = math.ceil(t.lr_step_fraction * t.epochs)
    return t.lr * (t.lr_gamma if epoch >= step_at else 1.0)


def sample_pk(assignment: ClusterAssignment, batch_size: int, num_instances: int, rng: np.random.Generator):
    """Indices and pseudo-labels for a batch of P clusters x num_instances samples.

    Clusters are drawn uniformly without replacement when m >= P (with
    replacement otherwise); instances uniformly with replacement.
    """
    p = batch_size // num_instances
    members = assignment.members
    m = len(members)
    chosen = rng.choice(m, size=p, replace=m < p)
    idx, labels = [], []
    for c in chosen:
        pool = members[c]
        idx.extend(pool[rng.integers(0, len(pool), size=num_instances)])
        labels.extend([c + 1] * num_instances)
    return np.asarray(idx, dtype=np.int64), np.asarray(labels, dtype=np.int64)


def _bn_initialised(model) -> bool:
    return all(int(m.num_batches_tracked) > 0 for m in model.modules()
               if isinstance(m, torch.nn.modules.batchnorm._BatchNorm))


@torch.no_grad()
def recalibrate_batchnorm(model: Encoder, images: np.ndarray, batch_size: int = 64) -> None:
    """Set BatchNorm running statistics to exact averages over clean ``images``.

    Without this, an untrained encoder in eval mode uses the default unit
    statistics and its deep embeddings collapse onto a single direction.
    """
    bns = [m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None  # cumulative average
    was_training = model.training
    model.train()
    try:
        for s in range(0, len(images), batch_size):
            model(_to_tensor(images[s:s + batch_size]))
    finally:
        for m, mom in zip(bns, saved):
            m.momentum = mom
        model.train(was_training)


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=np.float32))


def _clustering_scores(labels, assignment):
    try:
        return cacc(labels, assignment.pseudo_labels), ari(labels, assignment.pseudo_labels)
    except EvaluationError:
        return float("nan"), float("nan")


def run_epoch(state: TrainState, images: np.ndarray, hidden_labels: np.ndarray | None) -> dict:
    """One pass of: embed all -> cluster -> init memory -> S contrastive steps."""
    cfg = state.config
    t = cfg.train
    epoch = state.epoch
    start = time.perf_counter()
    lr = epoch_lr(cfg, epoch)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    if not _bn_initialised(state.model):
        recalibrate_batchnorm(state.model, images)
    emb = encode(state.model, images)
    assignment = pseudo_label(emb, cfg.cluster, cfg.model.layer_set)
    state.assignment = assignment
    row = {"epoch": epoch + 1, "m": assignment.m, "n_clustered": assignment.n_clustered, "lr": lr,
           "layer_set": ",".join(str(k) for k in cfg.model.layer_set)}
    if hidden_labels is not None:
        row["cacc"], row["ari"] = _clustering_scores(hidden_labels, assignment)
    else:
        row["cacc"] = row["ari"] = float("nan")

    if assignment.m == 0:
        logger.warning("epoch %d: DBSCAN found no clusters; skipping optimisation", epoch + 1)
        state.bank = None
        row["loss"] = float("nan")
    else:
        layers = cfg.model.layer_set
        state.bank = CentroidBank.init_from(centroids({k: emb[k] for k in layers}, assignment),
                                            cfg.memory.alpha, epoch_id=epoch + 1)
        rng = np.random.default_rng([t.seed, cfg.augment.seed, epoch])
        state.model.train()
        losses = []
        for _ in range(t.iters):
            idx, labels = sample_pk(assignment, t.batch_size, t.num_instances, rng)
            batch = aug.apply_batch(images[idx], cfg.augment, rng)
            z = state.model(_to_tensor(batch))
            target = torch.from_numpy(labels)
            loss = mlnce_batch(z, target, state.bank.centroids, cfg.loss)
            state.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            state.optimizer.step()
            state.bank.update({k: z[k].detach() for k in layers}, labels, cfg.memory.update)
            losses.append(loss.item())
        state.step_losses.append(losses)
        row["loss"] = float(np.mean(losses))
    row["wall_time"] = time.perf_counter() - start
    state.epoch += 1
    state.history.append(row)
    logger.info("epoch %d: m=%d N_C=%d loss=%.4f CACC=%.3f ARI=%.3f", row["epoch"], row["m"],
                row["n_clustered"], row["loss"], row["cacc"], row["ari"])
    return row


def pretrain(pretrain_set: LabeledImageSet, config: RunConfig, state: TrainState | None = None,
             checkpoint_dir=None, epochs: int | None = None) -> TrainState:
    """Run (or resume) pre-training up to ``config.train.epochs`` epochs.

    ``epochs`` caps how many epochs this call runs. Ground-truth labels of
    ``pretrain_set`` are only used to score the clustering.
    """
    if len(pretrain_set) == 0:
        raise ConfigurationError("pretrain set is empty")
    set_deterministic(config.train.deterministic)
    if state is None:
        state = init_state(config)
    images = pretrain_set.images
    target = config.train.epochs if epochs is None else min(config.train.epochs, state.epoch + epochs)
    every = config.train.checkpoint_every
    while state.epoch < target:
        run_epoch(state, images, pretrain_set.labels)
        if checkpoint_dir is not None and every and state.epoch % every == 0:
            save_state(state, Path(checkpoint_dir) / f"epoch_{state.epoch:03d}")
    if checkpoint_dir is not None:
        save_state(state, Path(checkpoint_dir) / "final")
    return state


# -- fine-tuning and evaluation ---------------------------------------------

def final_embeddings(model: Encoder, images: np.ndarray) -> np.ndarray:
    return encode(model, images)[4]


def finetune(model: Encoder, finetune_set: LabeledImageSet, epochs: int = 50, lr: float = 0.01,
             batch_size: int = 64, momentum: float = 0.9, seed: int = 0, num_classes: int | None = None):
    """Train a linear head on frozen z_4 embeddings; returns (head, curve rows).

    The encoder runs once in eval mode without gradients, so its parameters
    and buffers are untouched.
    """
    k = num_classes or finetune_set.num_classes
    if len(finetune_set) == 0:
        raise ConfigurationError("finetune set is empty")
    if finetune_set.labels.max() > k:
        raise ConfigurationError(f"labels exceed head size K={k}")
    z = final_embeddings(model, finetune_set.images)
    return fit_head(z, finetune_set.labels, k, epochs, lr, batch_size, momentum, seed)


def fit_head(embeddings: np.ndarray, labels: np.ndarray, num_classes: int, epochs: int = 50, lr: float = 0.01,
             batch_size: int = 64, momentum: float = 0.9, seed: int = 0):
    """Softmax cross-entropy training of a LinearHead on fixed embeddings (labels 1..K)."""
    z = torch.from_numpy(np.asarray(embeddings, dtype=np.float32))
    y = torch.from_numpy(np.asarray(labels, dtype=np.int64) - 1)
    gen = torch.Generator().manual_seed(seed)
    head = LinearHead(z.shape[1], num_classes)
    with torch.no_grad():
        # seeded init independent of the global RNG
        bound = 1.0 / math.sqrt(z.shape[1])
        head.fc.weight.copy_(torch.empty_like(head.fc.weight).uniform_(-bound, bound, generator=gen))
        head.fc.bias.copy_(torch.empty_like(head.fc.bias).uniform_(-bound, bound, generator=gen))
    opt = torch.optim.SGD(head.parameters(), lr=lr, momentum=momentum)
    curve = []
    for ep in range(epochs):
        perm = torch.randperm(len(y), generator=gen)
        total = 0.0
        for s in range(0, len(y), batch_size):
            b = perm[s:s + batch_size]
            loss = F.cross_entropy(head(z[b]), y[b])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(b)
        with torch.no_grad():
            train_acc = (head(z).argmax(1) == y).float().mean().item()
        curve.append({"epoch": ep + 1, "loss": total / len(y), "train_acc": train_acc})
    return head, curve


def evaluate(model: Encoder, head: LinearHead, test_set: LabeledImageSet, history=None) -> MetricsReport:
    if len(test_set) == 0:
        raise EvaluationError("test set is empty")
    if test_set.num_classes != head.num_classes:
        raise ConfigurationError(f"head has K={head.num_classes}, test set has K={test_set.num_classes}")
    scores = classify(final_embeddings(model, test_set.images), head)
    acc, rec, prec, f1, cm = classification_metrics(test_set.labels, predict(scores), head.num_classes)
    report = MetricsReport(acc=acc, recall=rec, precision=prec, f1=f1, confusion_matrix=cm)
    if history:
        report.cacc = history[-1].get("cacc", float("nan"))
        report.ari = history[-1].get("ari", float("nan"))
    return report


# -- persistence ------------------------------------------------------------

def write_epoch_csv(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EPOCH_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_epoch_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out = {}
            for k, v in r.items():
                if k in ("epoch", "m", "n_clustered"):
                    out[k] = int(v)
                elif k == "layer_set":
                    out[k] = v
                else:
                    out[k] = float(v)
            rows.append(out)
    return rows


def _optimizer_arrays(state: TrainState) -> dict:
    names = {id(p): n for n, p in state.model.named_parameters()}
    out = {}
    for p, st in state.optimizer.state.items():
        for key, val in st.items():
            if torch.is_tensor(val):
                out[f"{names[id(p)]}::{key}"] = val.detach().float().numpy()
    return out


def _restore_optimizer(state: TrainState, arrays: dict) -> None:
    params = dict(state.model.named_parameters())
    for key, arr in arrays.items():
        name, _, slot = key.partition("::")
        if name not in params:
            raise CheckpointError(f"optimizer state for unknown parameter {name}")
        p = params[name]
        t = torch.from_numpy(arr.copy())
        if slot == "step":
            t = t.reshape(())
        state.optimizer.state[p][slot] = t


def save_state(state: TrainState, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_blobs(out / "params.bin", state_dict_to_arrays(state.model.state_dict()))
    write_blobs(out / "optimizer.bin", _optimizer_arrays(state))
    if state.bank is not None:
        write_blobs(out / "bank.bin", {f"layer{k}": v.float() for k, v in state.bank.centroids.items()})
    elif (out / "bank.bin").exists():
        (out / "bank.bin").unlink()
    manifest = {"format": "cmcrl-checkpoint/1", "kind": "encoder", "epoch": state.epoch}
    manifest.update(flat_items(state.config))
    if state.bank is not None:
        manifest["bank.epoch_id"] = state.bank.epoch_id
        manifest["bank.alpha"] = state.bank.alpha
    if state.history:
        for k, v in state.history[-1].items():
            manifest[f"metric.{k}"] = v
    write_manifest(out / "manifest.txt", manifest)
    write_epoch_csv(state.history, out / "epochs.csv")
    return out


def load_state(ckpt_dir, config: RunConfig | None = None) -> TrainState:
    """Rebuild a TrainState; ``config`` defaults to the one echoed in the manifest."""
    ckpt = Path(ckpt_dir)
    if not ckpt.is_dir():
        raise CheckpointError(f"checkpoint directory not found: {ckpt}")
    manifest = read_manifest(ckpt / "manifest.txt")
    if manifest.get("kind") != "encoder":
        raise CheckpointError(f"{ckpt} is not an encoder checkpoint")
    if config is None:
        config = config_from_flat(manifest)
    torch.manual_seed(config.train.seed)
    model = Encoder(config.model)
    model.load_state_dict(arrays_to_state_dict(read_blobs(ckpt / "params.bin"), model.state_dict()))
    state = TrainState(config, model, build_optimizer(model, config), epoch=int(manifest["epoch"]))
    _restore_optimizer(state, read_blobs(ckpt / "optimizer.bin"))
    if (ckpt / "bank.bin").exists():
        bank = read_blobs(ckpt / "bank.bin")
        state.bank = CentroidBank({int(k[5:]): torch.from_numpy(v.copy()) for k, v in bank.items()},
                                  float(manifest.get("bank.alpha", config.memory.alpha)),
                                  int(manifest.get("bank.epoch_id", state.epoch)))
    if (ckpt / "epochs.csv").exists():
        state.history = read_epoch_csv(ckpt / "epochs.csv")
    return state


def save_head(head: LinearHead, out_dir, class_names=None, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_blobs(out / "head.bin", state_dict_to_arrays(head.state_dict()))
    manifest = {"format": "cmcrl-checkpoint/1", "kind": "head", "dim": head.dim, "num_classes": head.num_classes}
    if class_names:
        manifest["class_names"] = ",".join(class_names)
    manifest.update(extra or {})
    write_manifest(out / "manifest.txt", manifest)
    return out


def load_head(ckpt_dir) -> LinearHead:
    ckpt = Path(ckpt_dir)
    if not ckpt.is_dir():
        raise CheckpointError(f"head checkpoint directory not found: {ckpt}")
    manifest = read_manifest(ckpt / "manifest.txt")
    if manifest.get("kind") != "head":
        raise CheckpointError(f"{ckpt} is not a head checkpoint")
    head = LinearHead(int(manifest["dim"]), int(manifest["num_classes"]))
    head.load_state_dict(arrays_to_state_dict(read_blobs(ckpt / "head.bin"), head.state_dict()))
    return head
