"""Image corpora: folder-per-class loading, stratified splits and a synthetic generator.

Class labels are 1-based (``1..K``) throughout the package, matching the
pseudo-label convention where ``-1`` marks noise and clusters are ``1..m``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

logger = logging.getLogger(__name__)

SPLIT_TAGS = ("pretrain", "finetune", "test", "all")


class ConfigurationError(ValueError):
    """Invalid configuration or arguments."""


class IngestionError(RuntimeError):
    """A corpus could not be read into a usable image set."""


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64 in 1..K
    class_names: list[str]
    split_tag: str = "all"
    indices: np.ndarray | None = None  # positions in the parent corpus
    labels_hidden: bool = False

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConfigurationError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConfigurationError("images and labels differ in length")
        if len(self.class_names) < 2:
            raise ConfigurationError("need at least 2 classes")
        if len(self.labels) and (self.labels.min() < 1 or self.labels.max() > len(self.class_names)):
            raise ConfigurationError("labels must lie in 1..K")
        if self.split_tag not in SPLIT_TAGS:
            raise ConfigurationError(f"unknown split tag {self.split_tag!r}")
        if self.indices is None:
            self.indices = np.arange(len(self.labels))

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def subset(self, idx, split_tag: str, labels_hidden: bool = False) -> "LabeledImageSet":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            images=self.images[idx],
            labels=self.labels[idx],
            indices=self.indices[idx],
            split_tag=split_tag,
            labels_hidden=labels_hidden,
        )


@dataclass(frozen=True)
class SplitSpec:
    pretrain_fraction: float = 0.6
    finetune_fraction: float = 0.15
    test_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        fr = self.fractions
        if any(f < 0 for f in fr):
            raise ConfigurationError(f"split fractions must be nonnegative, got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigurationError(f"split fractions must sum to 1, got {sum(fr)!r}")

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.pretrain_fraction, self.finetune_fraction, self.test_fraction)


def _decode(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")  # grayscale replicated, alpha dropped
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def load_corpus(root, target_size: int) -> LabeledImageSet:
    """Read ``root/<class_name>/<image>`` into a LabeledImageSet.

    Classes are indexed by lexicographic order of the subdirectory names and
    files within a class are read in sorted order. Undecodable files are
    skipped with a warning.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"corpus root not found: {root}")
    if target_size < 1:
        raise ConfigurationError("target_size must be positive")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise IngestionError(f"{root} must contain at least two class directories")

    images, labels = [], []
    for label, cdir in enumerate(class_dirs, start=1):
        files = sorted(p for p in cdir.iterdir() if p.is_file())
        if not files:
            raise IngestionError(f"class directory {cdir.name!r} is empty")
        n_ok = 0
        for f in files:
            try:
                images.append(_decode(f, target_size))
            except (UnidentifiedImageError, OSError) as exc:
                logger.warning("skipping undecodable file %s (%s)", f, exc)
                continue
            labels.append(label)
            n_ok += 1
        if n_ok == 0:
            raise IngestionError(f"class {cdir.name!r} has no decodable images")
    return LabeledImageSet(np.stack(images), np.array(labels), [p.name for p in class_dirs])


def split(dataset: LabeledImageSet, spec: SplitSpec):
    """Stratified, seeded three-way split into (pretrain, finetune, test).

    Split sizes are the largest-remainder rounding of ``N * fraction``; every
    class contributes the floor or the ceiling of its own quota to every
    split (see ``stratified_counts``). A class with fewer images than nonzero
    fractions goes to pretrain whole. The pretrain part keeps its labels but
    is flagged ``labels_hidden``.
    """
    rng = np.random.default_rng(spec.seed)
    fractions = np.array(spec.fractions)
    n_parts = int((fractions > 0).sum())
    parts = [[], [], []]
    pools = []
    for c in range(1, dataset.num_classes + 1):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) == 0:
            continue
        idx = idx[rng.permutation(len(idx))]
        if len(idx) < n_parts:
            logger.warning(
                "class %s has %d images (< %d splits); all go to pretrain",
                dataset.class_names[c - 1], len(idx), n_parts,
            )
            parts[0].extend(idx)
        else:
            pools.append(idx)
    if pools:
        counts = stratified_counts([len(p) for p in pools], fractions)
        for idx, row in zip(pools, counts):
            start = 0
            for p, cnt in enumerate(row):
                parts[p].extend(idx[start:start + cnt])
                start += cnt
    tags = ("pretrain", "finetune", "test")
    return tuple(
        dataset.subset(np.sort(np.array(p, dtype=np.int64)), tag, labels_hidden=(tag == "pretrain"))
        for p, tag in zip(parts, tags)
    )


def _apportion(n: int, fractions: np.ndarray) -> list[int]:
    raw = n * fractions
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def stratified_counts(class_sizes, fractions) -> np.ndarray:
    """Integer (K, S) table rounding the quotas ``n_c * f_s``.

    Every entry is the floor or ceiling of its quota, row sums equal the class
    sizes and column sums equal the largest-remainder apportionment of the
    total. Such a rounding always exists; it is found as a max-flow that hands
    the leftover units of each class to splits where its quota is fractional.
    """
    sizes = np.asarray(class_sizes, dtype=np.int64)
    fractions = np.asarray(fractions, dtype=np.float64)
    quota = np.round(sizes[:, None] * fractions[None, :], 9)
    base = np.floor(quota).astype(np.int64)
    row_need = sizes - base.sum(1)
    col_need = np.asarray(_apportion(int(sizes.sum()), fractions)) - base.sum(0)
    k, s = base.shape
    if row_need.sum() == 0:
        return base
    # nodes: 0 source, 1..k classes, k+1..k+s splits, k+s+1 sink
    n_nodes = k + s + 2
    cap = np.zeros((n_nodes, n_nodes), dtype=np.int32)
    cap[0, 1:k + 1] = row_need
    frac = quota > base
    cap[1:k + 1, k + 1:k + s + 1] = frac.astype(np.int32)
    cap[k + 1:k + s + 1, -1] = col_need
    flow = maximum_flow(csr_matrix(cap), 0, n_nodes - 1)
    if flow.flow_value != row_need.sum():
        raise RuntimeError("no consistent stratified rounding found")
    extra = flow.flow.toarray()[1:k + 1, k + 1:k + s + 1]
    return base + np.maximum(extra, 0)


# -- synthetic corpus ------------------------------------------------------

SYNTHETIC_FAMILIES = ("stripes", "spots", "checker", "rings", "blobs", "crosshatch", "dots", "waves")


def _grid(size):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return x / size, y / size


def _pattern(family: int, level: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """A [0, 1] intensity map for one image of the given texture family.

    Per-image variation is mostly translation/phase, with small jitter in
    orientation, frequency and feature size.
    """
    x, y = _grid(size)
    kind = SYNTHETIC_FAMILIES[family % len(SYNTHETIC_FAMILIES)]
    fs = 1.0 + 0.6 * level
    if kind == "stripes":
        theta = rng.uniform(-0.25, 0.25)
        f = fs * rng.uniform(3.5, 4.5)
        u = np.cos(theta) * x + np.sin(theta) * y
        return 0.5 + 0.5 * np.sin(2 * np.pi * f * u + rng.uniform(0, 2 * np.pi))
    if kind == "spots":
        out = np.zeros_like(x)
        n = int(rng.integers(10, 15) * fs)
        for cx, cy in rng.uniform(0, 1, (n, 2)):
            r = rng.uniform(0.035, 0.05) / fs
            out = np.maximum(out, np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * r * r)))
        return out
    if kind == "checker":
        f = fs * rng.uniform(2.5, 3.0)
        theta = np.pi / 4 + rng.uniform(-0.15, 0.15)
        u = np.cos(theta) * x + np.sin(theta) * y
        v = -np.sin(theta) * x + np.cos(theta) * y
        ph = rng.uniform(0, 1, 2)
        return ((np.floor(f * u + ph[0]) + np.floor(f * v + ph[1])) % 2).astype(np.float64)
    if kind == "rings":
        cx, cy = rng.uniform(0.25, 0.75, 2)
        f = fs * rng.uniform(4.0, 5.0)
        r = np.sqrt((x - cx) ** 2 + (y - cy) ** 2)
        return 0.5 + 0.5 * np.cos(2 * np.pi * f * r + rng.uniform(0, 2 * np.pi))
    if kind == "blobs":
        out = np.zeros_like(x)
        n = int(rng.integers(2, 4) * fs)
        for cx, cy in rng.uniform(0.1, 0.9, (n, 2)):
            r = rng.uniform(0.14, 0.2) / fs
            out = np.maximum(out, ((x - cx) ** 2 + (y - cy) ** 2 < r * r).astype(np.float64))
        return out
    if kind == "crosshatch":
        f = fs * rng.uniform(3.0, 3.5)
        a = np.sin(2 * np.pi * f * (x + y) + rng.uniform(0, 2 * np.pi))
        b = np.sin(2 * np.pi * f * (x - y) + rng.uniform(0, 2 * np.pi))
        return np.clip(0.5 + 0.25 * (a + b), 0, 1)
    if kind == "dots":
        f = fs * rng.uniform(3.5, 4.0)
        ph = rng.uniform(0, 1, 2)
        u = (f * x + ph[0]) % 1 - 0.5
        v = (f * y + ph[1]) % 1 - 0.5
        return (u * u + v * v < 0.05).astype(np.float64)
    # waves: horizontal bands with a sinusoidal wobble
    f = fs * rng.uniform(2.5, 3.0)
    amp = rng.uniform(0.06, 0.1)
    return 0.5 + 0.5 * np.sin(2 * np.pi * f * (y + amp * np.sin(2 * np.pi * 3 * x + rng.uniform(0, 6))))


def make_synthetic(n_classes: int, per_class: int, size: int, seed: int,
                   tint: float = 0.05, noise: float = 0.04) -> LabeledImageSet:
    """Generate a synthetic corpus of textured images.

    Every class is one texture family (stripes, spots, checkerboard, rings,
    ...) with random phase and position and slightly jittered orientation and
    frequency per image. Grey level, colour tint (+-``tint`` per channel),
    contrast and pixel noise are
    drawn from the same distribution for every class, so class identity lives
    in spatial structure rather than colour statistics. Beyond eight classes
    the families repeat at a higher spatial frequency.
    """
    if n_classes < 2:
        raise ConfigurationError("n_classes must be >= 2")
    if per_class < 8:
        raise ConfigurationError("per_class must be >= 8")
    if size < 8:
        raise ConfigurationError("size must be >= 8")
    rng = np.random.default_rng(seed)
    images = np.empty((n_classes * per_class, size, size, 3), dtype=np.float32)
    labels = np.empty(n_classes * per_class, dtype=np.int64)
    n_fam = len(SYNTHETIC_FAMILIES)
    i = 0
    for c in range(n_classes):
        for _ in range(per_class):
            pat = _pattern(c % n_fam, c // n_fam, size, rng)
            bg = np.clip(rng.uniform(0.55, 0.65) + rng.uniform(-tint, tint, 3), 0.0, 1.0)
            fg = bg - rng.uniform(0.3, 0.4) + rng.uniform(-tint, tint, 3)
            img = bg + pat[..., None] * (np.clip(fg, 0.0, 1.0) - bg)
            img = img + rng.normal(0.0, noise, img.shape)
            images[i] = np.clip(img, 0.0, 1.0)
            labels[i] = c + 1
            i += 1
    names = [f"{SYNTHETIC_FAMILIES[c % n_fam]}{c // n_fam or ''}" for c in range(n_classes)]
    names = [f"{c:02d}_{n}" for c, n in enumerate(names)]
    return LabeledImageSet(images, labels, names)


def export_corpus(dataset: LabeledImageSet, out_dir, force: bool = False) -> Path:
    """Write a LabeledImageSet as ``out_dir/<class_name>/<index>.png``."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigurationError(f"output directory {out} exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(dataset))))
    for name in dataset.class_names:
        (out / name).mkdir(exist_ok=True)
    for i, (img, lab) in enumerate(zip(dataset.images, dataset.labels)):
        arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
        path = out / dataset.class_names[lab - 1] / f"{i:0{width}d}.png"
        Image.fromarray(arr).save(path, format="PNG", optimize=False)
    return out


def as_chw(images: np.ndarray) -> np.ndarray:
    """(N, H, W, C) -> (N, C, H, W) contiguous float32."""
    return np.ascontiguousarray(np.transpose(images, (0, 3, 1, 2)), dtype=np.float32)


__all__ = [
    "ConfigurationError",
    "IngestionError",
    "LabeledImageSet",
    "SplitSpec",
    "load_corpus",
    "split",
    "make_synthetic",
    "export_corpus",
    "as_chw",
]
