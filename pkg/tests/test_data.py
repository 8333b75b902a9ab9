import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from cmcrl.data import (
    ConfigurationError,
    IngestionError,
    LabeledImageSet,
    SplitSpec,
    export_corpus,
    load_corpus,
    make_synthetic,
    split,
    stratified_counts,
)


def write_images(root, counts, size=(10, 12), mode="RGB"):
    rng = np.random.default_rng(0)
    for name, n in counts.items():
        d = root / name
        d.mkdir(parents=True)
        for i in range(n):
            shape = (size[1], size[0], 3) if mode == "RGB" else (size[1], size[0])
            arr = rng.integers(0, 256, size=shape, dtype=np.uint8)
            Image.fromarray(arr, mode=None).convert(mode).save(d / f"{i:03d}.png")


def test_load_two_classes(tmp_path):
    write_images(tmp_path, {"canker": 3, "blackspot": 2})
    ds = load_corpus(tmp_path, 64)
    assert len(ds) == 5 and ds.num_classes == 2
    assert ds.class_names == ["blackspot", "canker"]
    assert ds.labels.tolist() == [1, 1, 2, 2, 2]
    assert ds.images.shape == (5, 64, 64, 3)
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_load_table_counts(tmp_path):
    counts = {"blackspot": 171, "canker": 163, "huanglong": 204, "health": 58, "melanose": 13}
    write_images(tmp_path, counts, size=(4, 4))
    ds = load_corpus(tmp_path, 256)
    assert len(ds) == 609 and ds.num_classes == 5
    assert ds.images.shape[1:] == (256, 256, 3)


def test_empty_class_dir(tmp_path):
    write_images(tmp_path, {"a": 2})
    (tmp_path / "b").mkdir()
    with pytest.raises(IngestionError, match="'b'"):
        load_corpus(tmp_path, 16)


def test_missing_root(tmp_path):
    with pytest.raises(ConfigurationError):
        load_corpus(tmp_path / "nope", 16)


def test_undecodable_files(tmp_path, caplog):
    write_images(tmp_path, {"a": 2, "b": 2})
    (tmp_path / "a" / "junk.png").write_bytes(b"not an image")
    with caplog.at_level(logging.WARNING):
        ds = load_corpus(tmp_path, 8)
    assert len(ds) == 4
    assert "junk.png" in caplog.text
    for f in (tmp_path / "b").iterdir():
        f.write_bytes(b"garbage")
    with pytest.raises(IngestionError, match="'b'"):
        load_corpus(tmp_path, 8)


def test_grayscale_and_alpha_become_rgb(tmp_path):
    write_images(tmp_path, {"g": 1}, mode="L")
    write_images(tmp_path, {"r": 1}, mode="RGBA")
    ds = load_corpus(tmp_path, 8)
    assert ds.images.shape == (2, 8, 8, 3)
    g = ds.images[0]
    assert np.array_equal(g[..., 0], g[..., 1]) and np.array_equal(g[..., 1], g[..., 2])


def test_loading_is_idempotent(tmp_path):
    write_images(tmp_path, {"a": 3, "b": 3})
    assert np.array_equal(load_corpus(tmp_path, 16).images, load_corpus(tmp_path, 16).images)


def labeled(counts):
    labels = np.concatenate([np.full(n, c + 1) for c, n in enumerate(counts)])
    return LabeledImageSet(np.zeros((len(labels), 2, 2, 3)), labels, [f"c{i}" for i in range(len(counts))])


def test_split_sizes():
    parts = split(labeled([50, 50]), SplitSpec(0.8, 0.15, 0.05, seed=7))
    assert [len(p) for p in parts] == [80, 15, 5]
    assert parts[0].labels_hidden and not parts[1].labels_hidden
    assert [p.split_tag for p in parts] == ["pretrain", "finetune", "test"]


def test_split_is_deterministic():
    a = split(labeled([30, 40, 30]), SplitSpec(0.8, 0.15, 0.05, seed=7))
    b = split(labeled([30, 40, 30]), SplitSpec(0.8, 0.15, 0.05, seed=7))
    for x, y in zip(a, b):
        assert np.array_equal(x.indices, y.indices)


def test_invalid_fractions():
    with pytest.raises(ConfigurationError):
        SplitSpec(0.8, 0.8, 0.05)
    with pytest.raises(ConfigurationError):
        SplitSpec(1.1, -0.1, 0.0)


def test_tiny_class_goes_to_pretrain(caplog):
    with caplog.at_level(logging.WARNING):
        pre, ft, te = split(labeled([20, 2]), SplitSpec(0.6, 0.2, 0.2))
    assert (pre.labels == 2).sum() == 2
    assert "c1" in caplog.text


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 60), min_size=2, max_size=6),
       st.floats(0.05, 0.9), st.floats(0.05, 0.9), st.integers(0, 1000))
def test_split_partition_and_stratification(counts, a, b, seed):
    total = a + b + 0.1
    spec = SplitSpec(a / total, b / total, 1 - a / total - b / total, seed)
    ds = labeled(counts)
    parts = split(ds, spec)
    idx = np.concatenate([p.indices for p in parts])
    assert sorted(idx.tolist()) == list(range(len(ds)))
    for c, n in enumerate(counts, start=1):
        if n < 1 / min(spec.fractions):
            continue
        for p, f in zip(parts, spec.fractions):
            assert abs((p.labels == c).sum() - n * f) < 1


def test_stratified_counts_rounding():
    table = stratified_counts([25, 25, 25, 25], [0.8, 0.15, 0.05])
    assert table.sum(0).tolist() == [80, 15, 5]
    assert table.sum(1).tolist() == [25] * 4
    quota = 25 * np.array([0.8, 0.15, 0.05])
    assert np.all(np.abs(table - quota) < 1)


def test_make_synthetic_counts_and_determinism():
    a = make_synthetic(4, 64, 32, 0)
    b = make_synthetic(4, 64, 32, 0)
    assert len(a) == 256 and a.num_classes == 4
    assert np.array_equal(a.images, b.images)
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert not np.array_equal(a.images, make_synthetic(4, 64, 32, 1).images)


def test_make_synthetic_preconditions():
    with pytest.raises(ConfigurationError):
        make_synthetic(1, 64, 32, 0)
    with pytest.raises(ConfigurationError):
        make_synthetic(4, 7, 32, 0)


def test_make_synthetic_many_classes_have_distinct_names():
    ds = make_synthetic(10, 8, 16, 0)
    assert len(set(ds.class_names)) == 10


@pytest.mark.filterwarnings("ignore::sklearn.exceptions.ConvergenceWarning")
def test_raw_pixel_learnability_floor_and_difficulty():
    from sklearn.neighbors import NearestCentroid
    from sklearn.neural_network import MLPClassifier

    ds = make_synthetic(4, 64, 32, 0)
    pre, ft, te = split(ds, SplitSpec())
    x = ds.images.reshape(len(ds), -1)
    train = np.concatenate([pre.indices, ft.indices])
    probe = MLPClassifier(hidden_layer_sizes=(64,), max_iter=300, random_state=0)
    probe.fit(x[train], ds.labels[train])
    assert probe.score(x[te.indices], te.labels) > 1 / 4
    nearest = NearestCentroid().fit(x[train], ds.labels[train])
    assert nearest.score(x[te.indices], te.labels) < 0.9


def test_export_roundtrip(tmp_path):
    ds = make_synthetic(3, 8, 16, 0)
    export_corpus(ds, tmp_path / "c")
    back = load_corpus(tmp_path / "c", 16)
    assert back.class_names == ds.class_names
    assert np.abs(back.images - ds.images).max() <= 0.5 / 255 + 1e-6
    with pytest.raises(ConfigurationError):
        export_corpus(ds, tmp_path / "c")
    export_corpus(ds, tmp_path / "c", force=True)
