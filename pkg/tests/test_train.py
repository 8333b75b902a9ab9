import logging
import math

import numpy as np
import pytest
import torch

from cmcrl.cluster import ClusterAssignment
from cmcrl.data import ConfigurationError, LabeledImageSet
from cmcrl.metrics import EvaluationError
from cmcrl.model import parameter_checksum, predict, classify
from cmcrl.train import (
    epoch_lr,
    evaluate,
    final_embeddings,
    finetune,
    fit_head,
    init_state,
    load_state,
    pretrain,
    read_epoch_csv,
    run_epoch,
    sample_pk,
    save_state,
    untrained_encoder,
)

from helpers import tiny_config, tiny_corpus
from oracles import macro_metrics


def test_lr_schedule():
    cfg = tiny_config(train__epochs=10, train__lr=0.2)
    assert [epoch_lr(cfg, e) for e in (0, 7, 8, 9)] == [0.2, 0.2, pytest.approx(0.02), pytest.approx(0.02)]


def test_pk_sampler_without_replacement():
    a = ClusterAssignment(np.array([1, 1, 2, 2, 3, 3, 4, 4, 5, -1, -1]))
    rng = np.random.default_rng(0)
    for _ in range(50):
        idx, labels = sample_pk(a, 16, 4, rng)
        assert len(idx) == 16
        groups = labels.reshape(4, 4)
        assert np.all(groups == groups[:, :1])
        assert len(set(groups[:, 0])) == 4
        assert np.array_equal(a.pseudo_labels[idx], labels)
        assert np.all(a.pseudo_labels[idx] != -1)


def test_pk_sampler_with_replacement_for_few_clusters():
    a = ClusterAssignment(np.array([1, 1, 2, -1]))
    idx, labels = sample_pk(a, 16, 4, np.random.default_rng(1))
    assert len(idx) == 16 and set(labels) <= {1, 2}


def test_one_step_consumes_four_by_four():
    ds, (pre, _, _) = tiny_corpus()
    cfg = tiny_config(train__epochs=1, train__iters=1, train__batch_size=16, train__num_instances=4)
    state = init_state(cfg)
    steps, shapes = [], []
    original = state.optimizer.step
    state.optimizer.step = lambda *a, **k: (steps.append(1), original(*a, **k))[1]
    state.model.register_forward_pre_hook(lambda mod, inp: shapes.append(tuple(inp[0].shape)) if mod.training else None)
    row = run_epoch(state, pre.images, pre.labels)
    assert row["m"] >= 1
    assert len(steps) == 1
    # the first forward pass is the BatchNorm calibration over the whole set
    assert shapes == [(len(pre), 3, 16, 16), (16, 3, 16, 16)]


def test_epoch_issues_s_steps_and_logs_mean_step_loss():
    _, (pre, _, _) = tiny_corpus()
    state = init_state(tiny_config(train__iters=5))
    row = run_epoch(state, pre.images, pre.labels)
    assert len(state.step_losses[-1]) == 5
    assert row["loss"] == np.mean(state.step_losses[-1])
    assert set(row) >= {"epoch", "m", "n_clustered", "loss", "cacc", "ari", "wall_time"}


def test_noise_never_reaches_loss_or_memory(monkeypatch):
    import cmcrl.train as train_mod

    _, (pre, _, _) = tiny_corpus()
    state = init_state(tiny_config(train__iters=4))
    seen = []
    real = train_mod.sample_pk

    def spy(assignment, *a):
        idx, labels = real(assignment, *a)
        seen.append(assignment.pseudo_labels[idx])
        return idx, labels

    monkeypatch.setattr(train_mod, "sample_pk", spy)
    run_epoch(state, pre.images, pre.labels)
    assert seen and all(np.all(s >= 1) for s in seen)


def test_all_noise_epoch_is_skipped(caplog):
    _, (pre, _, _) = tiny_corpus()
    state = init_state(tiny_config(cluster__min_samples=500))
    with caplog.at_level(logging.WARNING):
        row = run_epoch(state, pre.images, pre.labels)
    assert row["m"] == 0 and math.isnan(row["loss"])
    assert "no clusters" in caplog.text
    assert state.epoch == 1
    # only BatchNorm statistics were touched, never the weights
    weights = {k: v for k, v in state.model.state_dict().items() if "running" not in k and "num_batches" not in k}
    init = init_state(tiny_config(cluster__min_samples=500)).model.state_dict()
    assert all(torch.equal(v, init[k]) for k, v in weights.items())


def test_pretrain_is_deterministic():
    _, (pre, _, _) = tiny_corpus()
    a = pretrain(pre, tiny_config())
    b = pretrain(pre, tiny_config())
    assert [r["loss"] for r in a.history] == [r["loss"] for r in b.history]
    assert parameter_checksum(a.model) == parameter_checksum(b.model)


def test_resume_reproduces_next_epoch_bitwise(tmp_path):
    _, (pre, _, _) = tiny_corpus()
    cfg = tiny_config(train__epochs=3)
    straight = pretrain(pre, cfg)
    first = pretrain(pre, cfg, epochs=1)
    save_state(first, tmp_path / "ck")
    resumed = load_state(tmp_path / "ck")
    assert resumed.config == cfg
    resumed = pretrain(pre, cfg, state=resumed)
    assert [r["loss"] for r in resumed.history] == [r["loss"] for r in straight.history]
    assert straight.step_losses[1] == resumed.step_losses[0]
    assert parameter_checksum(resumed.model) == parameter_checksum(straight.model)


def test_periodic_checkpoints(tmp_path):
    _, (pre, _, _) = tiny_corpus()
    pretrain(pre, tiny_config(train__checkpoint_every=1), checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_001", "epoch_002", "final"]
    rows = read_epoch_csv(tmp_path / "final" / "epochs.csv")
    assert [r["epoch"] for r in rows] == [1, 2]


def test_empty_pretrain_set():
    empty = LabeledImageSet(np.zeros((0, 16, 16, 3)), np.zeros(0, dtype=int), ["a", "b"])
    with pytest.raises(ConfigurationError):
        pretrain(empty, tiny_config())


def test_finetune_keeps_encoder_frozen():
    _, (pre, ft, _) = tiny_corpus()
    state = pretrain(pre, tiny_config(train__epochs=1))
    before = parameter_checksum(state.model)
    buffers = {k: v.clone() for k, v in state.model.state_dict().items()}
    finetune(state.model, ft, epochs=5, lr=0.1)
    assert parameter_checksum(state.model) == before
    assert all(torch.equal(v, buffers[k]) for k, v in state.model.state_dict().items())


def test_head_fits_separable_embeddings():
    rng = np.random.default_rng(0)
    centers = np.eye(4)[:, :4] * 3
    labels = np.repeat([1, 2, 3, 4], 10)
    z = centers[labels - 1] + 0.1 * rng.normal(size=(40, 4))
    head, curve = fit_head(z, labels, 4, epochs=100, lr=0.5)
    assert curve[-1]["train_acc"] == 1.0
    assert np.array_equal(predict(classify(z, head)), labels)


def test_finetune_label_mismatch():
    _, (pre, ft, _) = tiny_corpus()
    state = init_state(tiny_config())
    with pytest.raises(ConfigurationError):
        finetune(state.model, ft, epochs=1, num_classes=2)


def test_evaluate_matches_oracle_and_carries_cluster_scores():
    _, (pre, ft, te) = tiny_corpus()
    state = pretrain(pre, tiny_config(train__epochs=1))
    head, _ = finetune(state.model, ft, epochs=20, lr=0.5)
    report = evaluate(state.model, head, te, state.history)
    pred = predict(classify(final_embeddings(state.model, te.images), head))
    want = macro_metrics(te.labels.tolist(), pred.tolist(), te.num_classes)
    assert np.abs(np.array([report.acc, report.recall, report.precision, report.f1]) - want).max() < 1e-12
    assert report.cacc == state.history[-1]["cacc"]
    assert report.confusion_matrix.sum(1).tolist() == np.bincount(te.labels, minlength=4)[1:].tolist()


def test_evaluate_empty_test_set():
    state = init_state(tiny_config())
    head, _ = fit_head(np.eye(3), [1, 2, 3], 3, epochs=1)
    empty = LabeledImageSet(np.zeros((0, 16, 16, 3)), np.zeros(0, dtype=int), ["a", "b", "c"])
    with pytest.raises(EvaluationError):
        evaluate(state.model, head, empty)


def test_untrained_encoder_matches_first_clustering_view():
    _, (pre, _, _) = tiny_corpus()
    cfg = tiny_config()
    base = untrained_encoder(cfg, pre.images)
    state = init_state(cfg)
    from cmcrl.train import recalibrate_batchnorm
    recalibrate_batchnorm(state.model, pre.images)
    assert parameter_checksum(base) == parameter_checksum(state.model)
