import pytest

from cmcrl.config import (
    PRESETS,
    RunConfig,
    apply_overrides,
    config_from_flat,
    flat_items,
    load_config,
    save_config,
    to_text,
)
from cmcrl.data import ConfigurationError


def test_defaults_follow_published_settings():
    c = RunConfig()
    assert (c.train.epochs, c.train.iters, c.train.batch_size, c.train.num_instances) == (50, 100, 16, 4)
    assert c.train.lr == 0.35 and c.train.weight_decay == 5e-4
    assert c.loss.temperature == 0.05 and c.memory.alpha == 0.1
    assert (c.cluster.eps, c.cluster.k1, c.cluster.k2) == (0.4, 30, 6)
    assert c.model.embedding_dim == 512
    assert c.augment.pad_pixels == 10 and c.augment.rhf_probability == 0.5


def test_flag_beats_file_beats_default(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[train]\nepochs = 7\niters = 9\n\n[model]\nlayers = 4\n")
    c = load_config(p, {"train.iters": "3"})
    assert c.train.epochs == 7 and c.train.iters == 3
    assert c.model.layer_set == (4,) and c.loss.layer_set == (4,)


def test_preset_is_lowest_priority(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[train]\nlr = 0.002\n")
    c = load_config(p, preset="desk")
    assert c.train.lr == 0.002
    assert c.train.optimizer == PRESETS["desk"]["train.optimizer"]


@pytest.mark.parametrize("key,named", [("train.nope", "nope"), ("bogus.epochs", "bogus"),
                                       ("epochs", "epochs"), ("loss.layer_set", "layer_set")])
def test_unknown_keys_are_named(key, named):
    with pytest.raises(ConfigurationError, match=named):
        apply_overrides(RunConfig(), {key: "1"})


def test_unknown_section_in_file(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[optimizer]\nlr = 1\n")
    with pytest.raises(ConfigurationError, match="optimizer"):
        load_config(p)


def test_bad_values():
    with pytest.raises(ConfigurationError):
        apply_overrides(RunConfig(), {"train.epochs": "many"})
    with pytest.raises(ConfigurationError):
        apply_overrides(RunConfig(), {"train.batch_size": "15"})
    with pytest.raises(ConfigurationError):
        apply_overrides(RunConfig(), {"memory.alpha": "2"})


def test_text_roundtrip(tmp_path):
    c = load_config(overrides={"augment.enabled": "RC,RHF", "model.use_ibn": "true", "augment.crop_size": "24",
                               "cluster.features": "concat"}, preset="desk")
    save_config(c, tmp_path / "c.ini")
    assert load_config(tmp_path / "c.ini") == c
    assert config_from_flat(flat_items(c)) == c
    assert "[cluster]" in to_text(c)
