import dataclasses

import pytest

from shapereplay.config import (
    ExperimentConfig,
    config_to_yaml_dict,
    load_config,
    save_config,
)


# ---------------------------------------------------------------------------
# validation


def test_defaults_are_valid():
    cfg = ExperimentConfig()
    assert cfg.method == "recall+"
    assert sum(cfg.group_sizes) == cfg.num_classes
    assert len(cfg.samples_per_step) == len(cfg.group_sizes)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(method="finetune"),
        dict(mode="sequential"),
        dict(semantic="both"),
        dict(knowledge_inpaint="maybe"),
        dict(group_sizes=(4, 2), num_classes=8),
        dict(samples_per_step=(100, 60)),
        dict(ki_fraction=0.0),
        dict(ki_fraction=1.0),
        dict(batch_new=0),
        dict(batch_old=-1),
        dict(sr_budget="unbounded"),
        dict(pool_per_class=0),
        dict(replay_per_class=0),
        dict(steps_per_class=0),
    ],
)
def test_validation_rejects(kwargs):
    with pytest.raises(ValueError):
        ExperimentConfig(**kwargs)


def test_tuples_are_normalized():
    cfg = ExperimentConfig(group_sizes=[4, 2, 2], samples_per_step=[10, 6, 6])
    assert cfg.group_sizes == (4, 2, 2)
    assert cfg.samples_per_step == (10, 6, 6)


# ---------------------------------------------------------------------------
# method resolution


def test_effective_keeps_recall_plus_toggles():
    cfg = ExperimentConfig(method="recall+", semantic="fth")
    eff = cfg.effective()
    assert eff.replay and eff.adversarial
    assert eff.semantic == "fth"
    assert eff.background_inpaint
    assert eff.knowledge_inpaint == "on"


@pytest.mark.parametrize("method", ["ft", "joint", "s&r"])
def test_effective_disables_replay_apparatus(method):
    eff = ExperimentConfig(method=method).effective()
    assert not eff.replay
    assert not eff.adversarial
    assert eff.semantic == "off"
    assert not eff.background_inpaint
    assert eff.knowledge_inpaint == "off"
    # resolution must not touch the original
    assert ExperimentConfig(method=method).replay


def test_build_world_and_protocol_agree_with_fields():
    cfg = ExperimentConfig()
    world = cfg.build_world()
    proto = cfg.build_protocol()
    assert world.class_ids == tuple(range(1, cfg.num_classes + 1))
    assert world.height == cfg.image_size
    assert proto.groups == ((1, 2, 3, 4), (5, 6), (7, 8))
    assert cfg.protocol_name == "4-2-2"


# ---------------------------------------------------------------------------
# round trips and fingerprints


def test_dict_round_trip():
    cfg = ExperimentConfig(seed=9, semantic="fth", disc_alpha=50.0)
    back = ExperimentConfig.from_dict(cfg.to_dict())
    assert back == cfg


def test_from_dict_rejects_unknown_keys():
    data = ExperimentConfig().to_dict()
    data["warp_speed"] = 9
    with pytest.raises(ValueError, match="warp_speed"):
        ExperimentConfig.from_dict(data)


def test_fingerprint_tracks_content():
    a = ExperimentConfig(seed=1)
    b = ExperimentConfig(seed=1)
    c = ExperimentConfig(seed=2)
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != c.fingerprint()
    assert len(a.fingerprint()) == 12


def test_yaml_dict_covers_every_field():
    cfg = ExperimentConfig()
    nested = config_to_yaml_dict(cfg)
    seen = set()
    for key, value in nested.items():
        if isinstance(value, dict) and key != "web_profile":
            seen.update(value)
        else:
            seen.add(key)
    # web_profile serializes as a mapping inside the web section
    seen.discard("web_profile")
    expected = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"web_profile"}
    assert expected <= seen


def test_yaml_file_round_trip(tmp_path):
    cfg = ExperimentConfig(seed=11, method="s&r", sr_budget=40, samples_per_step=(90, 55, 50))
    path = tmp_path / "run.yaml"
    save_config(str(path), cfg)
    loaded = load_config(str(path))
    assert loaded == cfg


def test_load_config_accepts_flat_keys(tmp_path):
    path = tmp_path / "flat.yaml"
    path.write_text("seed: 3\nmethod: ft\n")
    cfg = load_config(str(path))
    assert cfg.seed == 3
    assert cfg.method == "ft"


def test_load_config_rejects_non_mapping(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ValueError):
        load_config(str(path))
