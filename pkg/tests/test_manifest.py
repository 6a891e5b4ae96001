import pytest

from echolocate.errors import ConfigurationError
from echolocate.manifest import from_dict, parse_manifest, with_overrides


def test_empty_manifest_gives_defaults(tmp_path):
    (tmp_path / "m.toml").write_text("")
    m = parse_manifest(tmp_path / "m.toml")
    assert m.env.room.dims == (10.0, 10.0, 5.0)
    assert m.env.step_size == 0.5 and m.env.reach_radius == 0.6
    assert m.train.lr == 1e-4 and m.train.updates_per_epoch == 150
    assert m.train.target_update_period == 15 and m.train.target_delay == 15
    assert m.arch.in_channels == 2 and m.arch.n_actions == 4
    assert m == parse_manifest(None)


def test_unknown_keys_fatal():
    with pytest.raises(ConfigurationError, match="train.learning_rate"):
        from_dict({"train": {"learning_rate": 0.1}})
    with pytest.raises(ConfigurationError, match="colour"):
        from_dict({"colour": "red"})


def test_sampling_rate_mismatch_names_both_fields():
    with pytest.raises(ConfigurationError) as e:
        from_dict({"acoustics": {"f_s": 16000}, "features": {"f_s": 22050}})
    assert "acoustics.f_s" in str(e.value) and "features.f_s" in str(e.value)


def test_sampling_rate_propagates():
    m = from_dict({"acoustics": {"f_s": 8000}})
    assert m.env.f_s == m.features.f_s == 8000


def test_horizon_synced_and_conflict_rejected():
    assert from_dict({"env": {"horizon": 30}}).train.horizon == 30
    assert from_dict({"train": {"horizon": 20}}).env.horizon == 20
    with pytest.raises(ConfigurationError):
        from_dict({"env": {"horizon": 30}, "train": {"horizon": 20}})


def test_vertical_actions_widen_action_set():
    m = from_dict({"env": {"vertical_actions": True}})
    assert m.arch.n_actions == 6
    with pytest.raises(ConfigurationError):
        from_dict({"env": {"vertical_actions": True}, "arch": {"n_actions": 4}})


def test_clip_shorter_than_window_rejected():
    with pytest.raises(ConfigurationError):
        from_dict({"env": {"clip_seconds": 0.01}})


def test_toml_parse_error_has_location(tmp_path):
    (tmp_path / "bad.toml").write_text("[train]\nseed = = 3\n")
    with pytest.raises(ConfigurationError, match="bad.toml"):
        parse_manifest(tmp_path / "bad.toml")


def test_resolved_toml_roundtrips(tmp_path):
    m = from_dict({"env": {"room_dims": [8, 6, 3], "wall_absorption": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]}, "run_id": "x"})
    (tmp_path / "r.toml").write_text(m.to_toml())
    assert parse_manifest(tmp_path / "r.toml") == m


def test_config_hash_ignores_epochs_and_eval():
    m = parse_manifest(None)
    assert with_overrides(m, train={"epochs": 3}).config_hash() == m.config_hash()
    assert with_overrides(m, eval={"n_trials": 5}).config_hash() == m.config_hash()
    assert with_overrides(m, train={"lr": 1e-3}).config_hash() != m.config_hash()


def test_output_dir_precedence(monkeypatch):
    m = from_dict({"output_dir": "base", "run_id": "r1"})
    monkeypatch.delenv("ECHOLOCATE_OUT", raising=False)
    assert str(m.resolved_output_dir()) == "base/r1"
    monkeypatch.setenv("ECHOLOCATE_OUT", "/env")
    assert str(m.resolved_output_dir()) == "/env/r1"
    assert str(m.resolved_output_dir("explicit")) == "explicit"


def test_epoch_default_depends_on_variant():
    assert from_dict({}).train.epochs == 30
    assert from_dict({"arch": {"variant": "stateful"}}).train.epochs == 15
    assert from_dict({"arch": {"variant": "stateful"}, "train": {"epochs": 4}}).train.epochs == 4
