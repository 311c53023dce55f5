import pytest
import yaml

from dualseg.config import (
    ConfigError,
    apply_overrides,
    default_config,
    load_config,
    snapshot_yaml,
    validate_config,
)


def test_defaults_are_complete_and_valid():
    cfg = default_config()
    validate_config(cfg)
    for section in ("model", "backbone", "cpia", "dgfm", "mcrm", "loss", "decoder",
                    "data", "schedule", "eval"):
        assert section in cfg
    assert cfg["seed"] == 42
    assert cfg["schedule"]["base_lr"] == pytest.approx(3e-4)
    assert cfg["schedule"]["warmup_epochs"] == 5
    assert cfg["schedule"]["weight_decay"] == pytest.approx(0.01)
    assert cfg["cpia"]["r_p"] == 0.25 and cfg["cpia"]["r_a"] == 0.25
    assert cfg["loss"]["lambda_aux"] == pytest.approx(0.4)


def test_unknown_keys_rejected(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("cpia:\n  rank: 4\n")
    with pytest.raises(ConfigError, match="unknown config key: cpia.rank"):
        load_config(path)
    path.write_text("nonsense: 1\n")
    with pytest.raises(ConfigError, match="unknown config key: nonsense"):
        load_config(path)


def test_file_values_merge_over_defaults(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("mcrm:\n  ratio: 0.25\nschedule:\n  epochs: 3\n")
    cfg = load_config(path)
    assert cfg["mcrm"]["ratio"] == 0.25
    assert cfg["schedule"]["epochs"] == 3
    assert cfg["mcrm"]["regions"] == 3  # untouched default still present


def test_missing_config_file_is_config_error():
    with pytest.raises(ConfigError, match="not found"):
        load_config("/no/such/config.yaml")


def test_overrides_parse_types():
    cfg = default_config()
    out = apply_overrides(cfg, ["mcrm.enabled=false", "schedule.epochs=7",
                                "cpia.r_p=0.5", "data.root=/tmp/tiles",
                                "backbone.tap_indices=[1,2,3,4]"])
    assert out["mcrm"]["enabled"] is False
    assert out["schedule"]["epochs"] == 7
    assert out["cpia"]["r_p"] == 0.5
    assert out["data"]["root"] == "/tmp/tiles"
    assert out["backbone"]["tap_indices"] == [1, 2, 3, 4]
    assert cfg["mcrm"]["enabled"] is True  # original untouched


def test_override_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        apply_overrides(default_config(), ["cpia.rank=4"])
    with pytest.raises(ConfigError, match="section.key=value"):
        apply_overrides(default_config(), ["cpia.r_p"])


def test_override_type_mismatch_rejected():
    with pytest.raises(ConfigError, match="must be a boolean"):
        apply_overrides(default_config(), ["mcrm.enabled=7"])
    with pytest.raises(ConfigError, match="must be an integer"):
        apply_overrides(default_config(), ["schedule.epochs=2.5"])


def test_snapshot_round_trips():
    cfg = default_config()
    cfg["schedule"]["epochs"] = 9
    text = snapshot_yaml(cfg)
    assert yaml.safe_load(text) == cfg


def test_validate_cross_field_rules():
    cfg = default_config()
    cfg["data"]["crop"] = 30  # not divisible by patch size 8
    with pytest.raises(ConfigError, match="divisible"):
        validate_config(cfg)
    cfg = default_config()
    cfg["eval"]["stride"] = 128
    with pytest.raises(ConfigError, match="stride"):
        validate_config(cfg)
    cfg = default_config()
    cfg["mcrm"]["ratio"] = 1.5
    with pytest.raises(ConfigError, match="ratio"):
        validate_config(cfg)
    cfg = default_config()
    cfg["data"]["synthetic"]["mode"] = "both"
    with pytest.raises(ConfigError, match="mode"):
        validate_config(cfg)
    cfg = default_config()
    cfg["backbone"]["family"] = "resnet"
    with pytest.raises(ConfigError, match="family"):
        validate_config(cfg)
