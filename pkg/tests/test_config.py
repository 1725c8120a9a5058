import json
from pathlib import Path

import pytest

from classsr.config import (
    DEFAULT_WORKDIR,
    RunConfig,
    config_from_dict,
    load_config,
    resolve_workdir,
    set_value,
)
from classsr.exceptions import ConfigError


@pytest.fixture
def make_config_file(tmp_path):
    def _make_config_file(data, name="run.json"):
        path = tmp_path / name
        path.write_text(data if isinstance(data, str) else json.dumps(data))
        return path

    return _make_config_file


class TestDefaults(object):
    def test_validate(self):
        cfg = RunConfig()
        cfg.validate()

        assert cfg.model.classes == 3
        assert cfg.model.widths == [16, 36, 56]
        assert cfg.training.classifier.batch_size == 96
        assert cfg.training.pretrain.batch_size == 16
        assert cfg.eval.stride == 28
        assert (cfg.training.w1, cfg.training.w2, cfg.training.w3) == (2000, 1, 6)

    def test_model_spec(self):
        spec = RunConfig().model_spec()

        assert spec.classes == 3
        assert spec.tile == 32
        assert spec.class_config().classes == 3


class TestLoad(object):
    def test_partial(self, make_config_file):
        path = make_config_file(
            {"model": {"widths": [16, 56]}, "training": {"joint": {"iterations": 7}}}
        )
        cfg = load_config(path)

        assert cfg.model.classes == 2
        assert cfg.training.joint.iterations == 7
        assert cfg.training.joint.batch_size == 96

    def test_no_path(self):
        assert load_config() == RunConfig()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError) as excinfo:
            load_config(tmp_path / "none.json")

        assert str(excinfo.value) == f"No config file at {tmp_path / 'none.json'}."

    def test_invalid_json(self, make_config_file):
        with pytest.raises(ConfigError) as excinfo:
            load_config(make_config_file("{"))

        assert "is not valid JSON" in str(excinfo.value)

    @pytest.mark.parametrize(
        "data, expected",
        [
            ({"modle": {}}, "Unknown config key: modle"),
            ({"training": {"w4": 1}}, "Unknown config key: training.w4"),
            (
                {"training": {"joint": {"lr": 1}}},
                "Unknown config key: training.joint.lr",
            ),
            ({"data": []}, "Config section data must be an object."),
        ],
    )
    def test_unknown_key(self, data, expected):
        with pytest.raises(ConfigError) as excinfo:
            config_from_dict(data)

        assert str(excinfo.value) == expected

    @pytest.mark.parametrize(
        "data, expected",
        [
            (
                {"training": {"w1": "big"}},
                "Config key training.w1 must be float: 'big'",
            ),
            ({"seed": 1.5}, "Config key seed must be int: 1.5"),
            (
                {"training": {"strict_batch": 1}},
                "Config key training.strict_batch must be bool: 1",
            ),
            (
                {"training": {"joint": {"iterations": True}}},
                "Config key training.joint.iterations must be int: True",
            ),
            (
                {"model": {"widths": "16,56"}},
                "Config key model.widths must be a list of int: '16,56'",
            ),
            (
                {"model": {"widths": [16, "56"]}},
                "Config key model.widths must be int: '56'",
            ),
            (
                {"training": {"joint": {"period": "long"}}},
                "Config key training.joint.period must be int: 'long'",
            ),
        ],
    )
    def test_wrong_type(self, data, expected):
        with pytest.raises(ConfigError) as excinfo:
            config_from_dict(data)

        assert str(excinfo.value) == expected

    def test_int_as_float(self):
        cfg = config_from_dict(
            {"training": {"w3": 0, "joint": {"lr_max": 1}}, "paths": {"corpus": None}}
        )

        assert cfg.training.w3 == 0.0
        assert isinstance(cfg.training.w3, float)
        assert isinstance(cfg.training.joint.lr_max, float)
        assert cfg.paths.corpus is None

    def test_to_json(self):
        cfg = RunConfig(seed=3)

        assert config_from_dict(json.loads(cfg.to_json())) == cfg


class TestValidate(object):
    @pytest.mark.parametrize(
        "key, value",
        [
            ("model.widths", [16]),
            ("model.mapping_layers", [4, 4]),
            ("data.scorer", "msrresnet"),
            ("data.storage", "zip"),
            ("data.psnr_channel", "rgb"),
            ("data.tile", 0),
            ("training.w1", -1.0),
            ("training.joint.batch_size", 95),
            ("training.joint.lr_min", 1.0),
            ("training.pretrain.iterations", -1),
        ],
    )
    def test_invalid(self, key, value):
        cfg = RunConfig()
        set_value(cfg, key, value)
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_permissive_batch(self):
        cfg = RunConfig()
        set_value(cfg, "training.joint.batch_size", 95)
        set_value(cfg, "training.strict_batch", False)

        cfg.validate()

    def test_branch_supervision_is_reserved(self):
        cfg = RunConfig()
        cfg.training.branch_supervision = True
        with pytest.raises(ConfigError) as excinfo:
            cfg.validate()

        assert "reserved" in str(excinfo.value)


class TestSetValue(object):
    def test_nested(self):
        cfg = RunConfig()
        set_value(cfg, "training.joint.iterations", 5)

        assert cfg.training.joint.iterations == 5

    @pytest.mark.parametrize("key", ["training.w4", "seed.value", "nothing"])
    def test_unknown(self, key):
        with pytest.raises(ConfigError) as excinfo:
            set_value(RunConfig(), key, 1)

        assert str(excinfo.value) == f"Unknown config key: {key}"

    def test_wrong_type(self):
        cfg = RunConfig()
        with pytest.raises(ConfigError) as excinfo:
            set_value(cfg, "training.w2", "0")

        assert str(excinfo.value) == "Config key training.w2 must be float: '0'"
        assert cfg.training.w2 == 1.0


class TestResolveWorkdir(object):
    def test_default(self):
        cfg = RunConfig()

        assert resolve_workdir(cfg) == Path(DEFAULT_WORKDIR)
        assert cfg.paths.workdir == DEFAULT_WORKDIR

    def test_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("CLASSSR_WORKDIR", str(tmp_path))

        assert resolve_workdir(RunConfig()) == tmp_path

    def test_config_wins(self, monkeypatch, tmp_path):
        monkeypatch.setenv("CLASSSR_WORKDIR", str(tmp_path))
        cfg = RunConfig()
        cfg.paths.workdir = "elsewhere"

        assert resolve_workdir(cfg) == Path("elsewhere")
