import pytest

from actground.config import ConfigError, RunConfig, default_config_text, load_config, parse_config


def test_default_config_round_trips_byte_exactly():
    text = default_config_text()
    assert load_config().render() == text
    assert parse_config(text).render() == text


def test_default_values():
    cfg = load_config()
    assert cfg.depth == 7 and cfg.iterations == 1
    assert cfg.static_weights == (0.3, 0.4, 0.5, 0.6, 0.7, 0.9, 0.9, 0.9)
    assert cfg.dynamic_depth == 3 and cfg.tau_d == 20.0
    assert cfg.fusion_weights == (0.2, 0.2, 0.6)
    assert cfg.num_frames == 8 and cfg.merge_ratio == (1.0, 1.0, 3.0)
    assert cfg == RunConfig()


def test_partial_config_fills_defaults(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\n\ndepth = 3\nstatic_weights = 1, 1, 1, 1\ndynamic_depth=2\ntemperature = 0.5\n")
    cfg = load_config(path)
    assert cfg.depth == 3 and cfg.static_weights == (1.0,) * 4 and cfg.temperature == 0.5
    assert cfg.weight_config().dynamic_depth == 2
    assert parse_config(cfg.render()) == cfg


@pytest.mark.parametrize(
    "text, key",
    [
        ("depht = 3\n", "depht"),
        ("depth = three\n", "depth"),
        ("depth = -1\n", "depth"),
        ("tau_d = 0\n", "tau_d"),
        ("weighting = s+d\n", "weighting"),
        ("fusion_weights = 0.3, 0.3, 0.3\n", "fusion_weights"),
        ("static_weights = 1, 1\n", "static_weights"),
        ("merge_ratio = 1, 0, 3\n", "merge_ratio"),
        ("temperature = -2\n", "temperature"),
        ("depth = 3\ndepth = 4\n", "depth"),
        ("frame_mode = film\n", "frame_mode"),
    ],
)
def test_invalid_config_names_field(text, key):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.key == key and repr(key) in str(err.value)


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.cfg")


def test_estimator_params_cover_run_settings():
    params = RunConfig().estimator_params()
    assert params["n_jobs"] == 1 and params["merge"] == "center_average"
