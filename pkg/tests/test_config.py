import pytest
from hypothesis import given
from hypothesis import strategies as st

from lightdetr.config import SCALE_NAMES, ConfigError, parse_value, resolve_config
from lightdetr.projector import TWO_SCALE


def test_tiny_preset():
    cfg = resolve_config("tiny")
    e = cfg.encoder
    assert (e.num_layers, e.embed_dim, cfg.decoder.num_queries) == (6, 192, 100)
    assert e.window_attention_indexes == (0, 2, 4)
    assert cfg.grid == (40, 40) and cfg.window == (10, 10)


@pytest.mark.parametrize("scale,layers,dim,n_window,queries", [
    ("small", 10, 192, 6, 300), ("medium", 10, 384, 6, 300),
    ("large", 10, 384, 6, 300), ("xlarge", 10, 768, 6, 300),
])
def test_wide_presets(scale, layers, dim, n_window, queries):
    cfg = resolve_config(scale)
    assert cfg.encoder.num_layers == layers and cfg.encoder.embed_dim == dim
    assert len(cfg.encoder.window_attention_indexes) == n_window
    assert cfg.encoder.window_attention_indexes == (0, 1, 3, 6, 7, 9)
    assert cfg.encoder.output_feature_indexes == (2, 4, 5, 9)
    assert cfg.decoder.num_queries == queries


def test_large_preset():
    cfg = resolve_config("large")
    assert cfg.projector.scales == TWO_SCALE and cfg.projector.multi_scale
    assert cfg.decoder.hidden_dim == 384 and cfg.decoder.sampling_points == 4


def test_input_320_gives_5x5_windows():
    cfg = resolve_config("tiny", {"input_size": 320})
    assert cfg.grid == (20, 20) and cfg.window == (5, 5)


@pytest.mark.parametrize("scale", SCALE_NAMES)
def test_resolution_is_idempotent(scale):
    cfg = resolve_config(scale, {"input_size": 320, "seed": 4})
    flat = cfg.to_flat()
    again = resolve_config(flat.pop("scale"), flat)
    assert again == cfg


def test_file_then_override_precedence(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('scale = "small"\nseed = 3\n[decoder]\nnum_queries = 200\n')
    cfg = resolve_config(None, {}, path)
    assert cfg.scale == "small" and cfg.seed == 3 and cfg.decoder.num_queries == 200
    cfg = resolve_config("tiny", {"decoder.num_queries": "50"}, path)
    assert cfg.scale == "tiny" and cfg.decoder.num_queries == 50 and cfg.seed == 3


@pytest.mark.parametrize("scale,overrides", [
    ("huge", {}),
    ("tiny", {"encoder.bogus": 1}),
    ("tiny", {"input_size": 330}),
    ("tiny", {"decoder.hidden_dim": 384}),
    ("tiny", {"input_size": 160, "decoder.num_queries": 500}),
    ("large", {"input_size": 272}),
    ("tiny", {"input_size": "big"}),
])
def test_invalid_configs(scale, overrides):
    with pytest.raises(ConfigError):
        resolve_config(scale, overrides)


def test_bad_config_file(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("seed = = 3\n")
    with pytest.raises(ConfigError):
        resolve_config("tiny", {}, path)


@given(st.integers(-10**6, 10**6))
def test_parse_value_integers(n):
    assert parse_value(str(n)) == n


def test_parse_value_forms():
    assert parse_value("[0, 2]") == [0, 2]
    assert parse_value("0.5") == 0.5
    assert parse_value("small") == "small"
