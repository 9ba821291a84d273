import pytest

from attention_bench.attention import VARIANTS
from attention_bench.config import (
    PROFILES,
    default_attention_spec,
    environment_settings,
    grouped_kv_heads,
    load_config_file,
    parse_variants,
    resolve_settings,
)
from attention_bench.exceptions import ConfigError


@pytest.mark.parametrize("n_heads, expected", [(1, 1), (2, 1), (8, 4), (12, 6), (6, 3), (7, 1)])
def test_grouped_kv_heads(n_heads, expected):
    assert grouped_kv_heads(n_heads) == expected


def test_default_attention_spec_per_variant():
    gqa = default_attention_spec("gqa", 8, 128)
    assert (gqa.n_kv_heads, gqa.head_dim) == (4, 16)
    mla = default_attention_spec("mla", 8, 128)
    assert mla.latent_dim == 64
    flash = default_attention_spec("flash", 8, 128, tile_q=16, tile_kv=None)
    assert (flash.tile_q, flash.tile_kv) == (16, 64)
    with pytest.raises(ConfigError):
        default_attention_spec("baseline", 3, 128)
    with pytest.raises(ConfigError):
        default_attention_spec("reformer", 8, 128)


def test_parse_variants_keeps_order_and_drops_duplicates():
    assert parse_variants("mla, gqa,mla") == ["mla", "gqa"]
    assert parse_variants(VARIANTS) == list(VARIANTS)
    with pytest.raises(ConfigError):
        parse_variants(" , ")


def test_defaults_come_from_the_profile():
    settings = resolve_settings({}, environ={})
    assert settings["profile"] == "desk"
    assert settings["d_model"] == PROFILES["desk"]["d_model"]
    full = resolve_settings({"profile": "full"}, environ={})
    assert (full["n_layers"], full["d_model"], full["seq_len"]) == (12, 768, 512)
    with pytest.raises(ConfigError):
        resolve_settings({"profile": "laptop"}, environ={})


def test_flags_override_the_environment():
    environ = {"ATTN_BENCH_EPOCHS": "3", "ATTN_BENCH_SEED": "4"}
    settings = resolve_settings({"epochs": 1}, environ=environ)
    assert settings["epochs"] == 1
    assert settings["seed"] == 4


def test_environment_values_are_typed():
    settings = environment_settings(
        {"ATTN_BENCH_LR": "0.01", "ATTN_BENCH_SAVE_CHECKPOINTS": "yes", "ATTN_BENCH_N_KV_HEADS": "none"}
    )
    assert settings == {"lr": 0.01, "save_checkpoints": True, "n_kv_heads": None}
    with pytest.raises(ConfigError):
        environment_settings({"ATTN_BENCH_EPOCHS": "lots"})


def test_key_value_config_file(tmp_path):
    path = tmp_path / "bench.cfg"
    path.write_text("# comment\nbatch-size = 4\n\nvariants=linear,lsh  # inline\n")
    assert load_config_file(path) == {"batch_size": 4, "variants": ["linear", "lsh"]}


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "absent.cfg")
    broken = tmp_path / "broken.cfg"
    broken.write_text("epochs 3\n")
    with pytest.raises(ConfigError):
        load_config_file(broken)
    unknown = tmp_path / "unknown.json"
    unknown.write_text('{"temperature": 1}')
    with pytest.raises(ConfigError):
        load_config_file(unknown)


def test_config_file_overrides_flags_unless_they_were_typed(tmp_path):
    path = tmp_path / "bench.json"
    path.write_text('{"epochs": 7, "profile": "full"}')
    settings = resolve_settings({"epochs": 2}, explicit=set(), config_path=path, environ={})
    assert settings["epochs"] == 7
    assert settings["profile"] == "full"
    with pytest.raises(ConfigError):
        resolve_settings({"epochs": 2}, explicit={"epochs"}, config_path=path, environ={})
    same = resolve_settings({"epochs": 7}, explicit={"epochs"}, config_path=path, environ={})
    assert same["epochs"] == 7
