"""Tests for config parsing, profiles and standard stage generation."""

import json

import pytest

from lowrank_ctr.config import (
    PROFILES,
    SYNTH_DATA_DEFAULTS,
    load_config,
    standard_stages,
)
from lowrank_ctr.errors import ConfigError


def names(stages):
    return [s["stage"] for s in stages]


def test_empty_config_resolves_to_synth_defaults():
    rc = load_config({})
    assert rc.profile == "synth"
    assert rc.seed == 0
    assert rc.data["synth"] == SYNTH_DATA_DEFAULTS
    assert rc.data["test_fraction"] == PROFILES["synth"]["test_fraction"]
    assert rc.model["embed_dim"] == 16
    assert rc.model["hidden_dims"] == [64, 64, 64]
    assert rc.model["fm_enabled"] is True
    assert names(rc.stages) == [
        "train_baseline",
        "calibrate", "compress", "finetune",
        "calibrate", "compress", "finetune",
        "eval",
    ]


def test_partial_synth_block_merges_defaults():
    rc = load_config({"data": {"synth": {"n_samples": 500}}})
    assert rc.data["synth"]["n_samples"] == 500
    assert rc.data["synth"]["vocab_sizes"] == SYNTH_DATA_DEFAULTS["vocab_sizes"]
    assert rc.data["synth"]["noise"] == SYNTH_DATA_DEFAULTS["noise"]


def test_unknown_keys_rejected_at_every_level():
    for bad in (
        {"trainer": {}},
        {"data": {"sources": "x"}},
        {"data": {"synth": {"n_rows": 10}}},
        {"model": {"width": 4}},
        {"pipeline": {"mode": "fast"}},
        {"stages": [{"stage": "train_baseline", "momentum": 0.9}]},
    ):
        with pytest.raises(ConfigError, match="unknown key"):
            load_config(bad)


def test_unknown_profile_and_bad_sources():
    with pytest.raises(ConfigError, match="unknown profile"):
        load_config({"profile": "criteo-small"})
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config("{nope")
    with pytest.raises(ConfigError, match="root must be"):
        load_config("[1, 2]")


def test_stages_and_pipeline_are_exclusive():
    with pytest.raises(ConfigError, match="either 'stages' or 'pipeline'"):
        load_config(
            {"stages": [{"stage": "train_baseline"}], "pipeline": {"mlp": None}}
        )


def test_data_requires_path_for_log_profiles():
    with pytest.raises(ConfigError, match="path"):
        load_config({"profile": "criteo"})
    with pytest.raises(ConfigError, match="not both"):
        load_config({"data": {"synth": {}, "path": "x.tsv"}})


def test_stage_list_validation():
    with pytest.raises(ConfigError, match="unknown stage"):
        load_config({"stages": [{"stage": "warmup"}]})
    with pytest.raises(ConfigError, match="'stage' key"):
        load_config({"stages": [{"epochs": 1}]})
    with pytest.raises(ConfigError, match="unknown method"):
        load_config({"stages": [
            {"stage": "train_baseline"},
            {"stage": "calibrate"},
            {"stage": "compress", "method": "pruning"},
            {"stage": "finetune"},
        ]})
    with pytest.raises(ConfigError, match="calibrate"):
        load_config({"stages": [
            {"stage": "train_baseline"},
            {"stage": "compress", "method": "afm-mlp"},
            {"stage": "finetune"},
        ]})


def test_standard_stages_mlp_then_emb():
    stages = standard_stages(PROFILES["synth"], {})
    assert names(stages) == [
        "train_baseline",
        "calibrate", "compress", "finetune",
        "calibrate", "compress", "finetune",
        "eval",
    ]
    assert stages[1]["taps"] == "mlp"
    assert stages[2] == {"stage": "compress", "method": "afm-mlp", "rank": 16}
    assert stages[3]["batch_size"] == 2000  # finetune_mlp overlay
    assert stages[4]["taps"] == "emb"
    assert stages[5] == {"stage": "compress", "method": "afm-emb", "rank": 4}
    assert stages[6]["dropout"] == 0.0  # finetune_emb overlay
    assert stages[3]["learning_rate"] == stages[6]["learning_rate"] == 1e-3


def test_standard_stages_emb_first_and_single_target():
    stages = standard_stages(PROFILES["synth"], {"order": "emb-mlp"})
    assert stages[2]["method"] == "afm-emb"
    assert stages[5]["method"] == "afm-mlp"

    only_mlp = standard_stages(PROFILES["synth"], {"emb": None})
    assert names(only_mlp) == [
        "train_baseline", "calibrate", "compress", "finetune", "eval"
    ]
    assert only_mlp[2]["method"] == "afm-mlp"

    only_emb = standard_stages(PROFILES["synth"], {"mlp": None, "emb": "svd-emb"})
    assert only_emb[2]["method"] == "svd-emb"


def test_standard_stages_rank_and_flag_overrides():
    stages = standard_stages(
        PROFILES["criteo"],
        {"mlp_rank": 100, "emb_rank": 3, "insert_relu": False, "fuse": False},
    )
    assert stages[2]["rank"] == 100
    assert stages[2]["insert_relu"] is False
    assert stages[5]["rank"] == 3
    assert stages[5]["fuse"] is False

    tt = standard_stages(PROFILES["criteo"], {"emb": "tt-emb", "fuse": False})
    assert tt[5]["method"] == "tt-emb"
    assert tt[5]["rank"] == PROFILES["criteo"]["tt_rank"]
    assert "fuse" not in tt[5]  # projections never exist on the TT path

    with pytest.raises(ConfigError, match="order"):
        standard_stages(PROFILES["synth"], {"order": "both"})
    with pytest.raises(ConfigError, match="mlp method"):
        standard_stages(PROFILES["synth"], {"mlp": "afm-emb"})


def test_overrides_and_hash():
    base = {"data": {"synth": {"n_samples": 100}}}
    rc1 = load_config(dict(base))
    rc2 = load_config(dict(base), {"seed": 7, "profile": None})
    assert rc1.seed == 0 and rc2.seed == 7
    assert rc1.config_hash != rc2.config_hash
    rc3 = load_config(dict(base))
    assert rc1.config_hash == rc3.config_hash


def test_config_from_file_and_string(tmp_path):
    raw = {"seed": 3, "data": {"synth": {"n_samples": 50}}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    from_file = load_config(path)
    from_string = load_config(json.dumps(raw))
    assert from_file.seed == from_string.seed == 3
    assert from_file.config_hash == from_string.config_hash


def test_model_validation():
    with pytest.raises(ConfigError, match="hidden_dims"):
        load_config({"model": {"hidden_dims": []}})
    rc = load_config({"model": {"embed_dim": 4, "fm_enabled": False}})
    assert rc.model["embed_dim"] == 4
    assert rc.model["fm_enabled"] is False
    assert rc.model["n_categorical"] == 10  # profile default fills the rest


def test_profiles_are_self_consistent():
    for name, prof in PROFILES.items():
        for key in ("n_continuous", "n_categorical", "embed_dim", "hidden_dims",
                    "mlp_rank", "emb_rank", "tt_rank", "finetune",
                    "finetune_mlp", "finetune_emb"):
            assert key in prof, f"profile {name} lacks {key}"
        assert len(prof["hidden_dims"]) == 3
        assert prof["mlp_rank"] <= min(prof["hidden_dims"])
        assert prof["emb_rank"] <= prof["embed_dim"]
