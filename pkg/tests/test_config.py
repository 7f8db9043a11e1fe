"""Config schema, key=value parsing, and validation."""

import dataclasses

import pytest

from sat.config import (
    Ablations,
    ModelConfig,
    RunConfig,
    TrainConfig,
    build_run_config,
    dump_run_config,
    load_config_file,
    parse_overrides,
)


def test_model_config_defaults():
    cfg = ModelConfig()
    assert (cfg.d_feat, cfg.n_layers, cfg.n_heads, cfg.T, cfg.T_o) == (64, 4, 4, 16, 2)
    assert (cfg.M, cfg.K, cfg.N, cfg.L_lang, cfg.V_lang) == (32, 16, 512, 8, 1024)


def test_model_config_divisibility_checks():
    with pytest.raises(ValueError):
        ModelConfig(d_feat=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(d_feat=33, T_o=2, n_heads=3)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=10, total_steps=10)
    with pytest.raises(ValueError):
        TrainConfig(peak_lr=1e-6, final_lr=1e-4)
    assert TrainConfig().warmup_steps == 250


def test_ablations_temporal_rejects_codebook_flags():
    with pytest.raises(ValueError):
        Ablations(temporal_centric=True, no_codebook=True)
    with pytest.raises(ValueError):
        Ablations(temporal_centric=True, zero_function=True)
    with pytest.raises(ValueError):
        Ablations(no_global_token=True, no_local_tokens=True)
    assert Ablations(temporal_centric=True).active_flags() == ("temporal_centric",)


def test_ablations_drop_properties():
    a = Ablations(no_codebook=True)
    assert a.drop_e and a.drop_f and a.drop_r
    b = Ablations(zero_function=True)
    assert b.drop_f and not b.drop_e and not b.drop_r


def test_parse_overrides_sections_and_types():
    out = parse_overrides(["model.d_feat=32", "train.total_steps=100",
                           "no_codebook=true", "seed=7", "sampler_steps=1",
                           "data_path=/tmp/x.shard"])
    assert out == {
        "model": {"d_feat": 32},
        "train": {"total_steps": 100},
        "ablate": {"no_codebook": True},
        "seed": 7,
        "sampler_steps": 1,
        "data_path": "/tmp/x.shard",
    }


def test_parse_overrides_rejects_unknown_keys():
    with pytest.raises(ValueError):
        parse_overrides(["model.bogus=1"])
    with pytest.raises(ValueError):
        parse_overrides(["nonsense=1"])
    with pytest.raises(ValueError):
        parse_overrides(["model.d_feat"])
    with pytest.raises(ValueError):
        parse_overrides(["train.peak_lr=fast"])


def test_build_run_config_merging_later_wins():
    cfg = build_run_config(
        {"model": {"d_feat": 32}, "seed": 1},
        {"model": {"n_heads": 2}, "seed": 9},
    )
    assert cfg.model.d_feat == 32 and cfg.model.n_heads == 2 and cfg.seed == 9


def test_temporal_flag_syncs_between_sections():
    cfg = build_run_config({"ablate": {"temporal_centric": True}})
    assert cfg.model.temporal_centric


def test_config_file_roundtrip(tmp_path):
    cfg = build_run_config({"model": {"d_feat": 16, "n_heads": 2},
                            "train": {"total_steps": 50, "warmup_steps": 5},
                            "seed": 3})
    path = tmp_path / "run.cfg"
    path.write_text(dump_run_config(cfg))
    reloaded = build_run_config(load_config_file(str(path)))
    assert reloaded == cfg


def test_config_file_comments_and_errors(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\n\nmodel.d_feat = 16\nmodel.n_heads=2\n")
    out = load_config_file(str(path))
    assert out == {"model": {"d_feat": 16, "n_heads": 2}}
    path.write_text("just a line\n")
    with pytest.raises(ValueError):
        load_config_file(str(path))


def test_run_config_frozen():
    cfg = RunConfig()
    with pytest.raises(dataclasses.FrozenInstanceError):
        cfg.seed = 5
