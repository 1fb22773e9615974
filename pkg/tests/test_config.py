import pytest

from stitchkit.config import ConfigError, FusionConfig, build, config_hash, load_fusion_config, parse_flat


def test_defaults_and_batch_split():
    cfg = FusionConfig()
    assert cfg.batch_target == 128 and cfg.batch_source == 64
    assert cfg.frag_length == cfg.context and cfg.frag_stride == cfg.context
    assert FusionConfig(beta=0.5, batch_size=192).batch_target == 96


@pytest.mark.parametrize("bad", [dict(xi_percent=0), dict(xi_percent=101), dict(beta=1.5), dict(zeta=1.0),
                                 dict(gamma=1.0), dict(variant="full"), dict(embed_dim=10, n_heads=3),
                                 dict(bandwidth="wide"), dict(bandwidth="-1")])
def test_invalid_values(bad):
    with pytest.raises(ConfigError):
        FusionConfig(**bad)


def test_parse_flat_and_build(tmp_path):
    text = "# comment\nbeta = 0.5  # trailing\nvariant = no_filter\ncritic_weight_inside = false\ncontext=4\n"
    cfg = build(FusionConfig, parse_flat(text))
    assert cfg.beta == 0.5 and cfg.variant == "no_filter" and cfg.critic_weight_inside is False and cfg.context == 4
    with pytest.raises(ConfigError):
        parse_flat("just words")
    with pytest.raises(ConfigError):
        build(FusionConfig, {"nope": "1"})
    with pytest.raises(ConfigError):
        build(FusionConfig, {"context": "five"})
    p = tmp_path / "c.cfg"
    p.write_text(text)
    assert load_fusion_config(p) == cfg


def test_hash_tracks_resolved_values():
    a, b = FusionConfig(), FusionConfig(beta=1.0 / 3.0)
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(FusionConfig(seed=1))


def test_variants_resolve_to_filter_settings():
    assert FusionConfig(variant="no_filter").for_variant().xi_percent == 100
    t = FusionConfig(variant="target_only").for_variant()
    assert (t.beta, t.alpha, t.eta_reg) == (0.0, 0.0, 0.0)
    assert FusionConfig(variant="mmd_only").use_ot_weights is False
    assert FusionConfig(variant="ot_only").for_variant().xi_percent == 100
