import pytest

from recon_attention.config import (
    ConfigError,
    ModelConfig,
    dump_config,
    for_encoder,
    load_config,
    parse_config,
    save_config,
    validate_config,
)


def test_default_config_accepted():
    cfg = ModelConfig()
    assert validate_config(cfg) is cfg
    assert (cfg.max_global_steps, cfg.entropy_threshold, cfg.mask_threshold) == (5, 0.6, 0.1)
    assert cfg.local_routing_iters == 3
    assert (cfg.batch_size, cfg.initial_lr, cfg.lr_decay, cfg.patience, cfg.validation_fraction) == (128, 0.1, 0.96, 20, 0.1)


def test_zero_global_steps_rejected():
    with pytest.raises(ConfigError, match="max_global_steps must be ≥ 1"):
        validate_config(ModelConfig(max_global_steps=0))


@pytest.mark.parametrize(
    "changes",
    [
        dict(mask_threshold=1.5),
        dict(mask_threshold=0.0),
        dict(entropy_threshold=0.0),
        dict(entropy_threshold=-1.0),
        dict(local_routing_iters=0),
        dict(encoder_kind="vgg"),
        dict(recon_target_mode="mid_freq"),
        dict(n_feature_caps=228),
        dict(shape_subset=("fog", "not_a_corruption")),
    ],
)
def test_invalid_configs_rejected(changes):
    with pytest.raises(ConfigError):
        validate_config(ModelConfig(**changes))


def test_capsule_count_follows_encoder():
    assert for_encoder("conv2").n_feature_caps == 1152
    assert for_encoder("resnet18").n_feature_caps == 288


def test_config_file_roundtrip(tmp_path):
    cfg = for_encoder("resnet18", recon_target_mode="low_freq", disable_spatial_mask=True, shape_subset=("fog", "zigzag"))
    save_config(cfg, tmp_path / "c.cfg")
    assert load_config(tmp_path / "c.cfg") == cfg


def test_config_file_partial_and_comments():
    text = """
    # overrides only
    max_global_steps = 3
    disable_feature_binding = true   # ablation
    shape_subset = fog, spatter
    """
    cfg = parse_config(text)
    assert cfg.max_global_steps == 3
    assert cfg.disable_feature_binding is True
    assert cfg.shape_subset == ("fog", "spatter")
    assert cfg.entropy_threshold == 0.6


def test_config_file_errors():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("bogus = 1")
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        parse_config("max_global_steps 3")
    with pytest.raises(ConfigError):
        parse_config("max_global_steps = 0")


def test_every_field_is_serialised():
    keys = {line.split(" = ")[0] for line in dump_config(ModelConfig()).splitlines()}
    required = {
        "encoder_kind", "n_feature_caps", "local_routing_iters", "max_global_steps", "entropy_threshold",
        "mask_threshold", "recon_target_mode", "disable_spatial_mask", "disable_feature_binding", "batch_size",
        "initial_lr", "lr_decay", "patience", "recon_loss_weight", "shape_subset", "seeds", "data_root", "out_dir",
    }
    assert required <= keys


def test_hash_ignores_ablation_flags():
    cfg = ModelConfig()
    assert cfg.hash() == cfg.replace(disable_spatial_mask=True).hash()
    assert cfg.hash() != cfg.replace(entropy_threshold=0.5).hash()
