import pytest

from usmim.config import TrainConfig, config_from_dict, dump_config, load_config, replace

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib


def test_defaults_match_settings_table():
    cfg = TrainConfig()
    assert (cfg.base_lr, cfg.weight_decay, cfg.beta1, cfg.beta2) == (5e-4, 4e-2, 0.9, 0.999)
    assert (cfg.tau_t, cfg.tau_s, cfg.lam, cfg.rat_m) == (0.04, 0.07, 0.996, 0.8)
    assert (cfg.r0, cfg.rT, cfg.alpha_min, cfg.alpha_max) == (0.1, 0.9, 0.1, 0.9)
    assert (cfg.views.n_global, cfg.views.n_local) == (2, 8)


def test_dump_load_roundtrip(tmp_path):
    cfg = replace(TrainConfig(), epochs=7, seed=3, global_mask="rbw", encoder__stage_dims=(8, 16), views__n_local=4)
    path = tmp_path / "c.toml"
    path.write_text(dump_config(cfg))
    back, raw = load_config(path)
    assert back == cfg
    assert raw["train"]["epochs"] == 7
    assert dump_config(back) == dump_config(cfg)


def test_float_text_is_exact():
    cfg = replace(TrainConfig(), base_lr=0.1 + 0.2)
    assert config_from_dict(tomllib.loads(dump_config(cfg))).base_lr == 0.1 + 0.2


class TestValidation:
    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(warmup_epochs=20), dict(tau_t=0.0), dict(lam=1.5),
                                    dict(rat_m=0.0), dict(r0=0.5, rT=0.2), dict(alpha_min=0.95),
                                    dict(global_mask="random"), dict(local_mask="self_adaptive"),
                                    dict(dtype="float16")])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            replace(TrainConfig(), **kw)

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            config_from_dict({"train": {"epoch": 3}})

    def test_unknown_table(self):
        with pytest.raises(ValueError):
            config_from_dict({"optimizer": {}})

    def test_view_size_divisibility(self):
        with pytest.raises(ValueError):
            replace(TrainConfig(), views__global_size=60)


def test_loss_terms_toggles():
    assert set(TrainConfig().loss_terms()) == {"cls", "patch", "recon_g", "recon_l"}
    only_cl = replace(TrainConfig(), use_recon_global=False, use_recon_local=False)
    assert set(only_cl.loss_terms()) == {"cls", "patch"}
    single = replace(TrainConfig(), local_mask="none")
    assert "recon_l" not in single.loss_terms()
