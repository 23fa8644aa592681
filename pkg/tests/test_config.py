import pytest

from relsum.config import ARTIFACT_ENV_VAR, RunConfig, load_config
from relsum.errors import ConfigError


def _write(tmp_path, text):
    path = tmp_path / "run.ini"
    path.write_text(text, encoding="utf-8")
    return path


def test_defaults_match_the_training_recipe():
    config = load_config()

    assert config.grpo.G == 4
    assert config.grpo.epsilon == pytest.approx(0.2)
    assert config.grpo.beta == 0.0
    assert config.grpo.temperature == pytest.approx(0.9)
    assert config.grpo.lr == pytest.approx(1e-5)
    assert config.dpo.beta == pytest.approx(0.1)
    assert config.eval.ndcg_k == 5
    assert config.interleave.n_sessions == 10000


def test_file_then_overrides_then_seed_flag(tmp_path, monkeypatch):
    monkeypatch.delenv(ARTIFACT_ENV_VAR, raising=False)
    path = _write(tmp_path, "[run]\nroot_seed = 5\n[grpo]\nG = 6\nbeta = 0.05\n[eval]\nsample_summaries = yes\n")

    config = load_config(path, overrides=["grpo.G=8"], seed=11)

    assert config.grpo.G == 8
    assert config.grpo.beta == pytest.approx(0.05)
    assert config.eval.sample_summaries is True
    assert config.root_seed == 11


def test_environment_sets_artifact_root_below_explicit_flag(monkeypatch):
    monkeypatch.setenv(ARTIFACT_ENV_VAR, "/tmp/from-env")

    assert load_config().artifact_dir == "/tmp/from-env"
    assert load_config(artifact_dir="/tmp/flag").artifact_dir == "/tmp/flag"


def test_unknown_keys_and_sections_fail(tmp_path):
    with pytest.raises(ConfigError):
        load_config(overrides=["grpo.group_size=4"])
    with pytest.raises(ConfigError):
        load_config(overrides=["optimizer.lr=1"])
    with pytest.raises(ConfigError):
        load_config(overrides=["no-dot-here"])
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "[grpo]\nG = four\n"))
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_validation_rejects_inconsistent_values():
    with pytest.raises(ConfigError):
        load_config(overrides=["grpo.G=1"])
    with pytest.raises(ConfigError):
        load_config(overrides=["dpo.G=3"])
    with pytest.raises(ConfigError):
        load_config(overrides=["policy.n_heads=3"])
    with pytest.raises(ConfigError):
        load_config(overrides=["interleave.atc_good=0.5"])
    with pytest.raises(ConfigError):
        load_config(seed=-1)


def test_config_hash_ignores_artifact_root_but_not_seed():
    a = RunConfig()
    b = RunConfig(artifact_dir="elsewhere")
    c = RunConfig(root_seed=1)

    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()


def test_payload_and_ini_describe_the_same_config(tmp_path):
    config = load_config(overrides=["corpus.n_products=50", "grpo.beta=0.1"], seed=3)

    rebuilt = RunConfig.from_payload(config.to_payload())
    reread = load_config(_write(tmp_path, config.to_ini()))

    assert rebuilt.config_hash() == config.config_hash()
    assert reread.config_hash() == config.config_hash()
