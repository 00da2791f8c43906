import pytest

from ldpfed.config import (
    ExperimentConfig,
    from_entries,
    parse_config,
    parse_overrides,
    parse_text,
    to_text,
)
from ldpfed.errors import ConfigError

MINIMAL = "data.source = synthetic\nmodel.layers = 32,64,10\n"


def write(tmp_path, text):
    path = tmp_path / "exp.cfg"
    path.write_text(text)
    return path


def test_minimal_config_fills_defaults(tmp_path):
    cfg = parse_config(write(tmp_path, MINIMAL))
    assert cfg.layers == (32, 64, 10)
    assert cfg.cycles == 5
    assert cfg.batch_size == 32
    assert cfg.lr == 0.05
    assert cfg.strategy == "proportional"


def test_comments_and_whitespace(tmp_path):
    text = "# experiment\n\n  data.source=synthetic  \nmodel.layers = 32, 64, 10\n   # trailing\n"
    assert parse_config(write(tmp_path, text)).layers == (32, 64, 10)


def test_k_greater_than_n(tmp_path):
    with pytest.raises(ConfigError, match="k <= N"):
        parse_config(write(tmp_path, MINIMAL + "fed.clients = 50\nfed.k = 60\n"))


def test_non_integral_universe(tmp_path):
    with pytest.raises(ConfigError, match="integer"):
        parse_config(write(tmp_path, MINIMAL + "privacy.rho = 2\nprivacy.c = 0.005\n"))


@pytest.mark.parametrize("line,key", [
    ("fed.lr = fast", "fed.lr"),
    ("privacy.strategy = magic", "privacy.strategy"),
    ("bogus.key = 1", "bogus.key"),
    ("fed.rounds = 0", "fed.rounds"),
    ("privacy.cycles = 40", "privacy.cycles"),
    ("run.arms = basic,nope", "run.arms"),
])
def test_invalid_fields_name_the_key(tmp_path, line, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        parse_config(write(tmp_path, MINIMAL + line + "\n"))


def test_missing_required(tmp_path):
    with pytest.raises(ConfigError, match="model.layers"):
        parse_config(write(tmp_path, "data.source = synthetic\n"))


def test_duplicate_key(tmp_path):
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config(write(tmp_path, MINIMAL + "fed.k = 2\nfed.k = 3\n"))


def test_malformed_line():
    with pytest.raises(ConfigError, match=":2:"):
        parse_text("data.source = synthetic\nnot a pair\n")


def test_active_strategy_needs_enough_rounds(tmp_path):
    with pytest.raises(ConfigError, match="fed.rounds"):
        parse_config(write(tmp_path, MINIMAL + "fed.rounds = 8\nprivacy.cycles = 5\n"))


def test_arch_must_match_synthetic_data(tmp_path):
    with pytest.raises(ConfigError, match="model.layers"):
        parse_config(write(tmp_path, "data.source = synthetic\nmodel.layers = 16,10\n"))


def test_idx_requires_paths(tmp_path):
    with pytest.raises(ConfigError, match="data.train_images"):
        parse_config(write(tmp_path, "data.source = idx\nmodel.layers = 784,10\n"))


def test_overrides(tmp_path):
    cfg = parse_config(write(tmp_path, MINIMAL), parse_overrides(["privacy.cycles=2", "fed.k = 4"]))
    assert cfg.cycles == 2 and cfg.k == 4
    with pytest.raises(ConfigError, match="unknown"):
        parse_overrides(["nope.x=1"])
    with pytest.raises(ConfigError):
        parse_overrides(["fed.k"])


def test_text_round_trip():
    cfg = from_entries({"data.source": "synthetic", "model.layers": "32,64,10", "privacy.c": "0.25",
                        "privacy.rho": "6", "run.arms": "basic,proportional"})
    again = from_entries(parse_text(to_text(cfg)))
    assert again == cfg


def test_with_overrides_validates():
    cfg = from_entries(parse_text(MINIMAL))
    assert cfg.with_overrides({"fed.k": "2"}).k == 2
    with pytest.raises(ConfigError):
        cfg.with_overrides({"fed.k": "99"})


def test_arm_configs():
    cfg = from_entries(parse_text(MINIMAL))
    assert cfg.for_arm("basic").strategy == "basic"
    assert cfg.for_arm("local_only").mode == "local_only"
    assert cfg.for_arm("single_layer").cycles_for("single_layer") == 1
    assert isinstance(cfg, ExperimentConfig)


def test_arm_round_requirement_checked_per_arm(tmp_path):
    text = MINIMAL + "fed.rounds = 6\nprivacy.strategy = basic\n"
    cfg = parse_config(write(tmp_path, text))
    with pytest.raises(ConfigError, match="fed.rounds"):
        cfg.for_arm("proportional")
    assert cfg.for_arm("basic").rounds == 6
