import json

import pytest

from config import LabConfig, config_from_dict, load_config
from errors import InvalidInputError


def test_default_training_schedule():
    config = LabConfig().validate()
    assert config.expansion.epochs == 6
    assert config.selection.epsilon == 0.95
    assert config.selection.n == 100
    assert config.selection.K == 1
    assert config.adaptation.q == 100
    assert config.adaptation.mu == 0.25
    assert config.adaptation.pseudo_ratio == 0.2


def test_partial_override(tmp_path):
    path = tmp_path / "lab.json"
    path.write_text(json.dumps({"selection": {"K": 2}, "adaptation": {"pseudo_decode": {"top_k": 5}}}))
    config = load_config(str(path))
    assert config.selection.K == 2
    assert config.selection.epsilon == 0.95
    assert config.adaptation.pseudo_decode.top_k == 5
    assert config.adaptation.pseudo_decode.strategy == "top_k"


@pytest.mark.parametrize("data", [
    {"nonsense": {}},
    {"selection": {"nonsense": 1}},
    {"selection": {"epsilon": 0.0}},
    {"backbone": {"hidden_width": 63, "num_heads": 2}},
    {"expansion": {"optimizer": "rmsprop"}},
])
def test_invalid_configs_rejected(data):
    with pytest.raises(InvalidInputError):
        config_from_dict(data)


def test_to_dict_round_trip():
    config = config_from_dict({"harness": {"seeds": [3, 4]}, "selection": {"norm": "spectral"}})
    assert config_from_dict(json.loads(json.dumps(config.to_dict()))) == config


def test_with_seed_replaces_training_seeds_only():
    config = LabConfig().with_seed(7)
    assert config.expansion.seed == 7
    assert config.selection.seed == 7
    assert config.adaptation.seed == 7
    assert config.adaptation.pseudo_decode.seed == 7
    assert config.taskgen.seed == LabConfig().taskgen.seed


def test_thread_override_from_environment(monkeypatch):
    monkeypatch.setenv("DMEA_THREADS", "3")
    assert load_config().harness.threads == 3
    monkeypatch.setenv("DMEA_THREADS", "many")
    with pytest.raises(InvalidInputError):
        load_config()
