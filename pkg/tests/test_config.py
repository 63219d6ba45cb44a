"""JSON config documents: defaults, round-trips, strict key checking."""

import dataclasses
import json

import pytest

from peftlab import config as cfgmod
from peftlab.corpus import AugmentationPlan
from peftlab.objective import LossWeights
from peftlab.peft import ConfigError
from peftlab.trainer import RunConfig


def test_empty_document_gives_defaults():
    cfg = cfgmod.from_dict({})
    assert cfg == RunConfig()


def test_minimal_seed_only_document():
    cfg = cfgmod.from_dict({"seed": 1})
    assert cfg.seed == 1
    assert cfg == dataclasses.replace(RunConfig(), seed=1)


def test_round_trip_identity_defaults():
    cfg = RunConfig()
    assert cfgmod.from_dict(cfgmod.to_dict(cfg)) == cfg


def test_round_trip_identity_nondefault():
    doc = {
        "seed": 9,
        "task": "span",
        "model": {"model_dim": 16, "heads": 4},
        "peft": {"lora_rank": 2, "use_adapters": True, "adapter_width": 4},
        "loss": {"lambda": 0.25, "beta": 0.001},
        "data": {"target_train": 100, "eta": 0.1},
        "train": {"transfer_epochs": 7, "freeze_mode": "full"},
        "augment": {"ratio": 0.5, "delta": 0.4},
    }
    cfg = cfgmod.from_dict(doc)
    assert cfg.task == "span"
    assert cfg.model.model_dim == 16
    assert cfg.weights == LossWeights(0.25, 0.001)
    assert cfg.augmentation == AugmentationPlan(ratio=0.5, delta=0.4, seed=9)
    again = cfgmod.from_dict(cfgmod.to_dict(cfg))
    assert again == cfg


def test_dumps_parses_back_and_is_stable():
    cfg = RunConfig(seed=3)
    text = cfgmod.dumps(cfg)
    assert text.endswith("\n")
    assert cfgmod.from_dict(json.loads(text)) == cfg
    # canonical form: serializing twice gives the same text
    assert cfgmod.dumps(cfgmod.from_dict(json.loads(text))) == text


def test_augment_seed_follows_run_seed():
    cfg = cfgmod.from_dict({"seed": 42, "augment": {"ratio": 0.3}})
    assert cfg.augmentation.seed == 42
    # the seed is implied, not serialized
    assert "seed" not in cfgmod.to_dict(cfg)["augment"]


def test_no_augment_section_means_none():
    assert cfgmod.from_dict({}).augmentation is None
    assert cfgmod.to_dict(RunConfig())["augment"] is None


@pytest.mark.parametrize("doc,where", [
    ({"sedd": 1}, "config"),
    ({"model": {"dim": 8}}, "model"),
    ({"peft": {"rank": 2}}, "peft"),
    ({"loss": {"lamda": 0.5}}, "loss"),
    ({"data": {"n_target": 10}}, "data"),
    ({"train": {"epochs": 3}}, "train"),
    ({"augment": {"rho": 0.5}}, "augment"),
])
def test_unknown_keys_rejected_per_section(doc, where):
    with pytest.raises(ConfigError, match=where):
        cfgmod.from_dict(doc)


def test_unknown_key_message_names_the_key():
    with pytest.raises(ConfigError, match="lamda"):
        cfgmod.from_dict({"loss": {"lamda": 0.5}})


def test_non_object_root_rejected():
    with pytest.raises(ConfigError, match="object"):
        cfgmod.from_dict([1, 2])


def test_non_object_section_rejected():
    with pytest.raises(ConfigError, match="model"):
        cfgmod.from_dict({"model": 7})


def test_invalid_model_geometry_reported_as_config_error():
    with pytest.raises(ConfigError, match="model"):
        cfgmod.from_dict({"model": {"model_dim": 10, "heads": 4}})


def test_lora_targets_list_becomes_tuple():
    cfg = cfgmod.from_dict({"peft": {"lora_targets": ["wq", "wv"]}})
    assert cfg.peft.lora_targets == ("wq", "wv")


def test_file_round_trip(tmp_path):
    path = tmp_path / "run.json"
    cfg = RunConfig(seed=5, task="span")
    cfgmod.save_config(cfg, path)
    assert cfgmod.load_config(path) == cfg


def test_invalid_json_file(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        cfgmod.load_config(path)
