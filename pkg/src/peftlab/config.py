"""JSON experiment configuration, the file form of RunConfig.

One document with sections model, peft, loss, data, train, and augment,
plus top-level seed and task. Every field has a default, so {"seed": 1}
is a complete config. Unknown keys are rejected rather than ignored: a
typo like "lamda" silently falling back to the default would invalidate
an experiment.
"""

from __future__ import annotations

import json

from .corpus import AugmentationPlan
from .model import TransformerConfig
from .objective import LossWeights
from .peft import ConfigError
from .trainer import PeftSpec, RunConfig

_TOP_KEYS = ("seed", "task", "model", "peft", "loss", "data", "train", "augment")
_MODEL_KEYS = ("vocab_size", "model_dim", "heads", "layers", "ff_dim", "max_seq_len")
_PEFT_KEYS = ("use_lora", "lora_rank", "lora_alpha", "lora_targets",
              "use_prompt", "prompt_len", "use_adapters", "adapter_width")
_LOSS_KEYS = ("lambda", "beta")
_DATA_KEYS = ("source_train", "target_train", "target_dev", "target_test", "eta")
_TRAIN_KEYS = ("pretrain_epochs", "transfer_epochs", "batch_size", "freeze_mode",
               "lr_peft", "lr_full", "clip_norm")
_AUGMENT_KEYS = ("ratio", "delta")


def _check_keys(where: str, doc: dict, allowed) -> None:
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _section(doc: dict, name: str) -> dict:
    sub = doc.get(name)
    if sub is None:
        return {}
    if not isinstance(sub, dict):
        raise ConfigError(f"config section {name!r} must be a JSON object")
    return sub


def _pick(doc: dict, keys) -> dict:
    return {k: doc[k] for k in keys if k in doc}


def from_dict(doc: dict) -> RunConfig:
    """Build a RunConfig from a parsed JSON document, applying defaults."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys("config", doc, _TOP_KEYS)

    model_doc = _section(doc, "model")
    _check_keys("model", model_doc, _MODEL_KEYS)
    peft_doc = _section(doc, "peft")
    _check_keys("peft", peft_doc, _PEFT_KEYS)
    loss_doc = _section(doc, "loss")
    _check_keys("loss", loss_doc, _LOSS_KEYS)
    data_doc = _section(doc, "data")
    _check_keys("data", data_doc, _DATA_KEYS)
    train_doc = _section(doc, "train")
    _check_keys("train", train_doc, _TRAIN_KEYS)

    try:
        model = TransformerConfig(**_pick(model_doc, _MODEL_KEYS))
    except ValueError as err:
        raise ConfigError(f"model: {err}") from err

    peft_kwargs = _pick(peft_doc, _PEFT_KEYS)
    if "lora_targets" in peft_kwargs:
        peft_kwargs["lora_targets"] = tuple(peft_kwargs["lora_targets"])
    peft = PeftSpec(**peft_kwargs)

    weights = LossWeights(lam=loss_doc.get("lambda", 0.5),
                          beta=loss_doc.get("beta", 0.01))

    seed = doc.get("seed", 0)
    augmentation = None
    if doc.get("augment") is not None:
        augment_doc = _section(doc, "augment")
        _check_keys("augment", augment_doc, _AUGMENT_KEYS)
        augmentation = AugmentationPlan(ratio=augment_doc.get("ratio", 0.0),
                                        delta=augment_doc.get("delta", 0.0),
                                        seed=seed)

    return RunConfig(
        task=doc.get("task", "pair"),
        seed=seed,
        model=model,
        peft=peft,
        weights=weights,
        augmentation=augmentation,
        **_pick(data_doc, _DATA_KEYS),
        **_pick(train_doc, _TRAIN_KEYS),
    )


def to_dict(config: RunConfig) -> dict:
    """Canonical full document: every field explicit, augment seed implied.

    The augmentation plan's seed always follows the run seed, so only ratio
    and delta are written.
    """
    augment = None
    if config.augmentation is not None:
        augment = {"ratio": config.augmentation.ratio,
                   "delta": config.augmentation.delta}
    return {
        "seed": config.seed,
        "task": config.task,
        "model": {k: getattr(config.model, k) for k in _MODEL_KEYS},
        "peft": {
            **{k: getattr(config.peft, k) for k in _PEFT_KEYS if k != "lora_targets"},
            "lora_targets": list(config.peft.lora_targets),
        },
        "loss": {"lambda": config.weights.lam, "beta": config.weights.beta},
        "data": {k: getattr(config, k) for k in _DATA_KEYS},
        "train": {k: getattr(config, k) for k in _TRAIN_KEYS},
        "augment": augment,
    }


def dumps(config: RunConfig) -> str:
    return json.dumps(to_dict(config), indent=2, sort_keys=True) + "\n"


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"invalid JSON in {path}: {err}") from err
    return from_dict(doc)


def save_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(config))
