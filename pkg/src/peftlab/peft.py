"""Parameter-efficient adaptation modules and the freezing plan.

Three pluggable module kinds attach to an AdaptedModel:

* soft prompt: trainable rows prepended to the input embeddings,
* LoRA: a low-rank delta added to chosen projection weights,
* bottleneck adapter: a residual down/up block after each feed-forward.

Every kind is zero-initialized to the identity (B = 0, W_up = 0; the prompt
adds rows rather than perturbing existing ones), so attaching modules never
changes a model's outputs until training moves them.

A FreezePlan is the exact set of parameter names allowed to receive
updates. Plans are values: immutable, serializable, validated against the
model registry when built.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import tensor as T
from .model import AdaptedModel
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    """A requested configuration cannot be realized on this model."""


class SoftPrompt:
    """Trainable embedding rows occupying positions 0..k-1 of the input."""

    def __init__(self, P: Tensor, k: int):
        if k < 1:
            raise ConfigError("prompt length k must be >= 1")
        if P.shape != (k, P.shape[1]):
            raise ShapeError(f"prompt P must be (k, d), got {P.shape}")
        self.P = P
        self.k = k


def prepend_prompt(prompt: SoftPrompt, embedded: Tensor) -> Tensor:
    """[P; E(x)] row concatenation; gradient flows into P."""
    if embedded.shape[1] != prompt.P.shape[1]:
        raise ShapeError(
            f"prompt width {prompt.P.shape[1]} != embedding width {embedded.shape[1]}"
        )
    return T.concat_rows(prompt.P, embedded)


def attach_prompt(model: AdaptedModel, k: int, rng: np.random.Generator) -> SoftPrompt:
    """Attach a k-row soft prompt initialized from random embedding rows.

    Copying table rows keeps the prompt on the embedding manifold instead of
    starting from unstructured noise.
    """
    if model.prompt is not None:
        raise ConfigError("model already has a prompt attached")
    table = model.backbone.params["emb.tok"].data
    rows = rng.integers(0, table.shape[0], size=k)
    P = Tensor(table[rows].copy(), requires_grad=True)
    model.prompt = SoftPrompt(P, k)
    return model.prompt


class LoraAdapter:
    """Low-rank delta for one weight: effective update (alpha/r) * A @ B.

    Weights here follow the row-vector convention (inputs multiply from the
    left), so A (d_in, r) is the down-projection and B (r, d_out) the up.
    B starts at zero, which makes a fresh adapter an exact identity.
    """

    def __init__(self, target: str, d_in: int, d_out: int, rank: int, alpha: float,
                 rng: np.random.Generator):
        if rank < 1:
            raise ConfigError("LoRA rank must be >= 1")
        if alpha <= 0:
            raise ConfigError("LoRA alpha must be > 0")
        self.target = target
        self.rank = rank
        self.alpha = alpha
        self.A = Tensor(rng.normal(0.0, 0.02, size=(d_in, rank)), requires_grad=True)
        self.B = Tensor(np.zeros((rank, d_out)), requires_grad=True)

    def delta_forward(self, x: Tensor) -> Tensor:
        return T.scale(T.matmul(T.matmul(x, self.A), self.B), self.alpha / self.rank)

    def delta_matrix(self) -> np.ndarray:
        return (self.alpha / self.rank) * (self.A.data @ self.B.data)


DEFAULT_LORA_TARGETS = ("attn.wq", "attn.wv")


def expand_lora_targets(model: AdaptedModel, targets) -> list[str]:
    """Turn short suffixes like 'attn.wq' into per-block registry names."""
    out = []
    params = model.backbone.params
    for t in targets:
        if t in params:
            out.append(t)
            continue
        matches = [name for name in params if name.endswith("." + t)]
        if not matches:
            raise KeyError(f"LoRA target {t!r} names no registered weight")
        out.extend(matches)
    return sorted(out)


def attach_lora(model: AdaptedModel, rank: int = 4, alpha: float | None = None,
                targets=DEFAULT_LORA_TARGETS, rng: np.random.Generator | None = None
                ) -> AdaptedModel:
    """Wrap each target weight with a fresh low-rank adapter.

    alpha defaults to 2*rank. Targets may be full registry names or suffixes
    expanded across blocks; each must be an existing 2-D weight.
    """
    if alpha is None:
        alpha = 2.0 * rank
    if rng is None:
        rng = np.random.default_rng(0)
    params = model.backbone.params
    for name in expand_lora_targets(model, targets):
        w = params[name]
        if w.data.ndim != 2:
            raise ShapeError(f"LoRA target {name} is not a 2-D weight: shape {w.shape}")
        if name in model.loras:
            raise ConfigError(f"LoRA already attached to {name}")
        d_in, d_out = w.shape
        model.loras[name] = LoraAdapter(name, d_in, d_out, rank, alpha, rng)
    return model


def merge_lora(model: AdaptedModel) -> AdaptedModel:
    """Fold every LoRA delta into its base weight and detach the adapters.

    Forward outputs are preserved (up to float addition order). A model with
    no adapters is left untouched, with a warning.
    """
    if not model.loras:
        warnings.warn("merge_lora: no LoRA adapters attached; nothing to merge")
        return model
    for name, lora in model.loras.items():
        w = model.backbone.params[name]
        w.data = w.data + lora.delta_matrix()
    model.loras = {}
    return model


class BottleneckAdapter:
    """Residual down/ReLU/up block applied after a block's feed-forward.

    W_up starts at zero so a fresh adapter passes hidden states through
    unchanged.
    """

    def __init__(self, d: int, m: int, rng: np.random.Generator):
        if not 1 <= m < d:
            raise ConfigError(f"bottleneck width must satisfy 1 <= m < d, got m={m}, d={d}")
        self.m = m
        self.down = Tensor(rng.normal(0.0, 0.02, size=(d, m)), requires_grad=True)
        self.up = Tensor(np.zeros((m, d)), requires_grad=True)

    def apply(self, h: Tensor) -> Tensor:
        return T.add(h, T.matmul(T.relu(T.matmul(h, self.down)), self.up))


def attach_bottleneck(model: AdaptedModel, m: int = 8,
                      rng: np.random.Generator | None = None) -> AdaptedModel:
    """Attach one bottleneck adapter per encoder block."""
    if model.adapters:
        raise ConfigError("model already has bottleneck adapters attached")
    if rng is None:
        rng = np.random.default_rng(0)
    model.adapters = [
        BottleneckAdapter(model.cfg.model_dim, m, rng) for _ in range(model.cfg.layers)
    ]
    return model


class FreezePlan:
    """The exact set of parameter names that may receive updates."""

    def __init__(self, names):
        self.names = frozenset(names)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def __eq__(self, other) -> bool:
        return isinstance(other, FreezePlan) and self.names == other.names

    def serialize(self) -> str:
        return "\n".join(sorted(self.names))

    @classmethod
    def deserialize(cls, text: str) -> "FreezePlan":
        return cls(line for line in text.splitlines() if line.strip())

    def validate(self, model: AdaptedModel) -> None:
        registry = model.parameters()
        unknown = sorted(self.names - set(registry))
        if unknown:
            raise ConfigError(f"freeze plan names absent from registry: {unknown}")


PLAN_MODES = ("full", "head_only", "adapters_only", "adapters_plus_prompt")


def make_freeze_plan(model: AdaptedModel, mode: str) -> FreezePlan:
    """Build the trainable-name set for one of the standard modes.

    The task head is trainable under every mode; with a frozen random head
    no task signal could reach any module. Modes naming absent modules are
    configuration errors rather than silently empty plans.
    """
    registry = model.parameters()
    if mode == "full":
        return FreezePlan(registry)
    head = {"head.w", "head.b"}
    if mode == "head_only":
        return FreezePlan(head)
    adapter_names = {n for n in registry if n.startswith(("lora.", "adapter."))}
    if mode == "adapters_only":
        if not adapter_names:
            raise ConfigError("adapters_only: model has no LoRA or bottleneck adapters")
        return FreezePlan(adapter_names | head)
    if mode == "adapters_plus_prompt":
        if not adapter_names:
            raise ConfigError("adapters_plus_prompt: model has no LoRA or bottleneck adapters")
        if model.prompt is None:
            raise ConfigError("adapters_plus_prompt: model has no prompt attached")
        return FreezePlan(adapter_names | {"prompt.P"} | head)
    raise ConfigError(f"unknown freeze mode {mode!r}; expected one of {PLAN_MODES}")


def count_trainable(model: AdaptedModel, plan: FreezePlan) -> int:
    plan.validate(model)
    registry = model.parameters()
    return sum(registry[name].size for name in plan.names)


def apply_freeze(model: AdaptedModel, plan: FreezePlan) -> None:
    """Mark exactly the planned parameters as gradient-bearing.

    Besides guaranteeing frozen parameters never accumulate gradients, this
    lets the tape skip every subgraph with no trainable ancestor, which is
    most of the backbone under adapter plans.
    """
    plan.validate(model)
    for name, t in model.parameters().items():
        t.requires_grad = name in plan.names
        t.grad = None
