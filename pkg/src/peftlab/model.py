"""Tiny transformer encoder backbone with task heads.

The backbone is a pre-layer-norm residual encoder: token embeddings plus
learned absolute positions, then per block multi-head self-attention and a
ReLU feed-forward, each behind its own layer norm. Every parameter lives in
a flat registry under a unique dotted name
(``block.0.attn.wq`` and friends), which is what freeze plans, snapshots and
checkpoints key on.

Two reserved token ids sit at the top of the vocabulary: PAD (V-2), which is
masked out of attention and pooling, and SEP (V-1), which joins the two
halves of a sequence-pair input. Adaptation modules (soft prompt, LoRA,
bottleneck adapters) are attached by the peft module and consulted here via
small duck-typed hooks, so a bare backbone and an adapted one share one
forward path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class TransformerConfig:
    vocab_size: int = 64
    model_dim: int = 32
    heads: int = 4
    layers: int = 2
    ff_dim: int = 64
    max_seq_len: int = 64

    def __post_init__(self):
        for field in ("vocab_size", "model_dim", "heads", "ff_dim", "max_seq_len"):
            if getattr(self, field) < 1:
                raise ValueError(f"TransformerConfig.{field} must be >= 1")
        if self.layers < 0:
            raise ValueError("TransformerConfig.layers must be >= 0")
        if self.model_dim % self.heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}"
            )

    @property
    def pad_id(self) -> int:
        return self.vocab_size - 2

    @property
    def sep_id(self) -> int:
        return self.vocab_size - 1


def _param(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Backbone:
    """Encoder parameters plus the forward pass over one token sequence."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, ff = cfg.model_dim, cfg.ff_dim
        proj_std = 1.0 / np.sqrt(d)
        p: dict[str, Tensor] = {}
        p["emb.tok"] = _param(rng, (cfg.vocab_size, d), 0.02)
        p["emb.pos"] = _param(rng, (cfg.max_seq_len, d), 0.02)
        for i in range(cfg.layers):
            p[f"block.{i}.ln1.gain"] = Tensor(np.ones(d), requires_grad=True)
            p[f"block.{i}.ln1.bias"] = Tensor(np.zeros(d), requires_grad=True)
            for name in ("wq", "wk", "wv", "wo"):
                p[f"block.{i}.attn.{name}"] = _param(rng, (d, d), proj_std)
            p[f"block.{i}.ln2.gain"] = Tensor(np.ones(d), requires_grad=True)
            p[f"block.{i}.ln2.bias"] = Tensor(np.zeros(d), requires_grad=True)
            p[f"block.{i}.ff.w1"] = _param(rng, (d, ff), proj_std)
            p[f"block.{i}.ff.b1"] = Tensor(np.zeros(ff), requires_grad=True)
            p[f"block.{i}.ff.w2"] = _param(rng, (ff, d), 1.0 / np.sqrt(ff))
            p[f"block.{i}.ff.b2"] = Tensor(np.zeros(d), requires_grad=True)
        self.params = p


class AdaptedModel:
    """A backbone composed with optional adaptation modules and a task head.

    ``head_kind`` is "pair" (two-way classifier over the pooled encoding of a
    joined pair) or "span" (per-token start/end scores). The head is a single
    (d, 2) map plus bias either way; for spans, column 0 scores starts and
    column 1 scores ends.
    """

    def __init__(self, cfg: TransformerConfig, head_kind: str, rng: np.random.Generator):
        if head_kind not in ("pair", "span"):
            raise ValueError(f"unknown head kind: {head_kind!r}")
        self.cfg = cfg
        self.head_kind = head_kind
        self.backbone = Backbone(cfg, rng)
        self.head_w = _param(rng, (cfg.model_dim, 2), 1.0 / np.sqrt(cfg.model_dim))
        self.head_b = Tensor(np.zeros(2), requires_grad=True)
        self.prompt = None        # peft.SoftPrompt
        self.loras: dict = {}     # target weight name -> peft.LoraAdapter
        self.adapters: list = []  # per-block peft.BottleneckAdapter, len == layers

    # -- registry ---------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        """The full named-parameter registry, adaptation modules included."""
        reg = dict(self.backbone.params)
        reg["head.w"] = self.head_w
        reg["head.b"] = self.head_b
        if self.prompt is not None:
            reg["prompt.P"] = self.prompt.P
        for target in sorted(self.loras):
            reg[f"lora.{target}.A"] = self.loras[target].A
            reg[f"lora.{target}.B"] = self.loras[target].B
        for i, adapter in enumerate(self.adapters):
            reg[f"adapter.{i}.down"] = adapter.down
            reg[f"adapter.{i}.up"] = adapter.up
        return reg

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        reg = self.parameters()
        if set(state) != set(reg):
            missing = sorted(set(reg) - set(state))
            extra = sorted(set(state) - set(reg))
            raise ValueError(f"state dict mismatch: missing={missing}, unexpected={extra}")
        for name, arr in state.items():
            if reg[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {reg[name].shape} vs {arr.shape}")
            reg[name].data = np.array(arr, dtype=np.float64)

    # -- forward ----------------------------------------------------------

    def _project(self, x: Tensor, weight_name: str) -> Tensor:
        """x @ W with the LoRA delta added when one wraps this weight."""
        w = self.backbone.params[weight_name]
        out = T.matmul(x, w)
        lora = self.loras.get(weight_name)
        if lora is not None:
            out = T.add(out, lora.delta_forward(x))
        return out

    def prompt_len(self) -> int:
        return 0 if self.prompt is None else self.prompt.k


def encode(model: AdaptedModel, tokens, prompt=None) -> Tensor:
    """Run the encoder over one token sequence.

    Tokens are embedded and given learned positions, the soft prompt (the
    attached one unless ``prompt`` overrides it) is prepended, and all blocks
    run with PAD positions masked out of attention. Output has one row per
    prompt vector plus one per token.
    """
    cfg = model.cfg
    tokens = list(tokens)
    n = len(tokens)
    if n < 1:
        raise ValueError("encode: empty token sequence")
    if max(tokens) >= cfg.vocab_size or min(tokens) < 0:
        raise ValueError(
            f"encode: token id out of vocabulary range [0, {cfg.vocab_size})"
        )
    if prompt is None:
        prompt = model.prompt
    k = 0 if prompt is None else prompt.k
    if n > cfg.max_seq_len - k:
        raise ValueError(
            f"encode: sequence of {n} tokens exceeds max length {cfg.max_seq_len} - {k} prompt rows"
        )

    params = model.backbone.params
    h = T.add(
        T.embedding_lookup(params["emb.tok"], tokens),
        T.slice_rows(params["emb.pos"], 0, n),
    )
    if prompt is not None:
        h = T.concat_rows(prompt.P, h)

    pad_mask = np.zeros(k + n, dtype=bool)
    pad_mask[k:] = np.asarray(tokens) == cfg.pad_id
    key_mask = pad_mask if pad_mask.any() else None

    for i in range(cfg.layers):
        x = T.layer_norm(h, params[f"block.{i}.ln1.gain"], params[f"block.{i}.ln1.bias"])
        q = model._project(x, f"block.{i}.attn.wq")
        kk = model._project(x, f"block.{i}.attn.wk")
        v = model._project(x, f"block.{i}.attn.wv")
        att = T.attention(q, kk, v, cfg.heads, key_mask=key_mask)
        h = T.add(h, T.matmul(att, params[f"block.{i}.attn.wo"]))
        x = T.layer_norm(h, params[f"block.{i}.ln2.gain"], params[f"block.{i}.ln2.bias"])
        f = T.relu(T.add(T.matmul(x, params[f"block.{i}.ff.w1"]), params[f"block.{i}.ff.b1"]))
        f = T.add(T.matmul(f, params[f"block.{i}.ff.w2"]), params[f"block.{i}.ff.b2"])
        h = T.add(h, f)
        if model.adapters:
            h = model.adapters[i].apply(h)
    return h


def pool(hidden: Tensor) -> Tensor:
    """Mean over token rows: the feature map into the shared space."""
    if hidden.shape[0] < 1:
        raise ValueError("pool: empty sequence")
    return T.mean_rows(hidden)


def _strip_pad(cfg: TransformerConfig, content: Tensor, tokens) -> Tensor:
    token_arr = np.asarray(list(tokens))
    if (token_arr == cfg.pad_id).any():
        keep = np.flatnonzero(token_arr != cfg.pad_id)
        if keep.size == 0:
            raise ValueError("all positions are PAD")
        content = T.select_rows(content, keep)
    return content


def _content_rows(model: AdaptedModel, hidden: Tensor, tokens) -> Tensor:
    """Strip prompt rows, then PAD rows, from an encoded sequence."""
    k = model.prompt_len()
    content = T.slice_rows(hidden, k, k + len(tokens))
    return _strip_pad(model.cfg, content, tokens)


def encode_feature(model: AdaptedModel, tokens) -> Tensor:
    """pool(encode(x)) over content rows only; realizes the shared-space map."""
    return pool(_content_rows(model, encode(model, tokens), tokens))


def join_pair(cfg: TransformerConfig, tokens_a, tokens_b) -> list[int]:
    return list(tokens_a) + [cfg.sep_id] + list(tokens_b)


def pair_outputs(model: AdaptedModel, tokens_a, tokens_b) -> tuple[Tensor, Tensor]:
    """(logits, pooled feature) for a pair, from a single encoder pass."""
    if model.head_kind != "pair":
        raise ValueError("forward_pair requires a pair-classifier head")
    joined = join_pair(model.cfg, tokens_a, tokens_b)
    feat = encode_feature(model, joined)
    row = T.reshape(feat, (1, model.cfg.model_dim))
    logits = T.reshape(T.add(T.matmul(row, model.head_w), model.head_b), (2,))
    return logits, feat


def forward_pair(model: AdaptedModel, tokens_a, tokens_b) -> Tensor:
    """Two-way logits for a sequence pair joined as [a; SEP; b]."""
    return pair_outputs(model, tokens_a, tokens_b)[0]


def span_outputs(model: AdaptedModel, tokens) -> tuple[Tensor, Tensor, Tensor]:
    """(start logits, end logits, pooled feature) from a single encoder pass."""
    if model.head_kind != "span":
        raise ValueError("forward_span requires a span head")
    tokens = list(tokens)
    hidden = encode(model, tokens)
    k = model.prompt_len()
    content = T.slice_rows(hidden, k, k + len(tokens))
    logits = T.add(T.matmul(content, model.head_w), model.head_b)
    n = len(tokens)
    start = T.reshape(T.slice_cols(logits, 0, 1), (n,))
    end = T.reshape(T.slice_cols(logits, 1, 2), (n,))
    feat = pool(_strip_pad(model.cfg, content, tokens))
    return start, end, feat


def forward_span(model: AdaptedModel, tokens) -> tuple[Tensor, Tensor]:
    """Per-token start and end logits, computed over content positions only."""
    start, end, _ = span_outputs(model, tokens)
    return start, end


def predict_span(start_logits: np.ndarray, end_logits: np.ndarray) -> tuple[int, int]:
    """Greedy span decode: argmax start, then argmax end at or after it.

    np.argmax resolves ties to the lowest index, which makes the decode total
    and deterministic.
    """
    start = int(np.argmax(start_logits))
    end = start + int(np.argmax(end_logits[start:]))
    return start, end


def build_model(cfg: TransformerConfig, head_kind: str, rng: np.random.Generator) -> AdaptedModel:
    return AdaptedModel(cfg, head_kind, rng)
