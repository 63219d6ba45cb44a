import numpy as np
import pytest

from peftlab import tensor as T
from peftlab.model import AdaptedModel, TransformerConfig, encode, forward_pair, forward_span
from peftlab.peft import (
    ConfigError,
    FreezePlan,
    SoftPrompt,
    apply_freeze,
    attach_bottleneck,
    attach_lora,
    attach_prompt,
    count_trainable,
    make_freeze_plan,
    merge_lora,
    prepend_prompt,
)
from peftlab.tensor import ShapeError, Tensor, backward


def make_model(head_kind="pair", seed=0, **cfg_kwargs):
    cfg = TransformerConfig(**cfg_kwargs)
    return AdaptedModel(cfg, head_kind, np.random.default_rng(seed))


def random_pairs(cfg, rng, count):
    hi = cfg.vocab_size - 2  # content ids only
    for _ in range(count):
        na, nb = rng.integers(1, 8, size=2)
        yield list(rng.integers(0, hi, size=na)), list(rng.integers(0, hi, size=nb))


# -- soft prompt ------------------------------------------------------------

def test_prepend_prompt_concatenation_arithmetic():
    prompt = SoftPrompt(Tensor(np.zeros((8, 32)), requires_grad=True), 8)
    out = prepend_prompt(prompt, Tensor(np.ones((16, 32))))
    assert out.shape == (24, 32)


def test_prepend_prompt_preserves_blocks():
    prompt = SoftPrompt(Tensor(np.zeros((1, 4)), requires_grad=True), 1)
    x = np.arange(12.0).reshape(3, 4)
    out = prepend_prompt(prompt, Tensor(x))
    assert np.array_equal(out.data[0], np.zeros(4))
    assert np.array_equal(out.data[1:], x)


def test_prepend_prompt_gradient_is_ones_under_sum():
    prompt = SoftPrompt(Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True), 3)
    out = prepend_prompt(prompt, Tensor(np.ones((2, 4))))
    backward(T.sum_all(out))
    assert np.array_equal(prompt.P.grad, np.ones((3, 4)))


def test_prepend_prompt_rejects_width_mismatch():
    prompt = SoftPrompt(Tensor(np.zeros((2, 8)), requires_grad=True), 2)
    with pytest.raises(ShapeError):
        prepend_prompt(prompt, Tensor(np.zeros((5, 4))))


def test_attach_prompt_copies_embedding_rows():
    m = make_model()
    attach_prompt(m, 8, np.random.default_rng(3))
    table = m.backbone.params["emb.tok"].data
    for row in m.prompt.P.data:
        assert any(np.array_equal(row, table[i]) for i in range(table.shape[0]))


def test_attach_prompt_twice_is_an_error():
    m = make_model()
    attach_prompt(m, 4, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        attach_prompt(m, 4, np.random.default_rng(1))


def test_prompt_leaves_label_spaces_unchanged():
    m = make_model("span", seed=6)
    tokens = [1, 2, 3, 4, 5]
    attach_prompt(m, 4, np.random.default_rng(2))
    start, end = forward_span(m, tokens)
    assert start.shape == (5,) and end.shape == (5,)

    mp = make_model("pair", seed=6)
    attach_prompt(mp, 4, np.random.default_rng(2))
    assert forward_pair(mp, [1, 2], [3]).shape == (2,)


# -- LoRA -------------------------------------------------------------------

def test_fresh_lora_is_exact_identity():
    rng = np.random.default_rng(8)
    m = make_model("pair", seed=8)
    baseline = [forward_pair(m, a, b).data.copy() for a, b in random_pairs(m.cfg, rng, 10)]
    attach_lora(m, rank=4, rng=np.random.default_rng(1))
    rng = np.random.default_rng(8)
    for want, (a, b) in zip(baseline, random_pairs(m.cfg, rng, 10)):
        got = forward_pair(m, a, b).data
        assert np.max(np.abs(got - want)) < 1e-12


def test_lora_adds_2dr_params_per_matrix():
    m = make_model(model_dim=64, heads=4, ff_dim=64)
    attach_lora(m, rank=4, rng=np.random.default_rng(0))
    added = sum(t.size for n, t in m.parameters().items() if n.startswith("lora."))
    # wq and wv in each of 2 blocks, 2*d*r each
    assert added == 2 * 2 * (2 * 64 * 4) == 2048
    for lora in m.loras.values():
        assert lora.A.size + lora.B.size == 2 * 64 * 4


def test_wrapped_forward_matches_merged_matrix_oracle():
    rng = np.random.default_rng(5)
    m = make_model(seed=5)
    attach_lora(m, rank=3, alpha=6.0, targets=("block.0.attn.wq",), rng=np.random.default_rng(2))
    lora = m.loras["block.0.attn.wq"]
    lora.A.data = rng.normal(size=lora.A.shape)
    lora.B.data = rng.normal(size=lora.B.shape)
    x = Tensor(rng.normal(size=(6, m.cfg.model_dim)))
    got = m._project(x, "block.0.attn.wq").data
    w = m.backbone.params["block.0.attn.wq"].data
    want = x.data @ (w + (6.0 / 3) * lora.A.data @ lora.B.data)
    assert np.max(np.abs(got - want)) < 1e-9


def test_attach_lora_rejects_unknown_target():
    m = make_model()
    with pytest.raises(KeyError):
        attach_lora(m, targets=("attn.wz",))


def test_attach_lora_rejects_non_matrix_target():
    m = make_model()
    with pytest.raises(ShapeError):
        attach_lora(m, targets=("block.0.ff.b1",))


def test_attach_lora_expands_suffix_targets_across_blocks():
    m = make_model(layers=3)
    attach_lora(m, rng=np.random.default_rng(0))
    assert sorted(m.loras) == [
        f"block.{i}.attn.{w}" for i in range(3) for w in ("wq", "wv")
    ]


# -- merge --------------------------------------------------------------------

def test_merge_right_after_attach_leaves_weights_unchanged():
    m = make_model(seed=1)
    before = {n: t.data.copy() for n, t in m.backbone.params.items()}
    attach_lora(m, rng=np.random.default_rng(1))
    merge_lora(m)
    for n, t in m.backbone.params.items():
        assert np.array_equal(t.data, before[n])
    assert not m.loras


def test_merge_after_training_preserves_forward():
    rng = np.random.default_rng(12)
    m = make_model("pair", seed=12)
    attach_lora(m, rank=4, rng=np.random.default_rng(3))
    for lora in m.loras.values():
        lora.A.data = rng.normal(0, 0.1, size=lora.A.shape)
        lora.B.data = rng.normal(0, 0.1, size=lora.B.shape)
    inputs = list(random_pairs(m.cfg, rng, 100))
    before = [forward_pair(m, a, b).data.copy() for a, b in inputs]
    merge_lora(m)
    worst = max(
        np.max(np.abs(forward_pair(m, a, b).data - want))
        for want, (a, b) in zip(before, inputs)
    )
    assert worst < 1e-9


def test_merge_then_reattach_is_identity_again():
    rng = np.random.default_rng(4)
    m = make_model("pair", seed=4)
    attach_lora(m, rng=np.random.default_rng(5))
    for lora in m.loras.values():
        lora.B.data = rng.normal(size=lora.B.shape)
    merge_lora(m)
    inputs = list(random_pairs(m.cfg, rng, 5))
    before = [forward_pair(m, a, b).data.copy() for a, b in inputs]
    attach_lora(m, rng=np.random.default_rng(6))
    for want, (a, b) in zip(before, inputs):
        assert np.max(np.abs(forward_pair(m, a, b).data - want)) < 1e-12


def test_merge_without_adapters_warns():
    m = make_model()
    with pytest.warns(UserWarning, match="nothing to merge"):
        merge_lora(m)


# -- bottleneck adapter -------------------------------------------------------

def test_fresh_bottleneck_is_exact_identity():
    rng = np.random.default_rng(9)
    m = make_model(seed=9)
    tokens = [list(rng.integers(0, m.cfg.vocab_size - 2, size=6)) for _ in range(10)]
    baseline = [encode(m, t).data.copy() for t in tokens]
    attach_bottleneck(m, m=8, rng=np.random.default_rng(2))
    for want, t in zip(baseline, tokens):
        assert np.max(np.abs(encode(m, t).data - want)) < 1e-12


def test_bottleneck_width_must_be_below_model_dim():
    m = make_model()
    with pytest.raises(ConfigError):
        attach_bottleneck(m, m=32)
    with pytest.raises(ConfigError):
        attach_bottleneck(m, m=0)


def test_one_adapter_per_block():
    m = make_model(layers=3)
    attach_bottleneck(m, m=4, rng=np.random.default_rng(0))
    assert len(m.adapters) == 3
    names = [n for n in m.parameters() if n.startswith("adapter.")]
    assert len(names) == 6  # down and up per block


# -- freeze plans --------------------------------------------------------------

def full_stack_model(seed=0):
    m = make_model("pair", seed=seed)
    attach_lora(m, rank=4, rng=np.random.default_rng(seed + 1))
    attach_prompt(m, 8, np.random.default_rng(seed + 2))
    return m


def test_full_plan_covers_every_name():
    m = full_stack_model()
    plan = make_freeze_plan(m, "full")
    assert plan.names == set(m.parameters())


def test_head_only_plan_is_exactly_the_head():
    m = make_model()
    plan = make_freeze_plan(m, "head_only")
    assert plan.names == {"head.w", "head.b"}


def test_hybrid_plan_count_matches_registry_enumeration():
    m = full_stack_model()
    plan = make_freeze_plan(m, "adapters_plus_prompt")
    # oracle: walk the registry by hand
    want = 0
    for name, t in m.parameters().items():
        if name.startswith(("lora.", "adapter.", "prompt.", "head.")):
            want += int(np.prod(t.shape))
    assert count_trainable(m, plan) == want
    # r=4 on wq/wv of 2 blocks, k=8, d=32: 4*(2*32*4) + 8*32 + (32*2 + 2)
    assert want == 1024 + 256 + 66


def test_plan_modes_reject_absent_modules():
    bare = make_model()
    with pytest.raises(ConfigError):
        make_freeze_plan(bare, "adapters_only")
    with pytest.raises(ConfigError):
        make_freeze_plan(bare, "adapters_plus_prompt")
    lora_only = make_model()
    attach_lora(lora_only, rng=np.random.default_rng(0))
    with pytest.raises(ConfigError, match="prompt"):
        make_freeze_plan(lora_only, "adapters_plus_prompt")
    with pytest.raises(ConfigError):
        make_freeze_plan(bare, "everything")


def test_adapters_only_includes_head():
    m = make_model()
    attach_lora(m, rng=np.random.default_rng(0))
    plan = make_freeze_plan(m, "adapters_only")
    assert {"head.w", "head.b"} <= plan.names
    assert all(n.startswith(("lora.", "head.")) for n in plan.names)


def test_count_trainable_on_empty_and_full_plans():
    m = full_stack_model()
    assert count_trainable(m, FreezePlan([])) == 0
    total = sum(t.size for t in m.parameters().values())
    assert count_trainable(m, make_freeze_plan(m, "full")) == total


def test_hybrid_plan_is_under_ten_percent_of_full():
    m = full_stack_model()
    hybrid = count_trainable(m, make_freeze_plan(m, "adapters_plus_prompt"))
    full = count_trainable(m, make_freeze_plan(m, "full"))
    assert hybrid < full
    assert hybrid / full < 0.10


def test_plan_serialization_round_trips():
    m = full_stack_model()
    plan = make_freeze_plan(m, "adapters_plus_prompt")
    text = plan.serialize()
    assert text == "\n".join(sorted(plan.names))
    assert FreezePlan.deserialize(text) == plan


def test_plan_validation_rejects_unknown_names():
    m = make_model()
    with pytest.raises(ConfigError, match="absent"):
        count_trainable(m, FreezePlan(["block.9.attn.wq"]))


def test_apply_freeze_stops_gradients_outside_plan():
    m = full_stack_model(seed=3)
    plan = make_freeze_plan(m, "adapters_plus_prompt")
    apply_freeze(m, plan)
    logits = forward_pair(m, [1, 2, 3], [4, 5])
    backward(T.cross_entropy_logits(T.reshape(logits, (1, 2)), [0]))
    for name, t in m.parameters().items():
        if name in plan.names:
            assert t.grad is not None, name
        else:
            assert t.grad is None, name
