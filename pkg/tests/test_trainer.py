"""Training pipeline: optimizer, metrics, drivers, gradient checker."""

import copy
import dataclasses

import numpy as np
import pytest

import peftlab.tensor
from peftlab import tensor as T
from peftlab import trainer
from peftlab.corpus import generate_task
from peftlab.model import span_outputs
from peftlab.objective import LossWeights, ThetaSnapshot, sp_regularizer
from peftlab.peft import ConfigError, FreezePlan, make_freeze_plan
from peftlab.tensor import Tensor
from peftlab.trainer import (
    GRADCHECK_CONFIG,
    AdamState,
    NumericalAbort,
    RunConfig,
    apply_gradients_masked,
    clip_gradients,
    evaluate,
    gradient_check,
    span_overlap_f1,
    stability_score,
)

TINY = RunConfig(
    task="pair",
    seed=0,
    model=dataclasses.replace(GRADCHECK_CONFIG.model),
    peft=GRADCHECK_CONFIG.peft,
    source_train=300,
    target_train=30,
    target_dev=24,
    target_test=24,
    batch_size=8,
    pretrain_epochs=2,
    transfer_epochs=3,
)


class ParamBag:
    """Minimal stand-in for a model: just a named parameter registry."""

    def __init__(self, **arrays):
        self._params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}

    def parameters(self):
        return self._params


def manual_adam(values, grads, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Loop-executed update rule, independent of the optimizer code."""
    values = {k: np.array(v, dtype=float) for k, v in values.items()}
    m = {k: np.zeros_like(v) for k, v in values.items()}
    v = {k: np.zeros_like(val) for k, val in values.items()}
    for t in range(1, steps + 1):
        for k in values:
            g = grads[k]
            m[k] = b1 * m[k] + (1 - b1) * g
            v[k] = b2 * v[k] + (1 - b2) * g * g
            m_hat = m[k] / (1 - b1 ** t)
            v_hat = v[k] / (1 - b2 ** t)
            values[k] = values[k] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return values


# -- optimizer ----------------------------------------------------------------------


def test_adam_single_param_matches_hand_computed_update():
    bag = ParamBag(w=np.array([1.0]))
    plan = FreezePlan(["w"])
    opt = AdamState.create(bag, plan, lr=0.1)
    bag.parameters()["w"].grad = np.array([0.5])
    apply_gradients_masked(bag, plan, opt)
    expected = 1.0 - 0.1 * 0.5 / (np.sqrt(0.25) + 1e-8)
    assert abs(bag.parameters()["w"].data[0] - expected) < 1e-15


def test_adam_multi_step_matches_loop_oracle():
    rng = np.random.default_rng(3)
    w0 = rng.normal(size=(4, 3))
    g = rng.normal(size=(4, 3))
    bag = ParamBag(w=w0.copy())
    plan = FreezePlan(["w"])
    opt = AdamState.create(bag, plan, lr=0.05)
    for _ in range(7):
        bag.parameters()["w"].grad = g.copy()
        apply_gradients_masked(bag, plan, opt)
    oracle = manual_adam({"w": w0}, {"w": g}, lr=0.05, steps=7)
    np.testing.assert_allclose(bag.parameters()["w"].data, oracle["w"], rtol=0, atol=1e-12)


def test_moment_buffers_exist_only_for_plan_members():
    bag = ParamBag(a=np.ones(2), b=np.ones(3), c=np.ones(4))
    opt = AdamState.create(bag, FreezePlan(["a", "c"]), lr=0.1)
    assert set(opt.m) == {"a", "c"}
    assert set(opt.v) == {"a", "c"}


def test_masked_step_leaves_frozen_param_bit_identical():
    bag = ParamBag(train=np.array([1.0, 2.0]), frozen=np.array([3.0, 4.0]))
    frozen_before = bag.parameters()["frozen"].data.copy()
    plan = FreezePlan(["train"])
    opt = AdamState.create(bag, plan, lr=0.1)
    bag.parameters()["train"].grad = np.array([1.0, -1.0])
    bag.parameters()["frozen"].grad = np.array([9.0, 9.0])  # stray grad must be ignored
    apply_gradients_masked(bag, plan, opt)
    assert np.array_equal(bag.parameters()["frozen"].data, frozen_before)
    assert bag.parameters()["frozen"].grad is None  # all grads zeroed afterwards


def test_full_plan_equals_unmasked_update():
    rng = np.random.default_rng(11)
    arrays = {"x": rng.normal(size=3), "y": rng.normal(size=(2, 2))}
    grads = {"x": rng.normal(size=3), "y": rng.normal(size=(2, 2))}
    bag = ParamBag(**{k: v.copy() for k, v in arrays.items()})
    plan = FreezePlan(arrays)
    opt = AdamState.create(bag, plan, lr=0.2)
    for _ in range(3):
        for k, g in grads.items():
            bag.parameters()[k].grad = g.copy()
        apply_gradients_masked(bag, plan, opt)
    oracle = manual_adam(arrays, grads, lr=0.2, steps=3)
    for k in arrays:
        np.testing.assert_allclose(bag.parameters()[k].data, oracle[k], atol=1e-12)


def test_missing_gradient_for_plan_member_raises():
    bag = ParamBag(w=np.ones(2))
    plan = FreezePlan(["w"])
    opt = AdamState.create(bag, plan, lr=0.1)
    with pytest.raises(RuntimeError, match="no gradient"):
        apply_gradients_masked(bag, plan, opt)


def test_clip_rescales_global_norm_to_max():
    bag = ParamBag(a=np.zeros(2), b=np.zeros(2))
    bag.parameters()["a"].grad = np.array([3.0, 0.0])
    bag.parameters()["b"].grad = np.array([0.0, 4.0])
    norm = clip_gradients(bag, FreezePlan(["a", "b"]), max_norm=1.0)
    assert abs(norm - 5.0) < 1e-12
    total = np.sqrt(sum(float((t.grad ** 2).sum()) for t in bag.parameters().values()))
    assert abs(total - 1.0) < 1e-12


def test_clip_leaves_small_gradients_untouched():
    bag = ParamBag(a=np.zeros(2))
    bag.parameters()["a"].grad = np.array([0.3, 0.4])
    clip_gradients(bag, FreezePlan(["a"]), max_norm=5.0)
    assert np.array_equal(bag.parameters()["a"].grad, np.array([0.3, 0.4]))


# -- evaluation ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_splits():
    return generate_task(TINY.task, TINY.split_spec(), vocab_size=TINY.model.vocab_size)


def test_perfect_predictions_score_one_everywhere(tiny_splits):
    model = trainer.build_model(TINY)
    # rig the head so class 1 always wins, then keep only label-1 examples
    model.head_b.data = np.array([0.0, 100.0])
    ones = [x for x in tiny_splits.target_dev if x.label == 1]
    metrics = evaluate(model, ones, "pair")
    assert metrics.accuracy == 1.0
    assert metrics.f1 == 1.0
    assert metrics.em == 1.0


def test_span_overlap_f1_analytic_case():
    # overlap 2 tokens, both spans 3 long -> p = r = 2/3
    assert abs(span_overlap_f1((2, 4), (3, 5)) - 2.0 / 3.0) < 1e-12
    assert span_overlap_f1((3, 5), (3, 5)) == 1.0
    assert span_overlap_f1((0, 1), (4, 6)) == 0.0


def test_random_model_pair_accuracy_near_chance(tiny_splits):
    # averaged over the big split; predictions within one model share the random
    # head, so tiny splits are too noisy for a chance-level check
    accs = []
    for seed in range(5):
        cfg = dataclasses.replace(TINY, seed=seed)
        model = trainer.build_model(cfg)
        accs.append(evaluate(model, tiny_splits.source_train, "pair").accuracy)
    assert abs(np.mean(accs) - 0.5) < 0.05


def test_pair_em_equals_accuracy(tiny_splits):
    model = trainer.build_model(TINY)
    metrics = evaluate(model, tiny_splits.target_dev, "pair")
    assert metrics.em == metrics.accuracy


def test_span_em_at_most_f1_and_accuracy_is_em():
    cfg = dataclasses.replace(TINY, task="span")
    splits = generate_task("span", cfg.split_spec(), vocab_size=cfg.model.vocab_size)
    for seed in range(3):
        model = trainer.build_model(dataclasses.replace(cfg, seed=seed))
        metrics = evaluate(model, splits.target_dev, "span")
        assert metrics.em <= metrics.f1 + 1e-12
        assert metrics.accuracy == metrics.em


def test_evaluate_empty_split_rejected():
    model = trainer.build_model(TINY)
    with pytest.raises(ValueError, match="empty"):
        evaluate(model, [], "pair")


def test_alignment_contributes_zero_without_parallels(tiny_splits):
    model = trainer.build_model(TINY)
    reference = trainer.build_model(TINY)
    # pseudo-style instances: drop the parallel link
    stripped = [copy.copy(x) for x in tiny_splits.target_dev[:10]]
    for x in stripped:
        x.parallel = None
    weights = LossWeights(0.5, 0.0)
    metrics = evaluate(model, stripped, "pair", weights, reference=reference)
    assert metrics.losses.align == 0.0
    assert abs(metrics.losses.total - metrics.losses.task) < 1e-12


def test_reference_provider_and_model_agree(tiny_splits):
    model = trainer.build_model(TINY)
    ref_model = trainer.build_model(dataclasses.replace(TINY, seed=5))
    weights = LossWeights(0.5, 0.0)
    direct = evaluate(model, tiny_splits.target_dev[:12], "pair", weights,
                      reference=ref_model)
    cached = evaluate(model, tiny_splits.target_dev[:12], "pair", weights,
                      reference=trainer.RefFeatures(ref_model))
    assert direct.losses.align == cached.losses.align
    assert direct.losses.total == cached.losses.total


# -- train pipeline -------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_run(tiny_splits):
    pretrained = trainer.pretrain_source(TINY, tiny_splits)
    state = pretrained.state_dict()
    result = trainer.train(TINY, splits=tiny_splits, pretrained_state=state)
    return state, result


def trace_floats(result):
    rows = []
    for rec in result.trace:
        m = rec.metrics
        rows.append((rec.epoch, rec.split, m.accuracy, m.f1, m.em,
                     m.losses.task, m.losses.align, m.losses.reg, m.losses.total))
    return rows


def test_zero_epoch_transfer_is_noop(tiny_splits):
    cfg = dataclasses.replace(TINY, transfer_epochs=0)
    result = trainer.train(cfg, splits=tiny_splits)
    registry = result.model.parameters()
    for name in result.plan.names:
        assert np.array_equal(registry[name].data, result.snapshot[name]), name
    reg = sp_regularizer(result.model, result.plan, result.snapshot)
    assert reg.item() == 0.0
    assert [r.split for r in result.trace] == ["dev", "test"]


def test_same_config_same_trace(tiny_splits):
    a = trainer.train(TINY, splits=tiny_splits)
    b = trainer.train(TINY, splits=tiny_splits)
    assert trace_floats(a) == trace_floats(b)


def test_stage_reuse_is_bit_identical(tiny_run, tiny_splits):
    state, reused = tiny_run
    fresh = trainer.train(TINY)  # regenerates corpus and pretrains itself
    assert trace_floats(fresh) == trace_floats(reused)
    fresh_params = fresh.model.state_dict()
    for name, arr in reused.model.state_dict().items():
        assert np.array_equal(arr, fresh_params[name]), name


def test_backbone_frozen_through_transfer(tiny_run):
    state, result = tiny_run
    registry = result.model.parameters()
    trained = result.plan.names
    for name, arr in state.items():
        if name in trained:
            continue
        assert np.array_equal(registry[name].data, arr), name


def test_regularizer_zero_over_frozen_names(tiny_run):
    state, result = tiny_run
    frozen = [n for n in result.model.parameters() if n not in result.plan.names]
    frozen_plan = FreezePlan(frozen)
    snapshot = ThetaSnapshot({n: state[n] for n in frozen if n in state})
    # freshly attached modules are absent from the pretrained state; restrict
    # to backbone names, which must not have moved
    backbone_plan = FreezePlan([n for n in frozen if n in state])
    reg = sp_regularizer(result.model, backbone_plan, snapshot)
    assert reg.item() == 0.0


def test_final_dev_loss_below_initial(tiny_run):
    _, result = tiny_run
    dev = [r for r in result.trace if r.split == "dev"]
    assert dev[-1].metrics.losses.total < dev[0].metrics.losses.total


def test_trace_shape_and_epoch_order(tiny_run):
    _, result = tiny_run
    dev = [r for r in result.trace if r.split == "dev"]
    assert [r.epoch for r in dev] == list(range(TINY.transfer_epochs + 1))
    assert result.trace[-1].split == "test"
    assert result.trace[-1].epoch == TINY.transfer_epochs


def test_numerical_abort_names_the_step(tiny_splits):
    cfg = dataclasses.replace(TINY, lr_peft=1e200, transfer_epochs=2)
    with pytest.raises(NumericalAbort, match=r"transfer at epoch \d+, step \d+"):
        with np.errstate(all="ignore"):
            trainer.train(cfg, splits=tiny_splits)


def test_empty_plan_impossible_but_validation_runs(tiny_splits):
    cfg = dataclasses.replace(TINY, freeze_mode="nonsense")
    with pytest.raises(ConfigError):
        trainer.train(cfg, splits=tiny_splits)


def test_transfer_rejects_already_adapted_model(tiny_splits):
    model = trainer.build_model(TINY)
    trainer.attach_modules(TINY, model)
    with pytest.raises(ConfigError, match="bare pretrained"):
        trainer.transfer(TINY, model, tiny_splits)


def test_adapters_plus_prompt_requires_prompt(tiny_splits):
    cfg = dataclasses.replace(
        TINY, peft=dataclasses.replace(TINY.peft, use_prompt=False))
    with pytest.raises(ConfigError, match="use_prompt"):
        trainer.train(cfg, splits=tiny_splits)


def test_run_config_validation():
    with pytest.raises(ConfigError, match="task"):
        RunConfig(task="translation")
    with pytest.raises(ConfigError, match="epoch"):
        RunConfig(transfer_epochs=-1)
    with pytest.raises(ConfigError, match="batch"):
        RunConfig(batch_size=0)


# -- drivers -------------------------------------------------------------------------


def test_stability_score_identical_values():
    report = stability_score([0.7, 0.7, 0.7])
    assert report.score == pytest.approx(1.0, abs=1e-12)
    assert report.std == pytest.approx(0.0, abs=1e-12)


def test_stability_score_stated_example():
    report = stability_score([0.8, 0.8, 0.8, 0.8, 0.4])
    assert abs(report.mean - 0.72) < 1e-12
    assert abs(report.std - 0.16) < 0.005
    assert abs(report.score - 0.818) < 0.005


def test_stability_score_scale_coherent():
    values = [0.6, 0.75, 0.8, 0.64]
    a = stability_score(values)
    b = stability_score([3.7 * v for v in values])
    assert abs(a.score - b.score) < 1e-12


def test_stability_score_zero_mean_reports_note():
    report = stability_score([0.0, 0.0, 0.0])
    assert report.score == 0.0
    assert report.note is not None


def test_stability_needs_three_seeds():
    with pytest.raises(ConfigError, match="3 seeds"):
        trainer.stability(TINY, [0, 1])


def test_stability_runs_and_scores(tiny_splits):
    cfg = dataclasses.replace(TINY, transfer_epochs=1, pretrain_epochs=1)
    report = trainer.stability(cfg, [0, 1, 2])
    assert len(report.values) == 3
    assert 0.0 <= report.score <= 1.0


def test_sweep_grid_must_be_sorted_and_include_zero():
    with pytest.raises(ConfigError, match="sorted"):
        trainer.augmentation_sweep(TINY, [0.0, 0.5, 0.2], delta=0.0)
    with pytest.raises(ConfigError, match="include 0"):
        trainer.augmentation_sweep(TINY, [0.1, 0.5], delta=0.0)


def test_degenerate_sweep_equals_plain_train(tiny_splits):
    curve = trainer.augmentation_sweep(TINY, [0.0], delta=0.4)
    assert len(curve) == 1
    rho, metrics = curve[0]
    assert rho == 0.0
    plain = trainer.train(TINY)
    test_row = [r for r in plain.trace if r.split == "test"][-1]
    assert metrics == test_row.metrics


# -- gradient checking -----------------------------------------------------------------


def test_gradient_check_passes_on_tiny_config():
    report = gradient_check()
    assert report.passed, report.errors
    assert report.max_error < 1e-4


def test_gradient_check_pure_task_loss_passes():
    cfg = dataclasses.replace(GRADCHECK_CONFIG, weights=LossWeights(0.0, 0.0))
    report = gradient_check(cfg)
    assert report.passed, report.errors


def test_gradient_check_rejects_large_models():
    with pytest.raises(ConfigError, match="tiny"):
        gradient_check(RunConfig())


def test_gradient_check_detects_corrupted_rule(monkeypatch):
    true_matmul = peftlab.tensor.matmul

    def corrupted(a, b):
        out = true_matmul(a, b)
        rule = out._grad_rule

        def bad_rule(g):
            rule(g * 1.01)

        out._grad_rule = bad_rule
        return out

    monkeypatch.setattr(peftlab.tensor, "matmul", corrupted)
    report = gradient_check()
    assert not report.passed
    assert report.failing()
