"""Two-phase training pipeline plus the experiment drivers.

A run is: generate the corpus, pretrain the backbone on plentiful source
data (plain task loss, everything trainable), then transfer to the scarce
target split under a freeze plan with the composite objective. Drivers on
top rerun transfer across seeds (stability) or augmentation ratios (sweep),
sharing one pretrained backbone where that is provably equivalent to
rerunning it.

All randomness flows from one root seed through named streams (corpus,
init, batch order, module init, ...), so any stage can be reproduced or
reused in isolation and reruns are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .corpus import (
    AugmentationPlan,
    SplitSpec,
    Splits,
    VocabLayout,
    generate_task,
    synthesize_pseudo,
)
from .model import (
    AdaptedModel,
    TransformerConfig,
    encode_feature,
    join_pair,
    pair_outputs,
    predict_span,
    span_outputs,
)
from .objective import (
    LossBreakdown,
    LossWeights,
    ThetaSnapshot,
    alignment_loss,
    span_loss,
    sp_regularizer,
    task_loss,
    total_loss,
)
from .peft import (
    ConfigError,
    FreezePlan,
    apply_freeze,
    attach_bottleneck,
    attach_lora,
    attach_prompt,
    count_trainable,
    make_freeze_plan,
)
from .seeding import stream
from .tensor import Tensor, backward


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss; the run is unrecoverable."""


# -- configuration -------------------------------------------------------------

@dataclass(frozen=True)
class PeftSpec:
    use_lora: bool = True
    lora_rank: int = 4
    lora_alpha: float | None = None  # None means 2 * rank
    lora_targets: tuple = ("attn.wq", "attn.wv")
    use_prompt: bool = True
    prompt_len: int = 8
    use_adapters: bool = False
    adapter_width: int = 8


@dataclass(frozen=True)
class RunConfig:
    task: str = "pair"
    seed: int = 0
    pretrain_epochs: int = 4
    transfer_epochs: int = 60
    batch_size: int = 32
    model: TransformerConfig = field(default_factory=TransformerConfig)
    peft: PeftSpec = field(default_factory=PeftSpec)
    freeze_mode: str = "adapters_plus_prompt"
    weights: LossWeights = field(default_factory=LossWeights)
    source_train: int = 2000
    target_train: int = 200
    target_dev: int = 200
    target_test: int = 500
    eta: float = 0.0
    augmentation: AugmentationPlan | None = None
    lr_peft: float = 3e-3
    lr_full: float = 3e-4
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.task not in ("pair", "span"):
            raise ConfigError(f"unknown task {self.task!r}; expected 'pair' or 'span'")
        if self.pretrain_epochs < 0 or self.transfer_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.source_train, self.target_train,
                         self.target_dev, self.target_test, seed=self.seed)


# -- optimizer --------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam with bias correction; moment buffers exist only for plan members."""

    lr: float
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def create(cls, model: AdaptedModel, plan: FreezePlan, lr: float) -> "AdamState":
        opt = cls(lr=lr)
        registry = model.parameters()
        for name in plan.names:
            opt.m[name] = np.zeros_like(registry[name].data)
            opt.v[name] = np.zeros_like(registry[name].data)
        return opt


def clip_gradients(model: AdaptedModel, plan: FreezePlan, max_norm: float) -> float:
    """Scale plan gradients so their global L2 norm is at most max_norm."""
    registry = model.parameters()
    sq = 0.0
    # sorted so the reduction order (and thus the norm, to the ulp) does not
    # depend on set iteration order, which varies across processes
    for name in sorted(plan.names):
        g = registry[name].grad
        if g is not None:
            sq += float((g * g).sum())
    norm = np.sqrt(sq)
    if norm > max_norm:
        factor = max_norm / norm
        for name in sorted(plan.names):
            if registry[name].grad is not None:
                registry[name].grad *= factor
    return norm


def apply_gradients_masked(model: AdaptedModel, plan: FreezePlan, opt: AdamState) -> None:
    """One Adam step over exactly the planned parameters; zeroes all grads."""
    registry = model.parameters()
    opt.step += 1
    t = opt.step
    for name in sorted(plan.names):
        p = registry[name]
        if p.grad is None:
            raise RuntimeError(f"no gradient for planned parameter {name}; call backward first")
        g = p.grad
        opt.m[name] = opt.b1 * opt.m[name] + (1 - opt.b1) * g
        opt.v[name] = opt.b2 * opt.v[name] + (1 - opt.b2) * g * g
        m_hat = opt.m[name] / (1 - opt.b1 ** t)
        v_hat = opt.v[name] / (1 - opt.b2 ** t)
        p.data = p.data - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    for p in registry.values():
        p.grad = None


# -- metrics ------------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    accuracy: float
    f1: float
    em: float
    losses: LossBreakdown


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    split: str
    metrics: Metrics


def span_overlap_f1(pred: tuple[int, int], gold: tuple[int, int]) -> float:
    ps, pe = pred
    gs, ge = gold
    overlap = min(pe, ge) - max(ps, gs) + 1
    if overlap <= 0:
        return 0.0
    precision = overlap / (pe - ps + 1)
    recall = overlap / (ge - gs + 1)
    return 2 * precision * recall / (precision + recall)


def primary_metric(kind: str, metrics: Metrics) -> float:
    return metrics.accuracy if kind == "pair" else metrics.f1


def _source_tokens(cfg: TransformerConfig, inst, kind: str):
    src = inst.parallel
    return join_pair(cfg, src.tokens, src.tokens_b) if kind == "pair" else src.tokens


class RefFeatures:
    """Source-side feature provider backed by a frozen reference model.

    The source side of each alignment pair is encoded by the frozen pretrained
    mapping, not the adapted model: the pair anchors target features to the
    pretrained geometry. Encoding both sides with the adapted model lets them
    drift together into a collapsed space that satisfies the alignment while
    losing the class structure the head relies on.

    Features are memoized per instance; the reference never changes, so the
    cache is valid for the provider's whole lifetime.
    """

    def __init__(self, model: AdaptedModel):
        self.model = model
        self._memo: dict[int, np.ndarray] = {}

    def feature(self, inst, kind: str) -> Tensor:
        cached = self._memo.get(id(inst))
        if cached is None:
            cached = encode_feature(self.model, _source_tokens(self.model.cfg, inst, kind)).data
            self._memo[id(inst)] = cached
        return Tensor(cached)


def _as_provider(reference) -> RefFeatures | None:
    if reference is None or isinstance(reference, RefFeatures):
        return reference
    return RefFeatures(reference)


def evaluate(model: AdaptedModel, split, kind: str, weights: LossWeights | None = None,
             plan: FreezePlan | None = None, snapshot: ThetaSnapshot | None = None,
             reference: AdaptedModel | RefFeatures | None = None) -> Metrics:
    """Task metrics plus a loss breakdown over one dataset split.

    Alignment is included only when weights with lam > 0 are given, a frozen
    reference model supplies the source-side features, and the split carries
    parallel counterparts; the regularizer only when plan and snapshot are
    given with beta > 0.
    """
    split = list(split)
    if not split:
        raise ValueError("evaluate: empty split")
    reference = _as_provider(reference)
    want_align = weights is not None and weights.lam > 0 and reference is not None
    losses = []
    align_terms = []
    correct = 0
    tp = fp = fn = 0
    em_sum = 0.0
    f1_sum = 0.0
    for inst in split:
        if kind == "pair":
            logits, feat = pair_outputs(model, inst.tokens, inst.tokens_b)
            losses.append(task_loss(T.reshape(logits, (1, 2)), [inst.label]))
            pred = int(np.argmax(logits.data))
            correct += pred == inst.label
            tp += pred == 1 and inst.label == 1
            fp += pred == 1 and inst.label == 0
            fn += pred == 0 and inst.label == 1
        else:
            start, end, feat = span_outputs(model, inst.tokens)
            losses.append(span_loss(start, end, inst.span))
            pred = predict_span(start.data, end.data)
            em_sum += pred == inst.span
            f1_sum += span_overlap_f1(pred, inst.span)
        if want_align and inst.parallel is not None:
            align_terms.append(alignment_loss(reference.feature(inst, kind), feat))
    task = T.mean_scalars(losses)
    align = T.mean_scalars(align_terms) if align_terms else None
    reg = None
    if weights is not None and weights.beta > 0 and plan is not None and snapshot is not None:
        reg = sp_regularizer(model, plan, snapshot)
    _, breakdown = total_loss(task, align, reg, weights or LossWeights(0.0, 0.0))
    n = len(split)
    if kind == "pair":
        accuracy = correct / n
        denom = 2 * tp + fp + fn
        f1 = 2 * tp / denom if denom > 0 else 1.0
        em = accuracy
    else:
        em = em_sum / n
        f1 = f1_sum / n
        accuracy = em
    return Metrics(accuracy=accuracy, f1=f1, em=em, losses=breakdown)


# -- core loops -------------------------------------------------------------------

def build_model(config: RunConfig) -> AdaptedModel:
    head_kind = "pair" if config.task == "pair" else "span"
    return AdaptedModel(config.model, head_kind, stream(config.seed, "init"))


def attach_modules(config: RunConfig, model: AdaptedModel) -> None:
    """Attach the adaptation modules the freeze mode will train."""
    mode = config.freeze_mode
    if mode in ("full", "head_only"):
        return
    spec = config.peft
    rng = stream(config.seed, "peft-init")
    if spec.use_lora:
        attach_lora(model, rank=spec.lora_rank, alpha=spec.lora_alpha,
                    targets=spec.lora_targets, rng=rng)
    if spec.use_adapters:
        attach_bottleneck(model, m=spec.adapter_width, rng=rng)
    if mode == "adapters_plus_prompt":
        if not spec.use_prompt:
            raise ConfigError("adapters_plus_prompt requires peft.use_prompt")
        attach_prompt(model, spec.prompt_len, rng)


def _example_terms(model: AdaptedModel, inst, kind: str, reference: RefFeatures | None):
    """Per-instance task loss and, when a reference is given, the alignment term."""
    if kind == "pair":
        logits, feat = pair_outputs(model, inst.tokens, inst.tokens_b)
        loss = task_loss(T.reshape(logits, (1, 2)), [inst.label])
    else:
        start, end, feat = span_outputs(model, inst.tokens)
        loss = span_loss(start, end, inst.span)
    align = None
    if reference is not None and inst.parallel is not None:
        align = alignment_loss(reference.feature(inst, kind), feat)
    return loss, align


def _train_step(model, batch, kind, weights, plan, snapshot, opt, clip_norm,
                reference) -> LossBreakdown:
    losses = []
    align_terms = []
    ref = reference if weights.lam > 0 else None
    for inst in batch:
        loss, align = _example_terms(model, inst, kind, ref)
        losses.append(loss)
        if align is not None:
            align_terms.append(align)
    task = T.mean_scalars(losses)
    align = T.mean_scalars(align_terms) if align_terms else None
    reg = None
    if weights.beta > 0:
        reg = sp_regularizer(model, plan, snapshot)
    total, breakdown = total_loss(task, align, reg, weights)
    backward(total)
    clip_gradients(model, plan, clip_norm)
    apply_gradients_masked(model, plan, opt)
    return breakdown


def _run_epochs(model, data, kind, weights, plan, snapshot, opt, epochs, batch_size,
                order_rng, clip_norm, phase: str, on_epoch=None, reference=None) -> None:
    for epoch in range(1, epochs + 1):
        order = order_rng.permutation(len(data))
        for start in range(0, len(data), batch_size):
            batch = [data[i] for i in order[start:start + batch_size]]
            step = start // batch_size + 1
            try:
                _train_step(model, batch, kind, weights, plan, snapshot, opt, clip_norm,
                            reference)
            except ValueError as err:
                if "non-finite" in str(err):
                    raise NumericalAbort(
                        f"non-finite loss during {phase} at epoch {epoch}, step {step}: {err}"
                    ) from err
                raise
        if on_epoch is not None:
            on_epoch(epoch)


def pretrain_source(config: RunConfig, splits: Splits) -> AdaptedModel:
    """Full fine-tuning on the plentiful source split, plain task loss."""
    model = build_model(config)
    plan = make_freeze_plan(model, "full")
    apply_freeze(model, plan)
    snapshot = ThetaSnapshot.capture(model, FreezePlan([]))
    opt = AdamState.create(model, plan, config.lr_full)
    _run_epochs(
        model, splits.source_train, config.task, LossWeights(0.0, 0.0), plan, snapshot,
        opt, config.pretrain_epochs, config.batch_size, stream(config.seed, "pretrain-batches"),
        config.clip_norm, "pretraining",
    )
    return model


@dataclass
class TrainResult:
    model: AdaptedModel
    trace: list  # EpochRecord, epoch order: dev rows 0..E then one test row
    plan: FreezePlan
    snapshot: ThetaSnapshot
    splits: Splits


def transfer(config: RunConfig, model: AdaptedModel, splits: Splits) -> TrainResult:
    """Adapt a pretrained model to the target split under the freeze plan.

    Takes the bare pretrained model; PEFT modules are attached here, after
    the frozen alignment reference is captured.
    """
    if model.loras or model.prompt is not None or model.adapters:
        raise ConfigError("transfer expects the bare pretrained model; "
                          "PEFT modules are attached inside")
    reference = None
    if config.weights.lam > 0:
        # frozen copy of the pretrained state, captured before modules attach;
        # it realizes the source-side feature mapping for alignment pairs
        frozen = build_model(config)
        frozen.load_state_dict(model.state_dict())
        apply_freeze(frozen, FreezePlan([]))
        reference = RefFeatures(frozen)
    attach_modules(config, model)
    plan = make_freeze_plan(model, config.freeze_mode)
    if count_trainable(model, plan) == 0:
        raise ConfigError("freeze plan has no trainable parameters")
    apply_freeze(model, plan)
    snapshot = ThetaSnapshot.capture(model, plan)

    data = splits.target_train
    if config.augmentation is not None:
        layout = VocabLayout(config.model.vocab_size)
        data = synthesize_pseudo(data, config.augmentation, config.task, layout,
                                 splits.language)

    lr = config.lr_full if config.freeze_mode == "full" else config.lr_peft
    opt = AdamState.create(model, plan, lr)
    weights = config.weights
    trace: list[EpochRecord] = []

    def record_dev(epoch: int) -> None:
        metrics = evaluate(model, splits.target_dev, config.task, weights, plan, snapshot,
                           reference)
        trace.append(EpochRecord(epoch, "dev", metrics))

    record_dev(0)
    _run_epochs(
        model, data, config.task, weights, plan, snapshot, opt, config.transfer_epochs,
        config.batch_size, stream(config.seed, "transfer-batches"), config.clip_norm,
        "transfer", on_epoch=record_dev, reference=reference,
    )
    test = evaluate(model, splits.target_test, config.task, weights, plan, snapshot,
                    reference)
    trace.append(EpochRecord(config.transfer_epochs, "test", test))
    return TrainResult(model, trace, plan, snapshot, splits)


def train(config: RunConfig, splits: Splits | None = None,
          pretrained_state: dict | None = None) -> TrainResult:
    """Full pipeline: corpus, source pretraining, transfer.

    splits/pretrained_state let drivers reuse stages they already ran; the
    named seed streams make reuse bit-identical to running from scratch.
    """
    if splits is None:
        splits = generate_task(config.task, config.split_spec(),
                               vocab_size=config.model.vocab_size, eta=config.eta)
    if pretrained_state is not None:
        model = build_model(config)
        model.load_state_dict(pretrained_state)
    else:
        model = pretrain_source(config, splits)
    return transfer(config, model, splits)


# -- experiment drivers ----------------------------------------------------------

@dataclass(frozen=True)
class StabilityReport:
    values: tuple
    mean: float
    std: float
    score: float
    note: str | None = None


def stability_score(values) -> StabilityReport:
    """1 / (1 + std/mean) over per-seed final metrics (population std)."""
    arr = np.asarray(values, dtype=float)
    mean = float(arr.mean())
    std = float(arr.std())
    if mean == 0.0:
        return StabilityReport(tuple(arr), mean, std, 0.0,
                               note="mean metric is 0; stability undefined, reported as 0")
    return StabilityReport(tuple(arr), mean, std, 1.0 / (1.0 + std / mean))


def final_dev_metric(result: TrainResult, kind: str) -> float:
    dev_rows = [r for r in result.trace if r.split == "dev"]
    return primary_metric(kind, dev_rows[-1].metrics)


def stability(config: RunConfig, seeds) -> StabilityReport:
    """Rerun the pipeline per seed and score the spread of final dev metrics."""
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ConfigError(f"stability needs at least 3 seeds, got {len(seeds)}")
    values = []
    for seed in seeds:
        result = train(replace(config, seed=seed))
        values.append(final_dev_metric(result, config.task))
    return stability_score(values)


def augmentation_sweep(config: RunConfig, ratios, delta: float):
    """(ratio, test Metrics) per ratio; everything else held fixed.

    The corpus and the pretrained backbone are shared across ratios, which
    the named seed streams make equivalent to rerunning them per point.
    """
    ratios = [float(r) for r in ratios]
    if ratios != sorted(ratios):
        raise ConfigError("augmentation ratios must be sorted ascending")
    if not ratios or ratios[0] != 0.0:
        raise ConfigError("augmentation ratio grid must include 0")
    splits = generate_task(config.task, config.split_spec(),
                           vocab_size=config.model.vocab_size, eta=config.eta)
    pretrained = pretrain_source(config, splits).state_dict()
    curve = []
    for rho in ratios:
        plan = AugmentationPlan(ratio=rho, delta=delta, seed=config.seed)
        cfg = replace(config, augmentation=plan)
        result = train(cfg, splits=splits, pretrained_state=pretrained)
        test = [r for r in result.trace if r.split == "test"][-1]
        curve.append((rho, test.metrics))
    return curve


# -- gradient checking ---------------------------------------------------------------

GRADCHECK_CONFIG = RunConfig(
    task="pair",
    seed=0,
    model=TransformerConfig(vocab_size=32, model_dim=8, heads=2, layers=1,
                            ff_dim=8, max_seq_len=24),
    peft=PeftSpec(lora_rank=2, prompt_len=2),
    source_train=40, target_train=4, target_dev=2, target_test=2,
    batch_size=4,
)


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    max_error: float
    tolerance: float
    passed: bool

    def failing(self) -> list[str]:
        return sorted(n for n, e in self.errors.items() if e > self.tolerance)


def _central_difference(loss_fn, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = loss_fn()
        flat[i] = orig - h
        f_minus = loss_fn()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2 * h)
    return grad


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # Finite-difference noise is absolute (~eps/h), so exactly-zero analytic
    # entries must not fail on noise alone: floor the denominator by scale.
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    floor = max(1e-6, 1e-5 * scale)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradient_check(config: RunConfig | None = None, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare every trainable gradient of the composite loss to central
    finite differences on a small fixed batch.

    The trainable parameters are nudged off their snapshot first so the
    regularizer and its gradient are both non-trivial.
    """
    if config is None:
        config = GRADCHECK_CONFIG
    if config.model.model_dim > 16:
        raise ConfigError(
            f"gradient check is for tiny configs (model_dim <= 16), got {config.model.model_dim}"
        )
    splits = generate_task(config.task, config.split_spec(),
                           vocab_size=config.model.vocab_size, eta=config.eta)
    model = build_model(config)
    reference = None
    if config.weights.lam > 0:
        frozen = build_model(config)
        frozen.load_state_dict(model.state_dict())
        apply_freeze(frozen, FreezePlan([]))
        reference = RefFeatures(frozen)
    attach_modules(config, model)
    plan = make_freeze_plan(model, config.freeze_mode)
    apply_freeze(model, plan)
    snapshot = ThetaSnapshot.capture(model, plan)
    rng = stream(config.seed, "gradcheck-perturb")
    registry = model.parameters()
    for name in sorted(plan.names):
        p = registry[name]
        p.data = p.data + rng.normal(0.0, 0.05, size=p.shape)

    batch = splits.target_train[:config.batch_size]
    weights = config.weights

    def loss_value() -> float:
        losses = []
        align_terms = []
        for inst in batch:
            loss, align = _example_terms(model, inst, config.task, reference)
            losses.append(loss)
            if align is not None:
                align_terms.append(align)
        task = T.mean_scalars(losses)
        align = T.mean_scalars(align_terms) if align_terms else None
        reg = None
        if weights.beta > 0:
            reg = sp_regularizer(model, plan, snapshot)
        return total_loss(task, align, reg, weights)[0]

    backward(loss_value())
    analytic = {name: registry[name].grad.copy() for name in sorted(plan.names)}
    for p in registry.values():
        p.grad = None

    errors = {}
    for name in sorted(plan.names):
        numeric = _central_difference(lambda: loss_value().item(), registry[name].data)
        errors[name] = _relative_error(analytic[name], numeric)
    max_error = max(errors.values())
    return GradCheckReport(errors, max_error, tolerance, max_error < tolerance)
