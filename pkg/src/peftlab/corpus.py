"""Synthetic cross-lingual task corpora.

The target "language" is a cipher of the source: a fixed random permutation
of the plain content ids, optionally blurred by morphology noise. Ciphering
preserves task structure exactly, so transfer is learnable in principle,
while making surface forms disjoint, so nothing transfers for free through
token identity.

Two task kinds share one vocabulary layout:

* pair: each template owns two disjoint 3-token registers; a positive pair
  draws its sides from the two registers of one template, a negative from
  two different templates. Positives therefore share zero surface tokens
  with their partner side, and token overlap (which any cipher preserves)
  carries no label signal.
* span: a marker-delimited answer region inside filler context; the gold
  span is the inclusive token range between the markers. Marker ids are
  cipher fixed points, like PAD and SEP: they are task formatting, not
  language.

Pseudo-data augmentation resamples the same generator and then corrupts the
drawn examples with drift rate delta (label flips, token substitutions,
span jitter). At delta = 0 pseudo examples follow exactly the real target
distribution, just from a different seed stream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .peft import ConfigError
from .seeding import stream

TOKENS_PER_TEMPLATE = 7  # two 3-token registers + one filler id
MAX_TEMPLATES = 8


@dataclass(frozen=True)
class VocabLayout:
    """How a vocabulary of size V is carved into task roles.

    Top of the range is reserved: markers at V-4/V-3, PAD at V-2, SEP at
    V-1. Plain content ids 0..V-5 are owned by templates in blocks of
    TOKENS_PER_TEMPLATE; leftover ids join the filler pool.
    """

    vocab_size: int = 64

    def __post_init__(self):
        if self.vocab_size < 32:
            raise ConfigError(
                f"vocab_size {self.vocab_size} too small; task layout needs >= 32"
            )

    @property
    def mark_open(self) -> int:
        return self.vocab_size - 4

    @property
    def mark_close(self) -> int:
        return self.vocab_size - 3

    @property
    def pad_id(self) -> int:
        return self.vocab_size - 2

    @property
    def sep_id(self) -> int:
        return self.vocab_size - 1

    @property
    def num_templates(self) -> int:
        return min(MAX_TEMPLATES, (self.vocab_size - 4) // TOKENS_PER_TEMPLATE)

    @property
    def content_ids(self) -> range:
        """Plain content ids: everything below the reserved top four."""
        return range(self.vocab_size - 4)

    def register_a(self, t: int) -> list[int]:
        base = t * TOKENS_PER_TEMPLATE
        return [base, base + 1, base + 2]

    def register_b(self, t: int) -> list[int]:
        base = t * TOKENS_PER_TEMPLATE
        return [base + 3, base + 4, base + 5]

    @property
    def fillers(self) -> list[int]:
        owned = self.num_templates * TOKENS_PER_TEMPLATE
        per_template = [t * TOKENS_PER_TEMPLATE + 6 for t in range(self.num_templates)]
        return per_template + list(range(owned, self.vocab_size - 4))


@dataclass(frozen=True)
class CipherLanguage:
    """A bijective relabeling of the plain content ids.

    permutation[i] is the target id for source id i, over the full
    vocabulary; reserved ids (markers, PAD, SEP) map to themselves. eta is
    the morphology-noise rate applied on top during translation.
    """

    permutation: tuple
    eta: float = 0.0

    def __post_init__(self):
        perm = np.asarray(self.permutation)
        if not np.array_equal(np.sort(perm), np.arange(perm.size)):
            raise ConfigError("cipher permutation is not a bijection")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"morphology noise rate must be in [0, 1], got {self.eta}")

    @classmethod
    def generate(cls, layout: VocabLayout, eta: float, rng: np.random.Generator) -> "CipherLanguage":
        perm = np.arange(layout.vocab_size)
        content = np.array(layout.content_ids)
        perm[content] = rng.permutation(content)
        return cls(tuple(int(x) for x in perm), eta)

    def inverse(self) -> "CipherLanguage":
        inv = np.empty(len(self.permutation), dtype=int)
        inv[list(self.permutation)] = np.arange(len(self.permutation))
        return CipherLanguage(tuple(int(x) for x in inv), self.eta)

    def apply(self, token: int) -> int:
        return self.permutation[token]


@dataclass
class TaskInstance:
    tokens: list[int]
    tokens_b: list[int] | None = None
    label: int | None = None
    span: tuple[int, int] | None = None
    lang: str = "source"
    pair_id: int = -1
    parallel: "TaskInstance | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.span is not None:
            s, e = self.span
            if not 0 <= s <= e < len(self.tokens):
                raise ValueError(f"span {self.span} violates 0 <= start <= end < {len(self.tokens)}")


@dataclass(frozen=True)
class SplitSpec:
    source_train: int = 2000
    target_train: int = 200
    target_dev: int = 200
    target_test: int = 500
    seed: int = 0

    def __post_init__(self):
        for name in ("source_train", "target_train", "target_dev", "target_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"split size {name} must be positive")
        if self.target_train > self.source_train / 10:
            raise ConfigError(
                f"low-resource contract violated: target_train {self.target_train} "
                f"> source_train/10 = {self.source_train / 10:g}"
            )


@dataclass
class Splits:
    source_train: list[TaskInstance]
    target_train: list[TaskInstance]
    target_dev: list[TaskInstance]
    target_test: list[TaskInstance]
    language: CipherLanguage


@dataclass(frozen=True)
class AugmentationPlan:
    ratio: float
    delta: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError(f"augmentation ratio must be in [0, 1], got {self.ratio}")
        if not 0.0 <= self.delta <= 1.0:
            raise ConfigError(f"drift delta must be in [0, 1], got {self.delta}")


# -- sampling -----------------------------------------------------------------

def _sample_side(layout: VocabLayout, register: list[int], rng: np.random.Generator) -> list[int]:
    length = int(rng.integers(3, 7))
    side = [int(x) for x in rng.choice(register, size=length)]
    for _ in range(int(rng.integers(0, 3))):
        pos = int(rng.integers(0, len(side) + 1))
        side.insert(pos, int(rng.choice(layout.fillers)))
    return side


def sample_pair_instance(layout: VocabLayout, rng: np.random.Generator, pair_id: int) -> TaskInstance:
    T = layout.num_templates
    label = int(rng.integers(0, 2))
    t = int(rng.integers(0, T))
    if label == 1:
        u = t
    else:
        u = int((t + 1 + rng.integers(0, T - 1)) % T)
    return TaskInstance(
        tokens=_sample_side(layout, layout.register_a(t), rng),
        tokens_b=_sample_side(layout, layout.register_b(u), rng),
        label=label,
        lang="source",
        pair_id=pair_id,
    )


def sample_span_instance(layout: VocabLayout, rng: np.random.Generator, pair_id: int) -> TaskInstance:
    content = layout.content_ids
    left = [int(x) for x in rng.integers(0, len(content), size=rng.integers(2, 7))]
    answer = [int(x) for x in rng.integers(0, len(content), size=rng.integers(1, 4))]
    right = [int(x) for x in rng.integers(0, len(content), size=rng.integers(2, 7))]
    tokens = left + [layout.mark_open] + answer + [layout.mark_close] + right
    start = len(left) + 1
    return TaskInstance(
        tokens=tokens,
        span=(start, start + len(answer) - 1),
        lang="source",
        pair_id=pair_id,
    )


def sample_instance(kind: str, layout: VocabLayout, rng: np.random.Generator, pair_id: int) -> TaskInstance:
    if kind == "pair":
        return sample_pair_instance(layout, rng, pair_id)
    if kind == "span":
        return sample_span_instance(layout, rng, pair_id)
    raise ConfigError(f"unknown task kind {kind!r}; expected 'pair' or 'span'")


# -- translation ----------------------------------------------------------------

def _cipher_tokens(tokens: list[int], lang: CipherLanguage, layout: VocabLayout,
                   rng: np.random.Generator) -> list[int]:
    out = []
    n_content = len(layout.content_ids)
    for tok in tokens:
        mapped = lang.apply(tok)
        if tok in layout.content_ids and lang.eta > 0 and rng.random() < lang.eta:
            mapped = int(rng.integers(0, n_content))
        out.append(int(mapped))
    return out


def translate(x: TaskInstance, lang: CipherLanguage, seed=0,
              layout: VocabLayout | None = None) -> TaskInstance:
    """Map a source instance into the cipher language.

    Content tokens go through the permutation; each is then independently
    re-randomized with probability eta (morphology noise). Labels and spans
    are untouched, and the result keeps x as its parallel counterpart.
    """
    if x.lang != "source":
        raise ValueError("translate expects a source-language instance")
    if layout is None:
        layout = VocabLayout(len(lang.permutation))
    rng = np.random.default_rng(seed)
    return TaskInstance(
        tokens=_cipher_tokens(x.tokens, lang, layout, rng),
        tokens_b=None if x.tokens_b is None else _cipher_tokens(x.tokens_b, lang, layout, rng),
        label=x.label,
        span=x.span,
        lang="target",
        pair_id=x.pair_id,
        parallel=x,
    )


# -- dataset assembly ---------------------------------------------------------------

def generate_task(kind: str, spec: SplitSpec, lang: CipherLanguage | None = None,
                  vocab_size: int = 64, eta: float = 0.0) -> Splits:
    """All four splits of one task, deterministic in (kind, spec, vocab, eta).

    Target splits are fresh instances (never source-train reruns) pushed
    through the cipher; target-train keeps its parallel sources for the
    alignment loss.
    """
    layout = VocabLayout(vocab_size)
    if lang is None:
        lang = CipherLanguage.generate(layout, eta, stream(spec.seed, "cipher"))
    rng = stream(spec.seed, "instances")
    noise = stream(spec.seed, "morphology")
    sizes = (spec.source_train, spec.target_train, spec.target_dev, spec.target_test)
    chunks = []
    next_id = 0
    for size in sizes:
        chunks.append([sample_instance(kind, layout, rng, next_id + i) for i in range(size)])
        next_id += size
    source_train, base_train, base_dev, base_test = chunks
    return Splits(
        source_train=source_train,
        target_train=[translate(x, lang, noise, layout) for x in base_train],
        target_dev=[translate(x, lang, noise, layout) for x in base_dev],
        target_test=[translate(x, lang, noise, layout) for x in base_test],
        language=lang,
    )


# -- pseudo-data augmentation ----------------------------------------------------

PSEUDO_ID_BASE = 1_000_000


def _corrupt(x: TaskInstance, delta: float, layout: VocabLayout,
             rng: np.random.Generator) -> TaskInstance:
    n_content = len(layout.content_ids)

    def substitute(tokens):
        return [
            int(rng.integers(0, n_content))
            if tok in layout.content_ids and rng.random() < delta / 2 else tok
            for tok in tokens
        ]

    tokens = substitute(x.tokens)
    tokens_b = None if x.tokens_b is None else substitute(x.tokens_b)
    label = x.label
    span = x.span
    if label is not None and rng.random() < delta:
        label = 1 - label
    if span is not None:
        s, e = span
        if rng.random() < delta:
            s += int(rng.choice([-1, 1]))
        if rng.random() < delta:
            e += int(rng.choice([-1, 1]))
        s = int(np.clip(s, 0, len(tokens) - 1))
        e = int(np.clip(e, 0, len(tokens) - 1))
        span = (min(s, e), max(s, e))
    return replace(x, tokens=tokens, tokens_b=tokens_b, label=label, span=span)


def synthesize_pseudo(base: list[TaskInstance], plan: AugmentationPlan, kind: str,
                      layout: VocabLayout, lang: CipherLanguage) -> list[TaskInstance]:
    """base plus round(ratio * len(base)) drifted pseudo target examples.

    Pseudo examples run the same sample-then-translate path as real target
    data, under the plan's own seed stream, then each is corrupted with
    drift delta. They carry no parallel counterpart: there is no true
    source sentence behind synthesized data, and a flipped label must not
    masquerade as an aligned pair.
    """
    count = round(plan.ratio * len(base))
    if count == 0:
        return list(base)
    rng = stream(plan.seed, "pseudo-instances")
    noise = stream(plan.seed, "pseudo-morphology")
    drift = stream(plan.seed, "pseudo-drift")
    pseudo = []
    for i in range(count):
        src = sample_instance(kind, layout, rng, PSEUDO_ID_BASE + i)
        tgt = translate(src, lang, noise, layout)
        tgt = _corrupt(tgt, plan.delta, layout, drift)
        tgt.parallel = None
        pseudo.append(tgt)
    return list(base) + pseudo


# -- serialization -----------------------------------------------------------------

def instance_to_record(x: TaskInstance) -> dict:
    record = {"tokens": x.tokens, "lang": x.lang, "pair_id": x.pair_id}
    if x.tokens_b is not None:
        record["tokens_b"] = x.tokens_b
    if x.label is not None:
        record["label"] = x.label
    if x.span is not None:
        record["span"] = list(x.span)
    return record


def record_to_instance(record: dict) -> TaskInstance:
    span = record.get("span")
    return TaskInstance(
        tokens=list(record["tokens"]),
        tokens_b=list(record["tokens_b"]) if "tokens_b" in record else None,
        label=record.get("label"),
        span=tuple(span) if span is not None else None,
        lang=record["lang"],
        pair_id=record["pair_id"],
    )


def write_jsonl(path, instances) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x in instances:
            fh.write(json.dumps(instance_to_record(x), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path) -> list[TaskInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(record_to_instance(json.loads(line)))
    return out


def link_parallels(targets: list[TaskInstance], sources: list[TaskInstance]) -> None:
    """Re-join translated instances with their sources by pair_id, in place."""
    by_id = {s.pair_id: s for s in sources}
    for t in targets:
        t.parallel = by_id.get(t.pair_id)
