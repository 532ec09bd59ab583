"""Corpus data model: annotated examples, JSONL ingestion, splits, synthetic benchmark.

An :class:`Example` is one annotated statement: its normalized tokens, the
stance target phrase, a stance label and a domain identifier.  A
:class:`Corpus` is an ordered, read-only collection of examples together with
the domain registry and the ordered label set.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .util import ValidationError, rng_for, subseed

FAVOR = "FAVOR"
AGAINST = "AGAINST"
NONE = "NONE"
BINARY_LABELS = (FAVOR, AGAINST)
CANONICAL_LABELS = (FAVOR, AGAINST, NONE)

URL_TOKEN = "<url>"
USER_TOKEN = "<user>"
SENTINEL_TOKENS = frozenset({URL_TOKEN, USER_TOKEN})

# Built-in label aliases; an explicit label_map extends/overrides these.
DEFAULT_LABEL_MAP = {
    "favor": FAVOR,
    "favour": FAVOR,
    "pro": FAVOR,
    "against": AGAINST,
    "anti": AGAINST,
    "con": AGAINST,
    "none": NONE,
    "neither": NONE,
}

# Fraction of each domain held out for testing, applied before any
# target-fraction sampling of the remaining pool.
TEST_HOLDOUT = 0.20

_URL_RE = re.compile(r"(?:https?://|www\.)\S+")
_USER_RE = re.compile(r"@\w+")
# Word tokens keep internal apostrophes ("don't"); leading/trailing punctuation
# splits off as single-character tokens; sentinels survive re-normalization.
_TOKEN_RE = re.compile(r"<url>|<user>|[a-z0-9_]+(?:'[a-z0-9_]+)*|[^\sa-z0-9_]")


def normalize_text(text: str) -> tuple[str, ...]:
    """Lowercase, replace URLs/mentions with sentinels, split off punctuation.

    Idempotent over its own output: normalizing ``" ".join(tokens)`` returns
    the same tokens.
    """
    lowered = text.lower()
    lowered = _URL_RE.sub(URL_TOKEN, lowered)
    lowered = _USER_RE.sub(USER_TOKEN, lowered)
    return tuple(_TOKEN_RE.findall(lowered))


@dataclass(frozen=True)
class Example:
    """One annotated instance (statement, stance target, label, domain)."""

    id: str
    raw_text: str
    tokens: tuple[str, ...]
    target: tuple[str, ...]
    stance: str
    domain: str
    meta: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class Corpus:
    examples: tuple[Example, ...]
    domains: tuple[str, ...]
    label_set: tuple[str, ...]

    def __post_init__(self):
        seen = set()
        domain_set = set(self.domains)
        label_set = set(self.label_set)
        for ex in self.examples:
            if ex.id in seen:
                raise ValidationError(f"duplicate example id {ex.id!r}")
            seen.add(ex.id)
            if not ex.tokens:
                raise ValidationError(f"example {ex.id!r} has no tokens")
            if ex.stance not in label_set:
                raise ValidationError(
                    f"example {ex.id!r} has label {ex.stance!r} outside {self.label_set}"
                )
            if ex.domain not in domain_set:
                raise ValidationError(
                    f"example {ex.id!r} has domain {ex.domain!r} outside {self.domains}"
                )

    @classmethod
    def from_examples(cls, examples, domains=None, label_set=None) -> "Corpus":
        examples = tuple(examples)
        if domains is None:
            domains = tuple(dict.fromkeys(ex.domain for ex in examples))
        if label_set is None:
            present = {ex.stance for ex in examples}
            label_set = tuple(lb for lb in CANONICAL_LABELS if lb in present)
            label_set += tuple(sorted(present - set(label_set)))
            if not label_set:
                label_set = BINARY_LABELS
        return cls(examples=examples, domains=tuple(domains), label_set=tuple(label_set))

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def ids(self) -> tuple[str, ...]:
        return tuple(ex.id for ex in self.examples)

    def by_domain(self, domain: str) -> "Corpus":
        """Examples of one domain; the full registry is retained."""
        return replace(self, examples=tuple(ex for ex in self.examples if ex.domain == domain))

    def without_label(self, label: str) -> "Corpus":
        kept = tuple(ex for ex in self.examples if ex.stance != label)
        labels = tuple(lb for lb in self.label_set if lb != label)
        return Corpus(examples=kept, domains=self.domains, label_set=labels)

    def merged_with(self, other: "Corpus") -> "Corpus":
        domains = tuple(dict.fromkeys(self.domains + other.domains))
        labels = tuple(dict.fromkeys(self.label_set + other.label_set))
        return Corpus(examples=self.examples + other.examples, domains=domains, label_set=labels)


def content_fingerprint(corpus: Corpus) -> str:
    """Order-independent content hash of a corpus."""
    h = hashlib.sha256()
    for ex in sorted(corpus, key=lambda e: e.id):
        record = [ex.id, list(ex.tokens), list(ex.target), ex.stance, ex.domain]
        h.update(json.dumps(record, ensure_ascii=True).encode("utf-8"))
    return h.hexdigest()


# ---------------------------------------------------------------------------
# JSONL ingestion and serialization
# ---------------------------------------------------------------------------

_CORE_FIELDS = ("id", "text", "target", "stance", "domain")


def load_jsonl(path, label_map: dict | None = None) -> Corpus:
    """Load a JSONL corpus: one object per line with text/target/stance/domain.

    Labels are collapsed through the alias map (built-in aliases plus any
    explicit ``label_map`` entries, matched case-insensitively).  Malformed
    lines and unknown labels raise :class:`ValidationError` naming the line.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"no such file: {path}")
    mapping = dict(DEFAULT_LABEL_MAP)
    if label_map:
        mapping.update({str(k).lower(): v for k, v in label_map.items()})

    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise ValidationError(f"malformed JSON at line {lineno}: {err.msg}") from err
            if not isinstance(rec, dict):
                raise ValidationError(f"line {lineno}: expected an object")
            for key in ("text", "target", "stance", "domain"):
                if key not in rec:
                    raise ValidationError(f"line {lineno}: missing field {key!r}")
            raw_label = str(rec["stance"])
            label = mapping.get(raw_label.lower())
            if label is None:
                raise ValidationError(f"unknown label {raw_label!r} at line {lineno}")
            tokens = normalize_text(str(rec["text"]))
            if not tokens:
                raise ValidationError(f"line {lineno}: text normalizes to zero tokens")
            target = normalize_text(str(rec["target"]))
            meta = {k: v for k, v in rec.items() if k not in _CORE_FIELDS}
            examples.append(
                Example(
                    id=str(rec.get("id") or f"line{lineno}"),
                    raw_text=str(rec["text"]),
                    tokens=tokens,
                    target=target,
                    stance=label,
                    domain=str(rec["domain"]),
                    meta=meta,
                )
            )
    return Corpus.from_examples(examples)


def write_jsonl(corpus: Corpus, path, split: str | None = None) -> None:
    """Serialize a corpus back to the ingestion JSONL format.

    ``split`` adds a split(name) field to every row, which ``load_jsonl``
    round-trips into ``Example.meta``.  Any meta entries are written as extra
    top-level fields.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ex in corpus:
            rec = {
                "id": ex.id,
                "text": ex.raw_text,
                "target": " ".join(ex.target),
                "stance": ex.stance,
                "domain": ex.domain,
            }
            for key, value in ex.meta.items():
                if key not in rec:
                    rec[key] = value
            if split is not None:
                rec["split"] = split
            fh.write(json.dumps(rec, ensure_ascii=True) + "\n")


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    """How to carve train/test out of a two-domain corpus.

    ``target_fraction`` is the share of the (post-holdout) labeled
    target-domain pool admitted to training.
    """

    source_domain: str
    target_domain: str
    target_fraction: float = 0.30
    seed: int = 0

    def validate(self) -> None:
        if self.source_domain == self.target_domain:
            raise ValidationError("source_domain and target_domain must differ")
        if not 0.0 <= self.target_fraction <= 1.0:
            raise ValidationError(f"target_fraction {self.target_fraction} outside [0, 1]")

    @classmethod
    def from_dict(cls, data: dict, path: str = "split") -> "SplitSpec":
        from .util import require_keys

        require_keys(data, cls, path)
        return cls(**data)


def make_split(corpus: Corpus, spec: SplitSpec) -> tuple[Corpus, Corpus, Corpus]:
    """Build (train, test_source, test_target) from a two-domain corpus.

    Each domain gives up a fixed 20% test holdout first.  Train is the whole
    source pool plus the first ``floor(target_fraction * pool)`` entries of a
    seeded permutation of the target pool, so sweeps over the fraction produce
    nested member sets under a fixed seed.
    """
    spec.validate()
    for dom in (spec.source_domain, spec.target_domain):
        if dom not in corpus.domains:
            raise ValidationError(f"domain {dom!r} not in corpus registry {corpus.domains}")
    src = corpus.by_domain(spec.source_domain).examples
    tgt = corpus.by_domain(spec.target_domain).examples
    if len(src) < 10 or len(tgt) < 10:
        raise ValidationError(
            "need at least 10 examples per domain for a split, got "
            f"{len(src)} in {spec.source_domain!r} and {len(tgt)} in {spec.target_domain!r}"
        )

    def holdout(examples, tag):
        rng = rng_for(spec.seed, "holdout", tag)
        order = rng.permutation(len(examples))
        n_test = int(round(TEST_HOLDOUT * len(examples)))
        n_test = min(max(n_test, 1), len(examples) - 1)
        test_idx = sorted(order[:n_test])
        pool_idx = sorted(order[n_test:])
        return [examples[i] for i in pool_idx], [examples[i] for i in test_idx]

    src_pool, src_test = holdout(src, "source")
    tgt_pool, tgt_test = holdout(tgt, "target")

    # Nested sampling: the permutation depends only on the seed, so a larger
    # fraction strictly extends the membership of a smaller one.
    perm = rng_for(spec.seed, "target-fraction").permutation(len(tgt_pool))
    n_tgt = int(math.floor(spec.target_fraction * len(tgt_pool)))
    chosen = sorted(perm[:n_tgt])
    train_examples = tuple(src_pool) + tuple(tgt_pool[i] for i in chosen)

    def as_corpus(examples):
        return Corpus(examples=tuple(examples), domains=corpus.domains, label_set=corpus.label_set)

    return as_corpus(train_examples), as_corpus(src_test), as_corpus(tgt_test)


# ---------------------------------------------------------------------------
# Synthetic two-domain benchmark
# ---------------------------------------------------------------------------

SYNTH_DOMAINS = ("d0", "d1")


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic benchmark: two domains share stance-marker vocabulary but
    differ in domain-marker vocabulary.

    Per token the sampler emits a domain marker with probability
    ``marker_injection_rate``, a stance marker with half that probability, and
    a shared filler token otherwise.  When the rate is positive every document
    additionally gets one guaranteed domain marker and one guaranteed stance
    marker (at seeded positions), so a zero rate leaves stance independent of
    the tokens.

    Both domains draw stance markers from the same vocabulary but with skewed
    emphasis (each domain samples its own two-thirds band three times as
    often), mirroring how the wording of a stance shifts between domains while
    the vocabulary stays shared.
    """

    docs_per_domain: int = 2000
    domain_marker_vocab_size: int = 24
    stance_marker_vocab_size: int = 8
    shared_vocab_size: int = 150
    tokens_per_doc: tuple[int, int] = (8, 16)
    marker_injection_rate: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        counts = {
            "docs_per_domain": self.docs_per_domain,
            "domain_marker_vocab_size": self.domain_marker_vocab_size,
            "stance_marker_vocab_size": self.stance_marker_vocab_size,
            "shared_vocab_size": self.shared_vocab_size,
        }
        for name, value in counts.items():
            if int(value) <= 0:
                raise ValidationError(f"{name} must be positive, got {value}")
        lo, hi = self.tokens_per_doc
        if lo < 2 or hi < lo:
            raise ValidationError(f"tokens_per_doc range {self.tokens_per_doc} invalid (need 2 <= lo <= hi)")
        if not 0.0 <= self.marker_injection_rate <= 0.6:
            raise ValidationError(
                f"marker_injection_rate {self.marker_injection_rate} outside [0, 0.6]"
            )

    @classmethod
    def from_dict(cls, data: dict, path: str = "synth") -> "SynthConfig":
        from .util import require_keys

        require_keys(data, cls, path)
        data = dict(data)
        if "tokens_per_doc" in data:
            data["tokens_per_doc"] = tuple(data["tokens_per_doc"])
        return cls(**data)


def _stance_mixture(size: int, flipped: bool) -> np.ndarray:
    """Per-domain sampling weights over the shared stance vocabulary: one
    domain leans on the leading two-thirds band, the other on the trailing
    band, with the overlap in the middle."""
    band = max(1, (2 * size) // 3)
    weights = np.ones(size)
    if flipped:
        weights[size - band :] = 3.0
    else:
        weights[:band] = 3.0
    return weights / weights.sum()


def synth_benchmark(config: SynthConfig) -> Corpus:
    """Generate the deterministic two-domain stance benchmark."""
    config.validate()
    rate = config.marker_injection_rate
    lo, hi = config.tokens_per_doc

    domain_vocab = {
        dom: [f"{dom}m{k}" for k in range(config.domain_marker_vocab_size)]
        for dom in SYNTH_DOMAINS
    }
    stance_vocab = {
        FAVOR: [f"fv{k}" for k in range(config.stance_marker_vocab_size)],
        AGAINST: [f"ag{k}" for k in range(config.stance_marker_vocab_size)],
    }
    filler_vocab = [f"w{k}" for k in range(config.shared_vocab_size)]
    targets = {dom: ("issue", dom) for dom in SYNTH_DOMAINS}
    mixtures = {
        dom: _stance_mixture(config.stance_marker_vocab_size, flipped=(di == 1))
        for di, dom in enumerate(SYNTH_DOMAINS)
    }

    examples = []
    for dom in SYNTH_DOMAINS:
        n = config.docs_per_domain
        stances = [FAVOR] * ((n + 1) // 2) + [AGAINST] * (n // 2)
        rng_for(config.seed, "stance-order", dom).shuffle(stances)
        mixture = mixtures[dom]
        for j in range(n):
            rng = rng_for(config.seed, "doc", dom, j)
            stance = stances[j]
            length = int(rng.integers(lo, hi + 1))
            tokens = []
            for _ in range(length):
                u = rng.random()
                if u < rate:
                    tokens.append(domain_vocab[dom][int(rng.integers(len(domain_vocab[dom])))])
                elif u < 1.5 * rate:
                    tokens.append(stance_vocab[stance][int(rng.choice(len(mixture), p=mixture))])
                else:
                    tokens.append(filler_vocab[int(rng.integers(len(filler_vocab)))])
            if rate > 0:
                pos = rng.choice(length, size=2, replace=False)
                tokens[int(pos[0])] = domain_vocab[dom][int(rng.integers(len(domain_vocab[dom])))]
                tokens[int(pos[1])] = stance_vocab[stance][int(rng.choice(len(mixture), p=mixture))]
            tokens = tuple(tokens)
            examples.append(
                Example(
                    id=f"{dom}-{j:05d}",
                    raw_text=" ".join(tokens),
                    tokens=tokens,
                    target=targets[dom],
                    stance=stance,
                    domain=dom,
                )
            )
    return Corpus(examples=tuple(examples), domains=SYNTH_DOMAINS, label_set=BINARY_LABELS)
