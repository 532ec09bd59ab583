"""Counterfactual generation: fill masked slots with target-domain n-grams.

A per-domain backoff trigram model with add-alpha smoothing scores candidate
fills drawn from the target domain's most domain-loaded n-grams.  The result
keeps the parent's sentence structure and stance label but reads like the
target domain.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .affinity import (
    NgramTable,
    as_corpus,
    build_table,
    corrupt,
    corrupt_by_affinity,
    is_mask_token,
)
from .corpus import Corpus, Example
from .util import ValidationError, require_keys, rng_for

logger = logging.getLogger(__name__)

GENERATOR_KINDS = ("ngram_infiller", "lexicon_swapper")
SAMPLING_MODES = ("argmax", "sample")

BOS = "<s>"

# How many top-affinity n-grams of the target domain join the fill shortlist.
SHORTLIST_SIZE = 200
# Candidate cap used by the infiller's self-reconstruction diagnostic, which
# only needs a coarse accuracy estimate.
SELF_CHECK_CAP = 50


@dataclass(frozen=True)
class Orientation:
    """Lexical stand-in for a domain conditioning vector: the domain name plus
    its most domain-loaded n-grams, ranked by affinity."""

    domain: str
    representative_ngrams: tuple[tuple[str, ...], ...]


def build_orientation(table: NgramTable, domain: str, size: int = 25) -> Orientation:
    ranked = table.top_by_affinity(domain, size)
    return Orientation(domain=domain, representative_ngrams=tuple(ng for ng, _ in ranked))


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str = "ngram_infiller"
    sampling: str = "argmax"
    temperature: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in GENERATOR_KINDS:
            raise ValidationError(f"generator kind {self.kind!r} not in {GENERATOR_KINDS}")
        if self.sampling not in SAMPLING_MODES:
            raise ValidationError(f"sampling {self.sampling!r} not in {SAMPLING_MODES}")
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")

    @classmethod
    def from_dict(cls, data: dict, path: str = "generator") -> "GeneratorSpec":
        require_keys(data, cls, path)
        spec = cls(**data)
        spec.validate()
        return spec


class _DomainLM:
    """Backoff trigram counts for a single domain."""

    def __init__(self):
        self.unigram = {}
        self.total = 0
        self.bigram = {}  # (w1,) context -> {next: count}
        self.trigram = {}  # (w1, w2) context -> {next: count}
        self.bigram_totals = {}
        self.trigram_totals = {}

    def observe(self, tokens):
        padded = (BOS, BOS) + tuple(tokens)
        for tok in tokens:
            self.unigram[tok] = self.unigram.get(tok, 0) + 1
            self.total += 1
        for i in range(2, len(padded)):
            ctx2 = padded[i - 2 : i]
            ctx1 = padded[i - 1 : i]
            nxt = padded[i]
            tri = self.trigram.setdefault(ctx2, {})
            tri[nxt] = tri.get(nxt, 0) + 1
            self.trigram_totals[ctx2] = self.trigram_totals.get(ctx2, 0) + 1
            bi = self.bigram.setdefault(ctx1, {})
            bi[nxt] = bi.get(nxt, 0) + 1
            self.bigram_totals[ctx1] = self.bigram_totals.get(ctx1, 0) + 1

    def resolve_context(self, c0: str, c1: str):
        """Backoff: the highest-order context observed in training decides the
        level.  Returns (distribution, total) for that level."""
        dist = self.trigram.get((c0, c1))
        if dist is not None:
            return dist, self.trigram_totals[(c0, c1)]
        dist = self.bigram.get((c1,))
        if dist is not None:
            return dist, self.bigram_totals[(c1,)]
        return self.unigram, self.total


class InfillerModel:
    """Per-domain backoff trigram model with add-alpha smoothing.

    Within a level, P(next | context) = (count + alpha) / (total + alpha * V)
    over the shared vocabulary of size V, so the distribution normalizes per
    context.
    """

    def __init__(self, alpha: float = 0.1):
        if alpha <= 0:
            raise ValidationError("alpha must be positive")
        self.alpha = float(alpha)
        self.domains: dict[str, _DomainLM] = {}
        self.vocab: set[str] = set()
        self.self_fill_accuracy: float | None = None

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def prob(self, domain: str, token: str, context: tuple[str, str]) -> float:
        lm = self.domains[domain]
        v = max(self.vocab_size, 1)
        c0, c1 = tuple(context[-2:])
        dist, total = lm.resolve_context(c0, c1)
        return (dist.get(token, 0) + self.alpha) / (total + self.alpha * v)

    def logprob(self, domain, token, context) -> float:
        return math.log(self.prob(domain, token, context))

    def most_common_unigram(self, domain: str) -> str:
        lm = self.domains[domain]
        return min(lm.unigram, key=lambda tok: (-lm.unigram[tok], tok))

    def to_dict(self) -> dict:
        """Canonical serialization, used to assert deterministic rebuilds."""

        def dump_ctx(table):
            return {
                " ".join(ctx): {tok: c for tok, c in sorted(dist.items())}
                for ctx, dist in sorted(table.items())
            }

        return {
            "alpha": self.alpha,
            "vocab": sorted(self.vocab),
            "domains": {
                dom: {
                    "unigram": dict(sorted(lm.unigram.items())),
                    "total": lm.total,
                    "bigram": dump_ctx(lm.bigram),
                    "trigram": dump_ctx(lm.trigram),
                }
                for dom, lm in sorted(self.domains.items())
            },
        }


def train_infiller(
    corpus: Corpus,
    alpha: float = 0.1,
    table: NgramTable | None = None,
    mask_threshold_train: float = 0.2,
    max_mask_frac: float = 0.5,
    self_check: bool = True,
) -> InfillerModel:
    """Fit per-domain backoff trigram counts over the training text.

    When an affinity table is supplied (and ``self_check`` is on), each
    training document is corrupted against its own domain's affinity scores,
    reconstructed with its own orientation, and the token-level fill accuracy
    is logged and stored on the model.
    """
    model = InfillerModel(alpha=alpha)
    for dom in corpus.domains:
        docs = corpus.by_domain(dom)
        if len(docs) == 0:
            raise ValidationError(f"domain {dom!r} has no documents to train the infiller on")
        lm = _DomainLM()
        for ex in docs:
            lm.observe(ex.tokens)
            model.vocab.update(ex.tokens)
        model.domains[dom] = lm

    if table is not None and self_check:
        model.self_fill_accuracy = _self_reconstruction_accuracy(
            model, corpus, table, mask_threshold_train, max_mask_frac
        )
    return model


def _self_reconstruction_accuracy(model, corpus, table, mask_threshold, max_mask_frac):
    """Corrupt each doc against its own domain and measure exact token recovery."""
    generator = Generator(
        GeneratorSpec(kind="ngram_infiller", sampling="argmax"),
        model,
        table,
        candidate_cap=SELF_CHECK_CAP,
    )
    orientations = {dom: build_orientation(table, dom) for dom in corpus.domains}
    hits = 0
    total = 0
    for ex in corpus:
        masked = corrupt_by_affinity(table, ex, ex.domain, mask_threshold, max_mask_frac)
        if not masked.slots:
            continue
        filled = generator.generate(masked, orientations[ex.domain], parent=ex)
        for slot, fill_text in zip(masked.slots, filled.meta["fills"]):
            fill = tuple(fill_text.split(" "))
            width = min(len(slot.ngram), len(fill))
            hits += sum(1 for a, b in zip(slot.ngram[:width], fill[:width]) if a == b)
            total += len(slot.ngram)
    accuracy = hits / total if total else 0.0
    logger.info(
        "infill self-reconstruction: %.3f token accuracy over %d masked tokens", accuracy, total
    )
    return accuracy


class Generator:
    """Bundles a sampling spec with the fitted infiller and affinity table.

    Fills slots left to right.  The n-gram infiller scores each shortlist
    candidate by its backoff-trigram context likelihood times its affinity to
    the orientation's domain; the lexicon swapper is a deterministic test
    double that cycles through the orientation's representative n-grams.
    """

    def __init__(self, spec: GeneratorSpec, model: InfillerModel, table: NgramTable,
                 candidate_cap: int = SHORTLIST_SIZE):
        spec.validate()
        self.spec = spec
        self.model = model
        self.table = table
        self.candidate_cap = int(candidate_cap)
        self._shortlists: dict[tuple[str, tuple], list] = {}

    def _shortlist(self, orientation: Orientation):
        key = (orientation.domain, orientation.representative_ngrams)
        cached = self._shortlists.get(key)
        if cached is None:
            grams = dict.fromkeys(orientation.representative_ngrams)
            for ngram, _ in self.table.top_by_affinity(orientation.domain, self.candidate_cap):
                grams.setdefault(ngram)
            cached = sorted(
                (gram, self.table.affinity(gram, orientation.domain)) for gram in grams
            )
            self._shortlists[key] = cached
        return cached

    def _fallback_fill(self, orientation: Orientation):
        top = self.table.top_by_affinity(orientation.domain, 1, orders=(1,))
        if top and top[0][1] > 0:
            return top[0][0]
        return (self.model.most_common_unigram(orientation.domain),)

    def _pick_infill(self, seq, sentinel_at, orientation, rng):
        shortlist = self._shortlist(orientation)
        if not shortlist:
            return self._fallback_fill(orientation)
        ctx = tuple(seq[max(0, sentinel_at - 2) : sentinel_at])
        c0, c1 = (BOS,) * (2 - len(ctx)) + ctx
        lm = self.model.domains[orientation.domain]
        alpha = self.model.alpha
        av = alpha * max(self.model.vocab_size, 1)
        log = math.log
        # the backoff level depends only on the context, so the slot's shared
        # left context resolves once for every candidate's first token
        dist1, tot1 = lm.resolve_context(c0, c1)
        denom1 = log(tot1 + av)
        scores = np.full(len(shortlist), -np.inf)
        for i, (gram, aff) in enumerate(shortlist):
            if aff <= 0:
                continue
            lp = log(aff) + log(dist1.get(gram[0], 0) + alpha) - denom1
            if len(gram) > 1:
                a, b = c1, gram[0]
                for tok in gram[1:]:
                    dist, tot = lm.resolve_context(a, b)
                    lp += log(dist.get(tok, 0) + alpha) - log(tot + av)
                    a, b = b, tok
            scores[i] = lp
        finite = np.isfinite(scores)
        if not finite.any():
            return self._fallback_fill(orientation)
        if self.spec.sampling == "argmax":
            # shortlist is sorted, so the first maximum is the smallest n-gram
            return shortlist[int(np.argmax(scores))][0]
        logits = (scores - scores[finite].max()) / self.spec.temperature
        weights = np.exp(logits)
        weights /= weights.sum()
        return shortlist[int(rng.choice(len(shortlist), p=weights))][0]

    def _pick_swap(self, slot_index, slot, orientation):
        reps = orientation.representative_ngrams
        same_length = [g for g in reps if len(g) == len(slot.ngram)]
        pool = same_length or list(reps)
        if not pool:
            return self._fallback_fill(orientation)
        return pool[(slot_index - 1) % len(pool)]

    def generate(self, masked, orientation: Orientation, parent: Example,
                 rng: np.random.Generator | None = None, copy_index: int = 1) -> Example:
        """Fill the sentinels of ``masked`` toward the orientation's domain.

        The output copies the parent's stance and target, is relabeled with the
        orientation's domain, and gets the id ``<parent>#cf<copy_index>``.
        """
        if rng is None:
            rng = rng_for(self.spec.seed, "generate", masked.source_example_id)
        seq = list(masked.tokens)
        fills = []
        for j, slot in enumerate(masked.slots, start=1):
            at = seq.index(f"<mask_{j}>")
            if self.spec.kind == "lexicon_swapper":
                fill = self._pick_swap(j, slot, orientation)
            else:
                fill = self._pick_infill(seq, at, orientation, rng)
            seq[at : at + 1] = list(fill)
            fills.append(" ".join(fill))
        tokens = tuple(seq)
        return Example(
            id=f"{masked.source_example_id}#cf{copy_index}",
            raw_text=" ".join(tokens),
            tokens=tokens,
            target=parent.target,
            stance=parent.stance,
            domain=orientation.domain,
            meta={
                "parent_id": masked.source_example_id,
                "generator": self.spec.kind,
                "slots_filled": len(fills),
                "fills": fills,
            },
        )


def counterfactual_pass(
    train_corpus: Corpus,
    table: NgramTable,
    generator: Generator,
    source: str,
    target: str,
    copies: int = 1,
    mask_threshold: float = 0.2,
    max_mask_frac: float = 0.5,
    seed: int = 0,
    orientation_size: int = 25,
) -> Corpus:
    """Corrupt and reconstruct every source-domain training example.

    Emits up to ``copies`` counterfactuals per parent.  Argmax sampling
    produces identical fills, so only one survives; sampled fills are
    deduplicated per parent.  Stance labels are preserved verbatim.
    """
    if copies < 0:
        raise ValidationError("copies must be >= 0")
    orientation = build_orientation(table, target, orientation_size)
    outs = []
    src_examples = [ex for ex in train_corpus if ex.domain == source]
    for idx, ex in enumerate(src_examples):
        masked = corrupt(table, ex, source, target, mask_threshold, max_mask_frac)
        rng = rng_for(seed, "counterfactual", idx)
        effective = copies if generator.spec.sampling == "sample" else min(copies, 1)
        seen = set()
        for k in range(effective):
            out = generator.generate(masked, orientation, parent=ex, rng=rng, copy_index=k + 1)
            if out.tokens in seen:
                continue
            seen.add(out.tokens)
            outs.append(out)
    return Corpus(examples=tuple(outs), domains=train_corpus.domains, label_set=train_corpus.label_set)


class CounterfactualAugmenter(BaseEstimator, TransformerMixin):
    """Full corruption + reconstruction stage as a scikit-learn transformer.

    ``fit`` builds the affinity table and the infiller from a two-domain
    corpus; ``transform`` emits the counterfactual corpus for its input's
    source-domain examples.
    """

    def __init__(
        self,
        source_domain: str = "",
        target_domain: str = "",
        copies: int = 1,
        mask_threshold: float = 0.2,
        max_mask_frac: float = 0.5,
        min_count: int = 2,
        alpha: float = 0.1,
        kind: str = "ngram_infiller",
        sampling: str = "argmax",
        temperature: float = 1.0,
        orientation_size: int = 25,
        self_check: bool = False,
        seed: int = 0,
    ):
        self.source_domain = source_domain
        self.target_domain = target_domain
        self.copies = copies
        self.mask_threshold = mask_threshold
        self.max_mask_frac = max_mask_frac
        self.min_count = min_count
        self.alpha = alpha
        self.kind = kind
        self.sampling = sampling
        self.temperature = temperature
        self.orientation_size = orientation_size
        self.self_check = self_check
        self.seed = seed

    def fit(self, X, y=None):
        corpus = as_corpus(X)
        self.table_ = build_table(corpus, self.min_count)
        self.model_ = train_infiller(
            corpus,
            alpha=self.alpha,
            table=self.table_ if self.self_check else None,
            mask_threshold_train=self.mask_threshold,
            max_mask_frac=self.max_mask_frac,
            self_check=self.self_check,
        )
        spec = GeneratorSpec(
            kind=self.kind, sampling=self.sampling, temperature=self.temperature, seed=self.seed
        )
        self.generator_ = Generator(spec, self.model_, self.table_)
        return self

    def transform(self, X) -> Corpus:
        check_is_fitted(self, "generator_")
        return counterfactual_pass(
            as_corpus(X),
            self.table_,
            self.generator_,
            self.source_domain,
            self.target_domain,
            copies=self.copies,
            mask_threshold=self.mask_threshold,
            max_mask_frac=self.max_mask_frac,
            seed=self.seed,
            orientation_size=self.orientation_size,
        )
