"""N-gram domain-affinity statistics and threshold-based text corruption.

The affinity of an n-gram ``w`` to a domain ``S`` is

    affinity(w, S) = P(S | w) * (1 - H(S | w) / ln N)

where ``P(S | w)`` is the share of w's occurrences that fall in S, ``H`` is the
entropy (nats) of the domain distribution given w, and ``N`` is the number of
registered domains.  An n-gram exclusive to one domain scores 1 there; an
n-gram spread uniformly over all domains scores 0 everywhere.

The mask score for converting S-domain text toward T is the difference

    mask_score(w, S, T) = affinity(w, S) - affinity(w, T)

and corruption replaces high-scoring, non-overlapping spans with indexed
sentinel slots that a generator later fills.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .corpus import SENTINEL_TOKENS, Corpus, Example
from .util import ValidationError

NGRAM_ORDERS = (1, 2, 3)

_MASK_TOKEN_RE = re.compile(r"<mask_(\d+)>$")


def mask_token(index: int) -> str:
    return f"<mask_{index}>"


def is_mask_token(token: str) -> bool:
    return _MASK_TOKEN_RE.match(token) is not None


class NgramTable:
    """Occurrence counts of n-grams (orders 1-3) per domain, with affinity queries.

    N-grams whose total count falls below ``min_count`` are kept in the raw
    counts but rejected by score queries: a probability estimated from a single
    occurrence is always degenerate.
    """

    def __init__(self, counts, domain_totals, domains, min_count):
        self.counts = counts  # ngram tuple -> {domain: occurrences}
        self.domain_totals = dict(domain_totals)
        self.domains = tuple(domains)
        self.min_count = int(min_count)
        if len(self.domains) < 2:
            raise ValidationError("affinity requires >= 2 domains")
        self._log_n = math.log(len(self.domains))

    @property
    def n_domains(self) -> int:
        return len(self.domains)

    def total(self, ngram) -> int:
        per = self.counts.get(tuple(ngram))
        return sum(per.values()) if per else 0

    def retained(self, ngram) -> bool:
        return self.total(ngram) >= self.min_count

    def retained_ngrams(self):
        for ngram, per in self.counts.items():
            if sum(per.values()) >= self.min_count:
                yield ngram

    def affinity(self, ngram, domain) -> float:
        """P(domain | ngram) scaled by one minus the normalized entropy."""
        ngram = tuple(ngram)
        if domain not in self.domain_totals:
            raise ValidationError(f"unknown domain {domain!r}; registry is {self.domains}")
        per = self.counts.get(ngram)
        total = sum(per.values()) if per else 0
        if total < self.min_count:
            raise ValidationError(f"n-gram {ngram!r} below min_count={self.min_count}")
        p = per.get(domain, 0) / total
        entropy = -sum((c / total) * math.log(c / total) for c in per.values() if c > 0)
        # float round-off can push the entropy a hair past ln N; clamp so the
        # score stays inside [0, 1].
        factor = max(0.0, 1.0 - entropy / self._log_n)
        return p * factor

    def mask_score(self, ngram, source, target) -> float:
        """affinity(w, source) - affinity(w, target); zero when source == target."""
        if source == target:
            if not self.retained(ngram):
                raise ValidationError(f"n-gram {tuple(ngram)!r} below min_count={self.min_count}")
            return 0.0
        return self.affinity(ngram, source) - self.affinity(ngram, target)

    def top_by_affinity(self, domain, k, orders=NGRAM_ORDERS):
        """Top-k retained n-grams of the given orders ranked by affinity.

        Ties break toward the lexicographically smaller n-gram so the ranking
        is reproducible.
        """
        orders = set(orders)
        scored = [
            (self.affinity(ngram, domain), ngram)
            for ngram in self.retained_ngrams()
            if len(ngram) in orders
        ]
        scored.sort(key=lambda item: (-item[0], item[1]))
        return [(ngram, score) for score, ngram in scored[: int(k)]]


def iter_ngrams(tokens, orders=NGRAM_ORDERS):
    """Sliding windows of the requested orders, skipping sentinel tokens."""
    tokens = tuple(tokens)
    for n in orders:
        for pos in range(len(tokens) - n + 1):
            gram = tokens[pos : pos + n]
            if any(tok in SENTINEL_TOKENS or is_mask_token(tok) for tok in gram):
                continue
            yield pos, gram


def build_table(corpus: Corpus, min_count: int = 2) -> NgramTable:
    """Count every n-gram occurrence (orders 1-3) per domain."""
    if len(corpus.domains) < 2:
        raise ValidationError("affinity requires >= 2 domains")
    counts: dict = {}
    domain_totals = {dom: 0 for dom in corpus.domains}
    for ex in corpus:
        domain_totals[ex.domain] += len(ex.tokens)
        for _, gram in iter_ngrams(ex.tokens):
            per = counts.setdefault(gram, {})
            per[ex.domain] = per.get(ex.domain, 0) + 1
    return NgramTable(counts, domain_totals, corpus.domains, min_count)


# ---------------------------------------------------------------------------
# Corruption
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Slot:
    position: int  # token index in the original sequence
    ngram: tuple[str, ...]
    score: float


@dataclass(frozen=True)
class MaskedText:
    """A token sequence with indexed mask sentinels and the spans they replaced."""

    tokens: tuple[str, ...]
    slots: tuple[Slot, ...]
    source_example_id: str

    def __post_init__(self):
        indices = [
            int(_MASK_TOKEN_RE.match(tok).group(1))
            for tok in self.tokens
            if is_mask_token(tok)
        ]
        if indices != list(range(1, len(self.slots) + 1)):
            raise ValidationError(
                f"mask sentinels {indices} are not consecutive from 1 for {len(self.slots)} slots"
            )
        spans = sorted((s.position, s.position + len(s.ngram)) for s in self.slots)
        for (_, end), (start, _) in zip(spans, spans[1:]):
            if start < end:
                raise ValidationError("slots overlap in original token positions")


def restore_tokens(masked: MaskedText) -> tuple[str, ...]:
    """Substitute each slot's original n-gram back into its sentinel."""
    out = []
    slots = iter(masked.slots)
    for tok in masked.tokens:
        if is_mask_token(tok):
            out.extend(next(slots).ngram)
        else:
            out.append(tok)
    return tuple(out)


def _select_spans(tokens, candidates, max_mask_frac):
    """Greedy non-overlapping span selection.

    Candidates are taken by descending score, then descending order, then
    leftmost position.  Overlaps with an already selected span are skipped;
    selection stops once adding a span would push the masked-token fraction
    past ``max_mask_frac``.
    """
    candidates = sorted(candidates, key=lambda c: (-c[0], -len(c[2]), c[1], c[2]))
    occupied = [False] * len(tokens)
    budget = max_mask_frac * len(tokens)
    masked = 0
    chosen = []
    for score, pos, gram in candidates:
        n = len(gram)
        if any(occupied[pos : pos + n]):
            continue
        if masked + n > budget + 1e-12:
            break
        for i in range(pos, pos + n):
            occupied[i] = True
        masked += n
        chosen.append((score, pos, gram))
    chosen.sort(key=lambda c: c[1])
    return chosen


def _build_masked(example_id, tokens, chosen):
    out = []
    slots = []
    pos = 0
    for k, (score, start, gram) in enumerate(chosen, start=1):
        out.extend(tokens[pos:start])
        out.append(mask_token(k))
        slots.append(Slot(position=start, ngram=tuple(gram), score=float(score)))
        pos = start + len(gram)
    out.extend(tokens[pos:])
    return MaskedText(tokens=tuple(out), slots=tuple(slots), source_example_id=example_id)


def corrupt(
    table: NgramTable,
    example: Example,
    source: str | None = None,
    target: str = "",
    mask_threshold: float = 0.2,
    max_mask_frac: float = 0.5,
) -> MaskedText:
    """Mask the spans of an example whose mask score exceeds the threshold.

    ``source`` defaults to the example's own domain.  Zero selected spans is a
    valid outcome (the sentence survives unchanged).
    """
    src = example.domain if source is None else source
    candidates = [
        (table.mask_score(gram, src, target), pos, gram)
        for pos, gram in iter_ngrams(example.tokens)
        if table.retained(gram)
    ]
    candidates = [(s, p, g) for s, p, g in candidates if s > mask_threshold]
    chosen = _select_spans(example.tokens, candidates, max_mask_frac)
    return _build_masked(example.id, example.tokens, chosen)


def corrupt_by_affinity(
    table: NgramTable,
    example: Example,
    domain: str,
    mask_threshold: float = 0.2,
    max_mask_frac: float = 0.5,
) -> MaskedText:
    """Mask spans loaded toward the example's own domain.

    Used when training the infiller, where the source/target mask score is
    identically zero and plain own-domain affinity drives span selection.
    """
    candidates = [
        (table.affinity(gram, domain), pos, gram)
        for pos, gram in iter_ngrams(example.tokens)
        if table.retained(gram)
    ]
    candidates = [(s, p, g) for s, p, g in candidates if s > mask_threshold]
    chosen = _select_spans(example.tokens, candidates, max_mask_frac)
    return _build_masked(example.id, example.tokens, chosen)


def score_rows(table: NgramTable, source: str, target: str):
    """Rows for the affinity score table, sorted by mask score descending."""
    rows = []
    for ngram in table.retained_ngrams():
        per = table.counts[ngram]
        row = {
            "ngram": " ".join(ngram),
            "n": len(ngram),
        }
        for dom in table.domains:
            row[f"count_{dom}"] = per.get(dom, 0)
        for dom in table.domains:
            row[f"affinity_{dom}"] = table.affinity(ngram, dom)
        row["mask_score"] = table.mask_score(ngram, source, target)
        rows.append(row)
    rows.sort(key=lambda r: (-r["mask_score"], r["ngram"]))
    return rows


def write_score_tsv(rows, path) -> None:
    if not rows:
        raise ValidationError("no retained n-grams to write")
    columns = list(rows[0].keys())
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            cells = [
                f"{row[c]:.6f}" if isinstance(row[c], float) else str(row[c]) for c in columns
            ]
            fh.write("\t".join(cells) + "\n")


# ---------------------------------------------------------------------------
# Estimator wrapper
# ---------------------------------------------------------------------------


def as_corpus(X) -> Corpus:
    """Input validation helper: accept a Corpus or an iterable of Examples."""
    if isinstance(X, Corpus):
        return X
    examples = tuple(X)
    if not all(isinstance(ex, Example) for ex in examples):
        raise ValidationError("expected a Corpus or an iterable of Example objects")
    return Corpus.from_examples(examples)


def as_examples(X) -> tuple[Example, ...]:
    if isinstance(X, Corpus):
        return X.examples
    examples = tuple(X)
    if not all(isinstance(ex, Example) for ex in examples):
        raise ValidationError("expected a Corpus or an iterable of Example objects")
    return examples


class DomainMasker(BaseEstimator, TransformerMixin):
    """Corruption step as a scikit-learn transformer.

    ``fit`` counts n-grams over a two-domain corpus; ``transform`` corrupts
    examples for the configured source -> target direction and returns one
    :class:`MaskedText` per input example.
    """

    def __init__(
        self,
        source_domain: str = "",
        target_domain: str = "",
        min_count: int = 2,
        mask_threshold: float = 0.2,
        max_mask_frac: float = 0.5,
    ):
        self.source_domain = source_domain
        self.target_domain = target_domain
        self.min_count = min_count
        self.mask_threshold = mask_threshold
        self.max_mask_frac = max_mask_frac

    def fit(self, X, y=None):
        corpus = as_corpus(X)
        for dom in (self.source_domain, self.target_domain):
            if dom not in corpus.domains:
                raise ValidationError(f"domain {dom!r} not in corpus registry {corpus.domains}")
        self.table_ = build_table(corpus, self.min_count)
        return self

    def transform(self, X):
        check_is_fitted(self, "table_")
        return [
            corrupt(
                self.table_,
                ex,
                source=self.source_domain,
                target=self.target_domain,
                mask_threshold=self.mask_threshold,
                max_mask_frac=self.max_mask_frac,
            )
            for ex in as_examples(X)
        ]
