import numpy as np
import pytest

from stanceshift.corpus import Corpus, Example, SplitSpec, SynthConfig, synth_benchmark
from stanceshift.trainer import EncoderConfig, TrainConfig

# ---------------------------------------------------------------------------
# Shared harness setup: one benchmark configuration and one training
# configuration reused by every directional test, so all variants face the
# same data and budget.  n_features is reduced from the production default to
# keep the many training runs inside the suite's runtime budget.
# ---------------------------------------------------------------------------

BENCH_CONFIG = SynthConfig(
    docs_per_domain=320,
    domain_marker_vocab_size=24,
    stance_marker_vocab_size=12,
    shared_vocab_size=100,
    tokens_per_doc=(10, 15),
    marker_injection_rate=0.3,
    seed=97,
)

HARNESS_SEED = 500

HARNESS_TRAIN = TrainConfig(
    epochs=10,
    batch_size=64,
    early_stop_patience=3,
    encoder=EncoderConfig(n_features=8192),
    seed=HARNESS_SEED,
)

HARNESS_SPLIT = SplitSpec("d0", "d1", target_fraction=0.30, seed=HARNESS_SEED)

# Smaller corpus for module-level tests that only need a working pipeline.
SMALL_CONFIG = SynthConfig(
    docs_per_domain=120,
    domain_marker_vocab_size=12,
    stance_marker_vocab_size=6,
    shared_vocab_size=60,
    tokens_per_doc=(8, 12),
    marker_injection_rate=0.3,
    seed=11,
)


@pytest.fixture(scope="session")
def bench_corpus() -> Corpus:
    return synth_benchmark(BENCH_CONFIG)


@pytest.fixture(scope="session")
def small_corpus() -> Corpus:
    return synth_benchmark(SMALL_CONFIG)


def make_example(tokens, domain="d0", stance="FAVOR", eid="e0", target=("issue",)):
    tokens = tuple(tokens)
    return Example(id=eid, raw_text=" ".join(tokens), tokens=tokens,
                   target=tuple(target), stance=stance, domain=domain)


def corpus_of(docs, label_set=("FAVOR", "AGAINST"), domains=None):
    """docs: iterable of (tokens, domain) or (tokens, domain, stance)."""
    examples = []
    for i, doc in enumerate(docs):
        tokens, domain = doc[0], doc[1]
        stance = doc[2] if len(doc) > 2 else ("FAVOR" if i % 2 == 0 else "AGAINST")
        examples.append(make_example(tokens, domain=domain, stance=stance, eid=f"x{i}"))
    if domains is None:
        domains = tuple(dict.fromkeys(ex.domain for ex in examples))
    return Corpus(examples=tuple(examples), domains=tuple(domains), label_set=tuple(label_set))


def random_token_docs(rng, n_docs, n_domains, vocab=30, max_len=9):
    """Random corpora for fuzzing affinity against the brute-force oracle."""
    domains = [f"dom{d}" for d in range(n_domains)]
    docs = []
    for _ in range(n_docs):
        length = int(rng.integers(3, max_len + 1))
        tokens = tuple(f"t{int(rng.integers(vocab))}" for _ in range(length))
        docs.append((tokens, domains[int(rng.integers(n_domains))]))
    return docs


def random_unit_rows(rng, n, dim):
    Z = rng.normal(size=(n, dim))
    return Z / np.linalg.norm(Z, axis=1, keepdims=True)
