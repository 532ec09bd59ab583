import json

import numpy as np
import pytest
from sklearn.base import clone

from stanceshift.affinity import build_table, corrupt, is_mask_token
from stanceshift.corpus import Corpus
from stanceshift.reconstructor import (
    CounterfactualAugmenter,
    Generator,
    GeneratorSpec,
    Orientation,
    build_orientation,
    counterfactual_pass,
    train_infiller,
)
from stanceshift.util import ValidationError

from conftest import corpus_of, make_example


def splice_fills(masked, fills):
    """Replace each sentinel with its recorded fill; everything else intact."""
    out = []
    it = iter(fills)
    for tok in masked.tokens:
        if is_mask_token(tok):
            out.extend(next(it).split(" "))
        else:
            out.append(tok)
    return tuple(out)


@pytest.fixture(scope="module")
def small_table(small_corpus):
    return build_table(small_corpus, min_count=2)


@pytest.fixture(scope="module")
def small_infiller(small_corpus):
    return train_infiller(small_corpus, self_check=False)


class TestInfillerTraining:
    def test_single_doc_unigram_counts(self):
        corpus = corpus_of([(("a", "b", "c"), "D"), (("z", "z"), "E")])
        model = train_infiller(corpus, self_check=False)
        lm = model.domains["D"]
        assert lm.unigram == {"a": 1, "b": 1, "c": 1}
        assert lm.total == 3

    def test_add_alpha_probabilities(self):
        # vocabulary {a, b, c}; context seen twice, always followed by "a":
        # smoothed probs are (2.1/2.3, 0.1/2.3, 0.1/2.3)
        corpus = corpus_of([(("c", "a"), "D"), (("c", "a"), "D"), (("b",), "E")])
        model = train_infiller(corpus, alpha=0.1, self_check=False)
        assert model.vocab_size == 3
        ctx = ("<s>", "c")
        assert model.prob("D", "a", ctx) == pytest.approx(2.1 / 2.3)
        assert model.prob("D", "b", ctx) == pytest.approx(0.1 / 2.3)
        assert model.prob("D", "c", ctx) == pytest.approx(0.1 / 2.3)
        total = sum(model.prob("D", tok, ctx) for tok in ("a", "b", "c"))
        assert total == pytest.approx(1.0)

    def test_probabilities_normalize_at_every_backoff_level(self):
        corpus = corpus_of([(("a", "b", "a", "c"), "D"), (("c", "b"), "E")])
        model = train_infiller(corpus, alpha=0.5, self_check=False)
        for ctx in (("a", "b"), ("q", "b"), ("q", "q")):  # trigram, bigram, unigram level
            total = sum(model.prob("D", tok, ctx) for tok in model.vocab)
            assert total == pytest.approx(1.0)

    def test_deterministic_serialization(self, small_corpus):
        a = train_infiller(small_corpus, self_check=False)
        b = train_infiller(small_corpus, self_check=False)
        assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)

    def test_empty_domain_rejected(self):
        corpus = Corpus(
            examples=corpus_of([(("a", "b"), "D")]).examples,
            domains=("D", "GHOST"),
            label_set=("FAVOR", "AGAINST"),
        )
        with pytest.raises(ValidationError, match="GHOST"):
            train_infiller(corpus, self_check=False)

    def test_self_reconstruction_accuracy_reported(self, small_corpus, small_table, caplog):
        import logging

        with caplog.at_level(logging.INFO, logger="stanceshift.reconstructor"):
            model = train_infiller(small_corpus, table=small_table, self_check=True)
        assert model.self_fill_accuracy is not None
        assert 0.0 <= model.self_fill_accuracy <= 1.0
        assert any("self-reconstruction" in rec.message for rec in caplog.records)


class TestGenerate:
    def test_zero_slots_copies_tokens_and_relabels(self, small_table, small_infiller):
        gen = Generator(GeneratorSpec(), small_infiller, small_table)
        parent = make_example(("w1", "w2", "w3"), domain="d0", stance="AGAINST", eid="p1")
        masked = corrupt(small_table, parent, "d0", "d1", mask_threshold=1.0)
        out = gen.generate(masked, build_orientation(small_table, "d1"), parent=parent)
        assert out.tokens == parent.tokens
        assert out.domain == "d1"
        assert out.stance == "AGAINST"
        assert out.target == parent.target
        assert out.id == "p1#cf1"
        assert out.meta["parent_id"] == "p1"

    def test_lexicon_swapper_cycles_representatives(self, small_table, small_infiller):
        gen = Generator(
            GeneratorSpec(kind="lexicon_swapper"), small_infiller, small_table
        )
        orientation = Orientation(
            domain="d1",
            representative_ngrams=(("face",), ("masks",), ("mandate",)),
        )
        parent = small_corpus_example = None
        # two single-token slots: fills must be the first two representatives
        counts_corpus = corpus_of(
            [((f"u{i}", "m1", f"v{i}", "m2", f"q{i}"), "d0") for i in range(3)]
            + [((f"x{i}", "n1", f"y{i}"), "d1") for i in range(3)]
        )
        table = build_table(counts_corpus, min_count=2)
        parent = make_example(("u9", "m1", "v9", "m2"), domain="d0", eid="p2")
        masked = corrupt(table, parent, "d0", "d1", mask_threshold=0.5)
        assert len(masked.slots) == 2
        out = gen.generate(masked, orientation, parent=parent)
        assert out.meta["fills"] == ["face", "masks"]
        assert out.tokens == ("u9", "face", "v9", "masks")

    def test_swapper_prefers_matching_length(self, small_table, small_infiller):
        gen = Generator(GeneratorSpec(kind="lexicon_swapper"), small_infiller, small_table)
        orientation = Orientation(
            domain="d1",
            representative_ngrams=(("a", "b"), ("c",), ("d", "e")),
        )
        counts = corpus_of(
            [((f"u{i}", "m1", "m3", f"v{i}"), "d0") for i in range(3)]
            + [((f"x{i}", "n1", f"y{i}"), "d1") for i in range(3)]
        )
        table = build_table(counts, min_count=2)
        parent = make_example(("u9", "m1", "m3", "v9"), domain="d0", eid="p3")
        masked = corrupt(table, parent, "d0", "d1", mask_threshold=0.5)
        assert [s.ngram for s in masked.slots] == [("m1", "m3")]
        out = gen.generate(masked, orientation, parent=parent)
        # slot 1 is a bigram: the first length-2 representative wins
        assert out.meta["fills"] == ["a b"]

    def test_infiller_fills_come_from_target_shortlist(self, small_corpus, small_table,
                                                       small_infiller):
        gen = Generator(GeneratorSpec(), small_infiller, small_table)
        orientation = build_orientation(small_table, "d1")
        parent = small_corpus.by_domain("d0").examples[1]
        masked = corrupt(small_table, parent, "d0", "d1", 0.5, 0.5)
        if not masked.slots:
            pytest.skip("no slots for this example")
        out = gen.generate(masked, orientation, parent=parent)
        for fill_text in out.meta["fills"]:
            gram = tuple(fill_text.split(" "))
            assert small_table.retained(gram)
            # rescoring: every fill leans toward the target domain
            assert small_table.mask_score(gram, "d1", "d0") > 0

    def test_empty_shortlist_falls_back_to_top_unigram(self, small_infiller):
        # target domain has no retained n-grams at all: fall back to the
        # most frequent unigram of that domain from the infiller
        corpus = corpus_of(
            [((f"u{i}", "m1", f"v{i}"), "d0") for i in range(3)]
            + [((f"solo{i}", f"only{i}"), "d1") for i in range(3)]
        )
        table = build_table(corpus, min_count=2)
        model = train_infiller(corpus, self_check=False)
        gen = Generator(GeneratorSpec(), model, table)
        orientation = Orientation(domain="d1", representative_ngrams=())
        parent = make_example(("u9", "m1", "v9"), domain="d0", eid="p4")
        masked = corrupt(table, parent, "d0", "d1", mask_threshold=0.5)
        assert len(masked.slots) == 1
        out = gen.generate(masked, orientation, parent=parent)
        assert out.meta["fills"] == [model.most_common_unigram("d1")]

    def test_spec_validation(self):
        with pytest.raises(ValidationError):
            GeneratorSpec(kind="transformer").validate()
        with pytest.raises(ValidationError):
            GeneratorSpec(sampling="beam").validate()
        with pytest.raises(ValidationError):
            GeneratorSpec(temperature=0.0).validate()


class TestCounterfactualPass:
    def test_zero_copies_empty(self, small_corpus, small_table, small_infiller):
        gen = Generator(GeneratorSpec(), small_infiller, small_table)
        out = counterfactual_pass(small_corpus, small_table, gen, "d0", "d1", copies=0)
        assert len(out) == 0

    def test_argmax_deduplicates_to_one(self, small_corpus, small_table, small_infiller):
        gen = Generator(GeneratorSpec(sampling="argmax"), small_infiller, small_table)
        out = counterfactual_pass(small_corpus, small_table, gen, "d0", "d1", copies=3)
        n_parents = len(small_corpus.by_domain("d0"))
        assert len(out) == n_parents
        assert all(ex.id.endswith("#cf1") for ex in out)

    def test_sample_mode_bounded_and_stance_preserving(self, small_corpus, small_table,
                                                       small_infiller):
        gen = Generator(
            GeneratorSpec(sampling="sample", temperature=1.0), small_infiller, small_table
        )
        out = counterfactual_pass(
            small_corpus, small_table, gen, "d0", "d1", copies=2, seed=5
        )
        parents = {ex.id: ex for ex in small_corpus}
        assert len(out) <= 2 * len(small_corpus.by_domain("d0"))
        for ex in out:
            assert ex.stance == parents[ex.meta["parent_id"]].stance
            assert ex.domain == "d1"

    def test_structure_preserved_outside_slots(self, small_corpus, small_table,
                                               small_infiller):
        gen = Generator(GeneratorSpec(), small_infiller, small_table)
        out = counterfactual_pass(small_corpus, small_table, gen, "d0", "d1", copies=1)
        parents = {ex.id: ex for ex in small_corpus}
        for ex in list(out)[:50]:
            parent = parents[ex.meta["parent_id"]]
            masked = corrupt(small_table, parent, "d0", "d1", 0.2, 0.5)
            assert splice_fills(masked, ex.meta["fills"]) == ex.tokens

    def test_domain_shift_direction(self, small_corpus, small_table, small_infiller):
        def span_affinity(span, domain):
            best = None
            for n in (1, 2, 3):
                for i in range(len(span) - n + 1):
                    gram = span[i : i + n]
                    if small_table.retained(gram):
                        score = small_table.affinity(gram, domain)
                        best = score if best is None else max(best, score)
            return best

        gen = Generator(GeneratorSpec(), small_infiller, small_table)
        out = counterfactual_pass(small_corpus, small_table, gen, "d0", "d1", copies=1)
        parents = {ex.id: ex for ex in small_corpus}
        filled_scores, replaced_scores = [], []
        for ex in out:
            masked = corrupt(small_table, parents[ex.meta["parent_id"]], "d0", "d1", 0.2, 0.5)
            for slot, fill_text in zip(masked.slots, ex.meta["fills"]):
                got = span_affinity(tuple(fill_text.split(" ")), "d1")
                want = span_affinity(slot.ngram, "d1")
                if got is not None:
                    filled_scores.append(got)
                if want is not None:
                    replaced_scores.append(want)
        assert filled_scores and replaced_scores
        assert np.mean(filled_scores) > np.mean(replaced_scores)

    def test_full_pass_deterministic(self, small_corpus, small_table, small_infiller):
        gen = Generator(
            GeneratorSpec(sampling="sample", temperature=1.0), small_infiller, small_table
        )
        a = counterfactual_pass(small_corpus, small_table, gen, "d0", "d1", copies=2, seed=9)
        b = counterfactual_pass(small_corpus, small_table, gen, "d0", "d1", copies=2, seed=9)
        assert a.ids() == b.ids()
        assert [ex.tokens for ex in a] == [ex.tokens for ex in b]


class TestAugmenterEstimator:
    def test_fit_transform_and_clone(self, small_corpus):
        aug = CounterfactualAugmenter(source_domain="d0", target_domain="d1", seed=3)
        fresh = clone(aug)
        assert fresh.get_params() == aug.get_params()
        out = aug.fit(small_corpus).transform(small_corpus)
        assert len(out) == len(small_corpus.by_domain("d0"))
        assert all(ex.domain == "d1" for ex in out)
