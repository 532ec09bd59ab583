import math

import numpy as np
import pytest

from stanceshift.corpus import Corpus
from stanceshift.objective import (
    ORIGIN_COUNTERFACTUAL,
    ORIGIN_DESTINATION,
    ORIGIN_SOURCE,
    BatchSpec,
    ContrastiveBatch,
    ContrastiveSampler,
    LossConfig,
    cd_sampler,
    contrastive_loss,
    cross_entropy,
    cross_entropy_from_logits,
    total_loss,
    triplet_loss,
)
from stanceshift.util import ValidationError

from conftest import corpus_of, random_unit_rows
from oracles import (
    sphere_directional_derivative,
    supcon_reference,
    tangent_direction,
)

# Frozen from the extended-precision direct-summation reference before the
# main implementation existed: 3 items, temperature 1, similarity floor 1e-6.
GOLDEN_THREE_ITEM = -15.913649427345866
GOLDEN_Z = np.array([[1.0, 0.0], [0.0, 1.0], [-0.6, -0.8]])
GOLDEN_LABELS = ("FAVOR", "FAVOR", "AGAINST")


def labels_for(rng, n):
    labels = [("FAVOR", "AGAINST")[int(rng.integers(2))] for _ in range(n)]
    if len(set(labels)) == 1:  # force both labels so index sets are nonempty
        labels[0] = "FAVOR" if labels[0] == "AGAINST" else "AGAINST"
    return tuple(labels)


class TestContrastiveLoss:
    def test_plain_variant_matches_reference_fuzzed(self):
        rng = np.random.default_rng(12)
        cfg_by_tau = [LossConfig(temperature=t, variant="supcon_plain") for t in (0.08, 0.5, 1.0)]
        for trial in range(30):
            n = int(rng.integers(2, 9))
            dim = int(rng.integers(2, 5))
            Z = random_unit_rows(rng, n, dim)
            labels = labels_for(rng, n)
            cfg = cfg_by_tau[trial % 3]
            got = contrastive_loss(ContrastiveBatch(Z, labels), cfg).loss
            want = supcon_reference(Z, labels, cfg.temperature, eps=None, negative_term=False)
            assert got == pytest.approx(want, abs=1e-6)

    def test_modified_variant_matches_reference_fuzzed(self):
        rng = np.random.default_rng(13)
        cfg = LossConfig(temperature=0.5)
        for _ in range(20):
            n = int(rng.integers(2, 8))
            Z = random_unit_rows(rng, n, 3)
            labels = labels_for(rng, n)
            got = contrastive_loss(ContrastiveBatch(Z, labels), cfg).loss
            want = supcon_reference(Z, labels, cfg.temperature, eps=cfg.sim_floor,
                                    negative_term=True)
            assert got == pytest.approx(want, abs=1e-6)

    def test_two_equal_label_items_closed_form(self):
        # N(i) empty for both anchors; the softmax ratio collapses to 1, so the
        # loss is -2 log s(z1, z2)
        rng = np.random.default_rng(3)
        Z = random_unit_rows(rng, 2, 4)
        cfg = LossConfig(temperature=0.08)
        res = contrastive_loss(ContrastiveBatch(Z, ("FAVOR", "FAVOR")), cfg)
        s = max(float(Z[0] @ Z[1]), cfg.sim_floor)
        assert res.loss == pytest.approx(-2.0 * math.log(s), abs=1e-9)
        assert res.diagnostics["empty_negative_anchors"] == 2

    def test_three_item_golden(self):
        res = contrastive_loss(ContrastiveBatch(GOLDEN_Z, GOLDEN_LABELS),
                               LossConfig(temperature=1.0))
        assert res.loss == pytest.approx(GOLDEN_THREE_ITEM, abs=1e-9)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        Z = random_unit_rows(rng, 6, 4)
        labels = labels_for(rng, 6)
        cfg = LossConfig(temperature=0.08)
        base = contrastive_loss(ContrastiveBatch(Z, labels), cfg).loss
        for _ in range(5):
            perm = rng.permutation(6)
            shuffled = contrastive_loss(
                ContrastiveBatch(Z[perm], tuple(labels[i] for i in perm)), cfg
            ).loss
            assert abs(shuffled - base) < 1e-9

    def test_pull_positive_decreases_push_negative_increases(self):
        cfg = LossConfig(temperature=1.0)

        def slerp(a, b, t):
            v = (1 - t) * a + t * b
            return v / np.linalg.norm(v)

        Z = GOLDEN_Z.copy()
        before = contrastive_loss(ContrastiveBatch(Z, GOLDEN_LABELS), cfg).diagnostics
        closer_pos = Z.copy()
        closer_pos[1] = slerp(Z[1], Z[0], 0.2)
        after_pos = contrastive_loss(ContrastiveBatch(closer_pos, GOLDEN_LABELS),
                                     cfg).diagnostics
        assert after_pos["positive_term"] < before["positive_term"]

        closer_neg = Z.copy()
        closer_neg[2] = slerp(Z[2], Z[0], 0.2)
        after_neg = contrastive_loss(ContrastiveBatch(closer_neg, GOLDEN_LABELS),
                                     cfg).diagnostics
        assert after_neg["negative_term"] > before["negative_term"]

    def test_gradients_match_sphere_finite_differences(self):
        rng = np.random.default_rng(8)
        cfg = LossConfig(temperature=0.08)
        for trial in range(6):
            n = int(rng.integers(3, 7))
            Z = random_unit_rows(rng, n, 4)
            labels = labels_for(rng, n)
            D = Z @ Z.T
            off = ~np.eye(n, dtype=bool)
            if np.abs(D[off] - cfg.sim_floor).min() < 1e-3:
                continue  # keep a margin from the clamp kink

            def f(Zp):
                return contrastive_loss(ContrastiveBatch(Zp, labels), cfg).loss

            grads = contrastive_loss(ContrastiveBatch(Z, labels), cfg).grads
            for item in range(n):
                for _ in range(2):
                    v = tangent_direction(rng, Z[item])
                    numeric = sphere_directional_derivative(f, Z, item, v)
                    analytic = float(v @ grads[item])
                    rel = abs(numeric - analytic) / max(abs(numeric), 1e-6)
                    assert rel < 1e-4

    def test_finite_with_clamp_active(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            n = int(rng.integers(2, 8))
            Z = random_unit_rows(rng, n, 3)
            labels = labels_for(rng, n)
            res = contrastive_loss(ContrastiveBatch(Z, labels), LossConfig(temperature=0.08))
            assert np.isfinite(res.loss)
            assert np.all(np.isfinite(res.grads))

    def test_anchor_restriction(self):
        # only source-origin items anchor; a batch with a single anchored item
        # scores exactly that anchor's terms
        Z = GOLDEN_Z
        origins = (ORIGIN_SOURCE, ORIGIN_DESTINATION, ORIGIN_COUNTERFACTUAL)
        res = contrastive_loss(ContrastiveBatch(Z, GOLDEN_LABELS, origins),
                               LossConfig(temperature=1.0))
        assert res.diagnostics["n_anchors"] == 1
        want = supcon_reference(Z, GOLDEN_LABELS, 1.0, eps=1e-6, negative_term=True,
                                anchors=[True, False, False])
        assert res.loss == pytest.approx(want, abs=1e-9)

    def test_batch_too_small_rejected(self):
        with pytest.raises(ValidationError, match=">= 2"):
            contrastive_loss(ContrastiveBatch(np.array([[1.0, 0.0]]), ("FAVOR",)),
                             LossConfig())

    def test_non_unit_norm_rejected(self):
        Z = np.array([[1.0, 0.0], [0.0, 2.0]])
        with pytest.raises(ValidationError, match="unit-norm"):
            contrastive_loss(ContrastiveBatch(Z, ("FAVOR", "AGAINST")), LossConfig())


class TestCrossEntropy:
    def test_perfect_prediction_zero(self):
        loss, _ = cross_entropy(np.array([0.0, 1.0]), 1)
        assert loss == 0.0

    def test_uniform_binary(self):
        loss, grad = cross_entropy(np.array([0.5, 0.5]), 0)
        assert loss == pytest.approx(math.log(2.0))
        assert np.allclose(grad, [-0.5, 0.5])

    def test_quarter_probability(self):
        loss, grad = cross_entropy(np.array([0.75, 0.25]), 1)
        assert loss == pytest.approx(-math.log(0.25))
        assert np.allclose(grad, [0.75, -0.75])

    def test_invalid_class_rejected(self):
        with pytest.raises(ValidationError):
            cross_entropy(np.array([0.5, 0.5]), 2)

    def test_logits_path_matches_probability_path(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(5, 3))
        y = np.array([0, 2, 1, 1, 0])
        mean_loss, grad = cross_entropy_from_logits(logits, y)
        per_item = []
        for row, cls in zip(logits, y):
            p = np.exp(row - row.max())
            p /= p.sum()
            per_item.append(cross_entropy(p, int(cls))[0])
        assert mean_loss == pytest.approx(np.mean(per_item))
        assert grad.sum(axis=1) == pytest.approx(np.zeros(5), abs=1e-12)


class TestTotalLoss:
    def test_endpoints_exact(self):
        assert total_loss(2.0, 1.0, 0.0) == 1.0
        assert total_loss(2.0, 1.0, 1.0) == 2.0
        assert abs(total_loss(7.25, -3.5, 0.0) - (-3.5)) < 1e-12
        assert abs(total_loss(7.25, -3.5, 1.0) - 7.25) < 1e-12

    def test_midpoint(self):
        assert total_loss(2.0, 1.0, 0.5) == pytest.approx(1.5)

    def test_invalid_weight_rejected(self):
        with pytest.raises(ValidationError):
            total_loss(1.0, 1.0, 1.5)


class TestTripletLoss:
    def test_satisfied_margin_zero(self):
        Z = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
        res = triplet_loss(ContrastiveBatch(Z, ("FAVOR", "FAVOR", "AGAINST")), margin=0.5)
        assert res.loss == 0.0

    def test_unit_circle_golden(self):
        # anchor (1,0)+, positive (-1,0)+, negative (0,1)-:
        # each eligible anchor contributes 4 - 2 + 0.5 = 2.5
        Z = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
        res = triplet_loss(ContrastiveBatch(Z, ("FAVOR", "FAVOR", "AGAINST")), margin=0.5)
        assert res.loss == pytest.approx(2.5)

    def test_all_same_label_rejected(self):
        Z = np.array([[1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(ValidationError, match="degenerate"):
            triplet_loss(ContrastiveBatch(Z, ("FAVOR", "FAVOR")), margin=0.5)

    def test_gradients_match_sphere_finite_differences(self):
        rng = np.random.default_rng(21)
        for _ in range(5):
            n = int(rng.integers(3, 7))
            Z = random_unit_rows(rng, n, 4)
            labels = labels_for(rng, n)
            try:
                base = triplet_loss(ContrastiveBatch(Z, labels), margin=0.5)
            except ValidationError:
                continue
            if base.loss == 0.0:
                continue

            def f(Zp):
                return triplet_loss(ContrastiveBatch(Zp, labels), margin=0.5).loss

            for item in range(n):
                v = tangent_direction(rng, Z[item])
                numeric = sphere_directional_derivative(f, Z, item, v)
                analytic = float(v @ base.grads[item])
                # hinge/argmin kinks can break individual directions; allow a
                # loose bound and require most directions to agree tightly
                assert abs(numeric - analytic) / max(abs(numeric), 1e-6) < 1e-3


class TestSampler:
    def _pools(self, n_src=20, n_tgt=10, n_cf=8):
        from conftest import make_example

        originals = corpus_of(
            [((f"s{i}", "a"), "d0") for i in range(n_src)]
            + [((f"t{i}", "b"), "d1") for i in range(n_tgt)]
        )
        cf = None
        if n_cf:
            examples = tuple(
                make_example((f"c{i}", "z"), domain="d1",
                             stance="FAVOR" if i % 2 == 0 else "AGAINST", eid=f"cf{i}")
                for i in range(n_cf)
            )
            cf = Corpus(examples=examples, domains=("d1",), label_set=("FAVOR", "AGAINST"))
        return originals, cf

    def test_union_identity_without_counterfactuals(self):
        originals, _ = self._pools(n_cf=0)
        sampler = ContrastiveSampler(originals, None, batch_size=8, seed=1,
                                     source_domain="d0")
        assert len(sampler) == len(originals)

    def test_min_two_per_label_when_inventory_allows(self):
        originals, cf = self._pools()
        sampler = ContrastiveSampler(originals, cf, batch_size=8, seed=2,
                                     source_domain="d0")
        for epoch in range(3):
            for batch in sampler.epoch(epoch):
                for label in ("FAVOR", "AGAINST"):
                    assert batch.labels.count(label) >= 2

    def test_epoch_coverage_within_one(self):
        originals, cf = self._pools()
        sampler = ContrastiveSampler(originals, cf, batch_size=8, seed=3,
                                     source_domain="d0")
        n = len(sampler)
        slots = sampler.batches_per_epoch() * 8
        counts = {}
        for batch in sampler.epoch(0):
            for eid in batch.ids:
                counts[eid] = counts.get(eid, 0) + 1
        expected = slots / n
        assert set(counts) == {item[0] for item in sampler.items}
        assert all(abs(c - expected) <= 1.0 for c in counts.values())

    def test_origin_flags(self):
        originals, cf = self._pools()
        sampler = ContrastiveSampler(originals, cf, batch_size=8, seed=4,
                                     source_domain="d0")
        by_id = dict(zip([i[0] for i in sampler.items], [i[2] for i in sampler.items]))
        for batch in sampler.epoch(0):
            for eid, origin in zip(batch.ids, batch.origins):
                assert origin == by_id[eid]
        assert set(by_id.values()) == {ORIGIN_SOURCE, ORIGIN_DESTINATION,
                                       ORIGIN_COUNTERFACTUAL}

    def test_single_label_pool_rejected(self):
        pool = corpus_of([((f"s{i}", "a"), "d0", "FAVOR") for i in range(6)])
        with pytest.raises(ValidationError, match="single stance label"):
            ContrastiveSampler(pool, None, batch_size=4, seed=0)

    def test_deterministic_epochs(self):
        originals, cf = self._pools()
        a = ContrastiveSampler(originals, cf, batch_size=8, seed=5, source_domain="d0")
        b = ContrastiveSampler(originals, cf, batch_size=8, seed=5, source_domain="d0")
        assert a.epoch(2) == b.epoch(2)
        assert a.epoch(0) != a.epoch(1)

    def test_generator_wrapper(self):
        originals, cf = self._pools()
        batches = list(cd_sampler(originals, cf, batch_size=8, seed=6,
                                  source_domain="d0", epochs=2))
        sampler = ContrastiveSampler(originals, cf, batch_size=8, seed=6,
                                     source_domain="d0")
        assert batches == sampler.epoch(0) + sampler.epoch(1)
        assert all(isinstance(b, BatchSpec) for b in batches)
