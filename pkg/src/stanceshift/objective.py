"""Training objectives: a similarity-weighted supervised contrastive loss with
an explicit negative-pair term, cross-entropy, their convex combination, and a
triplet-loss variant, plus the stratified contrastive batch sampler.

For a batch of unit-norm embeddings z with stance labels y, every
anchor-eligible item i contributes

    -(1/|P(i)|) * sum_{p in P(i)} [ z_i.z_p/T + log s(z_i,z_p) - LSE_i ]
    +(1/|N(i)|) * sum_{n in N(i)} [ z_i.z_n/T + log s(z_i,z_n) - LSE_i ]

where P(i)/N(i) are the same/different-label indices, LSE_i is the
log-sum-exp of z_i.z_a/T over all a != i, and s(u, v) = max(cos(u, v), eps) is
the similarity weight (clamped so its log stays finite).  The first sum pulls
positives toward the anchor, the second pushes negatives away, and the
similarity factor down-weights pairs that are already dissimilar.  Anchors
with an empty index set contribute zero to that sum.  Everything is computed
in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus
from .util import ValidationError, require_keys, rng_for

ORIGIN_SOURCE = "source"
ORIGIN_DESTINATION = "destination"
ORIGIN_COUNTERFACTUAL = "counterfactual"
ORIGINS = (ORIGIN_SOURCE, ORIGIN_DESTINATION, ORIGIN_COUNTERFACTUAL)

LOSS_VARIANTS = ("modified_supcon", "supcon_plain", "triplet")


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.08
    contrastive_weight: float = 0.5
    sim_floor: float = 1e-6
    variant: str = "modified_supcon"
    margin: float = 0.5

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if not 0.0 <= self.contrastive_weight <= 1.0:
            raise ValidationError(
                f"contrastive_weight {self.contrastive_weight} outside [0, 1]"
            )
        if self.sim_floor <= 0:
            raise ValidationError("sim_floor must be positive")
        if self.variant not in LOSS_VARIANTS:
            raise ValidationError(f"variant {self.variant!r} not in {LOSS_VARIANTS}")

    @classmethod
    def from_dict(cls, data: dict, path: str = "loss") -> "LossConfig":
        require_keys(data, cls, path)
        cfg = cls(**data)
        cfg.validate()
        return cfg


class ContrastiveBatch:
    """Embeddings, labels and origin flags for one contrastive batch.

    Items flagged with the source-target origin are anchor-eligible; items
    from the destination target or generated counterfactuals only serve as
    positive/negative candidates.  Omitting origins makes every item an
    anchor.
    """

    def __init__(self, embeddings, labels, origins=None):
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise ValidationError("embeddings must be a (batch, dim) array")
        self.labels = tuple(labels)
        if len(self.labels) != self.embeddings.shape[0]:
            raise ValidationError("labels length does not match embeddings")
        if origins is None:
            origins = (ORIGIN_SOURCE,) * len(self.labels)
        self.origins = tuple(origins)
        if len(self.origins) != len(self.labels):
            raise ValidationError("origins length does not match embeddings")
        for origin in self.origins:
            if origin not in ORIGINS:
                raise ValidationError(f"origin {origin!r} not in {ORIGINS}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def anchor_mask(self) -> np.ndarray:
        return np.array([o == ORIGIN_SOURCE for o in self.origins], dtype=bool)

    def same_label_matrix(self) -> np.ndarray:
        labels = np.array(self.labels, dtype=object)
        return labels[:, None] == labels[None, :]


@dataclass
class LossResult:
    loss: float
    grads: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def _check_unit_norm(Z):
    norms = np.linalg.norm(Z, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-8):
        bad = int(np.argmax(np.abs(norms - 1.0)))
        raise ValidationError(f"embedding {bad} is not unit-norm (|z| = {norms[bad]:.6f})")


def contrastive_loss(batch: ContrastiveBatch, cfg: LossConfig) -> LossResult:
    """Similarity-weighted supervised contrastive loss with analytic gradients.

    ``supcon_plain`` drops the similarity weight (s = 1) and the negative-pair
    sum, reducing to the standard supervised contrastive loss.
    """
    cfg.validate()
    if cfg.variant == "triplet":
        raise ValidationError("use triplet_loss for the triplet variant")
    B = len(batch)
    if B < 2:
        raise ValidationError(f"contrastive batch needs >= 2 items, got {B}")
    Z = batch.embeddings
    _check_unit_norm(Z)

    tau = cfg.temperature
    eps = cfg.sim_floor
    modified = cfg.variant == "modified_supcon"

    D = Z @ Z.T
    off = ~np.eye(B, dtype=bool)
    same = batch.same_label_matrix() & off
    diff = ~batch.same_label_matrix() & off
    anchors = batch.anchor_mask

    # log-sum-exp over candidates a != i, and the softmax weights it induces
    scaled = D / tau
    scaled_off = np.where(off, scaled, -np.inf)
    row_max = scaled_off.max(axis=1)
    expd = np.exp(scaled_off - row_max[:, None])
    denom = expd.sum(axis=1)
    lse = row_max + np.log(denom)
    softmax = expd / denom[:, None]

    S = np.maximum(D, eps)
    logS = np.log(S) if modified else np.zeros_like(D)

    pos_counts = same.sum(axis=1)
    neg_counts = diff.sum(axis=1)
    use_pos = anchors & (pos_counts > 0)
    use_neg = anchors & (neg_counts > 0) if modified else np.zeros(B, dtype=bool)

    terms = scaled + logS - lse[:, None]
    pos_term = -(np.where(same, terms, 0.0).sum(axis=1)[use_pos] / pos_counts[use_pos]).sum()
    neg_term = (np.where(diff, terms, 0.0).sum(axis=1)[use_neg] / neg_counts[use_neg]).sum()
    loss = pos_term + neg_term

    # d(loss)/dD as a coefficient matrix; grads follow from D = Z Z'.
    dlogS = np.where(D > eps, 1.0 / S, 0.0) if modified else np.zeros_like(D)
    C = np.zeros_like(D)
    inv_pos = np.zeros(B)
    inv_pos[use_pos] = 1.0 / pos_counts[use_pos]
    C -= (inv_pos[:, None] * (1.0 / tau + dlogS)) * same
    if modified:
        inv_neg = np.zeros(B)
        inv_neg[use_neg] = 1.0 / neg_counts[use_neg]
        C += (inv_neg[:, None] * (1.0 / tau + dlogS)) * diff
    lse_coeff = use_pos.astype(float) - use_neg.astype(float)
    C += (lse_coeff[:, None] / tau) * softmax
    np.fill_diagonal(C, 0.0)
    grads = (C + C.T) @ Z

    offdiag = D[off]
    diagnostics = {
        "positive_term": float(pos_term),
        "negative_term": float(neg_term),
        "n_anchors": int(anchors.sum()),
        "empty_positive_anchors": int((anchors & (pos_counts == 0)).sum()),
        "empty_negative_anchors": int((anchors & (neg_counts == 0)).sum()),
        "cos_min": float(offdiag.min()),
        "cos_max": float(offdiag.max()),
    }
    return LossResult(loss=float(loss), grads=grads, diagnostics=diagnostics)


def cross_entropy(p, y: int) -> tuple[float, np.ndarray]:
    """-log p[y] for one-hot targets; the gradient is wrt the logits (p - onehot)."""
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= int(y) < p.shape[0]:
        raise ValidationError(f"class index {y} outside 0..{p.shape[0] - 1}")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValidationError(f"probabilities sum to {p.sum():.6f}, not 1")
    py = p[int(y)]
    if py <= 0:
        raise ValidationError("zero probability for the true class; use the logits path")
    grad = p.copy()
    grad[int(y)] -= 1.0
    return float(-math.log(py)), grad


def cross_entropy_from_logits(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch, fused with log-softmax for stability.

    Returns the mean loss and the gradient wrt logits (already divided by the
    batch size).
    """
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    B = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logZ = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logZ[:, None]
    loss = float(-logp[np.arange(B), y].mean())
    grad = np.exp(logp)
    grad[np.arange(B), y] -= 1.0
    return loss, grad / B


def total_loss(l_cont: float, l_ce: float, contrastive_weight: float) -> float:
    """Convex combination: weight * contrastive + (1 - weight) * cross-entropy."""
    if not 0.0 <= contrastive_weight <= 1.0:
        raise ValidationError(f"contrastive_weight {contrastive_weight} outside [0, 1]")
    return contrastive_weight * l_cont + (1.0 - contrastive_weight) * l_ce


def triplet_loss(batch: ContrastiveBatch, margin: float = 0.5) -> LossResult:
    """Hardest-positive / hardest-negative triplet loss over valid anchors.

    An anchor is valid when it is anchor-eligible and has at least one positive
    and one negative.  Ties on distance break toward the lowest index.
    """
    B = len(batch)
    Z = batch.embeddings
    same = batch.same_label_matrix()
    np.fill_diagonal(same, False)
    diff = ~batch.same_label_matrix()
    anchors = batch.anchor_mask

    sq_dist = ((Z[:, None, :] - Z[None, :, :]) ** 2).sum(axis=2)
    loss = 0.0
    grads = np.zeros_like(Z)
    valid = []
    triplets = []
    for i in range(B):
        if not anchors[i] or not same[i].any() or not diff[i].any():
            continue
        pos = np.where(same[i])[0]
        neg = np.where(diff[i])[0]
        p = pos[int(np.argmax(sq_dist[i, pos]))]
        n = neg[int(np.argmin(sq_dist[i, neg]))]
        valid.append(i)
        triplets.append((i, p, n))
    if not valid:
        raise ValidationError("degenerate batch: no anchor has both a positive and a negative")

    scale = 1.0 / len(valid)
    for i, p, n in triplets:
        hinge = sq_dist[i, p] - sq_dist[i, n] + margin
        if hinge <= 0:
            continue
        loss += hinge
        grads[i] += scale * 2.0 * (Z[n] - Z[p])
        grads[p] += scale * -2.0 * (Z[i] - Z[p])
        grads[n] += scale * 2.0 * (Z[i] - Z[n])
    return LossResult(loss=float(loss * scale), grads=grads,
                      diagnostics={"n_valid_anchors": len(valid)})


# ---------------------------------------------------------------------------
# Contrastive data sampler
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BatchSpec:
    """Ids (with labels and origin flags) for one batch; embeddings are the
    caller's job."""

    ids: tuple[str, ...]
    labels: tuple[str, ...]
    origins: tuple[str, ...]


class ContrastiveSampler:
    """Seeded epochs over originals plus counterfactuals.

    Each epoch shuffles the pool, pads it cyclically to a whole number of
    fixed-size batches, then swap-repairs batches so every batch holds at
    least two items of each stance label where the inventory allows it.
    Anchored items are the originals from the source domain; target-domain
    originals and counterfactuals only serve as pair candidates.
    """

    def __init__(self, originals: Corpus, counterfactuals: Corpus | None,
                 batch_size: int, seed: int, source_domain: str | None = None):
        if batch_size < 2:
            raise ValidationError("batch_size must be >= 2")
        items = []
        for ex in originals:
            if source_domain is None or ex.domain == source_domain:
                origin = ORIGIN_SOURCE
            else:
                origin = ORIGIN_DESTINATION
            items.append((ex.id, ex.stance, origin))
        if counterfactuals is not None:
            for ex in counterfactuals:
                items.append((ex.id, ex.stance, ORIGIN_COUNTERFACTUAL))
        if not items:
            raise ValidationError("empty pool: no originals or counterfactuals")
        ids = [it[0] for it in items]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate ids across originals and counterfactuals")
        labels = {it[1] for it in items}
        if len(labels) < 2:
            raise ValidationError(f"pool holds a single stance label {labels}; need both")
        self.items = tuple(items)
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.labels = tuple(sorted(labels))

    def __len__(self) -> int:
        return len(self.items)

    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.items) / self.batch_size)

    def epoch(self, epoch_index: int) -> list[BatchSpec]:
        rng = rng_for(self.seed, "epoch", epoch_index)
        perm = rng.permutation(len(self.items))
        slots = self.batches_per_epoch() * self.batch_size
        seq = [int(perm[i % len(self.items)]) for i in range(slots)]
        batches = [seq[i : i + self.batch_size] for i in range(0, slots, self.batch_size)]
        self._swap_repair(batches)
        return [
            BatchSpec(
                ids=tuple(self.items[i][0] for i in batch),
                labels=tuple(self.items[i][1] for i in batch),
                origins=tuple(self.items[i][2] for i in batch),
            )
            for batch in batches
        ]

    def _swap_repair(self, batches) -> None:
        """Best-effort repair: move surplus items between batches until every
        batch has >= 2 of each label (when the pool makes that possible)."""

        def count(batch, label):
            return sum(1 for i in batch if self.items[i][1] == label)

        n_batches = len(batches)
        for bi, batch in enumerate(batches):
            for label in self.labels:
                while count(batch, label) < 2:
                    repaired = False
                    for step in range(1, n_batches):
                        donor = batches[(bi + step) % n_batches]
                        if count(donor, label) <= 2:
                            continue
                        give_di = next(
                            di for di, i in enumerate(donor) if self.items[i][1] == label
                        )
                        take_bi = next(
                            (
                                ti
                                for ti, i in enumerate(batch)
                                if self.items[i][1] != label
                                and count(batch, self.items[i][1]) > 2
                            ),
                            None,
                        )
                        if take_bi is None:
                            continue
                        batch[take_bi], donor[give_di] = donor[give_di], batch[take_bi]
                        repaired = True
                        break
                    if not repaired:
                        break


def cd_sampler(originals: Corpus, counterfactuals: Corpus | None, batch_size: int,
               seed: int, source_domain: str | None = None, epochs: int = 1):
    """Generator over the sampler's batch specs for the requested epochs."""
    sampler = ContrastiveSampler(originals, counterfactuals, batch_size, seed, source_domain)
    for e in range(epochs):
        yield from sampler.epoch(e)
