"""Two-stage training: counterfactual augmentation, then mini-batch optimization
of the encoder/classifier under the combined contrastive + cross-entropy loss.

Stage 1 builds the n-gram affinity table over the training corpus, fits the
infiller, and generates counterfactuals for every source-domain example.
Stage 2 iterates stratified contrastive batches over originals plus
counterfactuals, combining the two losses with the configured weight and
applying optimizer updates in a deterministic order.  Identical inputs, config
and seed produce bit-identical parameters.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .affinity import as_corpus, build_table
from .corpus import Corpus, SplitSpec, content_fingerprint
from .encoder import (
    ModelState,
    backward,
    featurize,
    forward_batch,
    init_state,
    log_softmax,
    logits_batch,
)
from .objective import (
    ContrastiveBatch,
    ContrastiveSampler,
    LossConfig,
    cross_entropy_from_logits,
    contrastive_loss,
    total_loss,
    triplet_loss,
)
from .reconstructor import Generator, GeneratorSpec, counterfactual_pass, train_infiller
from .util import (
    DivergenceError,
    ValidationError,
    asdict_plain,
    require_keys,
    rng_for,
    stable_json_dumps,
)

logger = logging.getLogger(__name__)

OPTIMIZER_KINDS = ("adam", "sgd")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0

    def validate(self) -> None:
        if self.kind not in OPTIMIZER_KINDS:
            raise ValidationError(f"optimizer kind {self.kind!r} not in {OPTIMIZER_KINDS}")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")

    @classmethod
    def from_dict(cls, data: dict, path: str = "optimizer") -> "OptimizerConfig":
        require_keys(data, cls, path)
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class EncoderConfig:
    d_hidden: int = 128
    d_embed: int = 64
    n_features: int = 1 << 16

    def validate(self) -> None:
        for name in ("d_hidden", "d_embed", "n_features"):
            if int(getattr(self, name)) <= 0:
                raise ValidationError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, data: dict, path: str = "encoder") -> "EncoderConfig":
        require_keys(data, cls, path)
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class CounterfactualConfig:
    enabled: bool = True
    copies: int = 1
    mask_threshold: float = 0.2
    max_mask_frac: float = 0.5
    min_count: int = 2
    orientation_size: int = 25
    alpha: float = 0.1
    self_check: bool = True
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)

    def validate(self) -> None:
        if self.copies < 0:
            raise ValidationError("copies must be >= 0")
        if not 0.0 <= self.max_mask_frac <= 1.0:
            raise ValidationError("max_mask_frac must be in [0, 1]")
        if self.min_count < 1:
            raise ValidationError("min_count must be >= 1")
        self.generator.validate()

    @classmethod
    def from_dict(cls, data: dict, path: str = "counterfactual") -> "CounterfactualConfig":
        require_keys(data, cls, path)
        data = dict(data)
        if "generator" in data:
            data["generator"] = GeneratorSpec.from_dict(data["generator"], f"{path}.generator")
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    counterfactual: CounterfactualConfig = field(default_factory=CounterfactualConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    early_stop_patience: int = 5
    val_fraction: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValidationError("val_fraction must be in [0, 1)")
        self.optimizer.validate()
        self.loss.validate()
        self.counterfactual.validate()
        self.encoder.validate()

    @classmethod
    def from_dict(cls, data: dict, path: str = "train") -> "TrainConfig":
        require_keys(data, cls, path)
        data = dict(data)
        if "optimizer" in data:
            data["optimizer"] = OptimizerConfig.from_dict(data["optimizer"], f"{path}.optimizer")
        if "loss" in data:
            data["loss"] = LossConfig.from_dict(data["loss"], f"{path}.loss")
        if "counterfactual" in data:
            data["counterfactual"] = CounterfactualConfig.from_dict(
                data["counterfactual"], f"{path}.counterfactual"
            )
        if "encoder" in data:
            data["encoder"] = EncoderConfig.from_dict(data["encoder"], f"{path}.encoder")
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass
class RunManifest:
    """Everything needed to audit or reproduce a run.

    ``created_at`` and ``wall_clock_sec`` are the only volatile fields; every
    other field is byte-stable for a fixed seed and input.
    """

    config: dict
    corpus_fingerprints: dict
    d_total_size: int
    counterfactual_count: int
    infill_self_accuracy: float | None
    epoch_curves: list
    best_epoch: int
    steps_total: int
    notes: list
    checkpoint_path: str | None = None
    wall_clock_sec: float = 0.0
    created_at: str = ""

    def to_dict(self) -> dict:
        return asdict_plain(self)

    def to_json(self) -> str:
        return stable_json_dumps(self.to_dict())


class _Adam:
    """Adam with per-parameter moments.

    The first-layer matrix is updated lazily: only the rows touched by the
    current batch have their moments decayed and applied, which keeps the cost
    proportional to the batch's active features instead of the full feature
    space.  Bias correction uses the global step count.
    """

    def __init__(self, state: ModelState, cfg: OptimizerConfig):
        self.cfg = cfg
        self.t = 0
        # np.zeros (calloc) keeps untouched first-layer rows as virtual pages
        for name, param in state.param_items():
            state.moments[f"adam_m:{name}"] = np.zeros(param.shape)
            state.moments[f"adam_v:{name}"] = np.zeros(param.shape)

    def step(self, state: ModelState, grads) -> None:
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t

        def apply(name, param, grad, rows=None):
            m = state.moments[f"adam_m:{name}"]
            v = state.moments[f"adam_v:{name}"]
            if rows is None:
                m *= cfg.beta1
                m += (1.0 - cfg.beta1) * grad
                v *= cfg.beta2
                v += (1.0 - cfg.beta2) * grad * grad
                param -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            else:
                mr = cfg.beta1 * m[rows] + (1.0 - cfg.beta1) * grad
                vr = cfg.beta2 * v[rows] + (1.0 - cfg.beta2) * grad * grad
                m[rows] = mr
                v[rows] = vr
                param[rows] -= cfg.lr * (mr / bc1) / (np.sqrt(vr / bc2) + cfg.eps)

        apply("W1", state.W1, grads.w1_grads, rows=grads.w1_rows)
        apply("b1", state.b1, grads.b1)
        apply("W2", state.W2, grads.W2)
        apply("b2", state.b2, grads.b2)
        apply("Wc", state.Wc, grads.Wc)
        apply("bc", state.bc, grads.bc)
        state.step = self.t


class _SGD:
    """Plain SGD with optional momentum; first-layer velocity is row-lazy."""

    def __init__(self, state: ModelState, cfg: OptimizerConfig):
        self.cfg = cfg
        self.t = 0
        if cfg.momentum:
            for name, param in state.param_items():
                state.moments[f"sgd_v:{name}"] = np.zeros(param.shape)

    def step(self, state: ModelState, grads) -> None:
        cfg = self.cfg
        self.t += 1

        def apply(name, param, grad, rows=None):
            if cfg.momentum:
                vel = state.moments[f"sgd_v:{name}"]
                if rows is None:
                    vel *= cfg.momentum
                    vel += grad
                    param -= cfg.lr * vel
                else:
                    vr = cfg.momentum * vel[rows] + grad
                    vel[rows] = vr
                    param[rows] -= cfg.lr * vr
            elif rows is None:
                param -= cfg.lr * grad
            else:
                param[rows] -= cfg.lr * grad

        apply("W1", state.W1, grads.w1_grads, rows=grads.w1_rows)
        apply("b1", state.b1, grads.b1)
        apply("W2", state.W2, grads.W2)
        apply("b2", state.b2, grads.b2)
        apply("Wc", state.Wc, grads.Wc)
        apply("bc", state.bc, grads.bc)
        state.step = self.t


def _make_optimizer(state, cfg: OptimizerConfig):
    return _Adam(state, cfg) if cfg.kind == "adam" else _SGD(state, cfg)


def _stratified_validation_ids(corpus: Corpus, fraction: float, seed: int) -> set:
    if fraction <= 0:
        return set()
    rng = rng_for(seed, "validation")
    val = set()
    for label in corpus.label_set:
        ids = [ex.id for ex in corpus if ex.stance == label]
        n = int(np.floor(fraction * len(ids)))
        if n == 0:
            continue
        picked = rng.permutation(len(ids))[:n]
        val.update(ids[i] for i in picked)
    return val


@dataclass
class Predictions:
    ids: tuple[str, ...]
    proba: np.ndarray  # (n, k)
    labels: tuple[str, ...]
    embeddings: np.ndarray  # (n, d_embed)


def predict(state: ModelState, corpus) -> Predictions:
    """Deterministic forward pass; argmax ties break toward the lower class index."""
    examples = as_corpus(corpus).examples if isinstance(corpus, Corpus) else tuple(corpus)
    if not examples:
        k = state.k
        return Predictions(ids=(), proba=np.zeros((0, k)), labels=(),
                           embeddings=np.zeros((0, state.d_embed)))
    fvs = [featurize(ex, state.hash_seed, state.n_features) for ex in examples]
    probas = []
    embeds = []
    for start in range(0, len(fvs), 256):
        fwd = forward_batch(state, fvs[start : start + 256])
        probas.append(np.exp(log_softmax(logits_batch(state, fwd.Z))))
        embeds.append(fwd.Z)
    proba = np.vstack(probas)
    picks = proba.argmax(axis=1)
    return Predictions(
        ids=tuple(ex.id for ex in examples),
        proba=proba,
        labels=tuple(state.labels[int(i)] for i in picks),
        embeddings=np.vstack(embeds),
    )


def _accuracy_against(predictions: Predictions, examples) -> float:
    gold = [ex.stance for ex in examples]
    hits = sum(1 for got, want in zip(predictions.labels, gold) if got == want)
    return hits / len(gold)


def train(train_corpus: Corpus, split: SplitSpec, cfg: TrainConfig) -> tuple[ModelState, RunManifest]:
    """Run both training stages and return the best-by-validation state.

    Counterfactual generation is skipped (with a manifest note) when the
    training corpus lacks examples in either split domain, since the affinity
    table and the infiller both need text on each side.
    """
    cfg.validate()
    split.validate()
    t0 = time.perf_counter()
    if len(train_corpus) == 0:
        raise ValidationError("training corpus is empty")
    present = {ex.stance for ex in train_corpus}
    if len(present) < 2:
        raise ValidationError(f"training corpus holds a single label {present}; need both")

    notes = []
    val_ids = _stratified_validation_ids(train_corpus, cfg.val_fraction, cfg.seed)
    core = Corpus(
        examples=tuple(ex for ex in train_corpus if ex.id not in val_ids),
        domains=train_corpus.domains,
        label_set=train_corpus.label_set,
    )
    val_examples = tuple(ex for ex in train_corpus if ex.id in val_ids)

    # ----- stage 1: counterfactual generation -------------------------------
    cf_corpus = None
    infill_self_accuracy = None
    cfc = cfg.counterfactual
    if cfc.enabled and cfc.copies > 0:
        n_src = len(core.by_domain(split.source_domain))
        n_tgt = len(core.by_domain(split.target_domain))
        if n_src == 0 or n_tgt == 0:
            notes.append(
                "counterfactual stage skipped: train corpus has "
                f"{n_src} source-domain and {n_tgt} target-domain examples"
            )
        else:
            table = build_table(core, cfc.min_count)
            infiller = train_infiller(
                core,
                alpha=cfc.alpha,
                table=table if cfc.self_check else None,
                mask_threshold_train=cfc.mask_threshold,
                max_mask_frac=cfc.max_mask_frac,
                self_check=cfc.self_check,
            )
            infill_self_accuracy = infiller.self_fill_accuracy
            gen_spec = replace(cfc.generator, seed=cfc.generator.seed or cfg.seed)
            generator = Generator(gen_spec, infiller, table)
            cf_corpus = counterfactual_pass(
                core,
                table,
                generator,
                split.source_domain,
                split.target_domain,
                copies=cfc.copies,
                mask_threshold=cfc.mask_threshold,
                max_mask_frac=cfc.max_mask_frac,
                seed=cfg.seed,
                orientation_size=cfc.orientation_size,
            )

    # ----- stage 2: mini-batch optimization ---------------------------------
    sampler = ContrastiveSampler(
        core, cf_corpus, cfg.batch_size, cfg.seed, source_domain=split.source_domain
    )
    state = init_state(
        labels=train_corpus.label_set,
        d_hidden=cfg.encoder.d_hidden,
        d_embed=cfg.encoder.d_embed,
        n_features=cfg.encoder.n_features,
        init_seed=rng_for(cfg.seed, "init").integers(1 << 62),
        hash_seed=rng_for(cfg.seed, "hash").integers(1 << 62),
    )
    optimizer = _make_optimizer(state, cfg.optimizer)

    by_id = {ex.id: ex for ex in core}
    if cf_corpus is not None:
        by_id.update({ex.id: ex for ex in cf_corpus})
    fv_cache = {
        eid: featurize(ex, state.hash_seed, state.n_features) for eid, ex in by_id.items()
    }
    label_index = {label: i for i, label in enumerate(state.labels)}
    weight = cfg.loss.contrastive_weight

    curves = []
    steps = 0
    best_state = None
    best_val = -np.inf
    best_epoch = -1
    stale = 0

    for epoch in range(cfg.epochs):
        sums = {"l_total": 0.0, "l_cont": 0.0, "l_ce": 0.0}
        n_batches = 0
        for spec in sampler.epoch(epoch):
            fvs = [fv_cache[eid] for eid in spec.ids]
            fwd = forward_batch(state, fvs)
            y = np.array([label_index[lb] for lb in spec.labels])
            logits = logits_batch(state, fwd.Z)
            l_ce, d_logits = cross_entropy_from_logits(logits, y)

            if weight == 0.0:
                l_cont, d_z = 0.0, None
            else:
                batch = ContrastiveBatch(fwd.Z, spec.labels, spec.origins)
                if cfg.loss.variant == "triplet":
                    res = triplet_loss(batch, cfg.loss.margin)
                else:
                    res = contrastive_loss(batch, cfg.loss)
                l_cont, d_z = res.loss, weight * res.grads
                logger.debug(
                    "batch: l_cont=%.4f l_ce=%.4f %s", l_cont, l_ce, res.diagnostics
                )

            l_total = total_loss(l_cont, l_ce, weight)
            if not np.isfinite(l_total):
                raise DivergenceError(
                    f"non-finite loss {l_total} at epoch {epoch}", batch_ids=spec.ids
                )
            grads = backward(state, fwd, d_z, (1.0 - weight) * d_logits)
            optimizer.step(state, grads)
            steps += 1
            n_batches += 1
            sums["l_total"] += l_total
            sums["l_cont"] += l_cont
            sums["l_ce"] += l_ce

        curve = {
            "epoch": epoch,
            "l_total": sums["l_total"] / max(n_batches, 1),
            "l_cont": sums["l_cont"] / max(n_batches, 1),
            "l_ce": sums["l_ce"] / max(n_batches, 1),
        }
        if val_examples:
            val_acc = _accuracy_against(predict(state, val_examples), val_examples)
            curve["val_accuracy"] = val_acc
            if val_acc > best_val:
                best_val, best_epoch, stale = val_acc, epoch, 0
                best_state = state.copy_params()
            else:
                stale += 1
        curves.append(curve)
        if val_examples and stale >= cfg.early_stop_patience:
            notes.append(f"early stop after epoch {epoch} (patience {cfg.early_stop_patience})")
            break

    final = best_state if best_state is not None else state.copy_params()
    manifest = RunManifest(
        config={"split": asdict_plain(split), "train": asdict_plain(cfg)},
        corpus_fingerprints={
            "train": content_fingerprint(train_corpus),
            "counterfactuals": content_fingerprint(cf_corpus) if cf_corpus is not None else None,
        },
        d_total_size=len(sampler),
        counterfactual_count=len(cf_corpus) if cf_corpus is not None else 0,
        infill_self_accuracy=infill_self_accuracy,
        epoch_curves=curves,
        best_epoch=best_epoch if best_state is not None else (cfg.epochs - 1 if cfg.epochs else -1),
        steps_total=steps,
        notes=notes,
        wall_clock_sec=time.perf_counter() - t0,
        created_at=datetime.now(timezone.utc).isoformat(),
    )
    return final, manifest


class StanceClassifier(BaseEstimator, ClassifierMixin):
    """The full two-stage pipeline as a scikit-learn classifier.

    ``fit`` takes a training corpus (or iterable of examples) that already
    contains both split domains; ``predict``/``predict_proba`` run the fitted
    encoder over new examples.
    """

    def __init__(
        self,
        source_domain: str = "",
        target_domain: str = "",
        epochs: int = 20,
        batch_size: int = 32,
        optimizer: str = "adam",
        lr: float = 1e-3,
        contrastive_weight: float = 0.5,
        temperature: float = 0.08,
        sim_floor: float = 1e-6,
        loss_variant: str = "modified_supcon",
        margin: float = 0.5,
        counterfactual: bool = True,
        copies: int = 1,
        mask_threshold: float = 0.2,
        max_mask_frac: float = 0.5,
        min_count: int = 2,
        generator: str = "ngram_infiller",
        sampling: str = "argmax",
        gen_temperature: float = 1.0,
        d_hidden: int = 128,
        d_embed: int = 64,
        n_features: int = 1 << 16,
        early_stop_patience: int = 5,
        seed: int = 0,
    ):
        self.source_domain = source_domain
        self.target_domain = target_domain
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr = lr
        self.contrastive_weight = contrastive_weight
        self.temperature = temperature
        self.sim_floor = sim_floor
        self.loss_variant = loss_variant
        self.margin = margin
        self.counterfactual = counterfactual
        self.copies = copies
        self.mask_threshold = mask_threshold
        self.max_mask_frac = max_mask_frac
        self.min_count = min_count
        self.generator = generator
        self.sampling = sampling
        self.gen_temperature = gen_temperature
        self.d_hidden = d_hidden
        self.d_embed = d_embed
        self.n_features = n_features
        self.early_stop_patience = early_stop_patience
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            optimizer=OptimizerConfig(kind=self.optimizer, lr=self.lr),
            loss=LossConfig(
                temperature=self.temperature,
                contrastive_weight=self.contrastive_weight,
                sim_floor=self.sim_floor,
                variant=self.loss_variant,
                margin=self.margin,
            ),
            counterfactual=CounterfactualConfig(
                enabled=self.counterfactual,
                copies=self.copies,
                mask_threshold=self.mask_threshold,
                max_mask_frac=self.max_mask_frac,
                min_count=self.min_count,
                generator=GeneratorSpec(
                    kind=self.generator,
                    sampling=self.sampling,
                    temperature=self.gen_temperature,
                    seed=self.seed,
                ),
            ),
            encoder=EncoderConfig(
                d_hidden=self.d_hidden, d_embed=self.d_embed, n_features=self.n_features
            ),
            early_stop_patience=self.early_stop_patience,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        corpus = as_corpus(X)
        split = SplitSpec(source_domain=self.source_domain, target_domain=self.target_domain,
                          seed=self.seed)
        self.model_, self.manifest_ = train(corpus, split, self._config())
        self.classes_ = np.array(self.model_.labels, dtype=object)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return np.array(predict(self.model_, as_corpus(X)).labels, dtype=object)

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return predict(self.model_, as_corpus(X)).proba

    def embed(self, X):
        check_is_fitted(self, "model_")
        return predict(self.model_, as_corpus(X)).embeddings

    def score(self, X, y=None, sample_weight=None):
        corpus = as_corpus(X)
        if y is None:
            y = [ex.stance for ex in corpus]
        got = self.predict(corpus)
        return float(np.mean([g == w for g, w in zip(got, y)]))
