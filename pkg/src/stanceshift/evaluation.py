"""Metrics (accuracy, rank-statistic AUC, degradation, McNemar), the ablation
runner, and the contrastive-weight / target-fraction parameter sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import chi2, rankdata

from .corpus import Corpus, SplitSpec, make_split
from .trainer import Predictions, TrainConfig, predict, train
from .util import ValidationError, asdict_plain, stable_json_dumps

# Grid defaults for the two parameter sweeps.
CONTRASTIVE_WEIGHT_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
TARGET_FRACTION_GRID = (0.05, 0.15, 0.30, 0.45)

ABLATION_VARIANTS = ("full", "no_contrastive", "no_counterfactual", "triplet")

# Discordant-pair count below which the exact binomial p-value replaces the
# chi-squared approximation.
MCNEMAR_EXACT_THRESHOLD = 25


def accuracy(preds, gold) -> float:
    preds = list(preds)
    gold = list(gold)
    if len(preds) != len(gold):
        raise ValidationError(f"length mismatch: {len(preds)} predictions vs {len(gold)} gold")
    if not preds:
        raise ValidationError("need at least one prediction")
    return sum(1 for p, g in zip(preds, gold) if p == g) / len(preds)


def auc(scores, gold) -> float:
    """Rank-statistic (Mann-Whitney) AUC with midranks for ties.

    ``scores`` are positive-class probabilities; ``gold`` are binary labels
    (anything truthy counts as positive).
    """
    scores = np.asarray(scores, dtype=np.float64)
    gold = np.asarray([bool(g) for g in gold])
    if len(scores) != len(gold):
        raise ValidationError("scores and gold have different lengths")
    n_pos = int(gold.sum())
    n_neg = int((~gold).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[gold].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def degradation(acc_source_test: float, acc_target_test: float) -> float:
    """Accuracy drop when moving from the source test set to the target test set."""
    for name, value in (("acc_source_test", acc_source_test), ("acc_target_test", acc_target_test)):
        if not 0.0 <= value <= 1.0:
            raise ValidationError(f"{name} {value} outside [0, 1]")
    return acc_source_test - acc_target_test


def mcnemar(preds_a, preds_b, gold) -> dict:
    """Paired comparison of two prediction vectors on shared gold labels.

    ``b`` counts items model A got right and B got wrong; ``c`` the reverse.
    The statistic is the continuity-corrected chi-squared
    ``max(|b - c| - 1, 0)^2 / (b + c)``; below 25 discordant pairs the
    p-value switches to the exact two-sided binomial and is flagged.
    """
    preds_a, preds_b, gold = list(preds_a), list(preds_b), list(gold)
    if not len(preds_a) == len(preds_b) == len(gold):
        raise ValidationError("mcnemar inputs must share one length")
    b = sum(1 for pa, pb, g in zip(preds_a, preds_b, gold) if pa == g and pb != g)
    c = sum(1 for pa, pb, g in zip(preds_a, preds_b, gold) if pa != g and pb == g)
    n = b + c
    if n == 0:
        raise ValidationError("no discordant pairs")
    statistic = max(abs(b - c) - 1, 0) ** 2 / n
    exact = n < MCNEMAR_EXACT_THRESHOLD
    if exact:
        tail = sum(math.comb(n, k) for k in range(min(b, c) + 1))
        p_value = min(1.0, 2.0 * tail / 2.0**n)
    else:
        p_value = float(chi2.sf(statistic, df=1))
    return {"b": b, "c": c, "statistic": float(statistic), "p_value": float(p_value),
            "exact": exact}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Metrics bundle with a stable field order for serialization."""

    metrics: dict = field(default_factory=dict)  # corpus name -> {accuracy, auc, n}
    degradation: float | None = None
    mcnemar_pairs: list = field(default_factory=list)
    ablations: list = field(default_factory=list)
    contrastive_weight_grid: list = field(default_factory=list)
    target_fraction_grid: list = field(default_factory=list)
    cells: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    created_at: str = ""

    def to_dict(self) -> dict:
        return asdict_plain(self)

    def to_json(self) -> str:
        return stable_json_dumps(self.to_dict())


def _positive_scores(predictions: Predictions, labels, positive_label):
    if positive_label not in labels:
        raise ValidationError(f"positive label {positive_label!r} not in {labels}")
    col = list(labels).index(positive_label)
    return predictions.proba[:, col]


def evaluate_predictions(predictions: Predictions, corpus: Corpus, labels,
                         positive_label: str = "FAVOR") -> dict:
    """Accuracy and binary AUC of a prediction set against its corpus."""
    gold = [ex.stance for ex in corpus]
    metrics = {"n": len(gold), "accuracy": accuracy(predictions.labels, gold)}
    try:
        scores = _positive_scores(predictions, labels, positive_label)
        metrics["auc"] = auc(scores, [g == positive_label for g in gold])
    except ValidationError:
        metrics["auc"] = None
    return metrics


def evaluate_model(state, test_source: Corpus, test_target: Corpus,
                   positive_label: str = "FAVOR") -> EvalReport:
    report = EvalReport()
    preds_src = predict(state, test_source)
    preds_tgt = predict(state, test_target)
    report.metrics["test_source"] = evaluate_predictions(
        preds_src, test_source, state.labels, positive_label
    )
    report.metrics["test_target"] = evaluate_predictions(
        preds_tgt, test_target, state.labels, positive_label
    )
    report.degradation = degradation(
        report.metrics["test_source"]["accuracy"], report.metrics["test_target"]["accuracy"]
    )
    return report


# ---------------------------------------------------------------------------
# Harness: train/eval cells, ablations, sweeps
# ---------------------------------------------------------------------------


def _variant_config(variant: str, cfg: TrainConfig) -> TrainConfig:
    if variant == "full":
        return cfg
    if variant == "no_contrastive":
        return replace(cfg, loss=replace(cfg.loss, contrastive_weight=0.0))
    if variant == "no_counterfactual":
        return replace(cfg, counterfactual=replace(cfg.counterfactual, enabled=False))
    if variant == "triplet":
        return replace(cfg, loss=replace(cfg.loss, variant="triplet"))
    raise ValidationError(f"unknown ablation variant {variant!r}")


@dataclass(frozen=True)
class CellResult:
    """Pickle-light summary of one train/eval cell."""

    metrics: dict
    target_predictions: tuple
    target_gold: tuple
    d_total_size: int
    counterfactual_count: int


def run_cell(corpus: Corpus, split: SplitSpec, cfg: TrainConfig,
             positive_label: str = "FAVOR") -> CellResult:
    """Train one configuration and evaluate it on both test sets."""
    train_set, test_source, test_target = make_split(corpus, split)
    state, manifest = train(train_set, split, cfg)
    preds_src = predict(state, test_source)
    preds_tgt = predict(state, test_target)
    metrics = {
        "source": evaluate_predictions(preds_src, test_source, state.labels, positive_label),
        "target": evaluate_predictions(preds_tgt, test_target, state.labels, positive_label),
    }
    metrics["degradation"] = degradation(
        metrics["source"]["accuracy"], metrics["target"]["accuracy"]
    )
    return CellResult(
        metrics=metrics,
        target_predictions=tuple(preds_tgt.labels),
        target_gold=tuple(ex.stance for ex in test_target),
        d_total_size=manifest.d_total_size,
        counterfactual_count=manifest.counterfactual_count,
    )


def _cell_worker(args):
    return run_cell(*args)


def _run_cells(corpus, specs, positive_label, jobs: int = 1):
    """Run (split, cfg) cells, optionally across processes; order is preserved
    so aggregation stays deterministic regardless of completion order."""
    args = [(corpus, split, cfg, positive_label) for split, cfg in specs]
    if jobs > 1 and len(args) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_cell_worker, args))
    return [_cell_worker(a) for a in args]


def _mean_sd(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=0))


def run_ablations(corpus: Corpus, split: SplitSpec, cfg: TrainConfig, n_seeds: int = 5,
                  positive_label: str = "FAVOR", jobs: int = 1) -> EvalReport:
    """Train and evaluate the full model and its three ablations.

    The ``no_counterfactual`` variant pins the target fraction at 0.30; the
    other variants run the split as configured.  Every variant shares the same
    per-repetition seeds and split membership, so differences are attributable
    to the ablated component.  McNemar pairs compare each ablation against the
    full model on the pooled target-test predictions.
    """
    report = EvalReport(config={"split": asdict_plain(split), "train": asdict_plain(cfg),
                                "n_seeds": n_seeds})
    specs = []
    keys = []
    for rep in range(n_seeds):
        rep_split = replace(split, seed=split.seed + rep)
        cf_split = replace(rep_split, target_fraction=0.30)
        for variant in ABLATION_VARIANTS:
            use_split = cf_split if variant == "no_counterfactual" else rep_split
            var_cfg = _variant_config(variant, replace(cfg, seed=cfg.seed + rep))
            specs.append((use_split, var_cfg))
            keys.append((variant, rep))
    results = _run_cells(corpus, specs, positive_label, jobs)

    pooled: dict[str, list] = {v: [] for v in ABLATION_VARIANTS}
    pooled_gold: list = []
    per_variant: dict[str, dict] = {v: {"target_accuracy": [], "target_auc": [],
                                        "degradation": []} for v in ABLATION_VARIANTS}
    for (variant, rep), result in zip(keys, results):
        metrics = result.metrics
        per_variant[variant]["target_accuracy"].append(metrics["target"]["accuracy"])
        per_variant[variant]["target_auc"].append(metrics["target"]["auc"])
        per_variant[variant]["degradation"].append(metrics["degradation"])
        pooled[variant].extend(result.target_predictions)
        if variant == "full":
            pooled_gold.extend(result.target_gold)
        report.cells.append({
            "variant": variant, "seed": cfg.seed + rep,
            "accuracy": metrics["target"]["accuracy"],
            "auc": metrics["target"]["auc"],
            "degradation": metrics["degradation"],
            "d_total_size": result.d_total_size,
            "counterfactual_count": result.counterfactual_count,
        })

    for variant in ABLATION_VARIANTS:
        acc_mean, acc_sd = _mean_sd(per_variant[variant]["target_accuracy"])
        auc_mean, auc_sd = _mean_sd(per_variant[variant]["target_auc"])
        deg_mean, _ = _mean_sd(per_variant[variant]["degradation"])
        report.ablations.append({
            "variant": variant,
            "target_accuracy_mean": acc_mean, "target_accuracy_sd": acc_sd,
            "target_auc_mean": auc_mean, "target_auc_sd": auc_sd,
            "degradation_mean": deg_mean,
        })

    for variant in ABLATION_VARIANTS[1:]:
        try:
            stats = mcnemar(pooled["full"], pooled[variant], pooled_gold)
        except ValidationError as err:
            stats = {"error": str(err)}
        report.mcnemar_pairs.append({"pair": ["full", variant], **stats})
    return report


def run_sweeps(corpus: Corpus, split: SplitSpec, cfg: TrainConfig, n_seeds: int = 5,
               contrastive_weights=CONTRASTIVE_WEIGHT_GRID,
               target_fractions=TARGET_FRACTION_GRID,
               positive_label: str = "FAVOR", jobs: int = 1) -> EvalReport:
    """Sweep the loss weight and the target-domain fraction, cell by cell.

    Each grid row reports mean and standard deviation over the seeds; raw
    cells (param, seed, accuracy, auc) are kept for the CSV emitter.
    """
    report = EvalReport(config={"split": asdict_plain(split), "train": asdict_plain(cfg),
                                "n_seeds": n_seeds})

    def sweep(param_name, values, make_split_spec, make_cfg):
        specs = []
        keys = []
        for value in values:
            for rep in range(n_seeds):
                cell_split = make_split_spec(value, replace(split, seed=split.seed + rep))
                cell_cfg = make_cfg(value, replace(cfg, seed=cfg.seed + rep))
                specs.append((cell_split, cell_cfg))
                keys.append((value, rep))
        results = _run_cells(corpus, specs, positive_label, jobs)

        by_value: dict = {value: {"acc": [], "auc": []} for value in values}
        for (value, rep), result in zip(keys, results):
            metrics = result.metrics
            by_value[value]["acc"].append(metrics["target"]["accuracy"])
            by_value[value]["auc"].append(metrics["target"]["auc"])
            report.cells.append({
                "param": param_name, "value": value, "seed": cfg.seed + rep,
                "accuracy": metrics["target"]["accuracy"],
                "auc": metrics["target"]["auc"],
            })
        rows = []
        for value in values:
            acc_mean, acc_sd = _mean_sd(by_value[value]["acc"])
            auc_mean, auc_sd = _mean_sd(by_value[value]["auc"])
            rows.append({
                param_name: value,
                "target_accuracy_mean": acc_mean, "target_accuracy_sd": acc_sd,
                "target_auc_mean": auc_mean, "target_auc_sd": auc_sd,
            })
        return rows

    report.contrastive_weight_grid = sweep(
        "contrastive_weight",
        list(contrastive_weights),
        lambda value, s: s,
        lambda value, c: replace(c, loss=replace(c.loss, contrastive_weight=value)),
    )
    report.target_fraction_grid = sweep(
        "target_fraction",
        list(target_fractions),
        lambda value, s: replace(s, target_fraction=value),
        lambda value, c: c,
    )
    return report


def write_cells_csv(report: EvalReport, path) -> None:
    """Raw sweep/ablation cells as CSV (param, seed, accuracy, auc)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("param,value,seed,accuracy,auc\n")
        for cell in report.cells:
            param = cell.get("param", cell.get("variant", ""))
            value = cell.get("value", "")
            fh.write(
                f"{param},{value},{cell['seed']},{cell['accuracy']:.6f},{cell['auc']:.6f}\n"
            )
