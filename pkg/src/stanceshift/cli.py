"""Command-line interface: one executable, one subcommand per pipeline stage.

Exit codes: 0 success, 1 validation/usage error, 2 runtime error.  All
randomness derives from a single ``--seed``; every structured output embeds the
effective configuration, and only the documented timestamp fields
(``created_at``, ``wall_clock_sec``) vary between identical runs.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import yaml

from .affinity import build_table, corrupt, score_rows, write_score_tsv
from .corpus import (
    NONE,
    Corpus,
    SplitSpec,
    SynthConfig,
    load_jsonl,
    make_split,
    synth_benchmark,
    write_jsonl,
)
from .encoder import load_checkpoint, save_checkpoint
from .evaluation import (
    CONTRASTIVE_WEIGHT_GRID,
    TARGET_FRACTION_GRID,
    EvalReport,
    evaluate_model,
    run_ablations,
    run_sweeps,
    write_cells_csv,
)
from .reconstructor import Generator, counterfactual_pass, train_infiller
from .trainer import TrainConfig, train
from .util import ValidationError, asdict_plain, require_keys, stable_json_dumps


@dataclass(frozen=True)
class EvalOptions:
    n_seeds: int = 5
    contrastive_weights: tuple = CONTRASTIVE_WEIGHT_GRID
    target_fractions: tuple = TARGET_FRACTION_GRID
    positive_label: str = "FAVOR"

    @classmethod
    def from_dict(cls, data: dict, path: str = "eval") -> "EvalOptions":
        require_keys(data, cls, path)
        data = dict(data)
        for key in ("contrastive_weights", "target_fractions"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass(frozen=True)
class GlobalConfig:
    """Effective configuration for every stage; unknown keys are rejected."""

    seed: int = 0
    split: SplitSpec = field(default_factory=lambda: SplitSpec("d0", "d1"))
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)

    @classmethod
    def from_dict(cls, data: dict, path: str = "config") -> "GlobalConfig":
        require_keys(data, cls, path)
        data = dict(data)
        if "split" in data:
            data["split"] = SplitSpec.from_dict(data["split"], f"{path}.split")
        if "synth" in data:
            data["synth"] = SynthConfig.from_dict(data["synth"], f"{path}.synth")
        if "train" in data:
            data["train"] = TrainConfig.from_dict(data["train"], f"{path}.train")
        if "eval" in data:
            data["eval"] = EvalOptions.from_dict(data["eval"], f"{path}.eval")
        return cls(**data)

    def resolved(self) -> "GlobalConfig":
        """Propagate the single global seed into every stage."""
        return replace(
            self,
            split=replace(self.split, seed=self.seed),
            synth=replace(self.synth, seed=self.seed),
            train=replace(self.train, seed=self.seed),
        )


def _apply_dotted(data: dict, path: str, value) -> None:
    keys = path.split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ValidationError(f"--set {path}: {key} is not a mapping")
    node[keys[-1]] = value


def load_config(args) -> GlobalConfig:
    """Merge: defaults <- config file <- --set overrides <- dedicated flags."""
    raw: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ValidationError(f"no such config file: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ValidationError(f"{path}: config must be a mapping")
        raw = loaded
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key.path=value, got {item!r}")
        key, _, value = item.partition("=")
        _apply_dotted(raw, key.strip(), yaml.safe_load(value))
    for flag, path in _FLAG_PATHS.items():
        value = getattr(args, flag, None)
        if value is not None:
            _apply_dotted(raw, path, value)
    if getattr(args, "no_counterfactual", False):
        _apply_dotted(raw, "train.counterfactual.enabled", False)
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    return GlobalConfig.from_dict(raw).resolved()


_FLAG_PATHS = {
    "source": "split.source_domain",
    "target": "split.target_domain",
    "target_fraction": "split.target_fraction",
    "docs_per_domain": "synth.docs_per_domain",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.optimizer.lr",
    "contrastive_weight": "train.loss.contrastive_weight",
    "temperature": "train.loss.temperature",
    "loss_variant": "train.loss.variant",
    "margin": "train.loss.margin",
    "mask_threshold": "train.counterfactual.mask_threshold",
    "max_mask_frac": "train.counterfactual.max_mask_frac",
    "min_count": "train.counterfactual.min_count",
    "copies": "train.counterfactual.copies",
    "generator": "train.counterfactual.generator.kind",
    "sampling": "train.counterfactual.generator.sampling",
    "n_features": "train.encoder.n_features",
    "d_hidden": "train.encoder.d_hidden",
    "d_embed": "train.encoder.d_embed",
    "n_seeds": "eval.n_seeds",
    "positive_label": "eval.positive_label",
}


class _Parser(argparse.ArgumentParser):
    # usage problems are validation errors: exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(1)


def _add_common(parser):
    parser.add_argument("--config", help="YAML config file (see configs/example.yaml)")
    parser.add_argument("--seed", type=int, help="single seed governing all randomness")
    parser.add_argument(
        "--set",
        action="append",
        metavar="KEY.PATH=VALUE",
        help="override any config field, e.g. --set train.loss.temperature=0.1",
    )
    parser.add_argument("--jobs", type=int, default=1,
                        help="worker cap for sweep/ablation cells")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stanceshift",
                     description="Cross-domain stance detection pipeline")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", parents=[], help="generate the synthetic two-domain benchmark")
    _add_common(p)
    p.add_argument("--out", required=True, help="corpus JSONL path")
    p.add_argument("--split-dir", help="also write train/test_source/test_target JSONL here")
    p.add_argument("--docs-per-domain", type=int, dest="docs_per_domain")
    p.add_argument("--target-fraction", type=float, dest="target_fraction")

    p = sub.add_parser("ingest", help="validate and normalize a JSONL corpus")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split-dir", help="also write split JSONL files")
    p.add_argument("--source", help="source domain (for --split-dir)")
    p.add_argument("--target", help="target domain (for --split-dir)")
    p.add_argument("--target-fraction", type=float, dest="target_fraction")
    p.add_argument("--keep-none", action="store_true",
                   help="keep NONE-labeled examples (dropped by default)")
    p.add_argument("--label-map", help="extra aliases, e.g. pro=FAVOR,anti=AGAINST")

    p = sub.add_parser("affinity", help="emit the n-gram affinity/mask score TSV")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--min-count", type=int, dest="min_count")

    p = sub.add_parser("corrupt", help="preview masked source-domain examples")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--mask-threshold", type=float, dest="mask_threshold")
    p.add_argument("--max-mask-frac", type=float, dest="max_mask_frac")
    p.add_argument("--min-count", type=int, dest="min_count")

    p = sub.add_parser("augment", help="write counterfactual examples for a training corpus")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--copies", type=int, dest="copies")
    p.add_argument("--generator", choices=["ngram_infiller", "lexicon_swapper"])
    p.add_argument("--sampling", choices=["argmax", "sample"])
    p.add_argument("--mask-threshold", type=float, dest="mask_threshold")
    p.add_argument("--max-mask-frac", type=float, dest="max_mask_frac")
    p.add_argument("--min-count", type=int, dest="min_count")

    p = sub.add_parser("train", help="run the two-stage training pipeline")
    _add_common(p)
    p.add_argument("--train", dest="train_path", required=True)
    p.add_argument("--test-source", dest="test_source")
    p.add_argument("--test-target", dest="test_target")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--manifest", required=True, help="run manifest JSON path")
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--contrastive-weight", type=float, dest="contrastive_weight")
    p.add_argument("--temperature", type=float)
    p.add_argument("--loss-variant", dest="loss_variant",
                   choices=["modified_supcon", "supcon_plain", "triplet"])
    p.add_argument("--mask-threshold", type=float, dest="mask_threshold")
    p.add_argument("--no-counterfactual", action="store_true")
    p.add_argument("--copies", type=int, dest="copies")
    p.add_argument("--n-features", type=int, dest="n_features")
    p.add_argument("--d-hidden", type=int, dest="d_hidden")
    p.add_argument("--d-embed", type=int, dest="d_embed")

    p = sub.add_parser("eval", help="evaluate a checkpoint on test corpora")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-source", dest="test_source", required=True)
    p.add_argument("--test-target", dest="test_target", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--positive-label", dest="positive_label")

    p = sub.add_parser("ablate", help="run the four-variant ablation harness")
    _add_common(p)
    p.add_argument("--corpus", required=True, help="full two-domain corpus JSONL")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", help="raw cells CSV path")
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--n-seeds", type=int, dest="n_seeds")

    p = sub.add_parser("sweep", help="run the loss-weight and target-fraction sweeps")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="raw cells CSV path")
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--n-seeds", type=int, dest="n_seeds")

    return parser


# ---------------------------------------------------------------------------
# Handlers
# ---------------------------------------------------------------------------


def _write_splits(corpus: Corpus, split: SplitSpec, out_dir) -> None:
    out_dir = Path(out_dir)
    train_set, test_source, test_target = make_split(corpus, split)
    write_jsonl(train_set, out_dir / "train.jsonl", split="train")
    write_jsonl(test_source, out_dir / "test_source.jsonl", split="test_source")
    write_jsonl(test_target, out_dir / "test_target.jsonl", split="test_target")


def _cmd_synth(args) -> int:
    config = load_config(args)
    corpus = synth_benchmark(config.synth)
    write_jsonl(corpus, args.out)
    if args.split_dir:
        _write_splits(corpus, config.split, args.split_dir)
    print(f"wrote {len(corpus)} examples to {args.out}")
    return 0


def _normalized_view(corpus: Corpus) -> Corpus:
    """Rewrite raw_text as the normalized token stream (re-ingestion is then
    the identity, by normalization idempotence)."""
    examples = tuple(replace(ex, raw_text=" ".join(ex.tokens)) for ex in corpus)
    return Corpus(examples=examples, domains=corpus.domains, label_set=corpus.label_set)


def _cmd_ingest(args) -> int:
    config = load_config(args)
    label_map = None
    if args.label_map:
        label_map = dict(pair.split("=", 1) for pair in args.label_map.split(","))
    corpus = load_jsonl(args.input, label_map=label_map)
    if not args.keep_none and NONE in corpus.label_set:
        dropped = sum(1 for ex in corpus if ex.stance == NONE)
        corpus = corpus.without_label(NONE)
        print(f"dropped {dropped} NONE-labeled examples (use --keep-none to retain)")
    corpus = _normalized_view(corpus)
    write_jsonl(corpus, args.out)
    if args.split_dir:
        _write_splits(corpus, config.split, args.split_dir)
    print(f"ingested {len(corpus)} examples into {args.out}")
    return 0


def _cmd_affinity(args) -> int:
    config = load_config(args)
    corpus = load_jsonl(args.input)
    table = build_table(corpus, config.train.counterfactual.min_count)
    rows = score_rows(table, config.split.source_domain, config.split.target_domain)
    write_score_tsv(rows, args.out)
    print(f"wrote {len(rows)} n-gram rows to {args.out}")
    return 0


def _cmd_corrupt(args) -> int:
    config = load_config(args)
    cfc = config.train.counterfactual
    corpus = load_jsonl(args.input)
    table = build_table(corpus, cfc.min_count)
    split = config.split
    n = 0
    with open(args.out, "w", encoding="utf-8") as fh:
        for ex in corpus:
            if ex.domain != split.source_domain:
                continue
            masked = corrupt(table, ex, split.source_domain, split.target_domain,
                             cfc.mask_threshold, cfc.max_mask_frac)
            rec = {
                "id": ex.id,
                "domain": ex.domain,
                "tokens": list(masked.tokens),
                "slots": [
                    {"position": s.position, "ngram": " ".join(s.ngram), "score": s.score}
                    for s in masked.slots
                ],
            }
            fh.write(json.dumps(rec, ensure_ascii=True) + "\n")
            n += 1
    print(f"wrote {n} masked previews to {args.out}")
    return 0


def _cmd_augment(args) -> int:
    config = load_config(args)
    cfc = config.train.counterfactual
    corpus = load_jsonl(args.input)
    split = config.split
    table = build_table(corpus, cfc.min_count)
    infiller = train_infiller(corpus, alpha=cfc.alpha, table=table if cfc.self_check else None,
                              mask_threshold_train=cfc.mask_threshold,
                              max_mask_frac=cfc.max_mask_frac, self_check=cfc.self_check)
    spec = replace(cfc.generator, seed=config.seed)
    generator = Generator(spec, infiller, table)
    out = counterfactual_pass(
        corpus, table, generator, split.source_domain, split.target_domain,
        copies=cfc.copies, mask_threshold=cfc.mask_threshold,
        max_mask_frac=cfc.max_mask_frac, seed=config.seed,
        orientation_size=cfc.orientation_size,
    )
    write_jsonl(out, args.out)
    print(f"wrote {len(out)} counterfactuals to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = load_config(args)
    train_corpus = load_jsonl(args.train_path)
    state, manifest = train(train_corpus, config.split, config.train)
    save_checkpoint(state, args.out)
    manifest.checkpoint_path = str(args.out)
    manifest.config = asdict_plain(config)
    if args.test_source and args.test_target:
        report = evaluate_model(
            state,
            load_jsonl(args.test_source),
            load_jsonl(args.test_target),
            config.eval.positive_label,
        )
        manifest.notes.append({"final_metrics": report.metrics,
                               "degradation": report.degradation})
    with open(args.manifest, "w", encoding="utf-8") as fh:
        fh.write(manifest.to_json() + "\n")
    last = manifest.epoch_curves[-1] if manifest.epoch_curves else {}
    print(f"trained {manifest.steps_total} steps; final losses {last}; "
          f"checkpoint {args.out}")
    return 0


def _cmd_eval(args) -> int:
    config = load_config(args)
    state = load_checkpoint(args.checkpoint)
    report = evaluate_model(
        state,
        load_jsonl(args.test_source),
        load_jsonl(args.test_target),
        config.eval.positive_label,
    )
    report.config = asdict_plain(config)
    report.created_at = datetime.now(timezone.utc).isoformat()
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    for name, metrics in report.metrics.items():
        print(f"{name}: accuracy={metrics['accuracy']:.4f} auc={metrics['auc']:.4f}")
    print(f"degradation: {report.degradation:.4f}")
    return 0


def _finish_report(report: EvalReport, config: GlobalConfig, args) -> None:
    report.config = asdict_plain(config)
    report.created_at = datetime.now(timezone.utc).isoformat()
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    if getattr(args, "csv", None):
        write_cells_csv(report, args.csv)


def _cmd_ablate(args) -> int:
    config = load_config(args)
    corpus = load_jsonl(args.corpus)
    report = run_ablations(corpus, config.split, config.train,
                           n_seeds=config.eval.n_seeds,
                           positive_label=config.eval.positive_label,
                           jobs=args.jobs)
    _finish_report(report, config, args)
    for row in report.ablations:
        print(f"{row['variant']}: target accuracy "
              f"{row['target_accuracy_mean']:.4f} +- {row['target_accuracy_sd']:.4f}")
    return 0


def _cmd_sweep(args) -> int:
    config = load_config(args)
    corpus = load_jsonl(args.corpus)
    report = run_sweeps(corpus, config.split, config.train,
                        n_seeds=config.eval.n_seeds,
                        contrastive_weights=config.eval.contrastive_weights,
                        target_fractions=config.eval.target_fractions,
                        positive_label=config.eval.positive_label,
                        jobs=args.jobs)
    _finish_report(report, config, args)
    print(f"swept {len(report.cells)} cells into {args.out}")
    return 0


_HANDLERS = {
    "synth": _cmd_synth,
    "ingest": _cmd_ingest,
    "affinity": _cmd_affinity,
    "corrupt": _cmd_corrupt,
    "augment": _cmd_augment,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "sweep": _cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse raises SystemExit(0) for --help
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _HANDLERS[args.command](args)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
