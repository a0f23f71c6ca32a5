"""Command-line entry point: label, featurize, train, eval, lasso, detect, mask, synth.

Logs go to stderr; command results (CHAIR summary, tables) go to stdout.
Exit codes: 0 success, 2 input/schema error, 3 degenerate data or undefined
metric, 4 internal error.
"""

import sys
import json
import time
import logging
import argparse
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd
from pydantic import ValidationError

from captionguard.core.config import PathsConfig, PipelineConfig, get_settings
from captionguard.core.errors import (
    CaptionGuardError, ConfigError, DimensionMismatchError, EmptyInputError, InputError, SpanMismatchError,
)
from captionguard.core.io import (
    atomic_write_text, config_digest, read_jsonl, write_csv, write_json, write_jsonl,
)
from captionguard.schemas.mention import Detection, MaskedCaption, ObjectMention
from captionguard.schemas.report import LassoDatasetResult, LassoReportFile
from captionguard.schemas.trace import FileHeader, SynthConfig
from captionguard.services import chair_label, eval_metrics, feature_bank, meta_learn, trace_store

logger = logging.getLogger(__name__)

MODEL_KINDS = {"lr": "logistic", "logistic": "logistic", "gb": "gboost", "gboost": "gboost"}
IDK = "[IDK]"


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _load_config(args: argparse.Namespace) -> PipelineConfig:
    """Config file first, explicit flags on top"""
    config = PipelineConfig.from_file(args.config)
    path_updates = {
        name: getattr(args, name)
        for name in PathsConfig.model_fields
        if getattr(args, name, None) is not None
    }
    updates: Dict[str, object] = {}
    if path_updates:
        updates["paths"] = config.paths.model_copy(update=path_updates)
    if args.seed is not None:
        updates["seed"] = args.seed

    classifier = config.classifier
    if getattr(args, "model_kind", None):
        classifier = classifier.model_copy(update={"kind": MODEL_KINDS[args.model_kind]})
    seed = updates.get("seed", config.seed)
    if seed is not None:
        classifier = classifier.model_copy(
            update={
                "logistic": classifier.logistic.model_copy(update={"random_state": seed}),
                "gboost": classifier.gboost.model_copy(update={"random_state": seed}),
            }
        )
    updates["classifier"] = classifier

    features = config.features
    if getattr(args, "extended", False):
        features = features.model_copy(update={"extended": True})
    if getattr(args, "decoding", None):
        features = features.model_copy(update={"decoding": args.decoding})
    updates["features"] = features

    split = config.split
    split_updates = {
        key: getattr(args, key) for key in ("n_splits", "train_fraction", "n_jobs")
        if getattr(args, key, None) is not None
    }
    if split_updates:
        split = split.model_copy(update=split_updates)
    updates["split"] = split
    if getattr(args, "recall_targets", None):
        updates["recall_targets"] = list(args.recall_targets)

    try:
        return PipelineConfig.model_validate({**config.model_dump(), **{
            key: value.model_dump() if hasattr(value, "model_dump") else value for key, value in updates.items()
        }})
    except ValidationError as e:
        raise ConfigError(f"invalid options: {e}") from e


def _digest(command: str, config: PipelineConfig, **extra) -> str:
    # Paths are excluded so reruns in another directory produce identical files.
    options = config.model_dump(mode="json", exclude={"paths"})
    options.update(extra)
    return config_digest(command, options)


def _synonyms(config: PipelineConfig):
    """Synonym map from the config, else the settings default"""
    return chair_label.load_synonym_map(config.paths.synonyms or get_settings().DEFAULT_SYNONYMS)


def _synonym_label(config: PipelineConfig) -> str:
    name = config.paths.synonyms or get_settings().DEFAULT_SYNONYMS
    return name if name in chair_label.BUILTIN_MAPS else "custom"


def _load_traces(config: PipelineConfig):
    """Validated traces; an empty file is an input error"""
    traces = trace_store.load_traces(config.require_path("traces"))
    if not traces:
        raise EmptyInputError(f"trace file {config.paths.traces} contains no traces")
    return traces


def _load_labels(path: Path, traces) -> Dict[str, List[ObjectMention]]:
    """Labeled mentions grouped by trace_id"""
    _, lines = read_jsonl(path)
    by_trace = {t.trace_id: t for t in traces}
    grouped: Dict[str, List[ObjectMention]] = {t.trace_id: [] for t in traces}
    for line_number, obj in lines:
        try:
            mention = ObjectMention.model_validate(obj)
        except ValidationError as e:
            first = e.errors()[0]
            raise InputError(f"{path} line {line_number}: {first['msg']} at {first['loc']}") from e
        if mention.trace_id not in by_trace:
            raise InputError(f"{path} line {line_number}: unknown trace_id '{mention.trace_id}'")
        grouped[mention.trace_id].append(mention)
    return grouped


def _single_dataset(config: PipelineConfig) -> feature_bank.FeatureDataset:
    """Load the one dataset the command works on"""
    paths = config.paths.dataset
    if not paths:
        raise ConfigError("missing path 'dataset' (--dataset or 'paths.dataset' in the config)")
    if len(paths) != 1:
        raise ConfigError("this command takes exactly one dataset")
    if not Path(paths[0]).exists():
        raise ConfigError(f"path 'dataset' does not exist: {paths[0]}")
    dataset = feature_bank.load_dataset(paths[0])
    if len(dataset) == 0:
        raise EmptyInputError(f"dataset {paths[0]} has no rows")
    return dataset


def _out(config: PipelineConfig) -> Path:
    return config.require_path("out", must_exist=False)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_label(config: PipelineConfig) -> int:
    """Extract and label object mentions; print CHAIR_i and CHAIR_s"""
    traces = _load_traces(config)
    grouped = chair_label.label_corpus(traces, _synonyms(config))
    mentions = [m for ms in grouped.values() for m in ms]
    digest = _digest("label", config, synonyms=_synonym_label(config))
    write_jsonl(_out(config), mentions, header=FileHeader(command="label", config_digest=digest))
    print(f"CHAIR_i {chair_label.chair_i(mentions):.3f}")
    print(f"CHAIR_s {chair_label.chair_s(grouped):.3f}")
    return 0


def cmd_featurize(config: PipelineConfig, summary_path: Optional[Path] = None) -> int:
    traces = _load_traces(config)
    if config.paths.labels is not None:
        grouped = _load_labels(config.require_path("labels"), traces)
    else:
        logger.info("No labels given; extracting unlabeled mentions")
        syn = _synonyms(config)
        grouped = {t.trace_id: chair_label.extract_mentions(t, syn) for t in traces}
    dataset = feature_bank.featurize_corpus(
        traces, grouped, extended=config.features.extended, decoding=config.features.decoding
    )
    digest = _digest("featurize", config, synonyms=_synonym_label(config))
    feature_bank.write_dataset(_out(config), dataset, digest)
    if summary_path is not None:
        summary = feature_bank.class_conditional_summary(dataset)
        write_csv(summary_path, summary, FileHeader(command="featurize", config_digest=digest))
    print(f"{len(dataset)} rows x {len(dataset.columns)} columns")
    return 0


def cmd_train(config: PipelineConfig, baseline: Optional[str] = None) -> int:
    config.require_seed()
    dataset = _single_dataset(config)
    digest = _digest("train", config, baseline=baseline)
    model = meta_learn.train_model(dataset, config.classifier, digest, baseline=baseline)
    meta_learn.save_model(_out(config), model)
    print(f"trained {model.kind.value} on {len(dataset)} rows")
    return 0


def table_path(report_path: Path) -> Path:
    """Sibling .txt file for the rendered table, never the report itself"""
    if report_path.suffix == ".txt":
        return report_path.with_name(f"{report_path.stem}.table.txt")
    return report_path.with_suffix(".txt")


def cmd_eval(config: PipelineConfig, variants: Sequence[str]) -> int:
    seed = config.require_seed()
    dataset = _single_dataset(config)
    digest = _digest("eval", config, variants=list(variants))
    report = eval_metrics.evaluate_variants(
        dataset,
        config.classifier,
        seed,
        digest,
        variants=variants,
        n_splits=config.split.n_splits,
        train_fraction=config.split.train_fraction,
        recall_targets=config.recall_targets,
        ece_bins=config.ece_bins,
        n_jobs=config.split.n_jobs,
    )
    out = _out(config)
    write_json(out, report)
    table = eval_metrics.render_report_table(report)
    atomic_write_text(table_path(out), table)
    print(table, end="")
    return 0


def cmd_lasso(config: PipelineConfig) -> int:
    if not config.paths.dataset:
        raise ConfigError("missing path 'dataset' (--dataset or 'paths.dataset' in the config)")
    results = []
    datasets = []
    for path in config.paths.dataset:
        dataset = feature_bank.load_dataset(path)
        lasso = meta_learn.lasso_path(dataset.X, dataset.y, dataset.columns)
        results.append(LassoDatasetResult(path=lasso, ranks=meta_learn.rank_features(lasso)))
        datasets.append(dataset)

    curve = []
    if config.seed is not None:
        curve = eval_metrics.auprc_by_feature_count(
            datasets[0], results[0].path, config.classifier, config.seed, config.split.train_fraction
        )
    else:
        logger.info("No seed given; skipping the AUPRC-vs-feature-count curve")

    report = LassoReportFile(
        config_digest=_digest("lasso", config),
        datasets=results,
        average_ranks=meta_learn.average_ranks([r.ranks for r in results]),
        auprc_by_feature_count=curve,
    )
    write_json(_out(config), report)
    table = pd.DataFrame(
        [{"feature": r.feature, "rank": r.rank, "selected": r.selected} for r in report.average_ranks]
    )
    print(table.to_string(index=False))
    return 0


def cmd_detect(config: PipelineConfig, threshold: Optional[float], recall_target: Optional[float]) -> int:
    """Score every mention of unlabeled traces; ground truth is never read"""
    if threshold is not None and recall_target is not None:
        raise ConfigError("use either --threshold or --recall-target, not both")
    traces = [t.without_ground_truth() for t in _load_traces(config)]
    model = meta_learn.load_model(config.require_path("model"))

    if recall_target is not None:
        if config.paths.validation is None:
            raise ConfigError("--recall-target needs a labeled --validation dataset")
        validation = feature_bank.load_dataset(config.require_path("validation"))
        scored = eval_metrics.ScoredSet(meta_learn.predict_proba(model, validation.X), validation.y)
        threshold = eval_metrics.threshold_for_recall(scored, recall_target)
        logger.info(f"Threshold {threshold:.6f} reaches recall {recall_target} on the validation set")
    elif threshold is None:
        threshold = model.threshold

    syn = _synonyms(config)
    grouped = {t.trace_id: chair_label.extract_mentions(t, syn) for t in traces}
    extended = feature_bank.CLIP_COLUMN in model.columns
    dataset = feature_bank.featurize_corpus(traces, grouped, extended=extended)
    if dataset.columns != model.columns:
        raise DimensionMismatchError(
            f"traces yield {len(dataset.columns)} feature columns but the model expects {len(model.columns)}"
        )
    probabilities = meta_learn.predict_proba(model, dataset.X)

    by_trace = {t.trace_id: t for t in traces}
    mentions = [m for t in traces for m in grouped[t.trace_id]]
    detections = [
        Detection(
            trace_id=m.trace_id,
            mention_index=m.mention_index,
            category=m.category,
            char_start=m.char_start,
            char_end=m.char_end,
            text=by_trace[m.trace_id].caption[m.char_start:m.char_end],
            probability=float(p),
            flagged=bool(p >= threshold),
        )
        for m, p in zip(mentions, probabilities)
    ]
    digest = _digest("detect", config, threshold=threshold, recall_target=recall_target)
    write_jsonl(_out(config), detections, header=FileHeader(command="detect", config_digest=digest))
    print(f"flagged {sum(d.flagged for d in detections)} of {len(detections)} mentions")
    return 0


def mask_caption(caption: str, detections: Sequence[Detection]) -> str:
    """Replace every flagged span with the [IDK] placeholder"""
    masked = caption
    for detection in sorted((d for d in detections if d.flagged), key=lambda d: d.char_start, reverse=True):
        if caption[detection.char_start:detection.char_end] != detection.text:
            raise SpanMismatchError(
                f"trace '{detection.trace_id}': span {detection.char_start}-{detection.char_end} "
                f"is not '{detection.text}'"
            )
        masked = masked[:detection.char_start] + IDK + masked[detection.char_end:]
    return masked


def cmd_mask(config: PipelineConfig) -> int:
    traces = _load_traces(config)
    _, lines = read_jsonl(config.require_path("detections"))
    by_trace: Dict[str, List[Detection]] = {t.trace_id: [] for t in traces}
    for line_number, obj in lines:
        try:
            detection = Detection.model_validate(obj)
        except ValidationError as e:
            first = e.errors()[0]
            raise InputError(f"detection on line {line_number}: {first['msg']} at {first['loc']}") from e
        if detection.trace_id not in by_trace:
            raise InputError(f"detection on line {line_number} references unknown trace '{detection.trace_id}'")
        by_trace[detection.trace_id].append(detection)

    masked = [
        MaskedCaption(
            trace_id=t.trace_id,
            masked_caption=mask_caption(t.caption, by_trace[t.trace_id]),
            num_masked=sum(d.flagged for d in by_trace[t.trace_id]),
        )
        for t in traces
    ]
    digest = _digest("mask", config)
    write_jsonl(_out(config), masked, header=FileHeader(command="mask", config_digest=digest))
    print(f"masked {sum(m.num_masked for m in masked)} mentions in {len(masked)} captions")
    return 0


def cmd_synth(config: PipelineConfig) -> int:
    synth_config = SynthConfig()
    if config.paths.synth is not None:
        path = config.require_path("synth")
        try:
            synth_config = SynthConfig.model_validate(json.loads(path.read_text(encoding="utf-8")))
        except (json.JSONDecodeError, ValidationError) as e:
            raise ConfigError(f"invalid synth config {path}: {e}") from e
    seed = config.seed if config.seed is not None else synth_config.seed
    if seed is None:
        raise ConfigError("a seed is required for synth (--seed or 'seed' in the synth config)")
    synth_config = synth_config.model_copy(update={"seed": seed})

    traces = trace_store.synthesize_traces(synth_config, seed)
    digest = config_digest("synth", synth_config.model_dump(mode="json"))
    header = FileHeader(command="synth", config_digest=digest, seed=seed)
    trace_store.write_traces(_out(config), traces, header=header)
    print(f"synthesized {len(traces)} traces (seed {seed})")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="PipelineConfig JSON file")
    common.add_argument("--seed", type=int, help="Random seed (required by train and eval)")
    common.add_argument("--out", type=Path, help="Output file")
    common.add_argument("--log-level", default=settings.LOG_LEVEL, help="Logging level")

    parser = argparse.ArgumentParser(
        prog=settings.APP_NAME, description="Object hallucination detection for generated image captions"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    label = commands.add_parser("label", parents=[common], help="Label mentions and print CHAIR")
    label.add_argument("--traces", type=Path)
    label.add_argument("--synonyms", help="Synonym map JSON file or 'bdd100k'")

    featurize = commands.add_parser("featurize", parents=[common], help="Build the feature dataset")
    featurize.add_argument("--traces", type=Path)
    featurize.add_argument("--labels", type=Path)
    featurize.add_argument("--synonyms")
    featurize.add_argument("--extended", action="store_true", help="Append the CLIP column")
    featurize.add_argument("--decoding", choices=["sampling", "beam"])
    featurize.add_argument("--summary", type=Path, help="Write class-conditional feature summary CSV")

    train = commands.add_parser("train", parents=[common], help="Fit a meta classifier on a dataset")
    train.add_argument("--dataset", type=Path, nargs=1)
    train.add_argument("--model", dest="model_kind", choices=sorted(MODEL_KINDS))
    train.add_argument("--feature", choices=list(meta_learn.BASELINE_COLUMNS), help="Train a single-column baseline")

    evaluate = commands.add_parser("eval", parents=[common], help="Repeated caption-level split evaluation")
    evaluate.add_argument("--dataset", type=Path, nargs=1)
    evaluate.add_argument("--model", dest="model_kind", choices=sorted(MODEL_KINDS))
    evaluate.add_argument("--variants", nargs="+", default=list(eval_metrics.VARIANTS),
                          choices=list(eval_metrics.VARIANTS))
    evaluate.add_argument("--n-splits", type=int)
    evaluate.add_argument("--train-fraction", type=float)
    evaluate.add_argument("--n-jobs", type=int)
    evaluate.add_argument("--recall-targets", type=float, nargs="+")

    lasso = commands.add_parser("lasso", parents=[common], help="LASSO path and feature ranks")
    lasso.add_argument("--dataset", type=Path, nargs="+")

    detect = commands.add_parser("detect", parents=[common], help="Flag hallucinated mentions")
    detect.add_argument("--traces", type=Path)
    detect.add_argument("--model", type=Path)
    detect.add_argument("--synonyms")
    detect.add_argument("--threshold", type=float)
    detect.add_argument("--recall-target", type=float)
    detect.add_argument("--validation", type=Path)

    mask = commands.add_parser("mask", parents=[common], help="Replace flagged mentions with [IDK]")
    mask.add_argument("--traces", type=Path)
    mask.add_argument("--detections", type=Path)

    synth = commands.add_parser("synth", parents=[common], help="Generate planted-signal traces")
    synth.add_argument("--synth", type=Path, help="SynthConfig JSON file")
    return parser


def run(args: argparse.Namespace) -> int:
    config = _load_config(args)
    if args.command == "label":
        return cmd_label(config)
    if args.command == "featurize":
        return cmd_featurize(config, args.summary)
    if args.command == "train":
        return cmd_train(config, baseline=args.feature)
    if args.command == "eval":
        return cmd_eval(config, args.variants)
    if args.command == "lasso":
        return cmd_lasso(config)
    if args.command == "detect":
        return cmd_detect(config, args.threshold, args.recall_target)
    if args.command == "mask":
        return cmd_mask(config)
    return cmd_synth(config)


def main(argv: Optional[Sequence[str]] = None) -> int:
    settings = get_settings()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format=settings.LOG_FORMAT, stream=sys.stderr, force=True)

    started = time.perf_counter()
    try:
        code = run(args)
    except CaptionGuardError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"{args.command} failed with an internal error")
        print(f"error: internal: {e}", file=sys.stderr)
        return 4
    logger.info(f"{args.command} finished in {time.perf_counter() - started:.2f}s")
    return code


if __name__ == "__main__":
    sys.exit(main())
