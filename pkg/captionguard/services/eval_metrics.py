import math
import hashlib
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.metrics import average_precision_score, roc_auc_score

from captionguard.core.errors import DegenerateDataError, EmptyInputError, InputError, UndefinedMetricError
from captionguard.schemas.model import ClassifierConfig, LassoPath
from captionguard.schemas.report import (
    EvalReport, EvalReportFile, FeatureCountAuprc, MetricSummary, OperatingPoint, SplitMetrics,
)
from captionguard.services.feature_bank import FeatureDataset
from captionguard.services import meta_learn

logger = logging.getLogger(__name__)

MAX_REDRAWS = 100
RECALL_SLACK = 1e-9
SPLIT_METRICS = ["acc", "auroc", "auprc", "ece", "precision", "recall", "fpr"]
OPERATING_METRICS = ["threshold", "precision", "recall", "fpr"]
TABLE_METRICS = ["acc", "auroc", "auprc", "ece"]

# Evaluation variant -> baseline column (None = full feature set)
VARIANTS: Dict[str, Optional[str]] = {"L": "L", "E": "E", "ours": None}


@dataclass(frozen=True)
class ScoredSet:
    """Predicted probabilities of label 1 and the binary labels they score"""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        labels = np.asarray(self.labels).ravel()
        if scores.size == 0:
            raise EmptyInputError("scored set is empty")
        if scores.size != labels.size:
            raise InputError(f"{scores.size} scores but {labels.size} labels")
        if np.any((scores < 0) | (scores > 1)) or not np.all(np.isfinite(scores)):
            raise InputError("scores must lie in [0, 1]")
        if not np.all(np.isin(labels, (0, 1))):
            raise InputError("labels must be 0 or 1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def num_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def num_negative(self) -> int:
        return int(self.labels.size - self.labels.sum())


def accuracy(scored: ScoredSet, threshold: float = 0.5) -> float:
    """Fraction of rows whose thresholded score equals the label"""
    return float(np.mean((scored.scores >= threshold).astype(np.int64) == scored.labels))


def auroc(scored: ScoredSet) -> float:
    """Area under the ROC curve (ties count one half)"""
    if scored.num_positive == 0 or scored.num_negative == 0:
        raise UndefinedMetricError("AUROC is undefined when only one class is present")
    return float(roc_auc_score(scored.labels, scored.scores))


def auprc(scored: ScoredSet) -> float:
    """Average precision with tied scores grouped into one step"""
    if scored.num_positive == 0:
        raise UndefinedMetricError("AUPRC is undefined without positives")
    return float(average_precision_score(scored.labels, scored.scores))


def ece(scored: ScoredSet, num_bins: int = 10) -> float:
    """Expected calibration error over equal-width confidence bins"""
    if num_bins < 1:
        raise InputError("ECE needs at least one bin")
    predicted = (scored.scores >= 0.5).astype(np.int64)
    confidence = np.where(predicted == 1, scored.scores, 1.0 - scored.scores)
    correct = (predicted == scored.labels).astype(np.float64)
    bins = np.minimum((confidence * num_bins).astype(np.int64), num_bins - 1)

    counts = np.bincount(bins, minlength=num_bins)
    conf_sum = np.bincount(bins, weights=confidence, minlength=num_bins)
    correct_sum = np.bincount(bins, weights=correct, minlength=num_bins)
    occupied = counts > 0
    gaps = np.abs(conf_sum[occupied] - correct_sum[occupied]) / counts[occupied]
    return float(np.sum(counts[occupied] * gaps) / scored.scores.size)


def pr_at_threshold(scored: ScoredSet, threshold: float) -> Tuple[float, float, float]:
    """(precision, recall, false positive rate) with label 1 as the positive class"""
    flagged = scored.scores >= threshold
    positive = scored.labels == 1
    tp = int(np.sum(flagged & positive))
    fp = int(np.sum(flagged & ~positive))
    if scored.num_positive == 0:
        raise UndefinedMetricError("recall is undefined without positives")
    if scored.num_negative == 0:
        raise UndefinedMetricError("false positive rate is undefined without negatives")
    if tp + fp == 0:
        raise UndefinedMetricError(f"precision is undefined: nothing flagged at threshold {threshold}")
    return tp / (tp + fp), tp / scored.num_positive, fp / scored.num_negative


def threshold_for_recall(scored: ScoredSet, target: float) -> float:
    """Largest threshold whose recall on this set reaches the target"""
    if not 0.0 < target <= 1.0:
        raise InputError(f"recall target {target} is unattainable; use a value in (0, 1]")
    if scored.num_positive == 0:
        raise UndefinedMetricError("cannot target recall without positives")
    positives = np.sort(scored.scores[scored.labels == 1])[::-1]
    k = max(math.ceil(target * positives.size - RECALL_SLACK), 1)
    return float(positives[k - 1])


def operating_point(scored: ScoredSet, target: float, selection: Optional[ScoredSet] = None) -> OperatingPoint:
    """Metrics on `scored` at the threshold selected for `target` on `selection` (default: the same set)"""
    threshold = threshold_for_recall(selection or scored, target)
    precision, recall, fpr = pr_at_threshold(scored, threshold)
    return OperatingPoint(target_recall=target, threshold=threshold, precision=precision, recall=recall, fpr=fpr)


# ---------------------------------------------------------------------------
# Caption-level split protocol
# ---------------------------------------------------------------------------

def _trace_hash(trace_id: str) -> str:
    return hashlib.sha256(trace_id.encode("utf-8")).hexdigest()


def split_rows(dataset: FeatureDataset, train_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Assign whole captions to train or validation; row order independent of file order"""
    ids = sorted(set(dataset.trace_ids), key=_trace_hash)
    if len(ids) < 2:
        raise DegenerateDataError("at least two captions are needed to split")
    permuted = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    cut = min(max(int(round(train_fraction * len(ids))), 1), len(ids) - 1)
    train_ids = set(permuted[:cut])

    trace_ids = dataset.trace_ids
    hashes = np.array([_trace_hash(t) for t in trace_ids])
    mention_index = dataset.frame["mention_index"].to_numpy()
    order = np.lexsort((mention_index, hashes))
    in_train = np.array([trace_ids[i] in train_ids for i in order], dtype=bool)
    return order[in_train].astype(np.int64), order[~in_train].astype(np.int64)


def _draw_splits(
    dataset: FeatureDataset, n_splits: int, train_fraction: float, base_seed: int
) -> List[Tuple[int, np.ndarray, np.ndarray]]:
    y = dataset.y
    if len(np.unique(y)) < 2:
        raise DegenerateDataError("dataset has a single class")
    draws = []
    seed = base_seed
    redraws = 0
    while len(draws) < n_splits:
        train, validation = split_rows(dataset, train_fraction, seed)
        if len(np.unique(y[train])) < 2 or len(np.unique(y[validation])) < 2:
            redraws += 1
            logger.warning(f"Split with seed {seed} has a single-class side; redrawing with seed {seed + 1}")
            if redraws > MAX_REDRAWS:
                raise DegenerateDataError(f"no two-class split found after {MAX_REDRAWS} redraws")
        else:
            draws.append((seed, train, validation))
        seed += 1
    return draws


def _score_split(
    X: np.ndarray,
    y: np.ndarray,
    columns: List[str],
    seed: int,
    train: np.ndarray,
    validation: np.ndarray,
    config: ClassifierConfig,
    baseline: Optional[str],
    recall_targets: Sequence[float],
    ece_bins: int,
) -> SplitMetrics:
    if baseline is None:
        model = meta_learn.fit_meta_model(X[train], y[train], columns, config, digest="")
    else:
        model = meta_learn.train_baseline(X[train], y[train], columns, baseline, config)
    scored = ScoredSet(meta_learn.predict_proba(model, X[validation]), y[validation])

    try:
        precision, recall, fpr = pr_at_threshold(scored, config.threshold)
    except UndefinedMetricError:
        logger.warning(f"Split seed {seed}: nothing flagged at threshold {config.threshold}; precision recorded as null")
        precision, recall, fpr = None, 0.0, 0.0

    return SplitMetrics(
        seed=seed,
        num_train=len(train),
        num_validation=len(validation),
        acc=accuracy(scored, config.threshold),
        auroc=auroc(scored),
        auprc=auprc(scored),
        ece=ece(scored, ece_bins),
        precision=precision,
        recall=recall,
        fpr=fpr,
        threshold=config.threshold,
        operating_points=[operating_point(scored, t) for t in recall_targets],
    )


def summarize(values: Sequence[float]) -> MetricSummary:
    """Mean and population std over splits"""
    if not values:
        return MetricSummary(mean=float("nan"), std=float("nan"), count=0)
    arr = np.asarray(values, dtype=np.float64)
    return MetricSummary(mean=float(arr.mean()), std=float(arr.std(ddof=0)), count=int(arr.size))


def aggregate(splits: Sequence[SplitMetrics]) -> Dict[str, MetricSummary]:
    """Per-metric summary over splits; undefined precision values are skipped"""
    return {
        name: summarize([getattr(s, name) for s in splits if getattr(s, name) is not None])
        for name in SPLIT_METRICS
    }


def aggregate_operating_points(splits: Sequence[SplitMetrics]) -> Dict[str, Dict[str, MetricSummary]]:
    """Operating-point summaries keyed by recall target"""
    by_target: Dict[str, List[OperatingPoint]] = {}
    for split in splits:
        for point in split.operating_points:
            by_target.setdefault(f"{point.target_recall:g}", []).append(point)
    return {
        target: {name: summarize([getattr(p, name) for p in points]) for name in OPERATING_METRICS}
        for target, points in by_target.items()
    }


def run_split_protocol(
    dataset: FeatureDataset,
    config: ClassifierConfig,
    base_seed: int,
    n_splits: int = 10,
    train_fraction: float = 0.8,
    recall_targets: Sequence[float] = (),
    ece_bins: int = 10,
    baseline: Optional[str] = None,
    variant: str = "ours",
    n_jobs: int = 1,
) -> EvalReport:
    """Train and score on repeated caption-level train/validation splits"""
    draws = _draw_splits(dataset, n_splits, train_fraction, base_seed)
    X, y, columns = dataset.X, dataset.y, dataset.columns
    logger.info(f"Evaluating variant '{variant}' ({config.kind}) on {len(draws)} splits")
    splits = Parallel(n_jobs=n_jobs)(
        delayed(_score_split)(X, y, columns, seed, train, validation, config, baseline, recall_targets, ece_bins)
        for seed, train, validation in draws
    )
    return EvalReport(
        variant=variant,
        model_kind=config.kind if baseline is None else f"{config.kind}:{baseline}",
        splits=list(splits),
        aggregate=aggregate(splits),
        operating_points=aggregate_operating_points(splits),
        seeds=[seed for seed, _, _ in draws],
    )


def evaluate_variants(
    dataset: FeatureDataset,
    config: ClassifierConfig,
    base_seed: int,
    digest: str,
    variants: Sequence[str] = tuple(VARIANTS),
    **protocol,
) -> EvalReportFile:
    """Run the split protocol for each variant on the same seeds"""
    reports = {}
    for name in variants:
        if name not in VARIANTS:
            raise InputError(f"unknown evaluation variant '{name}' (choose from {', '.join(VARIANTS)})")
        reports[name] = run_split_protocol(
            dataset, config, base_seed, baseline=VARIANTS[name], variant=name, **protocol
        )
    return EvalReportFile(config_digest=digest, variants=reports)


def render_report_table(report: EvalReportFile) -> str:
    """Aligned 'mean (±std)' table in percent, one row per variant"""
    rows = {}
    for name, variant in report.variants.items():
        rows[name] = {
            metric.upper(): f"{100 * variant.aggregate[metric].mean:.2f} (±{100 * variant.aggregate[metric].std:.2f})"
            for metric in TABLE_METRICS
        }
    table = pd.DataFrame.from_dict(rows, orient="index")
    table.index.name = "variant"
    lines = [table.to_string(), "std: population std over splits"]
    for name, variant in report.variants.items():
        for target, summary in variant.operating_points.items():
            lines.append(
                f"{name} @ recall {target}: precision {100 * summary['precision'].mean:.2f}, "
                f"recall {100 * summary['recall'].mean:.2f}, fpr {100 * summary['fpr'].mean:.2f}"
            )
    return "\n".join(lines) + "\n"


def auprc_by_feature_count(
    dataset: FeatureDataset,
    path: LassoPath,
    config: ClassifierConfig,
    seed: int,
    train_fraction: float = 0.8,
) -> List[FeatureCountAuprc]:
    """Validation AUPRC when training on the first k pseudo-features in LASSO entry order"""
    if path.columns != dataset.columns:
        raise InputError("LASSO path columns do not match the dataset")
    (_, train, validation), = _draw_splits(dataset, 1, train_fraction, seed)
    X, y = dataset.X, dataset.y
    groups = meta_learn.selection_order(path)
    points = []
    chosen: List[int] = []
    for k, group in enumerate(groups, start=1):
        chosen.extend(group)
        columns = [dataset.columns[j] for j in chosen]
        model = meta_learn.fit_meta_model(X[train][:, chosen], y[train], columns, config, digest="")
        scored = ScoredSet(meta_learn.predict_proba(model, X[validation][:, chosen]), y[validation])
        points.append(FeatureCountAuprc(num_features=k, features=columns, auprc=auprc(scored)))
    logger.info(f"Computed AUPRC for 1..{len(points)} LASSO-selected features")
    return points
