import math
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from captionguard.core.errors import (
    DimensionMismatchError, EmptyInputError, InputError, InvariantViolation,
    MissingFeatureError, TraceSchemaError,
)
from captionguard.core.io import read_jsonl, write_jsonl
from captionguard.schemas.mention import ObjectMention
from captionguard.schemas.trace import FileHeader, GenerationTrace, StepStats

logger = logging.getLogger(__name__)

TAIL_COLUMNS = ["L", "C", "S", "V", "E", "R", "M", "D"]
CLIP_COLUMN = "CLIP"
META_COLUMNS = ["trace_id", "mention_index", "label"]


def column_names(num_heads: int, extended: bool = False) -> List[str]:
    """Canonical column order: P, N, A0..A{G-1}, L, C, S, V, E, R, M, D[, CLIP]"""
    columns = ["P", "N", *[f"A{g}" for g in range(num_heads)], *TAIL_COLUMNS]
    if extended:
        columns.append(CLIP_COLUMN)
    return columns


def pseudo_feature(column: str) -> str:
    """Attention heads collapse into the single pseudo-feature 'A'"""
    return "A" if column[0] == "A" and column[1:].isdigit() else column


class FeatureVector(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    trace_id: str
    mention_index: int = Field(..., ge=0)
    label: Optional[int] = Field(None, ge=0, le=1)
    values: List[float]


def _start_stats(mention: ObjectMention, trace: GenerationTrace) -> StepStats:
    return trace.tokens[mention.start_token].stats


def relative_position(mention: ObjectMention, trace: GenerationTrace) -> float:
    """Start token position over caption length, in [0, 1)"""
    return mention.start_token / len(trace.tokens)


def absolute_occurrence(mention: ObjectMention, mentions: Sequence[ObjectMention]) -> int:
    """How often the mention's category appears in the caption"""
    return sum(1 for other in mentions if other.category == mention.category)


def attention_means(mention: ObjectMention, trace: GenerationTrace) -> List[float]:
    """Per-head mean absolute image attention at the start token"""
    return list(trace.tokens[mention.start_token].attn_img_mean_abs)


def log_probability(mention: ObjectMention, trace: GenerationTrace) -> float:
    """Sum of chosen-token log probabilities over the mention span"""
    return math.fsum(t.stats.logp_chosen for t in trace.tokens[mention.start_token:mention.end_token + 1])


def cumulated_log_probability(mention: ObjectMention, trace: GenerationTrace) -> float:
    """Sum of chosen-token log probabilities from caption start to mention end"""
    return math.fsum(t.stats.logp_chosen for t in trace.tokens[:mention.end_token + 1])


def sequence_score(mention: ObjectMention, trace: GenerationTrace) -> float:
    """Cumulated log probability under the trace's length penalty"""
    # A mention ending at token 0 uses a denominator of 1.
    denominator = mention.end_token ** trace.length_penalty if mention.end_token > 0 else 1.0
    return cumulated_log_probability(mention, trace) / denominator


def vocab_variance(mention: ObjectMention, trace: GenerationTrace) -> float:
    """Variance of the log-probability vector at the start token"""
    return _start_stats(mention, trace).logp_var


def normalized_entropy(mention: ObjectMention, trace: GenerationTrace) -> float:
    """Start-token entropy over log of the vocabulary size, capped at 1"""
    stats = _start_stats(mention, trace)
    return min(stats.entropy_nats / math.log(stats.vocab_size), 1.0)


def variation_ratio(mention: ObjectMention, trace: GenerationTrace) -> float:
    """One minus the top probability at the start token"""
    return 1.0 - _start_stats(mention, trace).p_max


def probability_margin(mention: ObjectMention, trace: GenerationTrace) -> float:
    """One minus the gap between the two most likely tokens"""
    stats = _start_stats(mention, trace)
    return 1.0 - stats.p_max + stats.p_second


def probability_difference(mention: ObjectMention, trace: GenerationTrace) -> float:
    """Log-probability gap between the argmax and the chosen token"""
    stats = _start_stats(mention, trace)
    return max(stats.logp_argmax - stats.logp_chosen, 0.0)


def clip_feature(mention: ObjectMention, trace: GenerationTrace) -> float:
    """Image-text similarity of the mention's category, in [0, 100]"""
    if trace.clip_scores is None:
        raise MissingFeatureError(f"trace '{trace.trace_id}' has no clip_scores; the extended set needs them")
    if mention.category not in trace.clip_scores:
        raise MissingFeatureError(f"trace '{trace.trace_id}' has no clip score for '{mention.category}'")
    score = trace.clip_scores[mention.category]
    if not 0.0 <= score <= 100.0:
        raise InputError(f"trace '{trace.trace_id}': clip score {score} outside [0, 100]")
    return score


def _check_ranges(values: List[float], num_heads: int, trace_id: str) -> None:
    named = dict(zip(column_names(num_heads, len(values) > 10 + num_heads), values))
    violations = []
    if not 0.0 <= named["P"] < 1.0:
        violations.append("P")
    if named["N"] < 1:
        violations.append("N")
    if not 0.0 <= named["E"] <= 1.0:
        violations.append("E")
    if not 0.0 <= named["R"] < 1.0:
        violations.append("R")
    if not 0.0 <= named["M"] < 2.0:
        violations.append("M")
    if named["V"] < 0 or named["D"] < 0 or named["L"] > 0 or named["C"] > 0:
        violations.append("V/D/L/C")
    if any(named[f"A{g}"] < 0 for g in range(num_heads)):
        violations.append("A")
    if not all(math.isfinite(v) for v in values):
        violations.append("non-finite")
    if violations:
        raise InvariantViolation(f"trace '{trace_id}': feature range violated for {', '.join(violations)}")


def build_feature_vector(
    mention: ObjectMention,
    trace: GenerationTrace,
    mentions: Sequence[ObjectMention],
    extended: bool = False,
) -> FeatureVector:
    """Assemble the feature vector of one mention in canonical column order"""
    if mention.end_token > trace.last_index:
        raise DimensionMismatchError(
            f"trace '{trace.trace_id}': mention {mention.mention_index} ends at token {mention.end_token} "
            f"but the trace has {len(trace.tokens)} tokens"
        )
    values = [
        relative_position(mention, trace),
        float(absolute_occurrence(mention, mentions)),
        *attention_means(mention, trace),
        log_probability(mention, trace),
        cumulated_log_probability(mention, trace),
        sequence_score(mention, trace),
        vocab_variance(mention, trace),
        normalized_entropy(mention, trace),
        variation_ratio(mention, trace),
        probability_margin(mention, trace),
        probability_difference(mention, trace),
    ]
    if extended:
        values.append(clip_feature(mention, trace))
    _check_ranges(values, trace.num_heads, trace.trace_id)
    return FeatureVector(
        trace_id=trace.trace_id,
        mention_index=mention.mention_index,
        label=mention.label,
        values=values,
    )


@dataclass(frozen=True)
class FeatureDataset:
    """Feature rows of a corpus: one row per mention, columns in canonical order"""

    num_heads: int
    extended: bool
    frame: pd.DataFrame

    @property
    def columns(self) -> List[str]:
        return column_names(self.num_heads, self.extended)

    @property
    def X(self) -> np.ndarray:
        return self.frame[self.columns].to_numpy(dtype=np.float64)

    @property
    def y(self) -> np.ndarray:
        if self.frame["label"].isna().any():
            raise InputError("dataset contains unlabeled rows")
        return self.frame["label"].to_numpy(dtype=np.int64)

    @property
    def trace_ids(self) -> np.ndarray:
        return self.frame["trace_id"].to_numpy(dtype=object)

    def __len__(self) -> int:
        return len(self.frame)

    def column_index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError as e:
            raise InputError(f"unknown feature column '{name}'") from e

    def take(self, rows: Sequence[int]) -> "FeatureDataset":
        return FeatureDataset(self.num_heads, self.extended, self.frame.iloc[list(rows)].reset_index(drop=True))

    @classmethod
    def from_vectors(cls, vectors: Sequence[FeatureVector], num_heads: int, extended: bool) -> "FeatureDataset":
        columns = column_names(num_heads, extended)
        for vector in vectors:
            if len(vector.values) != len(columns):
                raise DimensionMismatchError(
                    f"row ({vector.trace_id}, {vector.mention_index}) has {len(vector.values)} values, "
                    f"expected {len(columns)}"
                )
        frame = pd.DataFrame(
            {
                "trace_id": pd.Series([v.trace_id for v in vectors], dtype=object),
                "mention_index": pd.Series([v.mention_index for v in vectors], dtype=np.int64),
                "label": pd.Series([v.label for v in vectors], dtype="Int64"),
            }
        )
        values = np.array([v.values for v in vectors], dtype=np.float64).reshape(len(vectors), len(columns))
        frame = pd.concat([frame, pd.DataFrame(values, columns=columns)], axis=1)
        return cls(num_heads, extended, frame)

    def to_vectors(self) -> List[FeatureVector]:
        X = self.X
        labels = self.frame["label"]
        return [
            FeatureVector(
                trace_id=str(self.frame["trace_id"].iat[i]),
                mention_index=int(self.frame["mention_index"].iat[i]),
                label=None if pd.isna(labels.iat[i]) else int(labels.iat[i]),
                values=[float(v) for v in X[i]],
            )
            for i in range(len(self.frame))
        ]


def featurize_corpus(
    traces: Sequence[GenerationTrace],
    grouped: Mapping[str, Sequence[ObjectMention]],
    extended: bool = False,
    decoding: Optional[str] = None,
) -> FeatureDataset:
    """Build the dataset for every mention of every trace, in trace order"""
    selected = [t for t in traces if decoding is None or t.decoding.value == decoding]
    if not selected:
        raise EmptyInputError("no traces to featurize")
    heads = {t.num_heads for t in selected}
    if len(heads) != 1:
        raise DimensionMismatchError(f"traces mix attention head counts {sorted(heads)}")
    num_heads = heads.pop()

    vectors = []
    for trace in selected:
        mentions = list(grouped.get(trace.trace_id, []))
        for mention in mentions:
            vectors.append(build_feature_vector(mention, trace, mentions, extended))
    logger.info(f"Built {len(vectors)} feature vectors with {len(column_names(num_heads, extended))} columns")
    return FeatureDataset.from_vectors(vectors, num_heads, extended)


def dataset_header(dataset: FeatureDataset, digest: str, command: str = "featurize") -> FileHeader:
    return FileHeader(
        command=command,
        config_digest=digest,
        num_heads=dataset.num_heads,
        extended=dataset.extended,
        columns=dataset.columns,
    )


def write_dataset(path: Path, dataset: FeatureDataset, digest: str) -> int:
    return write_jsonl(path, dataset.to_vectors(), header=dataset_header(dataset, digest))


def load_dataset(path: Path) -> FeatureDataset:
    header, lines = read_jsonl(path)
    if header is None:
        raise InputError(f"{path}: feature dataset needs a header line")
    extras = header.model_extra or {}
    try:
        num_heads = int(extras["num_heads"])
        extended = bool(extras["extended"])
        columns = list(extras["columns"])
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"{path}: header lacks num_heads/extended/columns") from e
    if columns != column_names(num_heads, extended):
        raise InputError(f"{path}: header columns are not in canonical order for G={num_heads}")

    vectors = []
    for line_number, obj in lines:
        try:
            vectors.append(FeatureVector.model_validate(obj))
        except ValidationError as e:
            first = e.errors()[0]
            raise TraceSchemaError(line_number, ".".join(str(p) for p in first["loc"]), first["msg"]) from e
    dataset = FeatureDataset.from_vectors(vectors, num_heads, extended)
    logger.info(f"Loaded {len(dataset)} rows from {path}")
    return dataset


def class_conditional_summary(dataset: FeatureDataset) -> pd.DataFrame:
    """Per feature and label: mean, std, median and count (plot-ready)"""
    frame = dataset.frame.dropna(subset=["label"])
    if frame.empty:
        raise EmptyInputError("no labeled rows to summarize")
    long = frame.melt(id_vars=["label"], value_vars=dataset.columns, var_name="feature")
    summary = (
        long.groupby(["feature", "label"], sort=False)["value"]
        .agg(["mean", "std", "median", "count"])
        .reset_index()
    )
    summary["label"] = summary["label"].astype(int)
    return summary
