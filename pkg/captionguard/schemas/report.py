from pydantic import BaseModel, ConfigDict, Field
from typing import Dict, List, Literal, Optional

from captionguard.schemas.model import FeatureRank, LassoPath
from captionguard.schemas.trace import SCHEMA_VERSION


class OperatingPoint(BaseModel):
    """Precision/recall/FPR at a threshold chosen to reach a recall target"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    target_recall: float
    threshold: float
    precision: float
    recall: float
    fpr: float


class SplitMetrics(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int
    num_train: int
    num_validation: int
    acc: float
    auroc: float
    auprc: float
    ece: float
    precision: Optional[float] = Field(None, description="Null when nothing is flagged at the threshold")
    recall: float
    fpr: float
    threshold: float
    operating_points: List[OperatingPoint] = Field(default_factory=list)


class MetricSummary(BaseModel):
    """Mean and population standard deviation over splits"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    mean: float
    std: float
    count: int


class EvalReport(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    variant: str
    model_kind: str
    splits: List[SplitMetrics]
    aggregate: Dict[str, MetricSummary]
    operating_points: Dict[str, Dict[str, MetricSummary]] = Field(
        default_factory=dict, description="recall target -> metric -> summary"
    )
    seeds: List[int]
    std_kind: Literal["split"] = "split"


class EvalReportFile(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    schema_version: Literal[1] = SCHEMA_VERSION
    command: str = "eval"
    config_digest: str
    variants: Dict[str, EvalReport]


class FeatureCountAuprc(BaseModel):
    """Validation AUPRC of a classifier restricted to the first k LASSO-selected features"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    num_features: int = Field(..., ge=1)
    features: List[str]
    auprc: float


class LassoDatasetResult(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    path: LassoPath
    ranks: List[FeatureRank]


class LassoReportFile(BaseModel):
    """LASSO paths and rank tables of one or more datasets, plus their average ranks"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    schema_version: Literal[1] = SCHEMA_VERSION
    command: str = "lasso"
    config_digest: str
    datasets: List[LassoDatasetResult]
    average_ranks: List[FeatureRank]
    auprc_by_feature_count: List[FeatureCountAuprc] = Field(default_factory=list)
