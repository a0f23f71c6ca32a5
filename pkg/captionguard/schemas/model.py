from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import List, Literal, Optional, Union
from enum import Enum

from captionguard.schemas.trace import SCHEMA_VERSION


class ModelKind(str, Enum):
    LOGISTIC = "logistic"
    GBOOST = "gboost"
    SINGLE_FEATURE_BASELINE = "single_feature_baseline"


class LogisticConfig(BaseModel):
    """Logistic regression settings (saga solver, L2 penalty)"""

    model_config = ConfigDict(extra="forbid")

    C: float = Field(default=1.0, gt=0.0, description="Inverse L2 strength in standardized space")
    solver: Literal["saga"] = "saga"
    max_iter: int = Field(default=1000, ge=1)
    tol: float = Field(default=1e-3, gt=0.0)
    random_state: int = 0
    class_weight: Literal[None] = None


class GBoostConfig(BaseModel):
    """Gradient boosting settings (exact greedy splits, no subsampling)"""

    model_config = ConfigDict(extra="forbid")

    n_estimators: int = Field(default=100, ge=0)
    max_depth: int = Field(default=3, ge=1)
    learning_rate: float = Field(default=0.1, gt=0.0)
    subsample: Literal[1.0] = 1.0
    random_state: int = 0


class ClassifierConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["logistic", "gboost"] = "logistic"
    logistic: LogisticConfig = Field(default_factory=LogisticConfig)
    gboost: GBoostConfig = Field(default_factory=GBoostConfig)
    threshold: float = Field(default=0.5, gt=0.0, lt=1.0)


class Standardizer(BaseModel):
    """Per-column training statistics; constant columns map to 0"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    mean: List[float]
    std: List[float]
    constant: List[bool]

    @model_validator(mode="after")
    def check_lengths(self) -> "Standardizer":
        if not (len(self.mean) == len(self.std) == len(self.constant)):
            raise ValueError("mean, std and constant must have equal length")
        return self

    @property
    def num_columns(self) -> int:
        return len(self.mean)


class LogisticParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["logistic"] = "logistic"
    weights: List[float]
    intercept: float
    n_iter: int = 0


class TreeParams(BaseModel):
    """One regression tree as flat node arrays; leaves have left == right == -1"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    feature: List[int]
    threshold: List[float]
    left: List[int]
    right: List[int]
    value: List[float]


class GBoostParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["gboost"] = "gboost"
    learning_rate: float
    init_raw: float = Field(..., description="Prior log-odds")
    trees: List[TreeParams]


class BaselineParams(BaseModel):
    """A one-dimensional classifier reading a single column of the feature vector"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["single_feature_baseline"] = "single_feature_baseline"
    column: int = Field(..., ge=0)
    column_name: str
    inner: Union[LogisticParams, GBoostParams] = Field(..., discriminator="kind")


class MetaModel(BaseModel):
    """A trained meta classifier with its standardizer and decision threshold"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    schema_version: Literal[1] = SCHEMA_VERSION
    kind: ModelKind
    columns: List[str]
    standardizer: Standardizer
    parameters: Union[LogisticParams, GBoostParams, BaselineParams] = Field(..., discriminator="kind")
    threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    config: ClassifierConfig
    config_digest: str
    notes: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_dimensions(self) -> "MetaModel":
        if self.kind.value != self.parameters.kind:
            raise ValueError(f"kind {self.kind.value} does not match parameters {self.parameters.kind}")
        if isinstance(self.parameters, BaselineParams):
            if self.standardizer.num_columns != 1:
                raise ValueError("baseline standardizer must have exactly one column")
            if self.parameters.column >= len(self.columns):
                raise ValueError("baseline column index out of range")
        else:
            if self.standardizer.num_columns != len(self.columns):
                raise ValueError("standardizer width does not match columns")
            if isinstance(self.parameters, LogisticParams) and len(self.parameters.weights) != len(self.columns):
                raise ValueError("weight count does not match columns")
        return self

    @property
    def num_columns(self) -> int:
        return len(self.columns)


class FeatureRank(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    feature: str
    rank: float
    entry_index: Optional[int] = Field(None, description="First grid index with a nonzero coefficient")
    selected: bool


class LassoPath(BaseModel):
    """Coefficients of L1-penalized linear regression along a descending penalty grid"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    columns: List[str]
    alphas: List[float]
    lambda_max: float
    intercept: float
    coefficients: List[List[float]] = Field(..., description="One row per penalty value, one entry per column")
    entry_index: List[Optional[int]]
