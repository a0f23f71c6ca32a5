from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import Dict, List, Literal, Optional, Tuple
from enum import Enum

SCHEMA_VERSION = 1


class Decoding(str, Enum):
    SAMPLING = "sampling"
    BEAM = "beam"


class StepStats(BaseModel):
    """Summary of the next-token distribution at one generation step"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    logp_chosen: float = Field(..., le=0.0, description="ln p of the emitted token")
    p_max: float = Field(..., gt=0.0, le=1.0, description="Probability of the vocabulary argmax")
    p_second: float = Field(..., ge=0.0, le=1.0, description="Second-largest probability")
    logp_argmax: float = Field(..., le=0.0, description="ln p_max")
    entropy_nats: float = Field(..., ge=0.0, description="Unnormalized entropy in nats")
    logp_mean: float = Field(..., description="Mean of ln p over the vocabulary")
    logp_var: float = Field(..., ge=0.0, description="Population variance of ln p over the vocabulary")
    vocab_size: int = Field(..., ge=2, description="|V|")


class TokenRecord(BaseModel):
    """One generated token with its step statistics and per-head image attention"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    surface: str
    char_span: Tuple[int, int]
    stats: StepStats
    attn_img_mean_abs: List[float] = Field(..., description="Mean |attention| on image tokens, one value per head")


class GenerationTrace(BaseModel):
    """Full generation record of one caption"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    schema_version: Literal[1] = SCHEMA_VERSION
    trace_id: str = Field(..., min_length=1)
    caption: str
    tokens: List[TokenRecord] = Field(..., min_length=1)
    num_heads: int = Field(..., ge=1, description="G")
    length_penalty: float = Field(default=1.0)
    decoding: Decoding = Decoding.SAMPLING
    gt_objects: Optional[List[str]] = Field(None, description="Categories present in the image")
    clip_scores: Optional[Dict[str, float]] = Field(None, description="Precomputed image/category scores")

    @property
    def last_index(self) -> int:
        """K, the index of the last generated token"""
        return len(self.tokens) - 1

    def without_ground_truth(self) -> "GenerationTrace":
        return self.model_copy(update={"gt_objects": None})


class FileHeader(BaseModel):
    """First line of every JSONL file written by the CLI"""

    model_config = ConfigDict(extra="allow", frozen=True)

    record: Literal["header"] = "header"
    schema_version: Literal[1] = SCHEMA_VERSION
    command: str
    config_digest: str


class SignalConfig(BaseModel):
    """Effect sizes separating hallucinated from true mentions in synthetic traces"""

    model_config = ConfigDict(extra="forbid")

    logp: float = Field(default=0.1, ge=0.0, le=0.8, description="Extra probability of emitting the runner-up token")
    entropy: float = Field(default=0.3, ge=0.0, description="Logit shift flattening the start-token distribution")
    attention: float = Field(default=1.0, ge=0.0, description="Shift of informative heads in noise-sd units")
    informative_heads: int = Field(default=4, ge=0)
    occurrence: float = Field(default=0.5, ge=0.0, le=1.0, description="Probability a true slot repeats a mentioned object")
    clip: float = Field(default=1.0, ge=0.0, description="Score shift in noise-sd units for absent categories")


class SynthConfig(BaseModel):
    """Configuration of the planted-signal trace generator"""

    model_config = ConfigDict(extra="forbid")

    num_traces: int = Field(default=5000, ge=1)
    vocab_size: int = Field(default=32000, ge=2)
    num_heads: int = Field(default=32, ge=1)
    categories: List[str] = Field(
        default=[
            "person", "rider", "car", "bus", "truck", "bike",
            "motor", "traffic light", "traffic sign", "train",
        ],
        min_length=2,
    )
    hallucination_rate: float = Field(default=0.3, ge=0.0, le=1.0)
    signal: SignalConfig = Field(default_factory=SignalConfig)
    min_mentions: int = Field(default=2, ge=1)
    max_mentions: int = Field(default=6, ge=1)
    min_gt_objects: int = Field(default=1, ge=1)
    max_gt_objects: int = Field(default=3, ge=1)
    decoding: Decoding = Decoding.SAMPLING
    length_penalty: float = 1.0
    with_clip_scores: bool = False
    seed: Optional[int] = None

    @model_validator(mode="after")
    def check_ranges(self) -> "SynthConfig":
        if self.max_mentions < self.min_mentions:
            raise ValueError("max_mentions must be >= min_mentions")
        if self.max_gt_objects < self.min_gt_objects:
            raise ValueError("max_gt_objects must be >= min_gt_objects")
        if len(set(self.categories)) != len(self.categories):
            raise ValueError("categories must be unique")
        if self.hallucination_rate > 0 and self.max_gt_objects >= len(self.categories):
            raise ValueError("hallucinated mentions need categories outside every ground-truth set")
        if self.signal.informative_heads > self.num_heads:
            raise ValueError("informative_heads cannot exceed num_heads")
        return self
