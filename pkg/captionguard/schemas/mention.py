from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import Dict, List, Optional


class SynonymMap(BaseModel):
    """Category -> surface phrases used to find object mentions in captions"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    entries: Dict[str, List[str]]

    def phrase_index(self) -> Dict[str, str]:
        """Phrase -> category"""
        return {phrase: category for category, phrases in self.entries.items() for phrase in phrases}

    @property
    def categories(self) -> List[str]:
        return list(self.entries)


class ObjectMention(BaseModel):
    """An object found in a caption, located by token and character span"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    trace_id: str
    mention_index: int = Field(..., ge=0)
    category: str
    matched_phrase: str
    start_token: int = Field(..., ge=0)
    end_token: int = Field(..., ge=0)
    char_start: int = Field(..., ge=0)
    char_end: int = Field(..., ge=0)
    label: Optional[int] = Field(None, ge=0, le=1, description="1 = hallucinated, 0 = true, None = unlabeled")

    @model_validator(mode="after")
    def check_spans(self) -> "ObjectMention":
        if self.end_token < self.start_token:
            raise ValueError("end_token must be >= start_token")
        if self.char_end <= self.char_start:
            raise ValueError("char_end must be > char_start")
        return self


class Detection(BaseModel):
    """Classifier output for one mention"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    trace_id: str
    mention_index: int = Field(..., ge=0)
    category: str
    char_start: int = Field(..., ge=0)
    char_end: int = Field(..., ge=0)
    text: str
    probability: float = Field(..., gt=0.0, lt=1.0)
    flagged: bool


class MaskedCaption(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    trace_id: str
    masked_caption: str
    num_masked: int = Field(..., ge=0)
