import math
from typing import Dict, List, Optional, Sequence

import numpy as np
import pytest

from captionguard.schemas.trace import GenerationTrace, SignalConfig, StepStats, SynthConfig, TokenRecord
from captionguard.services import chair_label, trace_store


def make_stats(
    logp_chosen: Optional[float] = None,
    p_max: float = 0.7,
    p_second: float = 0.2,
    vocab_size: int = 100,
    entropy_nats: float = 1.0,
    logp_var: float = 0.5,
) -> StepStats:
    logp_argmax = math.log(p_max)
    return StepStats(
        logp_chosen=logp_argmax if logp_chosen is None else logp_chosen,
        p_max=p_max,
        p_second=p_second,
        logp_argmax=logp_argmax,
        entropy_nats=entropy_nats,
        logp_mean=-3.0,
        logp_var=logp_var,
        vocab_size=vocab_size,
    )


def make_trace(
    trace_id: str,
    words: Sequence[str],
    gt_objects: Optional[List[str]] = None,
    num_heads: int = 2,
    stats: Optional[Sequence[StepStats]] = None,
    attention: Optional[Sequence[Sequence[float]]] = None,
    clip_scores: Optional[Dict[str, float]] = None,
    length_penalty: float = 1.0,
) -> GenerationTrace:
    """One token per word, separated by single spaces"""
    caption = ""
    tokens = []
    for i, word in enumerate(words):
        surface = word if i == 0 else " " + word
        start = len(caption)
        caption += surface
        tokens.append(
            TokenRecord(
                surface=surface,
                char_span=(start, start + len(surface)),
                stats=stats[i] if stats is not None else make_stats(),
                attn_img_mean_abs=list(attention[i]) if attention is not None else [0.1] * num_heads,
            )
        )
    return GenerationTrace(
        trace_id=trace_id,
        caption=caption,
        tokens=tokens,
        num_heads=num_heads,
        length_penalty=length_penalty,
        gt_objects=gt_objects,
        clip_scores=clip_scores,
    )


# Ten captions, 15 mentions, 6 hallucinated, each in a different caption.
CHAIR_CORPUS = [
    ("c0", "a man rides a bike", ["person"]),
    ("c1", "a car on the road", ["car"]),
    ("c2", "a bus near a train", ["bus"]),
    ("c3", "the truck behind a car", ["car"]),
    ("c4", "an empty street at night", ["car"]),
    ("c5", "a pedestrian and a cyclist", ["person", "rider"]),
    ("c6", "a stoplight above the car", ["car"]),
    ("c7", "a scooter by the curb", ["motor"]),
    ("c8", "a tram in the rain", ["car"]),
    ("c9", "a van and a taxi", ["car"]),
]


@pytest.fixture
def bdd_map():
    return chair_label.load_synonym_map("bdd100k")


@pytest.fixture
def chair_traces():
    return [make_trace(tid, caption.split(), gt) for tid, caption, gt in CHAIR_CORPUS]


def small_synth_config(**overrides) -> SynthConfig:
    values = dict(
        num_traces=400,
        vocab_size=1000,
        num_heads=8,
        hallucination_rate=0.3,
        signal=SignalConfig(informative_heads=4),
    )
    values.update(overrides)
    return SynthConfig(**values)


@pytest.fixture(scope="session")
def synth_traces():
    return trace_store.synthesize_traces(small_synth_config(), seed=7)


@pytest.fixture(scope="session")
def synth_dataset(synth_traces):
    from captionguard.services import feature_bank

    syn = chair_label.load_synonym_map("bdd100k")
    grouped = chair_label.label_corpus(synth_traces, syn)
    return feature_bank.featurize_corpus(synth_traces, grouped)


def planted_regression(n: int = 200, num_features: int = 6, seed: int = 0):
    """Rows where only column 0 drives the label"""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, num_features))
    y = (X[:, 0] + 0.3 * rng.normal(size=n) > 0).astype(np.int64)
    return X, y
