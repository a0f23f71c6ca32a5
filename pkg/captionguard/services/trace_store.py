import math
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from captionguard.core.errors import InputError, TraceInvariantError, TraceSchemaError
from captionguard.core.io import read_jsonl, write_jsonl
from captionguard.schemas.trace import (
    FileHeader, GenerationTrace, StepStats, SynthConfig, TokenRecord,
)

logger = logging.getLogger(__name__)

# Probabilities are clamped to this value before any logarithm.
EPSILON = 1e-12
TOLERANCE = 1e-9

OPENINGS = [["the", "image", "shows"], ["in", "this", "scene", "there", "is"], ["a", "photo", "of"]]
ARTICLES = ["a", "the"]
CONNECTORS = [["near"], ["with"], ["and"], ["beside"], ["behind"], ["next", "to"]]


def _log(p: float) -> float:
    return math.log(max(p, EPSILON))


def summarize_distribution(dense: Sequence[float], chosen_index: int) -> StepStats:
    """Reduce a full next-token distribution to the statistics the features consume"""
    p = np.asarray(dense, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise InputError("distribution must be a non-empty 1-D list")
    if p.size < 2:
        raise InputError("distribution needs at least 2 entries")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InputError("probabilities must be finite and non-negative")
    if abs(p.sum() - 1.0) > 1e-6:
        raise InputError(f"probabilities sum to {p.sum():.9f}, expected 1")
    if not 0 <= chosen_index < p.size:
        raise InputError(f"chosen index {chosen_index} outside vocabulary of size {p.size}")

    logs = np.log(np.maximum(p, EPSILON))
    top_two = np.sort(p)[::-1][:2]
    p_max = float(top_two[0])
    return StepStats(
        logp_chosen=float(logs[chosen_index]),
        p_max=p_max,
        p_second=float(top_two[1]),
        logp_argmax=_log(p_max),
        entropy_nats=float(max(-np.sum(p * logs), 0.0)),
        logp_mean=float(logs.mean()),
        logp_var=float(logs.var()),
        vocab_size=int(p.size),
    )


def structured_step_stats(
    p_max: float,
    p_second: float,
    vocab_size: int,
    chosen: Literal["argmax", "runner_up"] = "argmax",
) -> StepStats:
    """Closed-form StepStats of a distribution made of an argmax, a runner-up and a uniform tail.

    Equal to summarize_distribution on the dense vector
    [p_max, p_second, t, ..., t] with t = (1 - p_max - p_second) / (vocab_size - 2).
    """
    if vocab_size < 2:
        raise InputError("vocab_size must be >= 2")
    n_tail = vocab_size - 2
    tail_mass = max(1.0 - p_max - p_second, 0.0)
    if n_tail == 0 and tail_mass > 1e-9:
        raise InputError("with two tokens p_max + p_second must be 1")
    tail = tail_mass / n_tail if n_tail else 0.0
    if p_second > p_max + TOLERANCE or tail > p_second + TOLERANCE:
        raise InputError("levels must satisfy p_max >= p_second >= tail")

    log_max, log_second, log_tail = _log(p_max), _log(p_second), _log(tail)
    mean = (log_max + log_second + n_tail * log_tail) / vocab_size
    var = ((log_max - mean) ** 2 + (log_second - mean) ** 2 + n_tail * (log_tail - mean) ** 2) / vocab_size
    entropy = -(p_max * log_max + p_second * log_second + (tail_mass * log_tail if n_tail else 0.0))
    return StepStats(
        logp_chosen=log_max if chosen == "argmax" else log_second,
        p_max=p_max,
        p_second=p_second,
        logp_argmax=log_max,
        entropy_nats=max(entropy, 0.0),
        logp_mean=mean,
        logp_var=max(var, 0.0),
        vocab_size=vocab_size,
    )


def validate_trace(trace: GenerationTrace) -> GenerationTrace:
    """Check every trace invariant; raises TraceInvariantError naming the trace and field"""
    tid = trace.trace_id

    def fail(field: str, message: str):
        raise TraceInvariantError(tid, field, message)

    previous_end = 0
    covered = 0
    caption_length = len(trace.caption)
    for i, token in enumerate(trace.tokens):
        field = f"tokens[{i}]"
        if len(token.attn_img_mean_abs) != trace.num_heads:
            fail(
                f"{field}.attn_img_mean_abs",
                f"expected {trace.num_heads} heads, got {len(token.attn_img_mean_abs)}",
            )
        if any((not math.isfinite(a)) or a < 0 for a in token.attn_img_mean_abs):
            fail(f"{field}.attn_img_mean_abs", "attention aggregates must be finite and >= 0")

        start, end = token.char_span
        if start < previous_end or end < start or end > caption_length:
            fail(f"{field}.char_span", f"span {token.char_span} overlaps, runs backwards or leaves the caption")
        if trace.caption[start:end] != token.surface:
            fail(f"{field}.surface", f"surface {token.surface!r} does not match caption text at {token.char_span}")
        if trace.caption[previous_end:start].strip():
            fail(f"{field}.char_span", "caption text between tokens is not covered by any token")
        previous_end = end
        covered += end - start

        s = token.stats
        if s.p_second > s.p_max + TOLERANCE:
            fail(f"{field}.stats.p_second", "p_second exceeds p_max")
        if s.p_max + s.p_second > 1.0 + TOLERANCE:
            fail(f"{field}.stats.p_second", "p_max + p_second exceeds 1")
        if s.logp_chosen > s.logp_argmax + TOLERANCE:
            fail(f"{field}.stats.logp_chosen", "chosen token more likely than the argmax")
        if s.entropy_nats > math.log(s.vocab_size) + TOLERANCE:
            fail(f"{field}.stats.entropy_nats", "entropy exceeds ln(vocab_size)")

    if trace.caption[previous_end:].strip():
        fail("tokens", "caption text after the last token is not covered by any token")
    if trace.gt_objects is not None and len(set(trace.gt_objects)) != len(trace.gt_objects):
        fail("gt_objects", "duplicate categories")
    if trace.clip_scores is not None:
        for category, score in trace.clip_scores.items():
            if not 0.0 <= score <= 100.0:
                fail(f"clip_scores[{category}]", f"score {score} outside [0, 100]")
    return trace


def _schema_error(line_number: int, error: ValidationError) -> TraceSchemaError:
    first = error.errors()[0]
    field = ".".join(str(part) for part in first["loc"]) or "<record>"
    return TraceSchemaError(line_number, field, first["msg"])


def read_header(path: Path) -> Optional[FileHeader]:
    header, _ = read_jsonl(path)
    return header


def load_traces(path: Path) -> List[GenerationTrace]:
    """Load and validate every trace of a JSONL trace file, in file order"""
    _, lines = read_jsonl(path)
    traces: List[GenerationTrace] = []
    seen: Dict[str, int] = {}
    for line_number, obj in lines:
        try:
            trace = GenerationTrace.model_validate(obj)
        except ValidationError as e:
            raise _schema_error(line_number, e) from e
        if trace.trace_id in seen:
            raise TraceInvariantError(trace.trace_id, "trace_id", f"duplicate of line {seen[trace.trace_id]}")
        seen[trace.trace_id] = line_number
        traces.append(validate_trace(trace))
    logger.info(f"Loaded {len(traces)} traces from {path}")
    return traces


def write_traces(path: Path, traces: Sequence[GenerationTrace], header: Optional[FileHeader] = None) -> int:
    return write_jsonl(path, traces, header=header)


class _TraceBuilder:
    """Accumulates tokens of one synthetic caption"""

    def __init__(self, rng: np.random.Generator, config: SynthConfig):
        self.rng = rng
        self.config = config
        self.caption = ""
        self.tokens: List[TokenRecord] = []
        self.head_base = 0.01 * (1 + np.arange(config.num_heads) % 5)

    def _step(self, logit_mean: float, runner_up_prob: float) -> StepStats:
        vocab = self.config.vocab_size
        p_max = 1.0 / (1.0 + math.exp(-(logit_mean + self.rng.normal())))
        p_max = min(max(p_max, 1.0 / vocab), 1.0 - 1e-9)
        rest = 1.0 - p_max
        if vocab == 2:
            p_second = rest
        else:
            p_second = max(rest * self.rng.uniform(0.3, 0.8), rest / (vocab - 1))
            p_second = min(p_second, p_max)
        chosen = "runner_up" if self.rng.random() < runner_up_prob else "argmax"
        return structured_step_stats(p_max, p_second, vocab, chosen)

    def _attention(self, shift: float) -> List[float]:
        noise = self.rng.normal(size=self.config.num_heads)
        log_attn = np.log(self.head_base) + 0.3 * noise
        log_attn[: self.config.signal.informative_heads] -= 0.3 * shift
        return [float(a) for a in np.exp(log_attn)]

    def add(self, word: str, logit_mean: float = 3.0, runner_up_prob: float = 0.05, attention_shift: float = 0.0):
        surface = word if not self.caption or word == "." else " " + word
        start = len(self.caption)
        self.caption += surface
        self.tokens.append(
            TokenRecord(
                surface=surface,
                char_span=(start, start + len(surface)),
                stats=self._step(logit_mean, runner_up_prob),
                attn_img_mean_abs=self._attention(attention_shift),
            )
        )

    def add_object(self, phrase: str, hallucinated: bool):
        signal = self.config.signal
        y = 1.0 if hallucinated else 0.0
        for i, word in enumerate(phrase.split()):
            if i == 0:
                self.add(
                    word,
                    logit_mean=2.0 - signal.entropy * y,
                    runner_up_prob=0.1 + signal.logp * y,
                    attention_shift=signal.attention * y,
                )
            else:
                self.add(word, logit_mean=2.5)


def _pick(rng: np.random.Generator, pool: Sequence[str]) -> str:
    return pool[int(rng.integers(len(pool)))]


PlantedSlot = Tuple[str, bool]


def _synthesize_one(
    rng: np.random.Generator, config: SynthConfig, trace_id: str
) -> Tuple[GenerationTrace, List[PlantedSlot]]:
    categories = list(config.categories)
    max_gt = min(config.max_gt_objects, len(categories) - (1 if config.hallucination_rate > 0 else 0))
    min_gt = min(config.min_gt_objects, max_gt)
    gt_size = int(rng.integers(min_gt, max_gt + 1))
    gt = sorted(str(c) for c in rng.choice(categories, size=gt_size, replace=False))
    absent = [c for c in categories if c not in gt]

    num_slots = int(rng.integers(config.min_mentions, config.max_mentions + 1))
    slots: List[PlantedSlot] = []
    true_mentioned: List[str] = []
    hallucinated_mentioned: List[str] = []
    for _ in range(num_slots):
        if rng.random() < config.hallucination_rate:
            fresh = [c for c in absent if c not in hallucinated_mentioned]
            category = _pick(rng, fresh or absent)
            hallucinated_mentioned.append(category)
            slots.append((category, True))
        else:
            if true_mentioned and rng.random() < config.signal.occurrence:
                category = _pick(rng, true_mentioned)
            else:
                category = _pick(rng, gt)
            true_mentioned.append(category)
            slots.append((category, False))

    builder = _TraceBuilder(rng, config)
    for word in OPENINGS[int(rng.integers(len(OPENINGS)))]:
        builder.add(word)
    for i, (category, hallucinated) in enumerate(slots):
        if i > 0:
            for word in CONNECTORS[int(rng.integers(len(CONNECTORS)))]:
                builder.add(word)
        builder.add(_pick(rng, ARTICLES))
        builder.add_object(category, hallucinated)
    builder.add(".")

    clip_scores = None
    if config.with_clip_scores:
        clip_scores = {}
        for category in categories:
            shift = 0.0 if category in gt else 5.0 * config.signal.clip
            clip_scores[category] = float(min(max(30.0 - shift + 5.0 * rng.normal(), 0.0), 100.0))

    trace = GenerationTrace(
        trace_id=trace_id,
        caption=builder.caption,
        tokens=builder.tokens,
        num_heads=config.num_heads,
        length_penalty=config.length_penalty,
        decoding=config.decoding,
        gt_objects=gt,
        clip_scores=clip_scores,
    )
    return trace, slots


def synthesize_with_slots(config: SynthConfig, seed: int) -> List[Tuple[GenerationTrace, List[PlantedSlot]]]:
    """Synthesized traces paired with their planted (category, hallucinated) slots in caption order"""
    rng = np.random.default_rng(seed)
    planted = []
    for i in range(config.num_traces):
        trace, slots = _synthesize_one(rng, config, f"synth-{seed}-{i:05d}")
        planted.append((validate_trace(trace), slots))
    return planted


def synthesize_traces(config: SynthConfig, seed: int) -> List[GenerationTrace]:
    """Generate captions whose hallucinated mentions carry planted feature shifts.

    Hallucinated objects are drawn from categories outside gt_objects, so the
    CHAIR labeling recovers the planted labels exactly. Captions use canonical
    category names only, joined by filler words that match no synonym.
    """
    traces = [trace for trace, _ in synthesize_with_slots(config, seed)]
    logger.info(f"Synthesized {len(traces)} traces (seed={seed}, rate={config.hallucination_rate})")
    return traces
