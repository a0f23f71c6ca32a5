import re
import json
import logging
from importlib import resources
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple, Union

from captionguard.core.errors import InputError, SpanMismatchError, SynonymMapError, UndefinedMetricError
from captionguard.schemas.mention import ObjectMention, SynonymMap
from captionguard.schemas.trace import GenerationTrace

logger = logging.getLogger(__name__)

BUILTIN_MAPS = {"bdd100k": "bdd100k_synonyms.json"}

WORD_PATTERN = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*", re.IGNORECASE)

# Verb forms whose stripped singular collides with a synonym ("a man rides a bike").
PLURAL_EXCEPTIONS = frozenset({"rides", "cycles"})


def _normalize(phrase: str) -> str:
    return " ".join(phrase.lower().split())


def build_synonym_map(raw: Mapping[str, Sequence[str]]) -> SynonymMap:
    """Normalize a category -> phrases mapping and enforce its invariants"""
    entries: Dict[str, List[str]] = {}
    owner: Dict[str, str] = {}
    for raw_category, raw_phrases in raw.items():
        category = _normalize(raw_category)
        if not category:
            raise SynonymMapError("empty category name")
        if not raw_phrases:
            raise SynonymMapError(f"category '{category}' has no phrases")
        phrases: List[str] = []
        for phrase in [category, *raw_phrases]:
            phrase = _normalize(phrase)
            if not phrase:
                raise SynonymMapError(f"category '{category}' contains an empty phrase")
            if phrase in owner and owner[phrase] != category:
                raise SynonymMapError(f"phrase '{phrase}' maps to both '{owner[phrase]}' and '{category}'")
            if phrase not in phrases:
                phrases.append(phrase)
                owner[phrase] = category
        entries[category] = phrases
    return SynonymMap(entries=entries)


def load_synonym_map(path: Union[str, Path]) -> SynonymMap:
    """Load a synonym map from a JSON file or a bundled resource name ("bdd100k")"""
    name = str(path)
    try:
        if name in BUILTIN_MAPS:
            text = resources.files("captionguard.resources").joinpath(BUILTIN_MAPS[name]).read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise SynonymMapError(f"cannot read synonym map {name}: {e}") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise SynonymMapError(f"synonym map {name} is not valid JSON: {e}") from e
    if not isinstance(raw, dict) or not all(isinstance(v, list) for v in raw.values()):
        raise SynonymMapError(f"synonym map {name} must map each category to a list of phrases")
    syn = build_synonym_map(raw)
    logger.info(f"Loaded synonym map {name} with {len(syn.entries)} categories")
    return syn


def _singular_forms(word: str) -> List[str]:
    if word in PLURAL_EXCEPTIONS:
        return []
    forms = []
    if word.endswith("es") and len(word) > 3:
        forms.append(word[:-2])
    if word.endswith("s") and len(word) > 2:
        forms.append(word[:-1])
    return forms


class _PhraseMatcher:
    """Greedy longest-phrase-first, left-to-right matcher over caption words"""

    def __init__(self, syn: SynonymMap):
        self.by_first_word: Dict[str, List[Tuple[Tuple[str, ...], str, str]]] = {}
        for phrase, category in syn.phrase_index().items():
            words = tuple(phrase.split())
            self.by_first_word.setdefault(words[0], []).append((words, category, phrase))

    def _candidates(self, word: str):
        seen = {}
        for key in [word, *_singular_forms(word)]:
            for candidate in self.by_first_word.get(key, []):
                seen[candidate[2]] = candidate
        return sorted(seen.values(), key=lambda c: (-len(c[0]), -len(c[2]), c[2]))

    @staticmethod
    def _matches(phrase_words: Tuple[str, ...], words: List[str], i: int) -> bool:
        if i + len(phrase_words) > len(words):
            return False
        for j, expected in enumerate(phrase_words):
            actual = words[i + j]
            if actual == expected:
                continue
            if j == len(phrase_words) - 1 and expected in _singular_forms(actual):
                continue
            return False
        return True

    def find(self, text: str) -> List[Tuple[str, str, int, int]]:
        """Return (category, phrase, char_start, char_end) for each match"""
        spans = [(m.group(0).lower(), m.start(), m.end()) for m in WORD_PATTERN.finditer(text)]
        words = [w for w, _, _ in spans]
        found = []
        i = 0
        while i < len(words):
            for phrase_words, category, phrase in self._candidates(words[i]):
                if self._matches(phrase_words, words, i):
                    last = i + len(phrase_words) - 1
                    found.append((category, phrase, spans[i][1], spans[last][2]))
                    i = last + 1
                    break
            else:
                i += 1
        return found


def _token_span(trace: GenerationTrace, char_start: int, char_end: int) -> Tuple[int, int]:
    hits = [
        i for i, token in enumerate(trace.tokens)
        if token.char_span[0] < char_end and token.char_span[1] > char_start
    ]
    if not hits:
        raise SpanMismatchError(
            f"trace '{trace.trace_id}': characters {char_start}-{char_end} are not covered by any token"
        )
    return hits[0], hits[-1]


def extract_mentions(trace: GenerationTrace, syn: SynonymMap) -> List[ObjectMention]:
    """Find object mentions in caption order, mapped onto token indices (unlabeled)"""
    mentions = []
    for index, (category, phrase, char_start, char_end) in enumerate(_PhraseMatcher(syn).find(trace.caption)):
        start_token, end_token = _token_span(trace, char_start, char_end)
        mentions.append(
            ObjectMention(
                trace_id=trace.trace_id,
                mention_index=index,
                category=category,
                matched_phrase=phrase,
                start_token=start_token,
                end_token=end_token,
                char_start=char_start,
                char_end=char_end,
            )
        )
    return mentions


def label_mentions(mentions: Sequence[ObjectMention], trace: GenerationTrace) -> List[ObjectMention]:
    """Label each mention 1 (hallucinated) if its category is absent from the ground truth, else 0"""
    if trace.gt_objects is None and mentions:
        raise InputError(f"trace '{trace.trace_id}' has no gt_objects; labeling needs ground truth")
    present = {_normalize(c) for c in (trace.gt_objects or [])}
    return [m.model_copy(update={"label": 0 if m.category in present else 1}) for m in mentions]


def label_corpus(traces: Sequence[GenerationTrace], syn: SynonymMap) -> Dict[str, List[ObjectMention]]:
    """Extract and label mentions of every trace; keys keep trace order"""
    grouped = {}
    for trace in traces:
        grouped[trace.trace_id] = label_mentions(extract_mentions(trace, syn), trace)
    total = sum(len(m) for m in grouped.values())
    logger.info(f"Extracted {total} mentions from {len(traces)} traces")
    return grouped


def chair_i(mentions: Sequence[ObjectMention]) -> float:
    """Fraction of object mentions that are hallucinated"""
    if not mentions:
        raise UndefinedMetricError("CHAIR_i is undefined for a corpus without mentions")
    if any(m.label is None for m in mentions):
        raise InputError("CHAIR_i needs labeled mentions")
    return sum(m.label for m in mentions) / len(mentions)


def chair_s(grouped: Mapping[str, Sequence[ObjectMention]]) -> float:
    """Fraction of captions containing at least one hallucinated mention"""
    if not grouped:
        raise UndefinedMetricError("CHAIR_s is undefined for an empty corpus")
    hallucinated = sum(1 for mentions in grouped.values() if any(m.label == 1 for m in mentions))
    return hallucinated / len(grouped)
