import math

import numpy as np
import pytest

from captionguard.core.errors import DimensionMismatchError, MissingFeatureError
from captionguard.schemas.mention import ObjectMention
from captionguard.schemas.trace import Decoding
from captionguard.services import chair_label, feature_bank, trace_store
from tests.conftest import make_stats, make_trace


def _mention(start, end, category="car", index=0, trace_id="t"):
    return ObjectMention(
        trace_id=trace_id,
        mention_index=index,
        category=category,
        matched_phrase=category,
        start_token=start,
        end_token=end,
        char_start=0,
        char_end=1,
        label=0,
    )


def _ten_token_trace(**kwargs):
    return make_trace("t", [f"w{i}" for i in range(10)], **kwargs)


def _dense_trace(dense, chosen):
    """Two-token trace whose second token carries the stats of a dense distribution"""
    stats = [make_stats(), trace_store.summarize_distribution(dense, chosen)]
    return make_trace("t", ["a", "car"], stats=stats)


@pytest.mark.parametrize("start,expected", [(0, 0.0), (5, 0.5), (9, 0.9)])
def test_relative_position(start, expected):
    trace = _ten_token_trace()
    assert feature_bank.relative_position(_mention(start, start), trace) == pytest.approx(expected, abs=1e-12)


def test_absolute_occurrence():
    mentions = [_mention(0, 0, "dog", 0), _mention(1, 1, "cat", 1), _mention(2, 2, "dog", 2)]
    assert feature_bank.absolute_occurrence(mentions[0], mentions) == 2
    assert feature_bank.absolute_occurrence(mentions[1], mentions) == 1
    cars = [_mention(i, i, "car", i) for i in range(3)]
    assert feature_bank.absolute_occurrence(cars[1], cars) == 3


def test_attention_means_pass_through():
    trace = make_trace("t", ["a", "car"], attention=[[0.0, 0.0], [0.1, 0.3]])
    assert feature_bank.attention_means(_mention(1, 1), trace) == [0.1, 0.3]
    assert feature_bank.attention_means(_mention(0, 0), trace) == [0.0, 0.0]


def test_log_probability_sums_span():
    stats = [make_stats(-0.5), make_stats(-1.0), make_stats(math.log(0.5))]
    trace = make_trace("t", ["a", "b", "c"], stats=stats)
    assert feature_bank.log_probability(_mention(0, 0), trace) == pytest.approx(-0.5, abs=1e-9)
    assert feature_bank.log_probability(_mention(0, 1), trace) == pytest.approx(-1.5, abs=1e-9)

    halves = make_trace("t", ["a", "b", "c"], stats=[make_stats(math.log(0.5))] * 3)
    assert feature_bank.log_probability(_mention(0, 2), halves) == pytest.approx(3 * math.log(0.5), abs=1e-9)


def test_cumulated_log_probability():
    trace = make_trace("t", ["a", "b", "c"], stats=[make_stats(-1.0), make_stats(-2.0), make_stats(-3.0)])
    assert feature_bank.cumulated_log_probability(_mention(0, 0), trace) == pytest.approx(-1.0)
    assert feature_bank.cumulated_log_probability(_mention(2, 2), trace) == pytest.approx(-6.0)
    first = _mention(0, 1)
    assert feature_bank.cumulated_log_probability(first, trace) == feature_bank.log_probability(first, trace)


def test_sequence_score():
    stats = [make_stats(-1.0), make_stats(-2.0), make_stats(-3.0)]
    trace = make_trace("t", ["a", "b", "c"], stats=stats)
    assert feature_bank.sequence_score(_mention(2, 2), trace) == pytest.approx(-3.0, abs=1e-9)

    single = make_trace("t", ["a"], stats=[make_stats(-1.0)])
    assert feature_bank.sequence_score(_mention(0, 0), single) == pytest.approx(-1.0, abs=1e-9)

    squared = make_trace("t", ["a", "b", "c"], stats=[make_stats(-4.0), make_stats(-2.0), make_stats(-2.0)],
                         length_penalty=2.0)
    assert feature_bank.sequence_score(_mention(2, 2), squared) == pytest.approx(-2.0, abs=1e-9)


def test_dispersion_features_of_dense_distributions():
    uniform = _dense_trace([0.25] * 4, 0)
    m = _mention(1, 1)
    assert feature_bank.vocab_variance(m, uniform) == pytest.approx(0.0, abs=1e-12)
    assert feature_bank.normalized_entropy(m, uniform) == pytest.approx(1.0, abs=1e-9)
    assert feature_bank.variation_ratio(m, uniform) == pytest.approx(0.75, abs=1e-9)

    two = _dense_trace([0.9, 0.1], 0)
    assert feature_bank.vocab_variance(m, two) == pytest.approx(1.2069489608, abs=1e-9)

    skewed = _dense_trace([0.5, 0.25, 0.125, 0.125], 0)
    assert feature_bank.normalized_entropy(m, skewed) == pytest.approx(0.875, abs=1e-9)

    onehot = _dense_trace([1.0, 0.0, 0.0], 0)
    assert feature_bank.vocab_variance(m, onehot) > 0
    assert feature_bank.normalized_entropy(m, onehot) == pytest.approx(0.0, abs=1e-9)
    assert feature_bank.variation_ratio(m, onehot) == pytest.approx(0.0, abs=1e-12)
    assert feature_bank.probability_margin(m, onehot) == pytest.approx(0.0, abs=1e-12)


def test_margin_and_difference():
    m = _mention(1, 1)
    three = _dense_trace([0.7, 0.2, 0.1], 1)
    assert feature_bank.variation_ratio(m, three) == pytest.approx(0.3, abs=1e-9)
    assert feature_bank.probability_margin(m, three) == pytest.approx(0.5, abs=1e-9)
    assert feature_bank.probability_difference(m, three) == pytest.approx(1.2527629685, abs=1e-9)
    assert feature_bank.probability_margin(m, _dense_trace([0.5, 0.5], 0)) == pytest.approx(1.0, abs=1e-9)
    assert feature_bank.probability_difference(m, _dense_trace([0.7, 0.2, 0.1], 0)) == 0.0


def test_margin_decreases_with_p_max():
    m = _mention(1, 1)
    previous = None
    for p_max in (0.4, 0.5, 0.6, 0.7):
        trace = make_trace("t", ["a", "car"], stats=[make_stats(), make_stats(p_max=p_max, p_second=0.2)])
        current = (feature_bank.variation_ratio(m, trace), feature_bank.probability_margin(m, trace))
        if previous is not None:
            assert current[0] < previous[0] and current[1] < previous[1]
        previous = current


def test_clip_feature():
    trace = make_trace("t", ["a", "person"], clip_scores={"person": 31.7, "car": 0.0})
    assert feature_bank.clip_feature(_mention(1, 1, "person"), trace) == 31.7
    assert feature_bank.clip_feature(_mention(1, 1, "car"), trace) == 0.0
    with pytest.raises(MissingFeatureError):
        feature_bank.clip_feature(_mention(1, 1, "bus"), trace)
    with pytest.raises(MissingFeatureError):
        feature_bank.clip_feature(_mention(1, 1, "person"), make_trace("t", ["a", "person"]))


def test_vector_length_for_32_heads():
    trace = make_trace("t", ["a", "car"], num_heads=32)
    mention = _mention(1, 1)
    vector = feature_bank.build_feature_vector(mention, trace, [mention])
    assert len(vector.values) == 42
    assert feature_bank.column_names(32) == ["P", "N", *[f"A{g}" for g in range(32)],
                                             "L", "C", "S", "V", "E", "R", "M", "D"]


def test_extended_vector_appends_clip():
    trace = make_trace("t", ["a", "car"], num_heads=2, clip_scores={"car": 12.5})
    mention = _mention(1, 1)
    vector = feature_bank.build_feature_vector(mention, trace, [mention], extended=True)
    assert len(vector.values) == 13
    assert vector.values[-1] == 12.5


def test_repeated_mentions_share_features_except_occurrence():
    trace = make_trace("t", ["a", "car", "car"])
    a, b = _mention(1, 1, index=0), _mention(1, 1, index=1)
    va = feature_bank.build_feature_vector(a, trace, [a, b])
    vb = feature_bank.build_feature_vector(b, trace, [a, b])
    assert va.values == vb.values
    assert va.values[1] == 2.0


def test_start_token_features_ignore_other_tokens():
    base = make_trace("t", ["a", "car", "here"])
    changed_stats = [make_stats(-2.0, p_max=0.3, p_second=0.3), base.tokens[1].stats, make_stats(p_max=0.9)]
    changed = make_trace("t", ["a", "car", "here"], stats=changed_stats)
    m = _mention(1, 1)
    for fn in (feature_bank.vocab_variance, feature_bank.normalized_entropy, feature_bank.variation_ratio,
               feature_bank.probability_margin, feature_bank.probability_difference):
        assert fn(m, base) == fn(m, changed)


def test_featurize_corpus_rows_and_ranges(synth_traces, synth_dataset):
    assert synth_dataset.columns == feature_bank.column_names(8)
    X = synth_dataset.X
    assert X.shape[1] == 18
    col = {name: X[:, i] for i, name in enumerate(synth_dataset.columns)}
    assert np.all((col["P"] >= 0) & (col["P"] < 1))
    assert np.all(col["N"] >= 1)
    assert np.all(col["C"] <= col["L"] + 1e-12) and np.all(col["L"] <= 0)
    assert np.all(np.sign(col["S"]) == np.sign(col["C"]))
    assert np.all((col["M"] >= 0) & (col["M"] < 2))
    assert set(np.unique(synth_dataset.y)) == {0, 1}


def test_featurize_rejects_mixed_head_counts(bdd_map):
    traces = [make_trace("a", ["a", "car"], ["car"], num_heads=2), make_trace("b", ["a", "car"], ["car"], num_heads=3)]
    grouped = chair_label.label_corpus(traces, bdd_map)
    with pytest.raises(DimensionMismatchError):
        feature_bank.featurize_corpus(traces, grouped)


def test_featurize_decoding_filter(bdd_map):
    beam = make_trace("b", ["a", "car"], ["car"]).model_copy(update={"decoding": Decoding.BEAM})
    sampled = make_trace("s", ["a", "bus"], ["car"])
    grouped = chair_label.label_corpus([beam, sampled], bdd_map)
    dataset = feature_bank.featurize_corpus([beam, sampled], grouped, decoding="sampling")
    assert list(dataset.trace_ids) == ["s"]


def test_dataset_file_is_deterministic(tmp_path, synth_dataset):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    feature_bank.write_dataset(a, synth_dataset, "digest")
    feature_bank.write_dataset(b, synth_dataset, "digest")
    assert a.read_bytes() == b.read_bytes()
    loaded = feature_bank.load_dataset(a)
    assert loaded.columns == synth_dataset.columns
    np.testing.assert_array_equal(loaded.X, synth_dataset.X)
    np.testing.assert_array_equal(loaded.y, synth_dataset.y)


def test_class_conditional_summary(synth_dataset):
    summary = feature_bank.class_conditional_summary(synth_dataset)
    assert set(summary["label"]) == {0, 1}
    assert len(summary) == 2 * len(synth_dataset.columns)
    entropy = summary[summary["feature"] == "E"].set_index("label")["mean"]
    assert entropy[1] > entropy[0]
