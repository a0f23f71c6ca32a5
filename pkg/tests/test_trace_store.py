import json
import math

import numpy as np
import pytest

from captionguard.core.errors import InputError, TraceInvariantError, TraceSchemaError
from captionguard.schemas.trace import FileHeader, SynthConfig
from captionguard.services import chair_label, trace_store
from tests.conftest import make_trace, small_synth_config


def _write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")


def _trace_dict(trace_id="t0"):
    return json.loads(make_trace(trace_id, ["a", "man", "rides", "a", "bike"], ["person"]).model_dump_json())


def test_summarize_uniform_distribution():
    stats = trace_store.summarize_distribution([0.25] * 4, chosen_index=0)
    assert stats.p_max == pytest.approx(0.25)
    assert stats.entropy_nats == pytest.approx(math.log(4))
    assert stats.logp_var == pytest.approx(0.0, abs=1e-15)


def test_summarize_reads_chosen_and_runner_up():
    stats = trace_store.summarize_distribution([0.7, 0.2, 0.1], chosen_index=1)
    assert stats.p_max == pytest.approx(0.7)
    assert stats.p_second == pytest.approx(0.2)
    assert stats.logp_chosen == pytest.approx(math.log(0.2))
    assert stats.logp_argmax == pytest.approx(math.log(0.7))


def test_summarize_entropy_and_variance_values():
    stats = trace_store.summarize_distribution([0.5, 0.25, 0.125, 0.125], chosen_index=0)
    assert stats.entropy_nats == pytest.approx(1.2130075659799042, abs=1e-9)

    two = trace_store.summarize_distribution([0.9, 0.1], chosen_index=0)
    assert two.logp_var == pytest.approx(1.2069489608, abs=1e-9)


def test_summarize_clamps_zero_probabilities():
    stats = trace_store.summarize_distribution([1.0, 0.0, 0.0], chosen_index=1)
    assert math.isfinite(stats.logp_chosen)
    assert math.isfinite(stats.logp_var) and stats.logp_var > 0
    assert stats.entropy_nats == pytest.approx(0.0, abs=1e-9)


def test_summarize_is_permutation_invariant_except_chosen():
    p = [0.05, 0.6, 0.1, 0.25]
    a = trace_store.summarize_distribution(p, chosen_index=1)
    b = trace_store.summarize_distribution(p[::-1], chosen_index=2)
    for field in ("p_max", "p_second", "entropy_nats", "logp_mean", "logp_var", "vocab_size"):
        assert getattr(a, field) == pytest.approx(getattr(b, field), abs=1e-12)
    assert a.logp_chosen == pytest.approx(b.logp_chosen)


@pytest.mark.parametrize("dense", [[], [1.0], [0.5, 0.4], [0.7, -0.1, 0.4]])
def test_summarize_rejects_bad_distributions(dense):
    with pytest.raises(InputError):
        trace_store.summarize_distribution(dense, chosen_index=0)


def test_structured_stats_match_dense_vector():
    vocab = 50
    p_max, p_second = 0.6, 0.15
    tail = (1 - p_max - p_second) / (vocab - 2)
    dense = [p_max, p_second] + [tail] * (vocab - 2)
    expected = trace_store.summarize_distribution(dense, chosen_index=1)
    got = trace_store.structured_step_stats(p_max, p_second, vocab, chosen="runner_up")
    for field in expected.model_fields:
        assert getattr(got, field) == pytest.approx(getattr(expected, field), abs=1e-9)


def test_load_empty_file(tmp_path):
    path = tmp_path / "traces.jsonl"
    path.write_text("", encoding="utf-8")
    assert trace_store.load_traces(path) == []


def test_load_single_record(tmp_path):
    path = tmp_path / "traces.jsonl"
    _write_lines(path, [_trace_dict("only")])
    traces = trace_store.load_traces(path)
    assert [t.trace_id for t in traces] == ["only"]


def test_load_reports_line_of_invalid_json(tmp_path):
    path = tmp_path / "traces.jsonl"
    path.write_text(json.dumps(_trace_dict()) + "\n{not json\n", encoding="utf-8")
    with pytest.raises(TraceSchemaError) as excinfo:
        trace_store.load_traces(path)
    assert excinfo.value.line_number == 2


def test_load_rejects_unknown_field(tmp_path):
    record = _trace_dict()
    record["prompt"] = "describe the image"
    path = tmp_path / "traces.jsonl"
    _write_lines(path, [record])
    with pytest.raises(TraceSchemaError) as excinfo:
        trace_store.load_traces(path)
    assert "prompt" in str(excinfo.value)


def test_load_rejects_short_attention_list(tmp_path):
    record = _trace_dict("short-attn")
    record["tokens"][2]["attn_img_mean_abs"] = [0.1]
    path = tmp_path / "traces.jsonl"
    _write_lines(path, [record])
    with pytest.raises(TraceInvariantError) as excinfo:
        trace_store.load_traces(path)
    assert excinfo.value.trace_id == "short-attn"
    assert "attn_img_mean_abs" in excinfo.value.field


def test_load_rejects_duplicate_trace_ids(tmp_path):
    path = tmp_path / "traces.jsonl"
    _write_lines(path, [_trace_dict("dup"), _trace_dict("dup")])
    with pytest.raises(TraceInvariantError):
        trace_store.load_traces(path)


def test_validate_rejects_surface_mismatch():
    trace = make_trace("bad", ["a", "car"])
    tokens = list(trace.tokens)
    tokens[1] = tokens[1].model_copy(update={"surface": " bus"})
    with pytest.raises(TraceInvariantError):
        trace_store.validate_trace(trace.model_copy(update={"tokens": tokens}))


def test_round_trip_preserves_traces(tmp_path):
    traces = trace_store.synthesize_traces(small_synth_config(num_traces=5), seed=3)
    path = tmp_path / "traces.jsonl"
    trace_store.write_traces(path, traces, header=FileHeader(command="synth", config_digest="x", seed=3))
    assert trace_store.load_traces(path) == traces
    assert trace_store.read_header(path).model_extra["seed"] == 3


def test_synthesis_is_deterministic(tmp_path):
    config = small_synth_config(num_traces=20)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    trace_store.write_traces(a, trace_store.synthesize_traces(config, seed=11))
    trace_store.write_traces(b, trace_store.synthesize_traces(config, seed=11))
    assert a.read_bytes() == b.read_bytes()


def test_zero_hallucination_rate_keeps_every_mention_true(bdd_map):
    traces = trace_store.synthesize_traces(small_synth_config(num_traces=50, hallucination_rate=0.0), seed=1)
    grouped = chair_label.label_corpus(traces, bdd_map)
    assert all(m.label == 0 for ms in grouped.values() for m in ms)


def test_hallucination_fraction_follows_rate(synth_traces, bdd_map):
    grouped = chair_label.label_corpus(synth_traces, bdd_map)
    labels = [m.label for ms in grouped.values() for m in ms]
    assert len(labels) >= 1000
    assert abs(np.mean(labels) - 0.3) <= 0.05


def test_synth_config_rejects_invalid_rate():
    with pytest.raises(ValueError):
        SynthConfig(hallucination_rate=1.5)
    with pytest.raises(ValueError):
        SynthConfig(vocab_size=1)
