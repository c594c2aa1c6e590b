"""
Tests for request and routing trace generation.

Covers Poisson request traces, Markov routing traces and their measured
correlations, calibration, task typing and trace files.
"""

import logging
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import kstest, poisson

from moesim.core.constants import ETaskType
from moesim.core.engine.workload_generator import (
    calibrate_trace,
    calibrated_matrices,
    cross_correlation,
    default_task_profiles,
    extract_task_type,
    gen_request_trace,
    gen_routing_trace,
    measure_layer_correlation,
    measure_prompt_correlation,
    read_trace_jsonl,
    skewed_routing_prior,
    write_trace_jsonl,
)
from moesim.core.models import ModelShape, TraceCalibration
from moesim.utils.error_utils import ScenarioValidationError

SHAPE = ModelShape(num_moe_layers=4, experts_per_layer=8, top_k=2, expert_bytes=1000)


def _calibration(layer_weight, prompt_weight, seed=0, dispersion=1.0, initial=None):
    layer, prompt = calibrated_matrices(SHAPE, layer_weight, prompt_weight)
    return TraceCalibration(
        layer_transition=layer,
        prompt_transition=prompt,
        rng_seed=seed,
        token_dispersion=dispersion,
        initial_experts=initial,
    )


class TestRequestTrace:
    """Test Poisson request generation."""

    def setup_method(self):
        self.profiles = default_task_profiles(SHAPE)

    def test_zero_rate_gives_empty_trace(self):
        assert gen_request_trace(0.0, 100.0, None, 1, self.profiles) == []

    def test_negative_rate_rejected(self):
        with pytest.raises(ScenarioValidationError):
            gen_request_trace(-1.0, 100.0, None, 1, self.profiles)

    def test_task_mix_must_sum_to_one(self):
        with pytest.raises(ScenarioValidationError):
            gen_request_trace(1.0, 10.0, {ETaskType.QUESTION_ANSWERING: 0.9}, 1, self.profiles)

    def test_task_mix_unknown_task_rejected(self):
        with pytest.raises(ScenarioValidationError):
            gen_request_trace(1.0, 10.0, {"translate": 1.0}, 1, self.profiles)

    def test_task_mix_vector_length_checked(self):
        with pytest.raises(ScenarioValidationError):
            gen_request_trace(1.0, 10.0, [0.5, 0.5], 1, self.profiles)

    def test_single_task_mix(self):
        requests = gen_request_trace(2.0, 50.0, {ETaskType.SUMMARIZATION: 1.0}, 3, self.profiles)

        assert requests
        assert {r.task_id for r in requests} == {ETaskType.SUMMARIZATION}
        assert all(r.slo_ttft == 20.0 for r in requests)

    def test_ordering_and_ids(self):
        requests = gen_request_trace(3.0, 60.0, None, 11, self.profiles, max_output_tokens=64)
        arrivals = [r.arrival_time for r in requests]

        assert arrivals == sorted(arrivals)
        assert 0.0 < arrivals[0] and arrivals[-1] <= 60.0
        assert [r.request_id for r in requests] == list(range(len(requests)))
        assert [r.prompt_index for r in requests] == list(range(len(requests)))
        assert all(1 <= r.output_tokens <= 64 for r in requests)
        assert all(r.input_tokens >= 1 for r in requests)

    def test_max_requests(self):
        requests = gen_request_trace(10.0, 100.0, None, 2, self.profiles, max_requests=25)
        assert len(requests) == 25

    def test_same_seed_same_trace(self):
        first = gen_request_trace(2.0, 100.0, None, 42, self.profiles)
        second = gen_request_trace(2.0, 100.0, None, 42, self.profiles)

        assert [r.to_dict() for r in first] == [r.to_dict() for r in second]

    def test_arrival_count_is_poisson(self):
        rate, duration = 2.0, 1000.0
        requests = gen_request_trace(rate, duration, None, 5, self.profiles)

        expected = rate * duration
        assert poisson.ppf(0.0005, expected) <= len(requests) <= poisson.ppf(0.9995, expected)

    def test_interarrival_gaps_are_exponential(self):
        rate = 2.0
        requests = gen_request_trace(rate, 1000.0, None, 6, self.profiles)
        gaps = np.diff([0.0] + [r.arrival_time for r in requests])

        assert kstest(gaps, "expon", args=(0, 1.0 / rate)).pvalue > 0.001


class TestRoutingTrace:
    """Test Markov routing trace generation."""

    def test_shape_and_distinct_choices(self):
        trace = gen_routing_trace(SHAPE, _calibration(0.5, 0.5, dispersion=0.1), 20, 16)

        assert len(trace) == 20
        assert all(p.shape == (4, 16, 2) for p in trace)
        trace.validate(SHAPE)

    def test_identity_chains_are_deterministic(self):
        calibration = _calibration(1.0, 1.0, dispersion=0.0, initial=[3, 3, 3, 3])
        trace = gen_routing_trace(SHAPE, calibration, 10, 8)

        for n in range(len(trace)):
            assert (trace.top1(n) == 3).all()

    def test_uniform_chains_are_uncorrelated(self):
        trace = gen_routing_trace(SHAPE, _calibration(0.0, 0.0, seed=9), 4000, 16)

        assert abs(measure_layer_correlation(trace)) < 0.05
        assert abs(measure_prompt_correlation(trace)) < 0.06

    def test_prompt_mixing_sets_entry_layer_correlation(self):
        trace = gen_routing_trace(SHAPE, _calibration(0.0, 0.7, seed=12, dispersion=0.2), 2000, 16)

        assert measure_prompt_correlation(trace) == pytest.approx(0.7, abs=0.06)

    def test_deeper_layers_follow_the_layer_chain_only(self):
        # stationary entry layer, non-symmetric chain: layer-1 transition
        # frequencies reproduce the chain row of the layer-0 expert
        shape = ModelShape(num_moe_layers=2, experts_per_layer=3, top_k=1, expert_bytes=1)
        chain = np.array([[0.7, 0.2, 0.1], [0.1, 0.6, 0.3], [0.5, 0.1, 0.4]])
        prompt = np.full((2, 3, 3), 1.0 / 3)
        calibration = TraceCalibration(
            layer_transition=chain[None], prompt_transition=prompt, rng_seed=6, token_dispersion=1.0
        )
        trace = gen_routing_trace(shape, calibration, 500, 40)
        top1 = np.stack([trace.top1(n) for n in range(len(trace))])

        counts = np.zeros((3, 3))
        np.add.at(counts, (top1[:, 0, :].ravel(), top1[:, 1, :].ravel()), 1)
        assert np.allclose(counts / counts.sum(axis=1, keepdims=True), chain, atol=0.03)

    def test_layer_mixing_raises_layer_correlation(self):
        weak = gen_routing_trace(SHAPE, _calibration(0.1, 0.0, seed=4), 60, 64)
        strong = gen_routing_trace(SHAPE, _calibration(0.9, 0.0, seed=4), 60, 64)

        assert measure_layer_correlation(strong) > measure_layer_correlation(weak) + 0.3

    def test_same_seed_same_trace(self):
        first = gen_routing_trace(SHAPE, _calibration(0.5, 0.5, seed=1, dispersion=0.2), 15, 8)
        second = gen_routing_trace(SHAPE, _calibration(0.5, 0.5, seed=1, dispersion=0.2), 15, 8)

        assert all(np.array_equal(a, b) for a, b in zip(first, second))

    def test_task_priors_are_applied(self):
        profiles = default_task_profiles(SHAPE, routing_skew=3.0)
        task_ids = [ETaskType.QUESTION_ANSWERING] * 30
        trace = gen_routing_trace(SHAPE, _calibration(0.0, 0.0, seed=2), 30, 64, task_ids, profiles)

        assert trace.task_ids == task_ids
        # qa's prior favours expert 6 at the entry layer; uniform chains
        # carry nothing of it to the last layer
        top1 = np.stack([trace.top1(n) for n in range(len(trace))])
        entry = np.bincount(top1[:, 0, :].ravel(), minlength=8) / top1[:, 0, :].size
        last = np.bincount(top1[:, 3, :].ravel(), minlength=8) / top1[:, 3, :].size
        assert entry.argmax() == 6
        assert entry[6] > 0.6
        assert last[(6 + 3) % 8] < 0.2

    def test_task_ids_length_checked(self):
        with pytest.raises(ScenarioValidationError):
            gen_routing_trace(SHAPE, _calibration(0.5, 0.5), 3, 4, task_ids=["qa"])

    def test_mismatched_matrices_rejected(self):
        other = ModelShape(num_moe_layers=3, experts_per_layer=8, top_k=2, expert_bytes=1)
        with pytest.raises(ScenarioValidationError):
            gen_routing_trace(other, _calibration(0.5, 0.5), 3, 4)


class TestCalibration:
    """Test tuning of the mixing weights to target correlations."""

    def test_layer_correlation_hits_target(self):
        calibration = calibrate_trace(SHAPE, 0.5, 0.0, seed=3, token_dispersion=1.0, sample_prompts=40, sample_tokens=64)
        regenerated = gen_routing_trace(SHAPE, calibration, 40, 64)

        assert calibration.target_layer_corr == 0.5
        assert measure_layer_correlation(regenerated) == pytest.approx(0.5, abs=0.05)
        assert calibration.measured_layer_corr == pytest.approx(measure_layer_correlation(regenerated))

    def test_both_targets_hold_on_the_final_matrices(self, caplog):
        caplog.set_level(logging.INFO, logger="moesim.core.engine.workload_generator")
        calibration = calibrate_trace(
            SHAPE, 0.5, 0.8, seed=5, token_dispersion=0.2, sample_prompts=1000, sample_tokens=16
        )
        fresh = gen_routing_trace(SHAPE, replace(calibration, rng_seed=77), 1000, 16)

        assert calibration.measured_layer_corr == pytest.approx(0.5, abs=0.05)
        assert calibration.measured_prompt_corr == pytest.approx(0.8, abs=0.05)
        assert measure_layer_correlation(fresh) == pytest.approx(0.5, abs=0.05)
        assert measure_prompt_correlation(fresh) == pytest.approx(0.8, abs=0.08)
        assert f"corr {calibration.measured_prompt_corr:.3f}" in caplog.text
        assert not [r for r in caplog.records if r.levelno >= logging.WARNING]

    def test_unreachable_target_is_reported(self, caplog):
        caplog.set_level(logging.WARNING, logger="moesim.core.engine.workload_generator")
        calibration = calibrate_trace(SHAPE, 0.5, -0.9, seed=5, token_dispersion=0.2, sample_prompts=200, sample_tokens=16)

        assert calibration.measured_prompt_corr > -0.5
        assert "prompt correlation" in caplog.text

    def test_too_few_sample_prompts_rejected(self):
        with pytest.raises(ScenarioValidationError):
            calibrate_trace(SHAPE, 0.5, 0.5, sample_prompts=2)

    def test_calibrated_matrices_are_stochastic(self):
        layer, prompt = calibrated_matrices(SHAPE, 0.3, 0.7)

        assert layer.shape == (3, 8, 8)
        assert prompt.shape == (4, 8, 8)
        assert np.allclose(layer.sum(axis=2), 1.0)
        assert np.allclose(prompt[0].diagonal(), 0.7 + 0.3 / 8)


class TestSkewedPrior:
    """Test per-task routing priors."""

    def test_rows_sum_to_one(self):
        prior = skewed_routing_prior(SHAPE, 1.0, offset=2)

        assert np.allclose(prior.sum(axis=1), 1.0)
        assert prior[0].argmax() == 2
        assert prior[1].argmax() == 3

    def test_zero_skew_is_uniform(self):
        assert np.allclose(skewed_routing_prior(SHAPE, 0.0), 1.0 / 8)


class TestExtractTaskType:
    """Test keyword task classification."""

    def setup_method(self):
        self.profiles = default_task_profiles(SHAPE)

    def test_keyword_match(self):
        assert extract_task_type("Summarize the following text", self.profiles) == ETaskType.SUMMARIZATION
        assert extract_task_type("Please CLASSIFY this review", self.profiles) == ETaskType.CLASSIFICATION

    def test_most_matches_wins(self):
        text = "Compare these two, explain the difference and the contrast"
        assert extract_task_type(text, self.profiles) == ETaskType.COMPARISON

    def test_tie_goes_to_smallest_task_id(self):
        assert extract_task_type("compare and classify", self.profiles) == "clsfy"

    def test_whole_words_only(self):
        assert extract_task_type("classifying", self.profiles) == ETaskType.CONVERSATION

    def test_default_task(self):
        assert extract_task_type("xyzzy", self.profiles) == ETaskType.CONVERSATION
        assert extract_task_type("xyzzy", self.profiles, default_task="qa") == "qa"


class TestCrossCorrelation:
    """Test lag-0 Pearson correlation."""

    def test_identical(self):
        assert cross_correlation([1, 2, 3, 4], [1, 2, 3, 4]) == pytest.approx(1.0)

    def test_reversed(self):
        assert cross_correlation([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)

    def test_constant_sequence(self):
        assert cross_correlation([5, 5, 5], [1, 2, 3]) == 0.0

    def test_length_mismatch_rejected(self):
        with pytest.raises(ScenarioValidationError):
            cross_correlation([1, 2], [1, 2, 3])


class TestTraceFiles:
    """Test JSON-lines trace files."""

    def test_write_then_read(self, tmp_path):
        trace = gen_routing_trace(SHAPE, _calibration(0.5, 0.5, dispersion=0.2), 5, 4, task_ids=["qa"] * 5)
        path = tmp_path / "trace.jsonl"
        write_trace_jsonl(trace, path)
        restored = read_trace_jsonl(path, num_experts=8)

        assert len(path.read_text().splitlines()) == 5
        assert restored.task_ids == ["qa"] * 5
        assert all(np.array_equal(a, b) for a, b in zip(trace, restored))
