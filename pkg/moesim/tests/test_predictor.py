"""
Tests for the Markov expert predictor.
"""

from dataclasses import replace

import numpy as np
import pytest

from moesim.core.constants import PredictionVariant
from moesim.core.engine.predictor import (
    MarkovExpertPredictor,
    TransitionModel,
    fit,
    predict_all_layers,
    predict_layerwise,
    predict_prompt_layerwise,
    predicted_frequencies,
    rank_experts,
)
from moesim.core.engine.workload_generator import calibrate_trace, gen_routing_trace
from moesim.core.models import ModelShape, RoutingTrace, TraceCalibration
from moesim.utils.error_utils import ScenarioValidationError
from moesim.utils.stats_utils import bayes_rate, stationary_distribution

CIRCULANT_ROW = np.array([0.7, 0.2, 0.1, 0.0])
SKEWED_CHAIN = np.array(
    [
        [0.6, 0.3, 0.1, 0.0],
        [0.1, 0.5, 0.4, 0.0],
        [0.2, 0.1, 0.3, 0.4],
        [0.5, 0.0, 0.2, 0.3],
    ]
)


def _circulant(row):
    return np.stack([np.roll(row, shift) for shift in range(row.shape[0])])


def _identity_chain_trace(prompts=10, tokens=8, layers=3, experts=4):
    """Every token keeps the same expert through all layers."""
    rank0 = np.arange(tokens) % experts
    routing = np.stack([np.stack([rank0, (rank0 + 1) % experts], axis=1)] * layers)
    return RoutingTrace([routing.copy() for _ in range(prompts)], num_experts=experts)


def _circulant_trace(prompts, tokens, seed):
    shape = ModelShape(num_moe_layers=4, experts_per_layer=4, top_k=2, expert_bytes=1)
    calibration = TraceCalibration(
        layer_transition=np.stack([_circulant(CIRCULANT_ROW)] * 3),
        prompt_transition=np.full((4, 4, 4), 0.25),
        rng_seed=seed,
        token_dispersion=1.0,
    )
    return gen_routing_trace(shape, calibration, prompts, tokens)


def _skewed_chain_trace(pi, prompts, tokens, seed):
    """Entry layer drawn from pi, deeper layers from SKEWED_CHAIN."""
    shape = ModelShape(num_moe_layers=4, experts_per_layer=4, top_k=2, expert_bytes=1)
    calibration = TraceCalibration(
        layer_transition=np.stack([SKEWED_CHAIN] * 3),
        prompt_transition=np.broadcast_to(pi, (4, 4, 4)).copy(),
        rng_seed=seed,
        token_dispersion=1.0,
    )
    return gen_routing_trace(shape, calibration, prompts, tokens)


class TestFit:
    """Test transition counting."""

    def test_identity_chain(self):
        model = fit(_identity_chain_trace())

        for layer in range(model.num_layers - 1):
            assert (model.layer_prob(layer).diagonal() > 0.99).all()

    def test_single_prompt_has_uniform_prompt_transitions(self):
        model = fit(_identity_chain_trace(prompts=1))

        assert np.allclose(model.prompt_probabilities, 0.25)

    def test_rows_are_distributions(self):
        model = fit(_identity_chain_trace())

        assert np.allclose(model.layer_probabilities.sum(axis=-1), 1.0)
        assert np.allclose(model.prompt_probabilities.sum(axis=-1), 1.0)

    def test_recovers_known_transitions(self):
        model = fit(_circulant_trace(prompts=300, tokens=32, seed=1))

        for layer in range(3):
            assert np.abs(model.layer_prob(layer) - _circulant(CIRCULANT_ROW)).max() < 0.05

    def test_large_smoothing_flattens(self):
        model = fit(_identity_chain_trace(), smoothing=1e6)

        assert np.abs(model.layer_probabilities - 0.25).max() < 0.01

    def test_task_counts(self):
        trace = _identity_chain_trace(prompts=4)
        model = fit(trace, task_ids=["qa", "qa", "sum", "sum"])

        assert sorted(model.task_counts) == ["qa", "sum"]
        # 2 prompts x 8 tokens x 2 choices per layer
        assert model.task_counts["qa"].sum(axis=1).tolist() == [32.0, 32.0, 32.0]

    def test_empty_trace_rejected(self):
        with pytest.raises(ScenarioValidationError):
            fit(RoutingTrace([], num_experts=4))

    def test_task_ids_length_checked(self):
        with pytest.raises(ScenarioValidationError):
            fit(_identity_chain_trace(prompts=3), task_ids=["qa"])


class TestPrediction:
    """Test layerwise and all-layers prediction."""

    def test_uniform_model_picks_lowest_indices(self):
        model = TransitionModel(np.zeros((2, 4, 4)), np.zeros((3, 4, 4)))
        prediction = predict_layerwise(model, [2, 3], layer=1, k=2)

        assert prediction.experts(1) == (0, 1)

    def test_layerwise_follows_chain(self):
        model = fit(_identity_chain_trace())
        prediction = predict_layerwise(model, [2], layer=2, k=1)

        assert prediction.experts(2) == (2,)

    def test_layerwise_layer_range(self):
        model = fit(_identity_chain_trace())
        with pytest.raises(ScenarioValidationError):
            predict_layerwise(model, [0], layer=0)
        with pytest.raises(ScenarioValidationError):
            predict_layerwise(model, [7], layer=1)

    def test_all_layers(self):
        prompt_counts = np.zeros((3, 8, 8))
        prompt_counts[:, :, 5] = 100
        model = TransitionModel(np.zeros((2, 8, 8)), prompt_counts)
        prediction = predict_all_layers(model, [[0], [1], [2]], k=2)

        assert prediction.layers == (0, 1, 2)
        assert all(prediction.experts(layer)[0] == 5 for layer in range(3))

    def test_all_layers_empty_history_scores_uniformly(self):
        model = TransitionModel(np.zeros((1, 4, 4)), np.zeros((2, 4, 4)))
        prediction = predict_all_layers(model, [[], [1]], k=2)

        assert np.allclose(prediction.layer_scores(0), 0.25)
        assert prediction.experts(0) == (0, 1)

    def test_all_layers_needs_every_layer(self):
        model = TransitionModel(np.zeros((2, 4, 4)), np.zeros((3, 4, 4)))
        with pytest.raises(ScenarioValidationError):
            predict_all_layers(model, [[0], [1]])

    def test_prompt_layerwise(self):
        trace = _identity_chain_trace()
        model = fit(trace)
        prediction = predict_prompt_layerwise(model, trace[0], k=2)

        assert prediction.top_k.shape == (3, 2)
        assert np.allclose(prediction.scores.sum(axis=1), 1.0)

    def test_rank_experts_ties(self):
        scores = np.array([0.2, 0.4, 0.4, 0.0])
        assert rank_experts(scores, 2).tolist() == [1, 2]
        assert rank_experts(np.zeros(4), 2).tolist() == [0, 1]


class TestMarkovExpertPredictor:
    """Test the predictor used by the simulator."""

    def setup_method(self):
        self.trace = _identity_chain_trace()
        self.predictor = MarkovExpertPredictor(fit(self.trace, task_ids=["qa"] * 10))

    @pytest.mark.parametrize("variant", list(PredictionVariant))
    def test_predict_prompt(self, variant):
        prediction = self.predictor.predict_prompt(self.trace[0], k=2, variant=variant)

        assert prediction.scores.shape == (3, 4)
        assert prediction.top_k.shape == (3, 2)

    def test_default_variant(self):
        predictor = MarkovExpertPredictor(self.predictor.model, variant="layerwise")
        assert predictor.variant is PredictionVariant.LAYERWISE

    def test_task_frequencies(self):
        freq = self.predictor.task_frequencies("qa")

        assert freq.shape == (3, 4)
        assert np.allclose(freq.sum(axis=1), 1.0)

    def test_unseen_task_falls_back_to_aggregate(self):
        trace = _identity_chain_trace(prompts=4)
        model = fit(trace, task_ids=["qa", "qa", "sum", "sum"])

        fallback = predicted_frequencies(model, "conv")
        expected = predicted_frequencies(
            TransitionModel(model.layer_counts, model.prompt_counts, {"all": model.aggregate_counts}),
            "all",
        )
        assert np.allclose(fallback, expected)


class TestBayesRate:
    """Layerwise top-1 accuracy approaches the best achievable rate."""

    def test_top1_accuracy_matches_bayes_rate(self):
        # every layer starts from the chain's stationary distribution, which
        # is far from uniform, so the rate weights the row maxima unevenly
        pi = stationary_distribution(SKEWED_CHAIN)
        model = fit(_skewed_chain_trace(pi, prompts=400, tokens=32, seed=2))
        test = _skewed_chain_trace(pi, prompts=3000, tokens=8, seed=3)
        predicted = {
            (layer, expert): predict_layerwise(model, [expert], layer, 1).experts(layer)[0]
            for layer in range(1, 4)
            for expert in range(4)
        }

        hits = total = 0
        for n in range(len(test)):
            top1 = test.top1(n)
            for layer in range(1, 4):
                guesses = np.array([predicted[(layer, int(e))] for e in top1[layer - 1]])
                hits += int((guesses == top1[layer]).sum())
                total += top1.shape[1]

        assert np.ptp(pi) > 0.1
        assert hits / total == pytest.approx(bayes_rate(SKEWED_CHAIN), abs=0.03)


def _all_layers_top2_hit_rate(prompt_corr):
    shape = ModelShape(num_moe_layers=4, experts_per_layer=8, top_k=2, expert_bytes=1)
    calibration = calibrate_trace(
        shape, 0.5, prompt_corr, seed=4, token_dispersion=0.2, sample_prompts=1000, sample_tokens=16
    )
    predictor = MarkovExpertPredictor(fit(gen_routing_trace(shape, replace(calibration, rng_seed=5), 1000, 16)))
    trace = gen_routing_trace(shape, replace(calibration, rng_seed=6), 1000, 16)

    hits = lookups = 0
    for n in range(1, len(trace)):
        prediction = predictor.predict_prompt(trace[n - 1], k=2, variant=PredictionVariant.ALL_LAYERS)
        top1 = trace.top1(n)
        for layer in range(4):
            hits += int(np.isin(top1[layer], prediction.experts(layer)).sum())
            lookups += top1.shape[1]
    return hits / lookups


class TestPromptCorrelationMonotonicity:
    """All-layers prediction gains from stronger prompt-to-prompt correlation."""

    def test_higher_prompt_correlation_raises_top2_hit_rate(self):
        assert _all_layers_top2_hit_rate(0.9) > _all_layers_top2_hit_rate(0.5) + 0.05


class TestModelFiles:
    """Test saving and loading fitted models."""

    def test_save_and_load(self, tmp_path):
        model = fit(_identity_chain_trace(prompts=4), task_ids=["qa", "qa", "sum", "sum"], smoothing=0.5)
        path = tmp_path / "model.json"
        model.save(path)
        restored = TransitionModel.load(path)

        assert restored.smoothing == 0.5
        assert np.array_equal(restored.layer_counts, model.layer_counts)
        assert np.array_equal(restored.prompt_counts, model.prompt_counts)
        assert np.array_equal(restored.task_counts["sum"], model.task_counts["sum"])

    def test_unknown_format_rejected(self):
        with pytest.raises(ScenarioValidationError):
            TransitionModel.from_dict({"format_version": 99})
