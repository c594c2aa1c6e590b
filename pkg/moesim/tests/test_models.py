"""
Tests for the moesim data models.

Covers model geometry, requests, task profiles, placements, loading plans,
the cost model and routing traces.
"""

import numpy as np
import pytest

from moesim.core.constants import EngineMode, LoadOp, RequestState
from moesim.core.models import (
    CostModel,
    EngineConfig,
    LayerPlan,
    LengthDistribution,
    LoadingPlan,
    ModelShape,
    Placement,
    Request,
    RoutingTrace,
    budgets_from_fraction,
)
from moesim.utils.error_utils import InvalidTransitionError, ScenarioValidationError


def _request(**overrides):
    values = dict(
        request_id=0,
        arrival_time=0.0,
        task_id="qa",
        input_tokens=10,
        slo_ttft=5.0,
        remaining_gen_estimate=100,
    )
    values.update(overrides)
    return Request(**values)


class TestModelShape:
    """Test model geometry validation and byte accounting."""

    def test_byte_accounting(self):
        shape = ModelShape(num_moe_layers=4, experts_per_layer=8, top_k=2, expert_bytes=1000, base_bytes=5000)

        assert shape.total_experts == 32
        assert shape.full_expert_bytes == 32_000
        assert shape.full_model_bytes == 37_000
        assert shape.device_bytes([2, 2, 3, 1]) == 5000 + 8 * 1000

    def test_top_k_larger_than_experts_rejected(self):
        with pytest.raises(ScenarioValidationError):
            ModelShape(num_moe_layers=2, experts_per_layer=2, top_k=3, expert_bytes=1)

    def test_from_dict(self):
        shape = ModelShape.from_dict(
            {"num_moe_layers": 2, "experts_per_layer": 4, "top_k": 1, "expert_bytes": 7}
        )
        assert shape == ModelShape(2, 4, 1, 7)


class TestRequest:
    """Test request lifecycle and validation."""

    def test_lifecycle(self):
        request = _request()
        assert request.state is RequestState.WAITING
        assert request.needs_prefill

        request.transition_to(RequestState.SCHEDULED)
        request.transition_to(RequestState.RUNNING)
        request.transition_to(RequestState.COMPLETED)
        assert request.state is RequestState.COMPLETED

    def test_skipping_a_state_is_rejected(self):
        request = _request()
        with pytest.raises(InvalidTransitionError):
            request.transition_to(RequestState.RUNNING)

    def test_reverting_a_state_is_rejected(self):
        request = _request()
        request.transition_to(RequestState.SCHEDULED)
        with pytest.raises(InvalidTransitionError):
            request.transition_to(RequestState.WAITING)

    def test_empty_prompt_rejected(self):
        with pytest.raises(ScenarioValidationError):
            _request(input_tokens=0)

    def test_defaults(self):
        request = _request(request_id=3, remaining_gen_estimate=40)
        assert request.initial_gen_estimate == 40
        assert request.output_tokens == 40
        assert request.prompt_index == 3

    def test_serialization(self):
        request = _request(output_tokens=12, prompt_index=5)
        restored = Request.from_dict(request.to_dict())

        assert restored.to_dict() == request.to_dict()


class TestLengthDistribution:
    """Test the log-normal length distribution."""

    def test_sample_matches_p90(self):
        dist = LengthDistribution(mean=120.0, p90=230.0)
        samples = dist.sample(np.random.default_rng(0), 200_000, max_tokens=100_000)

        assert samples.min() >= 1
        assert np.quantile(samples, 0.9) == pytest.approx(230.0, rel=0.02)
        assert samples.mean() == pytest.approx(120.0, rel=0.02)

    def test_sample_respects_cap(self):
        dist = LengthDistribution(mean=120.0, p90=230.0)
        samples = dist.sample(np.random.default_rng(1), 10_000, max_tokens=50)
        assert samples.max() <= 50

    def test_impossible_statistics_rejected(self):
        # A log-normal's p90 cannot exceed mean * exp(z^2 / 2), about 2.27x here
        with pytest.raises(ScenarioValidationError):
            LengthDistribution(mean=100.0, p90=1000.0)
        with pytest.raises(ScenarioValidationError):
            LengthDistribution(mean=100.0, p90=90.0)


class TestPlacement:
    """Test placement invariants."""

    def setup_method(self):
        self.shape = ModelShape(num_moe_layers=2, experts_per_layer=4, top_k=2, expert_bytes=10, base_bytes=100)

    def test_full_placement(self):
        placement = Placement.full(self.shape)

        assert placement.resident_counts == (4, 4)
        assert placement.device_bytes_used == 100 + 8 * 10
        assert placement.resident_mask().all()

    def test_budget_overflow_rejected(self):
        with pytest.raises(ScenarioValidationError):
            Placement.from_sets(self.shape, [{0, 1, 2}, {0}], budgets=(2, 2))

    def test_out_of_range_expert_rejected(self):
        with pytest.raises(ScenarioValidationError):
            Placement.from_sets(self.shape, [{0}, {4}], budgets=(2, 2))

    def test_with_layer(self):
        placement = Placement.full(self.shape).with_layer(1, {3}, budget=2)

        assert placement.resident == (frozenset({0, 1, 2, 3}), frozenset({3}))
        assert placement.budgets == (4, 2)
        assert placement.expert_bytes_used == 50

    def test_snapshot_records(self):
        placement = Placement.from_sets(self.shape, [{2, 0}, {1}], budgets=(2, 2))
        records = placement.to_records(time=1.5, plan_id=3)

        assert records[0] == {"time": 1.5, "plan_id": 3, "layer": 0, "resident": [0, 2], "device_bytes": 130}
        assert records[1]["resident"] == [1]


class TestLoadingPlan:
    """Test per-layer transfer plans."""

    def setup_method(self):
        self.shape = ModelShape(num_moe_layers=2, experts_per_layer=8, top_k=2, expert_bytes=10)

    def test_sequential_delta_e(self):
        plan = LoadingPlan(
            layers=(
                LayerPlan(layer=0, evictions=(), loads=(1, 2, 3)),
                LayerPlan(layer=1, evictions=(), loads=(4,)),
            ),
            per_expert_transfer=0.1,
            budgets=(8, 8),
        )

        assert plan.estimated_latency == pytest.approx(0.4)
        assert plan.total_loads == 4
        windows = plan.layer_windows(start=2.0)
        assert [w[0] for w in windows] == [0, 1]
        assert windows[0][1:] == pytest.approx((2.0, 2.3))
        assert windows[1][1:] == pytest.approx((2.3, 2.4))

    def test_empty_layers_have_no_window(self):
        plan = LoadingPlan(
            layers=(LayerPlan(0, (), ()), LayerPlan(1, (5,), (6,))),
            per_expert_transfer=0.5,
            budgets=(8, 8),
        )
        assert plan.layer_windows(0.0) == [(1, 0.0, 0.5)]

    def test_evictions_come_first(self):
        layer_plan = LayerPlan(layer=0, evictions=(1,), loads=(2,))
        assert layer_plan.ops == [(LoadOp.EVICT, 1), (LoadOp.LOAD, 2)]

    def test_apply(self):
        current = Placement.from_sets(self.shape, [{0, 1}, {0, 1}], budgets=(2, 2))
        plan = LoadingPlan(
            layers=(LayerPlan(0, (1,), (5,)), LayerPlan(1, (), ())),
            per_expert_transfer=0.1,
            budgets=(2, 2),
        )

        result = plan.apply(current)
        assert result.resident == (frozenset({0, 5}), frozenset({0, 1}))


class TestCostModel:
    """Test cost model construction."""

    def setup_method(self):
        self.shape = ModelShape(num_moe_layers=6, experts_per_layer=32, top_k=2, expert_bytes=1_000_000)

    def test_calibrated_to_full_transfer(self):
        cost = CostModel.calibrated(self.shape, per_token_cost=0.001, full_transfer_seconds=4.431)

        assert cost.per_expert_transfer == pytest.approx(4.431 / 192)
        assert cost.full_transfer_seconds(self.shape) == pytest.approx(4.431)

    def test_from_bandwidth(self):
        cost = CostModel.from_bandwidth(
            self.shape, 0.001, hd_bandwidth=1e9, transfer_setup=0.001, bandwidth_degradation=2.0
        )

        assert cost.per_expert_transfer == pytest.approx(0.001 + 1_000_000 / 5e8)
        assert cost.hd_bandwidth == pytest.approx(5e8)

    def test_predictor_cost_per_mode(self):
        cost = CostModel(0.001, 0.01, 1e9, predictor_invocation_cost=0.4, predictor_layer_cost=0.2)

        assert cost.predictor_cost(EngineMode.BASELINE, 6) == 0.0
        assert cost.predictor_cost(EngineMode.EMOE_A, 6) == pytest.approx(0.4)
        assert cost.predictor_cost(EngineMode.EMOE_E, 6) == pytest.approx(0.4)
        assert cost.predictor_cost(EngineMode.EMOE_L, 6) == pytest.approx(0.4 + 5 * 0.2)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"per_token_cost": 0.0},
            {"per_expert_transfer": -1.0},
            {"contention_factor": 0.5},
        ],
    )
    def test_invalid_values_rejected(self, kwargs):
        values = {"per_token_cost": 0.001, "per_expert_transfer": 0.01, "hd_bandwidth": 1e9}
        values.update(kwargs)
        with pytest.raises(ScenarioValidationError):
            CostModel(**values)


class TestEngineConfig:
    """Test engine settings validation."""

    def test_budgets_from_fraction(self):
        shape = ModelShape(2, 10, 2, 1)
        assert budgets_from_fraction(shape, 0.6) == (6, 6)
        assert budgets_from_fraction(shape, 0.01) == (1, 1)
        assert budgets_from_fraction(shape, 0.6, [None, 3]) == (6, 3)

    def test_budget_validation(self):
        shape = ModelShape(2, 10, 2, 1)
        config = EngineConfig(mode=EngineMode.EMOE_A, budgets=(0, 10), token_budget=100)
        with pytest.raises(ScenarioValidationError):
            config.validate(shape)

    def test_baseline_ignores_budgets(self):
        shape = ModelShape(2, 10, 2, 1)
        EngineConfig(mode="baseline", budgets=(), token_budget=100).validate(shape)

    def test_invalid_period_rejected(self):
        with pytest.raises(ScenarioValidationError):
            EngineConfig(mode=EngineMode.EMOE_A, budgets=(1,), token_budget=100, invocation_period=0)


class TestRoutingTrace:
    """Test routing trace helpers."""

    def setup_method(self):
        self.shape = ModelShape(num_moe_layers=2, experts_per_layer=4, top_k=2, expert_bytes=1)

    def test_dominant_experts_tie_goes_to_lower_index(self):
        prompt = np.array([[[2, 0], [1, 0]], [[3, 0], [3, 1]]])
        trace = RoutingTrace([prompt], num_experts=4)

        assert trace.dominant_experts(0).tolist() == [1, 3]

    def test_validate_rejects_duplicate_choices(self):
        prompt = np.array([[[1, 1]], [[0, 2]]])
        with pytest.raises(ScenarioValidationError):
            RoutingTrace([prompt], num_experts=4).validate(self.shape)

    def test_validate_rejects_out_of_range(self):
        prompt = np.array([[[1, 4]], [[0, 2]]])
        with pytest.raises(ScenarioValidationError):
            RoutingTrace([prompt], num_experts=4).validate(self.shape)

    def test_records_keep_task_labels(self):
        prompts = [np.array([[[0, 1]], [[2, 3]]]), np.array([[[1, 0]], [[3, 2]]])]
        trace = RoutingTrace(prompts, num_experts=4, task_ids=["qa", "sum"])
        restored = RoutingTrace.from_records(list(reversed(trace.to_records())), num_experts=4)

        assert restored.task_ids == ["qa", "sum"]
        assert np.array_equal(restored[1], prompts[1])
