"""
Tests for expected-token accounting, expert selection, loading plans and
token routing.
"""

import numpy as np
import pytest

from moesim.core.engine.expert_store import (
    derive_sensitivity,
    expected_tokens,
    plan_loading,
    plan_task_aware,
    route_batch,
    route_token,
    select_experts,
)
from moesim.core.models import (
    CostModel,
    ExpectedTokens3D,
    LengthDistribution,
    ModelShape,
    Placement,
    Request,
    TaskProfile,
)
from moesim.utils.error_utils import RoutingError, ScenarioValidationError

COST = CostModel(per_token_cost=0.001, per_expert_transfer=0.1, hd_bandwidth=1e9)


def _profile(task_id, sensitivity, experts, expected_output=200.0):
    m = len(sensitivity)
    return TaskProfile(
        task_id=task_id,
        name=task_id,
        keywords=(task_id,),
        output_length_dist=LengthDistribution(100.0, 180.0),
        input_length_dist=LengthDistribution(100.0, 180.0),
        expected_output_tokens=expected_output,
        slo_ttft=10.0,
        sensitivity=sensitivity,
        routing_prior=np.full((m, experts), 1.0 / experts),
    )


def _request(request_id, task_id, input_tokens):
    return Request(
        request_id=request_id,
        arrival_time=0.0,
        task_id=task_id,
        input_tokens=input_tokens,
        slo_ttft=10.0,
        remaining_gen_estimate=10,
    )


def _expected(aggregate):
    aggregate = np.asarray(aggregate, dtype=float)
    return ExpectedTokens3D(task_ids=("all",), per_task=aggregate[None, :, :])


class TestExpectedTokens:
    """Test expected tokens per task, layer and expert."""

    def test_hand_evaluated(self):
        profile = _profile("qa", [1], experts=4, expected_output=200.0)
        result = expected_tokens(
            [profile],
            running=[_request(0, "qa", 100)],
            incoming=[_request(1, "qa", 50)],
            frequencies={"qa": np.full((1, 4), 0.25)},
        )

        assert np.allclose(result.for_task("qa"), 137.5)
        assert result.aggregate.sum() == pytest.approx(150 + 2 * 200)

    def test_insensitive_layer_is_zero(self):
        profile = _profile("qa", [0, 1], experts=4)
        requests = [_request(0, "qa", 100)]
        freq = {"qa": np.full((2, 4), 0.25)}

        masked = expected_tokens([profile], requests, [], freq)
        agnostic = expected_tokens([profile], requests, [], freq, task_aware=False)

        assert (masked.aggregate[0] == 0).all()
        assert (masked.aggregate[1] > 0).all()
        assert np.allclose(agnostic.aggregate[0], agnostic.aggregate[1])

    def test_task_without_requests_contributes_nothing(self):
        profiles = [_profile("qa", [1], 4), _profile("sum", [1], 4)]
        freq = {"qa": np.full((1, 4), 0.25)}
        result = expected_tokens(profiles, [_request(0, "qa", 40)], [], freq)

        assert (result.for_task("sum") == 0).all()

    def test_unknown_task_rejected(self):
        with pytest.raises(ScenarioValidationError):
            expected_tokens([_profile("qa", [1], 4)], [_request(0, "chat", 10)], [], {"qa": np.full((1, 4), 0.25)})

    def test_unnormalised_frequencies_rejected(self):
        with pytest.raises(ScenarioValidationError):
            expected_tokens([_profile("qa", [1], 4)], [_request(0, "qa", 10)], [], {"qa": np.full((1, 4), 0.3)})

    def test_matches_direct_evaluation(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            m, e = rng.integers(1, 5), rng.integers(2, 9)
            tasks = [f"t{i}" for i in range(rng.integers(1, 4))]
            profiles = [
                _profile(t, rng.integers(0, 2, size=m), e, expected_output=float(rng.integers(1, 500)))
                for t in tasks
            ]
            frequencies = {t: rng.dirichlet(np.ones(e), size=m) for t in tasks}
            requests = [
                _request(i, tasks[rng.integers(len(tasks))], int(rng.integers(1, 1000)))
                for i in range(rng.integers(0, 10))
            ]
            split = len(requests) // 2
            result = expected_tokens(profiles, requests[:split], requests[split:], frequencies)

            for profile in profiles:
                mine = [r for r in requests if r.task_id == profile.task_id]
                expected = np.zeros((m, e))
                for layer in range(m):
                    for expert in range(e):
                        volume = sum(r.input_tokens for r in mine) + len(mine) * profile.expected_output_tokens
                        expected[layer, expert] = volume * profile.sensitivity[layer] * frequencies[profile.task_id][layer, expert]
                assert np.allclose(result.for_task(profile.task_id), expected, rtol=1e-9, atol=0)


class TestSelectExperts:
    """Test top-L selection per layer."""

    def setup_method(self):
        self.shape = ModelShape(num_moe_layers=1, experts_per_layer=4, top_k=2, expert_bytes=1)

    def test_largest_with_index_tiebreak(self):
        assert select_experts(_expected([[10, 40, 40, 5]]), self.shape, [2]) == [frozenset({1, 2})]

    def test_all_zero_picks_lowest_indices(self):
        assert select_experts(_expected([[0, 0, 0, 0]]), self.shape, [2]) == [frozenset({0, 1})]

    def test_full_budget_selects_everything(self):
        assert select_experts(_expected([[3, 1, 0, 2]]), self.shape, [4]) == [frozenset(range(4))]

    def test_resident_experts_win_ties(self):
        current = Placement.from_sets(self.shape, [{2, 3}], budgets=(2,))
        assert select_experts(_expected([[0, 0, 0, 0]]), self.shape, [2], current) == [frozenset({2, 3})]

    def test_invariant_under_scaling(self):
        shape = ModelShape(num_moe_layers=3, experts_per_layer=8, top_k=2, expert_bytes=1)
        rng = np.random.default_rng(4)
        for _ in range(20):
            aggregate = rng.random((3, 8)) * 100
            budgets = rng.integers(1, 9, size=3)
            assert select_experts(_expected(aggregate), shape, budgets) == select_experts(
                _expected(aggregate * 3.7), shape, budgets
            )

    def test_budget_above_experts_rejected(self):
        with pytest.raises(ScenarioValidationError):
            select_experts(_expected([[1, 2, 3, 4]]), self.shape, [5])


class TestPlanLoading:
    """Test transfer plans between placements."""

    def setup_method(self):
        self.shape = ModelShape(num_moe_layers=2, experts_per_layer=8, top_k=2, expert_bytes=100, base_bytes=1000)

    def test_sequential_delta_e(self):
        current = Placement.from_sets(self.shape, [{0}, {0}], budgets=(4, 4))
        plan = plan_loading(current, [{0, 1, 2, 3}, {0, 4}], COST)

        assert [len(lp.loads) for lp in plan.layers] == [3, 1]
        assert plan.estimated_latency == pytest.approx(0.4)

    def test_same_target_is_empty(self):
        current = Placement.from_sets(self.shape, [{0, 1}, {2, 3}], budgets=(2, 2))
        plan = plan_loading(current, current.resident, COST)

        assert plan.is_empty
        assert plan.estimated_latency == 0.0

    def test_idempotent(self):
        current = Placement.full(self.shape)
        target = [frozenset({1, 5}), frozenset({0, 7})]
        placement = plan_loading(current, target, COST, budgets=(2, 2)).apply(current)

        assert placement.resident == tuple(target)
        assert plan_loading(placement, target, COST).is_empty

    def test_loads_and_evictions_are_disjoint(self):
        current = Placement.from_sets(self.shape, [{0, 1, 2}, {3, 4}], budgets=(3, 3))
        plan = plan_loading(current, [{2, 5, 6}, {4, 7}], COST)

        for layer_plan in plan.layers:
            assert not set(layer_plan.loads) & set(layer_plan.evictions)
        assert plan.layers[0].evictions == (0, 1)
        assert plan.layers[1].loads == (7,)

    def test_loads_ordered_by_score(self):
        current = Placement.from_sets(self.shape, [set(), set()], budgets=(3, 3))
        scores = np.zeros((2, 8))
        scores[0, [1, 4, 6]] = [5.0, 9.0, 7.0]
        plan = plan_loading(current, [{1, 4, 6}, {2}], COST, scores=scores)

        assert plan.layers[0].loads == (4, 6, 1)

    def test_memory_accounting_is_exact(self):
        current = Placement.full(self.shape)
        placement = plan_loading(current, [{0, 1, 2}, {3}], COST, budgets=(3, 3)).apply(current)

        assert placement.device_bytes_used == 1000 + 4 * 100

    def test_target_over_budget_rejected(self):
        current = Placement.from_sets(self.shape, [{0}, {0}], budgets=(2, 2))
        with pytest.raises(ScenarioValidationError):
            plan_loading(current, [{0, 1, 2}, {0}], COST)


class TestPlanTaskAware:
    """Test loading restricted to the layers a task is sensitive to."""

    def setup_method(self):
        self.shape = ModelShape(num_moe_layers=2, experts_per_layer=4, top_k=2, expert_bytes=1)

    def _plans(self, profiles, requests, frequencies, current, budgets):
        masked = expected_tokens(profiles, requests, [], frequencies)
        agnostic = expected_tokens(profiles, requests, [], frequencies, task_aware=False)
        target = select_experts(agnostic, self.shape, budgets, current)
        return (
            plan_loading(current, target, COST, scores=agnostic.aggregate, budgets=budgets),
            plan_task_aware(current, target, masked, agnostic, budgets, COST),
        )

    def test_insensitive_layer_skips_loads(self):
        profile = _profile("qa", [0, 1], experts=4)
        freq = {"qa": np.array([[0.05, 0.05, 0.45, 0.45]] * 2)}
        current = Placement.from_sets(self.shape, [{0, 1}, {0, 1}], budgets=(2, 2))

        agnostic, aware = self._plans([profile], [_request(0, "qa", 100)], freq, current, (2, 2))

        assert agnostic.estimated_latency == pytest.approx(0.4)
        assert aware.layers[0].loads == ()
        assert aware.layers[0].evictions == ()
        assert set(aware.layers[1].loads) == {2, 3}
        assert aware.estimated_latency == pytest.approx(0.2)

    def test_never_slower_than_agnostic(self):
        shape = ModelShape(num_moe_layers=3, experts_per_layer=6, top_k=2, expert_bytes=1)
        self.shape = shape
        rng = np.random.default_rng(7)
        for _ in range(200):
            tasks = ["a", "b", "c"]
            profiles = [_profile(t, rng.integers(0, 2, size=3), 6) for t in tasks]
            frequencies = {t: rng.dirichlet(np.ones(6), size=3) for t in tasks}
            requests = [_request(i, tasks[rng.integers(3)], int(rng.integers(1, 500))) for i in range(5)]
            budgets = tuple(int(b) for b in rng.integers(1, 7, size=3))
            current = Placement.from_sets(
                shape, [rng.choice(6, size=b, replace=False) for b in budgets], budgets=budgets
            )

            agnostic, aware = self._plans(profiles, requests, frequencies, current, budgets)

            assert aware.estimated_latency <= agnostic.estimated_latency + 1e-12
            for a, b in zip(aware.layers, agnostic.layers):
                assert set(a.loads) <= set(b.loads)
            # Stays within budget
            aware.apply(current)


class TestRouting:
    """Test token routing against the resident set."""

    def setup_method(self):
        self.shape = ModelShape(num_moe_layers=1, experts_per_layer=8, top_k=2, expert_bytes=1)
        self.placement = Placement.from_sets(self.shape, [{2, 7}], budgets=(2,))

    def test_top_choice_resident_is_a_hit(self):
        result = route_token([7, 0], self.placement, 0)
        assert (result.expert, result.hit) == (7, True)

    def test_next_choice_resident(self):
        result = route_token([0, 2], self.placement, 0)
        assert (result.expert, result.hit) == (2, False)

    def test_fallback_uses_scores(self):
        scores = np.zeros((1, 8))
        scores[0, 2], scores[0, 7] = 1.0, 5.0

        result = route_token([0, 1], self.placement, 0, scores)
        assert (result.expert, result.hit) == (7, False)

    def test_fallback_without_scores(self):
        assert route_token([0, 1], self.placement, 0).expert == 2

    def test_empty_layer_raises(self):
        empty = Placement.from_sets(self.shape, [set()], budgets=(2,))
        with pytest.raises(RoutingError):
            route_token([0, 1], empty, 0)

    def test_batch_matches_single_tokens(self):
        rng = np.random.default_rng(3)
        gates = np.stack([rng.choice(8, size=2, replace=False) for _ in range(50)])
        scores = rng.random((1, 8))

        experts, hits = route_batch(gates, self.placement, 0, scores)
        for row, expert, hit in zip(gates, experts, hits):
            single = route_token(row, self.placement, 0, scores)
            assert (single.expert, single.hit) == (int(expert), bool(hit))


class TestDeriveSensitivity:
    """Test sensitivity bits from accuracy curves."""

    def test_curve(self):
        curve = [(0.0, 0.6), (0.5, 0.82), (1.0, 0.98)]
        assert derive_sensitivity(curve, 4).tolist() == [0, 1, 1, 1]

    def test_flat_high_curve_is_insensitive(self):
        assert derive_sensitivity([(0.0, 0.99), (1.0, 0.99)], 3).tolist() == [0, 0, 0]

    def test_flat_low_curve_is_sensitive(self):
        assert derive_sensitivity([(0.0, 0.5), (1.0, 0.5)], 3).tolist() == [1, 1, 1]

    def test_threshold(self):
        curve = [(0.0, 0.6), (0.5, 0.82), (1.0, 0.98)]
        assert derive_sensitivity(curve, 4, threshold=0.5).tolist() == [0, 0, 0, 0]
