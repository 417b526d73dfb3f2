import math

import numpy as np
import pytest

from speedshare.errors import ConfigurationError
from speedshare.lstm import HyperparameterSetting
from speedshare.nmm import (
    GridSpec,
    NmmConfig,
    TERMINATION_BUDGET,
    TERMINATION_STDDEV,
    TERMINATION_TARGET,
    _repair_duplicate,
    initial_simplex,
    minimize,
    project_to_grid,
)
from speedshare.nmm import test_profile_grid as ci_profile_grid

PAPER_VERTEX = HyperparameterSetting(0.01, 1, 2, 100)


def surrogate(goal, grid):
    ranges = [hi - lo for lo, hi, _ in grid.axes().values()]

    def objective(vertex):
        return sum(
            ((v - g) / r) ** 2 for v, g, r in zip(vertex.as_tuple(), goal, ranges)
        )

    return objective


class TestGridSpec:
    def test_default_sizes(self):
        assert GridSpec().sizes() == (20, 10, 20, 46)

    def test_test_profile_shrinks_epochs(self):
        assert ci_profile_grid().sizes() == (20, 10, 20, 10)

    def test_indivisible_span_rejected(self):
        with pytest.raises(ConfigurationError):
            GridSpec(epochs=(100, 1010, 20))

    def test_negative_step_rejected(self):
        with pytest.raises(ConfigurationError):
            GridSpec(layers=(1, 10, 0))

    def test_vertex_round_trip(self):
        grid = GridSpec()
        for indices in [(0, 0, 0, 0), (19, 9, 19, 45), (5, 3, 7, 11)]:
            vertex = grid.vertex_from_indices(indices)
            assert grid.indices_of(vertex) == indices

    def test_off_grid_detected(self):
        grid = GridSpec()
        with pytest.raises(ConfigurationError):
            grid.indices_of(HyperparameterSetting(0.015, 1, 2, 100))


class TestInitialSimplex:
    def test_paper_vertex(self):
        simplex = initial_simplex(PAPER_VERTEX, GridSpec())
        assert [v.as_tuple() for v in simplex] == [
            (0.01, 1, 2, 100),
            (0.02, 1, 2, 100),
            (0.01, 2, 2, 100),
            (0.01, 1, 4, 100),
            (0.01, 1, 2, 120),
        ]

    def test_at_max_steps_down(self):
        simplex = initial_simplex(HyperparameterSetting(0.2, 1, 2, 100), GridSpec())
        assert simplex[1].as_tuple() == (0.19, 1, 2, 100)

    def test_five_distinct_vertices(self):
        grid = GridSpec()
        rng = np.random.default_rng(0)
        for _ in range(25):
            indices = tuple(int(rng.integers(0, s)) for s in grid.sizes())
            simplex = initial_simplex(grid.vertex_from_indices(indices), grid)
            assert len(set(simplex)) == 5

    def test_off_grid_vertex_rejected(self):
        with pytest.raises(ConfigurationError):
            initial_simplex(HyperparameterSetting(0.013, 1, 2, 100), GridSpec())


class TestProjectToGrid:
    def test_mixed_rounding(self):
        grid = GridSpec()
        assert project_to_grid((0.014, 1.4, 3.0, 111), grid).as_tuple() == (
            0.01,
            1,
            4,
            120,
        )

    def test_clamps_to_minima(self):
        assert project_to_grid((-5, 0, 0, 0), GridSpec()).as_tuple() == (0.01, 1, 2, 100)

    def test_clamps_to_maxima(self):
        assert project_to_grid((9, 99, 99, 1e9), GridSpec()).as_tuple() == (
            0.2,
            10,
            40,
            1000,
        )

    def test_on_grid_unchanged(self):
        grid = GridSpec()
        vertex = grid.vertex_from_indices((3, 4, 5, 6))
        assert project_to_grid(vertex.as_tuple(), grid) == vertex

    def test_midpoint_rounds_up(self):
        grid = GridSpec()
        assert project_to_grid((0.015, 1.5, 3.0, 110), grid).as_tuple() == (
            0.02,
            2,
            4,
            120,
        )


class TestRepairDuplicate:
    def test_no_collision_is_identity(self):
        grid = GridSpec()
        vertex = grid.vertex_from_indices((1, 1, 1, 1))
        assert _repair_duplicate(vertex, set(), grid) is vertex

    def test_collision_steps_lowest_dimension_up(self):
        grid = GridSpec()
        vertex = grid.vertex_from_indices((1, 1, 1, 1))
        repaired = _repair_duplicate(vertex, {vertex}, grid)
        assert repaired.as_tuple() == (0.03, 2, 4, 120)

    def test_collision_at_max_finds_other_direction(self):
        grid = GridSpec()
        corner = grid.vertex_from_indices((19, 9, 19, 45))
        taken = {corner}
        repaired = _repair_duplicate(corner, taken, grid)
        assert repaired != corner
        assert grid.contains(repaired)


class TestMinimize:
    def test_target_at_predefined_stops_after_one_evaluation(self):
        calls = []

        def objective(vertex):
            calls.append(vertex)
            return 0.05

        best, value, trace = minimize(
            objective, PAPER_VERTEX, GridSpec(), NmmConfig(target_value=0.05)
        )
        assert len(calls) == 1
        assert trace.evaluation_count == 1
        assert trace.termination_reason == TERMINATION_TARGET
        assert best == PAPER_VERTEX
        assert value == 0.05

    def test_deterministic_trace(self):
        grid = GridSpec()
        goal = grid.vertex_from_indices((10, 5, 10, 20)).as_tuple()
        results = []
        for _ in range(2):
            best, value, trace = minimize(
                surrogate(goal, grid), PAPER_VERTEX, grid,
                NmmConfig(target_value=-1.0, max_evaluations=30),
            )
            results.append(
                (best, value, [(e.vertex, e.value, e.kind) for e in trace.entries])
            )
        assert results[0] == results[1]

    def test_memoization_no_vertex_evaluated_twice(self):
        grid = GridSpec()
        seen = []

        def objective(vertex):
            seen.append(vertex)
            return surrogate(grid.vertex_from_indices((4, 4, 4, 4)).as_tuple(), grid)(
                vertex
            )

        minimize(objective, PAPER_VERTEX, grid, NmmConfig(target_value=-1.0))
        assert len(seen) == len(set(seen))

    def test_every_evaluated_vertex_is_on_grid(self):
        grid = GridSpec()
        goal = grid.vertex_from_indices((15, 8, 2, 40)).as_tuple()
        _, _, trace = minimize(
            surrogate(goal, grid), PAPER_VERTEX, grid, NmmConfig(target_value=-1.0)
        )
        for entry in trace.entries:
            assert grid.contains(entry.vertex)

    def test_best_never_worse_than_start(self):
        grid = GridSpec()
        rng = np.random.default_rng(42)
        for _ in range(5):
            goal = tuple(
                grid.vertex_from_indices(
                    [int(rng.integers(0, s)) for s in grid.sizes()]
                ).as_tuple()
            )
            objective = surrogate(goal, grid)
            _, value, trace = minimize(
                objective, PAPER_VERTEX, grid, NmmConfig(target_value=-1.0)
            )
            assert value <= trace.entries[0].value

    def test_all_infinite_objective_exhausts_budget(self):
        _, value, trace = minimize(
            lambda v: math.inf,
            PAPER_VERTEX,
            GridSpec(),
            NmmConfig(target_value=0.05, max_evaluations=12),
        )
        assert trace.termination_reason == TERMINATION_BUDGET
        assert value == math.inf
        assert trace.evaluation_count <= 12

    def test_flat_objective_converges_by_stddev(self):
        _, value, trace = minimize(
            lambda v: 1.0, PAPER_VERTEX, GridSpec(), NmmConfig(target_value=0.5)
        )
        assert trace.termination_reason == TERMINATION_STDDEV
        assert value == 1.0
        assert trace.evaluation_count == 5

    def test_budget_counts_distinct_vertices(self):
        grid = GridSpec()
        goal = grid.vertex_from_indices((19, 9, 19, 45)).as_tuple()
        _, _, trace = minimize(
            surrogate(goal, grid), PAPER_VERTEX, grid,
            NmmConfig(target_value=-1.0, max_evaluations=17),
        )
        assert trace.evaluation_count <= 17
        assert len({e.vertex for e in trace.entries}) == trace.evaluation_count

    def test_finds_nearby_goal_exactly(self):
        grid = GridSpec()
        goal = grid.vertex_from_indices((2, 2, 3, 3)).as_tuple()
        best, value, trace = minimize(
            surrogate(goal, grid), PAPER_VERTEX, grid,
            NmmConfig(target_value=1e-15),
        )
        assert best.as_tuple() == goal
        assert trace.termination_reason == TERMINATION_TARGET

    def test_surrogate_quality_sample(self):
        # one hard far-corner goal against the exhaustive-scan decile
        grid = GridSpec()
        goal = grid.vertex_from_indices((4, 6, 18, 44)).as_tuple()
        sizes = grid.sizes()
        axes = [
            np.array([grid._axis_value(d, k) for k in range(sizes[d])])
            for d in range(4)
        ]
        ranges = [hi - lo for lo, hi, _ in grid.axes().values()]
        terms = [((a - g) / r) ** 2 for a, g, r in zip(axes, goal, ranges)]
        full = (
            terms[0][:, None, None, None]
            + terms[1][None, :, None, None]
            + terms[2][None, None, :, None]
            + terms[3][None, None, None, :]
        )
        p10 = np.percentile(full.ravel(), 10)
        center = grid.vertex_from_indices(tuple(s // 2 for s in sizes))
        _, value, _ = minimize(
            surrogate(goal, grid), center, grid,
            NmmConfig(target_value=-1.0, max_evaluations=120),
        )
        assert value <= p10
