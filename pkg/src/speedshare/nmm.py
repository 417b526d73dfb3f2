"""Nelder-Mead simplex search over the discrete 4-D hyperparameter grid.

The walk itself is the textbook reflect / expand / contract / shrink loop
with standard coefficients; every candidate is snapped onto the grid before
evaluation and every grid vertex is evaluated at most once (memoized).
Termination: the target objective value is reached, the sample standard
deviation of the simplex values drops below tolerance, or the budget of
distinct evaluations runs out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import math

from .errors import ConfigurationError
from .lstm import HyperparameterSetting

TERMINATION_TARGET = "target-reached"
TERMINATION_STDDEV = "stddev-converged"
TERMINATION_BUDGET = "budget-exhausted"


@dataclass(frozen=True)
class GridSpec:
    """Per-dimension (min, max, step) for the four tunables.

    Defaults are the production domains: learning rate 0.01..0.2 by 0.01,
    layers 1..10, units 2..40 by 2, epochs 100..1000 by 20.
    """

    learning_rate: tuple = (0.01, 0.2, 0.01)
    layers: tuple = (1, 10, 1)
    units: tuple = (2, 40, 2)
    epochs: tuple = (100, 1000, 20)

    def __post_init__(self):
        for name, (lo, hi, step) in self.axes().items():
            if step <= 0:
                raise ConfigurationError(f"{name}: step must be positive")
            if lo > hi:
                raise ConfigurationError(f"{name}: min {lo} exceeds max {hi}")
            count = (hi - lo) / step
            if abs(count - round(count)) > 1e-9:
                raise ConfigurationError(
                    f"{name}: span {lo}..{hi} is not divisible by step {step}"
                )

    def axes(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "layers": self.layers,
            "units": self.units,
            "epochs": self.epochs,
        }

    def sizes(self) -> tuple:
        return tuple(
            int(round((hi - lo) / step)) + 1 for lo, hi, step in self.axes().values()
        )

    def _axis_value(self, axis_index: int, grid_index: int):
        lo, hi, step = list(self.axes().values())[axis_index]
        if axis_index == 0:
            return round(lo + grid_index * step, 10)
        return int(round(lo + grid_index * step))

    def vertex_from_indices(self, indices) -> HyperparameterSetting:
        return HyperparameterSetting(
            learning_rate=self._axis_value(0, indices[0]),
            layers=self._axis_value(1, indices[1]),
            units=self._axis_value(2, indices[2]),
            epochs=self._axis_value(3, indices[3]),
        )

    def indices_of(self, vertex: HyperparameterSetting) -> tuple:
        """Grid indices of an on-grid vertex; raises if it is off-grid."""
        indices = []
        for axis, (value, (lo, hi, step)) in enumerate(
            zip(vertex.as_tuple(), self.axes().values())
        ):
            pos = (value - lo) / step
            k = int(round(pos))
            if abs(pos - k) > 1e-6 or k < 0 or k > round((hi - lo) / step):
                raise ConfigurationError(
                    f"vertex {vertex} is off the grid in axis {axis}"
                )
            indices.append(k)
        return tuple(indices)

    def contains(self, vertex: HyperparameterSetting) -> bool:
        try:
            self.indices_of(vertex)
            return True
        except ConfigurationError:
            return False


def test_profile_grid() -> GridSpec:
    """CI-sized grid: epochs shrink to 5..50 by 5; all other axes unchanged."""
    return GridSpec(epochs=(5, 50, 5))


@dataclass(frozen=True)
class NmmConfig:
    alpha: float = 1.0  # reflection
    gamma: float = 2.0  # expansion
    rho: float = 0.5  # contraction
    sigma: float = 0.5  # shrink
    target_value: float = 0.05
    stddev_tol: float = 1e-4
    max_evaluations: int = 50

    def __post_init__(self):
        if self.alpha <= 0 or self.gamma <= 1 or not 0 < self.rho < 1 or not 0 < self.sigma < 1:
            raise ConfigurationError("simplex coefficients out of range")
        if self.max_evaluations < 1:
            raise ConfigurationError("max_evaluations must be positive")


@dataclass(frozen=True)
class TraceEntry:
    vertex: HyperparameterSetting
    value: float
    kind: str  # predefined | initial | reflect | expand | contract-* | shrink


@dataclass
class SearchTrace:
    entries: list = field(default_factory=list)
    evaluation_count: int = 0
    termination_reason: str = ""

    def to_records(self) -> list:
        return [
            {
                "vertex": list(entry.vertex.as_tuple()),
                "value": entry.value if math.isfinite(entry.value) else "inf",
                "kind": entry.kind,
            }
            for entry in self.entries
        ]


def project_to_grid(point, grid: GridSpec) -> HyperparameterSetting:
    """Clamp each coordinate into its domain and round to the nearest grid
    value; exact midpoints round toward the maximum."""
    indices = []
    for axis, ((lo, hi, step), value) in enumerate(zip(grid.axes().values(), point)):
        clamped = min(max(float(value), lo), hi)
        pos = (clamped - lo) / step
        # Snap away float fuzz so arithmetic midpoints still round up.
        pos = round(pos, 9)
        k = math.floor(pos + 0.5)
        k = min(max(k, 0), int(round((hi - lo) / step)))
        indices.append(k)
    return grid.vertex_from_indices(indices)


def initial_simplex(predefined_vertex: HyperparameterSetting, grid: GridSpec):
    """The predefined vertex plus one single-step move per dimension
    (stepping down instead when the vertex sits at that dimension's max)."""
    base = grid.indices_of(predefined_vertex)
    sizes = grid.sizes()
    if min(sizes) < 2:
        raise ConfigurationError("every grid axis needs at least two points")
    simplex = [grid.vertex_from_indices(base)]
    for dim in range(4):
        indices = list(base)
        if indices[dim] + 1 <= sizes[dim] - 1:
            indices[dim] += 1
        else:
            indices[dim] -= 1
        simplex.append(grid.vertex_from_indices(indices))
    return simplex


def _repair_duplicate(vertex, taken, grid: GridSpec) -> HyperparameterSetting:
    """Step a colliding vertex to a free neighbouring grid point.

    Tries +1 in each dimension in index order, then -1, widening the radius
    until a free in-bounds point appears. Deterministic.
    """
    if vertex not in taken:
        return vertex
    base = grid.indices_of(vertex)
    sizes = grid.sizes()
    radius = 1
    while radius <= max(sizes):
        for delta in (radius, -radius):
            for dim in range(4):
                indices = list(base)
                indices[dim] += delta
                if 0 <= indices[dim] <= sizes[dim] - 1:
                    candidate = grid.vertex_from_indices(indices)
                    if candidate not in taken:
                        return candidate
        radius += 1
    # Axis lines exhausted; fall back to a whole-grid scan.
    for indices in _lexicographic_indices(sizes):
        candidate = grid.vertex_from_indices(indices)
        if candidate not in taken:
            return candidate
    raise ConfigurationError("grid too small to hold five distinct vertices")


def _lexicographic_indices(sizes):
    indices = [0, 0, 0, 0]
    while True:
        yield tuple(indices)
        for dim in range(3, -1, -1):
            indices[dim] += 1
            if indices[dim] < sizes[dim]:
                break
            indices[dim] = 0
        else:
            return


class _Budget(Exception):
    pass


class _TargetReached(Exception):
    pass


class _Evaluator:
    """Memoizing objective wrapper that enforces budget and target stops."""

    def __init__(self, objective, config, trace):
        self.objective = objective
        self.config = config
        self.trace = trace
        self.memo = {}
        self.best_vertex = None
        self.best_value = math.inf

    def __call__(self, vertex, kind):
        if vertex in self.memo:
            return self.memo[vertex]
        if self.trace.evaluation_count >= self.config.max_evaluations:
            raise _Budget()
        value = self.objective(vertex)
        value = float(value) if value is not None else math.inf
        if math.isnan(value):
            value = math.inf
        self.memo[vertex] = value
        self.trace.evaluation_count += 1
        self.trace.entries.append(TraceEntry(vertex=vertex, value=value, kind=kind))
        if value < self.best_value:
            self.best_vertex, self.best_value = vertex, value
        if value <= self.config.target_value:
            raise _TargetReached()
        return value


def _sample_stddev(values) -> float:
    mean = sum(values) / len(values)
    return math.sqrt(sum((v - mean) ** 2 for v in values) / (len(values) - 1))


def minimize(objective, predefined_vertex, grid: GridSpec, config: NmmConfig):
    """Search the grid for the lowest objective value.

    Returns (best vertex, best value, SearchTrace). The best vertex is the
    best ever evaluated, which can differ from the final simplex when grid
    projection makes the walk non-monotone.
    """
    trace = SearchTrace()
    evaluate = _Evaluator(objective, config, trace)
    try:
        vertices = initial_simplex(predefined_vertex, grid)
        simplex = [(v, evaluate(v, "predefined" if i == 0 else "initial"))
                   for i, v in enumerate(vertices)]
        seen_states = set()
        evals_before = trace.evaluation_count
        explore = False
        while True:
            simplex.sort(key=lambda pair: pair[1])  # stable: ties keep order
            # A fully-memoized iteration moved no budget; switch the next one
            # to exploration (candidates also repaired away from evaluated
            # points) so the remaining budget keeps probing fresh vertices.
            explore = trace.evaluation_count == evals_before
            evals_before = trace.evaluation_count
            # A repeated (budget, simplex) state means the walk is cycling
            # and nothing new can be spent.
            state = (trace.evaluation_count, explore, tuple(v for v, _ in simplex))
            if state in seen_states:
                raise _Budget()
            seen_states.add(state)
            values = [value for _, value in simplex]
            if all(math.isfinite(v) for v in values) and _sample_stddev(values) < config.stddev_tol:
                trace.termination_reason = TERMINATION_STDDEV
                break

            best, second_worst, worst = values[0], values[-2], values[-1]
            coords = [v.as_tuple() for v, _ in simplex]
            centroid = [sum(c[d] for c in coords[:-1]) / 4.0 for d in range(4)]
            worst_coords = coords[-1]
            kept = {v for v, _ in simplex[:-1]}
            if explore:
                kept = kept | set(evaluate.memo)

            def candidate(scale):
                point = [centroid[d] + scale * (centroid[d] - worst_coords[d]) for d in range(4)]
                return _repair_duplicate(project_to_grid(point, grid), kept, grid)

            reflected = candidate(config.alpha)
            r_value = evaluate(reflected, "reflect")
            if best <= r_value < second_worst:
                simplex[-1] = (reflected, r_value)
                continue
            if r_value < best:
                expanded = candidate(config.alpha * config.gamma)
                e_value = evaluate(expanded, "expand")
                simplex[-1] = (
                    (expanded, e_value) if e_value < r_value else (reflected, r_value)
                )
                continue
            # r_value >= second_worst: contract.
            if r_value < worst:
                contracted = candidate(config.alpha * config.rho)
                c_value = evaluate(contracted, "contract-outside")
                if c_value <= r_value:
                    simplex[-1] = (contracted, c_value)
                    continue
            else:
                contracted = candidate(-config.rho)
                c_value = evaluate(contracted, "contract-inside")
                if c_value < worst:
                    simplex[-1] = (contracted, c_value)
                    continue
            # Contraction failed: shrink everything toward the best vertex.
            best_coords = coords[0]
            new_simplex = [simplex[0]]
            taken = {simplex[0][0]}
            if explore:
                taken = taken | set(evaluate.memo)
            for v, _ in simplex[1:]:
                point = [
                    best_coords[d] + config.sigma * (v.as_tuple()[d] - best_coords[d])
                    for d in range(4)
                ]
                shrunk = _repair_duplicate(project_to_grid(point, grid), taken, grid)
                taken.add(shrunk)
                new_simplex.append((shrunk, evaluate(shrunk, "shrink")))
            simplex = new_simplex
    except _TargetReached:
        trace.termination_reason = TERMINATION_TARGET
    except _Budget:
        trace.termination_reason = TERMINATION_BUDGET
    best_vertex = evaluate.best_vertex
    if best_vertex is None:
        # every evaluation came back +inf; fall back to the start vertex
        best_vertex = trace.entries[0].vertex
    return best_vertex, evaluate.best_value, trace
