"""Monte Carlo estimation of per-round participant values.

Two estimators for the per-round values: sampling random orderings of
the selected participants, and a paired-test scheme that estimates all
pairwise value differences from utilities of random subsets and anchors
them with one directly estimated pivot value. Sample counts follow the
concentration-bound formulas so the results carry an
(epsilon, delta)-style guarantee per coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Collection, Iterable

import numpy as np

from .values import UtilityOracle, ValueVector, as_history


@dataclass(frozen=True)
class ApproxParams:
    """Accuracy target for the estimators.

    ``epsilon``/``delta``: per-coordinate error bound and failure
    probability. ``range_bound``: upper bound of the utility range.
    ``c_eps``/``c_delta``: how the paired-test scheme splits its budget
    between difference estimation and the pivot (both must exceed 1).
    """

    epsilon: float
    delta: float
    range_bound: float = 1.0
    c_eps: float = 2.0
    c_delta: float = 2.0

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.range_bound <= 0:
            raise ValueError(f"range_bound must be positive, got {self.range_bound}")
        if self.c_eps <= 1 or self.c_delta <= 1:
            raise ValueError("budget-split constants c_eps and c_delta must exceed 1")


def permutation_sample_count(params: ApproxParams, m: int) -> int:
    """Orderings needed for the per-coordinate (epsilon, delta) guarantee,
    from the Hoeffding bound on averages of [0, r]-bounded marginals."""
    if m < 1:
        raise ValueError(f"participant count must be at least 1, got {m}")
    r, eps, delta = params.range_bound, params.epsilon, params.delta
    count = (2.0 * r * r / (eps * eps)) * math.log(2.0 * m / delta)
    return max(1, math.ceil(count))


def h_bernstein(u: float) -> float:
    """The Bernstein rate function ``(1 + u) ln(1 + u) - u`` for ``u > -1``."""
    if u <= -1:
        raise ValueError(f"argument must exceed -1, got {u}")
    return (1.0 + u) * math.log1p(u) - u


@dataclass(frozen=True, eq=False)
class GroupTestingPlan:
    """Resolved sampling plan for the paired-test estimator.

    ``subset_size_probs[k - 1]`` is the probability of drawing a test
    subset of size ``k`` (k = 1..m-1); ``t1`` tests estimate pairwise
    differences and ``t2`` samples estimate the pivot value.
    """

    m: int
    z: float
    subset_size_probs: np.ndarray
    q_tot: float
    t1: int
    t2: int


def group_testing_plan(m: int, params: ApproxParams) -> GroupTestingPlan:
    """Plan the paired-test estimator for ``m`` participants.

    The subset-size weights ``1/k + 1/(m - k)`` are normalized by their
    exact sum ``z = 2 * H(m - 1)`` so they form a distribution.
    """
    if m < 2:
        raise ValueError(f"group testing needs at least 2 participants, got {m}")
    ks = np.arange(1, m, dtype=np.float64)
    z = 2.0 * math.fsum(1.0 / k for k in range(1, m))
    probs = (1.0 / ks + 1.0 / (m - ks)) / z
    balance = 1.0 + 2.0 * ks * (ks - m) / (m * (m - 1))
    q_tot = (m - 2) / m * probs[0] + float(np.dot(probs[1:], balance[1:]))
    if q_tot >= 1.0:
        raise ValueError(f"degenerate plan: size-distribution overlap {q_tot} >= 1")
    r, eps, delta = params.range_bound, params.epsilon, params.delta
    c_eps, c_delta = params.c_eps, params.c_delta
    spread = 1.0 - q_tot * q_tot
    rate = h_bernstein(2.0 * eps / (z * r * c_eps * spread))
    t1 = math.ceil(4.0 / (spread * rate) * math.log(c_delta * (m - 1) / (2.0 * delta)))
    t2 = math.ceil(
        4.0 * r * r * c_eps * c_eps / ((c_eps - 1.0) ** 2 * eps * eps)
        * math.log(2.0 * c_delta / ((c_delta - 1.0) * delta))
    )
    return GroupTestingPlan(
        m=m,
        z=z,
        subset_size_probs=probs,
        q_tot=q_tot,
        t1=max(1, t1),
        t2=max(1, t2),
    )


def _as_generator(seed: int | np.random.Generator) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


class _CachedRoundUtility:
    """Memoized utility of ``history + subset`` keyed by subset bitmask."""

    def __init__(self, oracle: UtilityOracle, history, ids: list[int]) -> None:
        self._oracle = oracle
        self._history = as_history(history)
        self._ids = ids
        self._cache: dict[int, float] = {}

    def __call__(self, mask: int) -> float:
        value = self._cache.get(mask)
        if value is None:
            ids = self._ids
            block = frozenset(
                ids[b] for b in range(len(ids)) if mask >> b & 1
            )
            value = self._oracle.evaluate((*self._history, block))
            self._cache[mask] = value
        return value


def permutation_sampling_round(
    oracle: UtilityOracle,
    history: Iterable[Collection[int]],
    round_players: Collection[int],
    sample_count: int,
    seed: int | np.random.Generator,
    *,
    round_index: int | None = None,
) -> ValueVector:
    """Estimate round values by averaging marginals over random orderings.

    Every sampled ordering walks the participants once, crediting each
    one with the utility increase it causes on top of those before it;
    the walk restarts from the bare-history utility each time, so the
    per-ordering credits always telescope to the round's full utility
    improvement and the estimate inherits that identity exactly.
    """
    if sample_count < 1:
        raise ValueError(f"sample_count must be at least 1, got {sample_count}")
    ids = sorted(round_players)
    m = len(ids)
    if m == 0:
        raise ValueError("round_players must be nonempty")
    rng = _as_generator(seed)
    # All randomness is drawn up front so evaluation order cannot matter.
    orderings = rng.permuted(
        np.tile(np.arange(m), (sample_count, 1)), axis=1
    )
    utility = _CachedRoundUtility(oracle, history, ids)
    acc = np.zeros(m, dtype=np.float64)
    completed = 0
    try:
        base = utility(0)
        for row in orderings:
            mask = 0
            previous = base
            for b in row:
                mask |= 1 << int(b)
                current = utility(mask)
                acc[b] += current - previous
                previous = current
            completed += 1
    except Exception as exc:
        raise RuntimeError(
            f"utility oracle failed after {completed} of {sample_count} "
            f"sampled orderings"
        ) from exc
    acc /= sample_count
    return ValueVector({pid: float(acc[b]) for b, pid in enumerate(ids)}, round_index)


def group_testing_round(
    oracle: UtilityOracle,
    history: Iterable[Collection[int]],
    round_players: Collection[int],
    plan: GroupTestingPlan,
    seed: int | np.random.Generator,
    *,
    round_index: int | None = None,
    return_tests: bool = False,
) -> ValueVector | tuple[ValueVector, np.ndarray]:
    """Estimate round values from utilities of random subsets.

    Runs ``plan.t1`` tests, each drawing a subset whose size follows the
    plan's distribution, and turns the recorded membership/utility pairs
    into estimates of all pairwise value differences; the absolute level
    comes from :func:`pivot_anchor_values`. Unlike ordering sampling the
    estimated values only approximately sum to the round's utility
    improvement; the guarantee is per-coordinate.
    """
    ids = sorted(round_players)
    m = len(ids)
    if m != plan.m:
        raise ValueError(f"plan was sized for {plan.m} participants, round has {m}")
    rng = _as_generator(seed)
    sizes = rng.choice(np.arange(1, m), size=plan.t1, p=plan.subset_size_probs)
    order = np.argsort(rng.random((plan.t1, m)), axis=1)
    membership = np.zeros((plan.t1, m), dtype=bool)
    np.put_along_axis(
        membership, order, np.arange(m)[None, :] < sizes[:, None], axis=1
    )
    masks = membership @ (1 << np.arange(m, dtype=np.int64))
    utility = _CachedRoundUtility(oracle, history, ids)
    test_utilities = np.empty(plan.t1, dtype=np.float64)
    for t in range(plan.t1):
        test_utilities[t] = utility(int(masks[t]))
    # Per-participant accumulants; the difference matrix is their outer
    # difference, so it is antisymmetric by construction.
    loads = (plan.z / plan.t1) * (test_utilities @ membership)
    differences = loads[:, None] - loads[None, :]
    values = pivot_anchor_values(
        differences, oracle, history, round_players, plan, rng,
        round_index=round_index,
    )
    if return_tests:
        return values, test_utilities
    return values


def pivot_anchor_values(
    pairwise_differences: np.ndarray,
    oracle: UtilityOracle,
    history: Iterable[Collection[int]],
    round_players: Collection[int],
    plan: GroupTestingPlan,
    seed: int | np.random.Generator,
    *,
    round_index: int | None = None,
) -> ValueVector:
    """Recover absolute values from pairwise differences.

    The pivot is the highest participant id. Its value is estimated from
    ``plan.t2`` sampled marginal contributions, drawing first a subset
    size uniformly from ``0..m-1`` and then a uniform subset of the other
    participants at that size, which makes the estimate unbiased for the
    pivot's exact value. Everyone else is the pivot plus the estimated
    difference.
    """
    ids = sorted(round_players)
    m = len(ids)
    if pairwise_differences.shape != (m, m):
        raise ValueError(
            f"difference matrix shape {pairwise_differences.shape} does not "
            f"match {m} participants"
        )
    rng = _as_generator(seed)
    pivot_bit = 1 << (m - 1)
    sizes = rng.integers(0, m, size=plan.t2)
    if m > 1:
        order = np.argsort(rng.random((plan.t2, m - 1)), axis=1)
    utility = _CachedRoundUtility(oracle, history, ids)
    total = 0.0
    for t in range(plan.t2):
        mask = 0
        if m > 1:
            for b in order[t, : sizes[t]]:
                mask |= 1 << int(b)
        total += utility(mask | pivot_bit) - utility(mask)
    pivot_estimate = total / plan.t2
    values = {
        pid: float(pivot_estimate + pairwise_differences[b, m - 1])
        for b, pid in enumerate(ids)
    }
    return ValueVector(values, round_index)


@dataclass
class EvaluationBudget:
    """Planned utility-evaluation counts for one round of each estimator."""

    m: int
    permutation_samples: int
    permutation_total: int
    group_testing_t1: int
    group_testing_t2: int

    @property
    def group_testing_total(self) -> int:
        return self.group_testing_t1 + self.group_testing_t2


def evaluation_budget(m: int, params: ApproxParams) -> EvaluationBudget:
    """Compare planned evaluation counts of the two estimators at size ``m``."""
    samples = permutation_sample_count(params, m)
    plan = group_testing_plan(m, params)
    return EvaluationBudget(
        m=m,
        permutation_samples=samples,
        permutation_total=m * samples,
        group_testing_t1=plan.t1,
        group_testing_t2=plan.t2,
    )


def minimize_group_testing_budget(
    m: int,
    epsilon: float,
    delta: float,
    range_bound: float = 1.0,
    grid: Iterable[float] = (1.05, 1.1, 1.25, 1.5, 2.0, 3.0, 5.0),
) -> ApproxParams:
    """Grid-search the budget-split constants so ``t1 + t2`` is smallest."""
    candidates = sorted(set(float(c) for c in grid))
    if any(c <= 1 for c in candidates):
        raise ValueError("grid values must exceed 1")
    best: ApproxParams | None = None
    best_total = None
    for c_eps in candidates:
        for c_delta in candidates:
            params = ApproxParams(epsilon, delta, range_bound, c_eps, c_delta)
            plan = group_testing_plan(m, params)
            total = plan.t1 + plan.t2
            if best_total is None or total < best_total:
                best, best_total = params, total
    assert best is not None
    return best
