"""Per-round cooperative valuation of federated participants.

Exact Shapley values of a single coalition (subset and permutation
forms), the per-round variant conditioned on the realized training
history, leave-one-out values, and aggregation of per-round results
into a run-level report.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Collection, Iterable, Protocol, Sequence, runtime_checkable

import numpy as np

SUBSET_ENUMERATION_CAP = 20
PERMUTATION_ENUMERATION_CAP = 8

History = tuple[frozenset[int], ...]


class EnumerationRefusedError(RuntimeError):
    """Raised when an exact computation would enumerate too many coalitions."""


@runtime_checkable
class UtilityOracle(Protocol):
    """Deterministic utility of an ordered sequence of coalition blocks.

    ``evaluate`` receives one participant set per round, oldest first.
    The trailing block may be any subset of that round's participants,
    including the empty set, which must leave the utility of the
    preceding blocks unchanged. Values lie in ``[0, range_bound]`` and
    identical inputs yield identical outputs.
    """

    range_bound: float

    def evaluate(self, blocks: Sequence[Collection[int]]) -> float: ...


def as_history(blocks: Iterable[Collection[int]]) -> History:
    """Normalize round blocks to a tuple of frozensets, order preserved."""
    return tuple(frozenset(block) for block in blocks)


@dataclass
class ValueVector:
    """Participant values for one round (aggregated when ``round_index`` is None).

    Ids absent from ``values`` were not selected and are worth exactly 0.
    """

    values: dict[int, float]
    round_index: int | None = None

    def get(self, participant: int) -> float:
        return self.values.get(participant, 0.0)

    def participants(self) -> list[int]:
        return sorted(self.values)

    def norm(self) -> float:
        return math.sqrt(math.fsum(v * v for v in self.values.values()))


def aggregate_rounds(per_round: Sequence[ValueVector]) -> ValueVector:
    """Elementwise sum over rounds; ids never selected stay at 0."""
    totals: dict[int, float] = {}
    for vector in per_round:
        for pid, value in vector.values.items():
            totals[pid] = totals.get(pid, 0.0) + value
    return ValueVector(dict(sorted(totals.items())), round_index=None)


def normalize_round_values(vector: ValueVector) -> ValueVector:
    """Scale a round's values to unit L2 norm; an all-zero vector passes through."""
    scale = vector.norm()
    if scale == 0.0:
        return ValueVector(dict(vector.values), vector.round_index)
    return ValueVector(
        {pid: value / scale for pid, value in vector.values.items()},
        vector.round_index,
    )


def _popcounts(n_masks: int) -> np.ndarray:
    sizes = np.zeros(n_masks, dtype=np.int64)
    block = 1
    while block < n_masks:
        sizes[block : 2 * block] = sizes[:block] + 1
        block *= 2
    return sizes


def _subset_utilities(
    oracle: UtilityOracle, history: History, ids: Sequence[int]
) -> np.ndarray:
    """Utility of ``history + S`` for every ``S``, indexed by bitmask over ``ids``."""
    m = len(ids)
    utilities = np.empty(1 << m, dtype=np.float64)
    for mask in range(1 << m):
        block = frozenset(ids[b] for b in range(m) if mask >> b & 1)
        utilities[mask] = oracle.evaluate((*history, block))
    return utilities


def exact_federated_round_shapley(
    oracle: UtilityOracle,
    history: Iterable[Collection[int]],
    round_players: Collection[int],
    *,
    cap: int = SUBSET_ENUMERATION_CAP,
    round_index: int | None = None,
) -> ValueVector:
    """Per-round Shapley values conditioned on the realized history.

    Each selected participant receives its average marginal contribution
    over all subsets of the other participants selected in the same
    round, every utility being evaluated on top of the realized earlier
    rounds. The values sum to the round's utility improvement.
    """
    ids = sorted(round_players)
    m = len(ids)
    if m == 0:
        return ValueVector({}, round_index)
    if m > cap:
        raise EnumerationRefusedError(
            f"exact subset enumeration for {m} participants needs 2**{m} = "
            f"{1 << m} utility evaluations (cap {cap}); the cost grows as 2**m"
        )
    hist = as_history(history)
    utilities = _subset_utilities(oracle, hist, ids)
    sizes = _popcounts(1 << m)
    weight_by_size = np.array(
        [1.0 / (m * math.comb(m - 1, s)) for s in range(m)], dtype=np.float64
    )
    masks = np.arange(1 << m)
    values: dict[int, float] = {}
    for b, pid in enumerate(ids):
        bit = 1 << b
        without = masks[(masks & bit) == 0]
        marginals = utilities[without | bit] - utilities[without]
        values[pid] = float(weight_by_size[sizes[without]] @ marginals)
    return ValueVector(values, round_index)


def exact_shapley(
    oracle: UtilityOracle,
    players: Collection[int],
    *,
    cap: int = SUBSET_ENUMERATION_CAP,
) -> ValueVector:
    """Shapley values of a single-coalition game by full subset enumeration."""
    return exact_federated_round_shapley(oracle, (), players, cap=cap)


def exact_shapley_permutation_form(
    oracle: UtilityOracle,
    players: Collection[int],
    *,
    cap: int = PERMUTATION_ENUMERATION_CAP,
) -> ValueVector:
    """Shapley values averaged over every ordering of the players.

    Agrees with :func:`exact_shapley`; kept as an independent cross-check
    since the two enumerations share nothing beyond the oracle calls.
    """
    ids = sorted(players)
    m = len(ids)
    if m == 0:
        return ValueVector({}, None)
    if m > cap:
        raise EnumerationRefusedError(
            f"exact ordering enumeration for {m} players needs {m}! = "
            f"{math.factorial(m)} passes (cap {cap}); the cost grows as m!"
        )
    utilities = _subset_utilities(oracle, (), ids)
    acc = np.zeros(m, dtype=np.float64)
    for perm in itertools.permutations(range(m)):
        mask = 0
        previous = utilities[0]
        for b in perm:
            mask |= 1 << b
            current = utilities[mask]
            acc[b] += current - previous
            previous = current
    acc /= math.factorial(m)
    return ValueVector({pid: float(acc[b]) for b, pid in enumerate(ids)}, None)


def federated_loo_round(
    oracle: UtilityOracle,
    history: Iterable[Collection[int]],
    round_players: Collection[int],
    *,
    round_index: int | None = None,
) -> ValueVector:
    """Utility drop from removing one participant from the round's aggregate."""
    ids = sorted(round_players)
    if not ids:
        return ValueVector({}, round_index)
    hist = as_history(history)
    full = frozenset(ids)
    utility_full = oracle.evaluate((*hist, full))
    values = {
        pid: utility_full - oracle.evaluate((*hist, full - {pid})) for pid in ids
    }
    return ValueVector(values, round_index)


@dataclass
class ValuationReport:
    """Per-round and aggregated values plus the utility trace they explain.

    Values are reported raw: the totals sum to the final utility minus
    ``initial_utility`` (the untrained model's utility), which is kept
    here so readers can shift to either convention without
    renormalizing.
    """

    per_round: list[ValueVector]
    total: ValueVector
    per_round_utility_delta: list[float]
    round_value_norms: list[float]
    initial_utility: float

    def normalized(self) -> "ValuationReport":
        """Same report with each round's vector scaled to unit length."""
        rounds = [normalize_round_values(vector) for vector in self.per_round]
        return ValuationReport(
            per_round=rounds,
            total=aggregate_rounds(rounds),
            per_round_utility_delta=list(self.per_round_utility_delta),
            round_value_norms=[vector.norm() for vector in rounds],
            initial_utility=self.initial_utility,
        )


def build_report(
    per_round: Sequence[ValueVector],
    utility_deltas: Sequence[float],
    initial_utility: float,
) -> ValuationReport:
    if len(per_round) != len(utility_deltas):
        raise ValueError("one utility delta required per round")
    return ValuationReport(
        per_round=list(per_round),
        total=aggregate_rounds(per_round),
        per_round_utility_delta=[float(d) for d in utility_deltas],
        round_value_norms=[vector.norm() for vector in per_round],
        initial_utility=float(initial_utility),
    )


_RECORD_HEADER = "kind,round,participant,value,utility_delta,round_norm"


def format_float(value: float) -> str:
    """Decimal form that parses back to the exact same float64."""
    return repr(float(value))


def value_record_lines(report: ValuationReport) -> list[str]:
    """Line records: one per (round, participant), a total block, and the
    initial-model utility. Stable field order and float formatting make
    identical reports serialize byte-identically."""
    lines = [_RECORD_HEADER]
    lines.append(f"initial,-1,-1,{format_float(report.initial_utility)},0,0")
    for t, vector in enumerate(report.per_round):
        delta = format_float(report.per_round_utility_delta[t])
        norm = format_float(report.round_value_norms[t])
        for pid in vector.participants():
            value = format_float(vector.values[pid])
            lines.append(f"round,{t},{pid},{value},{delta},{norm}")
    total_delta = format_float(math.fsum(report.per_round_utility_delta))
    total_norm = format_float(report.total.norm())
    for pid in report.total.participants():
        value = format_float(report.total.values[pid])
        lines.append(f"total,-1,{pid},{value},{total_delta},{total_norm}")
    return lines


def write_value_records(report: ValuationReport, path: str | Path) -> None:
    Path(path).write_text("\n".join(value_record_lines(report)) + "\n")


def read_value_records(path: str | Path) -> ValuationReport:
    """Rebuild a report from its record file (inverse of :func:`write_value_records`)."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _RECORD_HEADER:
        raise ValueError(f"{path}: not a value record file")
    initial: float | None = None
    rounds: dict[int, dict[int, float]] = {}
    deltas: dict[int, float] = {}
    for number, line in enumerate(lines[1:], start=2):
        kind, round_field, pid_field, value, delta, _norm = line.split(",")
        if kind == "initial":
            initial = float(value)
        elif kind == "round":
            t = int(round_field)
            rounds.setdefault(t, {})[int(pid_field)] = float(value)
            deltas[t] = float(delta)
        elif kind == "total":
            continue
        else:
            raise ValueError(f"{path}:{number}: unknown record kind {kind!r}")
    if initial is None:
        raise ValueError(f"{path}: missing initial-utility record")
    if sorted(rounds) != list(range(len(rounds))):
        raise ValueError(f"{path}: round indices are not contiguous from 0")
    per_round = [
        ValueVector(dict(sorted(rounds[t].items())), round_index=t)
        for t in range(len(rounds))
    ]
    return build_report(per_round, [deltas[t] for t in range(len(rounds))], initial)
