"""Synthetic sequential coalition games with directly enumerable utilities.

Used by tests and by the ``exact-check`` command to drive the exact and
Monte Carlo value computations against games whose ground truth is
cheap to enumerate.
"""

from __future__ import annotations

from typing import Callable, Collection, Iterable, Mapping, Sequence

import numpy as np

from .values import History, as_history

_BOUND_SLACK = 1e-9


class TableGame:
    """Utility oracle backed by per-round subset tables.

    The game fixes the participant set of every round up front. A query
    must replay the realized earlier rounds verbatim and may end with
    any subset of the queried round's participants; the utility is read
    from that round's table (indexed by subset bitmask). Consecutive
    tables must agree where they describe the same state: finishing
    round t equals starting round t+1 with the empty subset.
    """

    def __init__(
        self,
        round_sets: Iterable[Collection[int]],
        tables: Iterable[np.ndarray],
        *,
        range_bound: float = 1.0,
    ) -> None:
        self.rounds: History = as_history(round_sets)
        if not self.rounds:
            raise ValueError("a table game needs at least one round")
        self._ids = [sorted(block) for block in self.rounds]
        self._positions = [
            {pid: b for b, pid in enumerate(ids)} for ids in self._ids
        ]
        self._tables = [np.asarray(table, dtype=np.float64) for table in tables]
        if len(self._tables) != len(self.rounds):
            raise ValueError("one table per round required")
        for t, table in enumerate(self._tables):
            if table.shape != (1 << len(self._ids[t]),):
                raise ValueError(f"round {t}: table must cover every subset")
            if t > 0 and table[0] != self._tables[t - 1][-1]:
                raise ValueError(
                    f"round {t}: table start disagrees with the previous round's end"
                )
        low = min(float(table.min()) for table in self._tables)
        high = max(float(table.max()) for table in self._tables)
        if low < -_BOUND_SLACK or high > range_bound + _BOUND_SLACK:
            raise ValueError(
                f"utilities [{low}, {high}] fall outside [0, {range_bound}]"
            )
        self.range_bound = float(range_bound)

    def evaluate(self, blocks: Iterable[Collection[int]]) -> float:
        blocks = as_history(blocks)
        if len(blocks) > len(self.rounds):
            raise ValueError(
                f"sequence has {len(blocks)} blocks but only "
                f"{len(self.rounds)} rounds were realized"
            )
        if not blocks:
            return float(self._tables[0][0])
        t = len(blocks) - 1
        if blocks[:-1] != self.rounds[:t]:
            raise ValueError("sequence does not match the realized rounds")
        positions = self._positions[t]
        mask = 0
        for pid in blocks[-1]:
            b = positions.get(pid)
            if b is None:
                raise ValueError(f"participant {pid} was not selected in round {t}")
            mask |= 1 << b
        return float(self._tables[t][mask])


def _stitch_and_fit(
    rounds: History, raw: list[np.ndarray], range_bound: float
) -> list[np.ndarray]:
    # Anchor each round so its empty subset equals the previous round's
    # end, then map everything into [0, range_bound] with one affine
    # transform (which preserves the anchoring).
    stitched: list[np.ndarray] = []
    offset = 0.0
    for table in raw:
        shifted = table - table[0] + offset
        stitched.append(shifted)
        offset = float(shifted[-1])
    low = min(float(table.min()) for table in stitched)
    high = max(float(table.max()) for table in stitched)
    span = high - low
    scale = range_bound / span if span > 0 else 0.0
    return [(table - low) * scale for table in stitched]


def random_table_game(
    round_sets: Iterable[Collection[int]],
    rng: np.random.Generator,
    *,
    range_bound: float = 1.0,
) -> TableGame:
    """Random bounded game: independent uniform utility per reachable state,
    rescaled into ``[0, range_bound]``."""
    rounds = as_history(round_sets)
    raw = [rng.uniform(0.0, 1.0, size=1 << len(block)) for block in rounds]
    tables = _stitch_and_fit(rounds, raw, range_bound)
    return TableGame(rounds, tables, range_bound=range_bound)


def stitched_game(
    round_sets: Iterable[Collection[int]],
    round_functions: Sequence[Callable[[frozenset[int]], float]],
    *,
    range_bound: float = 1.0,
) -> TableGame:
    """Game built from one set function per round, re-anchored so rounds
    chain consistently and fitted into ``[0, range_bound]``.

    Anchoring and fitting are affine, so within-round structure of each
    function (symmetries, null players, marginal ratios) is preserved.
    """
    rounds = as_history(round_sets)
    if len(round_functions) != len(rounds):
        raise ValueError("one set function per round required")
    raw: list[np.ndarray] = []
    for block, fn in zip(rounds, round_functions):
        ids = sorted(block)
        table = np.empty(1 << len(ids))
        for mask in range(1 << len(ids)):
            subset = frozenset(ids[b] for b in range(len(ids)) if mask >> b & 1)
            table[mask] = fn(subset)
        raw.append(table)
    tables = _stitch_and_fit(rounds, raw, range_bound)
    return TableGame(rounds, tables, range_bound=range_bound)


def additive_game(
    round_sets: Iterable[Collection[int]],
    weights: Mapping[int, float],
    *,
    base: float = 0.0,
) -> TableGame:
    """Order-free game: ``base`` plus the summed weights of every
    participant occurrence in the sequence. A participant's exact value
    in any round it appears is its weight."""
    if base < 0 or any(w < 0 for w in weights.values()):
        raise ValueError("additive games need non-negative base and weights")
    rounds = as_history(round_sets)
    tables: list[np.ndarray] = []
    carried = base
    for block in rounds:
        ids = sorted(block)
        masks = np.arange(1 << len(ids))
        marginal = np.zeros(1 << len(ids))
        for b, pid in enumerate(ids):
            marginal[(masks >> b) & 1 == 1] += weights.get(pid, 0.0)
        tables.append(carried + marginal)
        carried = float(tables[-1][-1])
    bound = max(carried, 1.0)
    return TableGame(rounds, tables, range_bound=bound)


def game_from_set_function(
    players: Collection[int],
    set_function: Callable[[frozenset[int]], float],
    *,
    range_bound: float,
) -> TableGame:
    """Single-round game with utilities given directly by ``set_function``."""
    ids = sorted(players)
    table = np.empty(1 << len(ids))
    for mask in range(1 << len(ids)):
        subset = frozenset(ids[b] for b in range(len(ids)) if mask >> b & 1)
        table[mask] = set_function(subset)
    return TableGame([players], [table], range_bound=range_bound)


def sum_games(first: TableGame, second: TableGame) -> TableGame:
    """Pointwise sum of two games over the same realized rounds."""
    if first.rounds != second.rounds:
        raise ValueError("games must share the same realized rounds")
    tables = [a + b for a, b in zip(first._tables, second._tables)]
    return TableGame(
        first.rounds, tables, range_bound=first.range_bound + second.range_bound
    )
