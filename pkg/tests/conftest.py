"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from fedval.games import TableGame, random_table_game


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)


def random_process(
    rng: np.random.Generator, max_players: int = 6, max_rounds: int = 3
) -> TableGame:
    """Random multi-round game over a small participant universe."""
    universe = list(range(rng.integers(2, max_players + 1)))
    rounds = []
    for _ in range(rng.integers(1, max_rounds + 1)):
        size = int(rng.integers(1, len(universe) + 1))
        members = rng.choice(universe, size=size, replace=False)
        rounds.append(frozenset(int(p) for p in members))
    return random_table_game(rounds, rng)


def brute_force_round_values(game: TableGame, round_index: int) -> dict[int, float]:
    """Independent oracle: average marginals over all orderings of the round.

    Deliberately shares no code with the library computations beyond the
    game itself.
    """
    import itertools

    prefix = list(game.rounds[:round_index])
    ids = sorted(game.rounds[round_index])
    totals = {pid: 0.0 for pid in ids}
    count = 0
    for perm in itertools.permutations(ids):
        seen: set[int] = set()
        previous = game.evaluate((*prefix, frozenset()))
        for pid in perm:
            seen.add(pid)
            current = game.evaluate((*prefix, frozenset(seen)))
            totals[pid] += current - previous
            previous = current
        count += 1
    return {pid: total / count for pid, total in totals.items()}
