from __future__ import annotations

import itertools

import numpy as np
import pytest


def brute_force_assignment(cost: np.ndarray) -> tuple[float, tuple]:
    """Minimum cost and the lexicographically smallest optimal permutation, by enumeration."""
    n = cost.shape[0]
    best, best_perm = np.inf, None
    rows = np.arange(n)
    for perm in itertools.permutations(range(n)):
        c = float(cost[rows, list(perm)].sum())
        if c < best - 1e-12:
            best, best_perm = c, perm
    return best, best_perm


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by test_acceptance and echoed in the terminal summary
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k[1:])):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
