"""Shared helpers for the test suite."""

from datetime import date, time

import numpy as np
import pytest

from callscore.graph import build_graph
from callscore.ingest import CdrRecord


def call(from_id, to_id, duration=60, day=1, month=5, hh=12, mm=0, ss=0, year=2017):
    return CdrRecord(date(year, month, day), time(hh, mm, ss), duration, from_id, to_id)


def random_records(rng, n_nodes, n_calls, year=2017, month=5):
    """Random call records over n_nodes identities (self-calls skipped)."""
    records = []
    for _ in range(n_calls):
        a, b = rng.integers(0, n_nodes, size=2)
        if a == b:
            continue
        records.append(call(
            f"N{a:04d}", f"N{b:04d}",
            duration=int(rng.integers(5, 600)),
            day=int(rng.integers(1, 29)),
            month=month,
            hh=int(rng.integers(0, 24)),
            mm=int(rng.integers(0, 60)),
            year=year,
        ))
    return records


def random_graph(rng, n_nodes=30, n_calls=120, mode="undirected"):
    records = random_records(rng, n_nodes, n_calls)
    return build_graph(records, mode=mode)


def dense_pagerank_solve(graph, restart, alpha=0.85):
    """Independent oracle: direct linear solve of the restart walk fixed point.

    Built from neighbor queries only; dangling nodes hand their mass to the
    restart vector, matching the power-iteration semantics.
    """
    n = graph.n_nodes
    push = np.zeros((n, n))
    dangling = []
    for u in range(n):
        idx, w = graph.neighbor_arrays(u)
        total = w.sum()
        if total == 0:
            dangling.append(u)
            continue
        for v, wv in zip(idx, w):
            push[v, u] = wv / total
    z = np.asarray(restart, dtype=float)
    z = z / z.sum()
    moved = alpha * push
    for u in dangling:
        moved[:, u] += alpha * z
    return np.linalg.solve(np.eye(n) - moved, (1 - alpha) * z)


@pytest.fixture
def rng():
    return np.random.default_rng(20170501)
