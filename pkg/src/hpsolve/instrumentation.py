"""Lightweight call counters.

Used by tests to assert stage separation (no leaf/merge construction code
runs during the solve sweep).
"""

from __future__ import annotations

from collections import defaultdict

counts: dict[str, int] = defaultdict(int)


def bump(name):
    counts[name] += 1


def snapshot():
    return dict(counts)
