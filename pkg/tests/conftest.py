"""Shared toy spaces and builders for the test suite."""

from __future__ import annotations

import random

import pytest

from sics.bdd import BddEngine
from sics.header import FieldMatch, HeaderLayout, MatchSpec, MiddleboxRule, spec_to_predicate

BYTE = HeaderLayout([("f1", 8)])
PLANE = HeaderLayout([("f1", 8), ("f2", 8)])


def random_field_match(rng: random.Random, width: int, wildcard: float = 0.3) -> FieldMatch | None:
    r = rng.random()
    if r < wildcard:
        return None
    if r < wildcard + 0.35:
        plen = rng.randint(1, width)
        v = rng.getrandbits(plen) << (width - plen)
        return FieldMatch(v, v + (1 << (width - plen)) - 1, "prefix", plen)
    a, b = sorted(rng.randrange(1 << width) for _ in range(2))
    return FieldMatch(a, b, "range")


def random_match(rng: random.Random, layout: HeaderLayout, wildcard: float = 0.3) -> MatchSpec:
    fields = {}
    for f in layout.fields:
        fm = random_field_match(rng, f.width, wildcard)
        if fm is not None:
            fields[f.name] = fm
    return MatchSpec(fields, layout)


def random_rules(rng: random.Random, n: int, layout: HeaderLayout, behaviors=("ALLOW", "DENY")):
    return [MiddleboxRule(random_match(rng, layout), rng.randint(0, 3 * n), rng.choice(behaviors))
            for _ in range(n)]


def span(layout: HeaderLayout, **intervals) -> MatchSpec:
    """MatchSpec from ``name=(lo, hi)`` keyword intervals."""
    return MatchSpec({k: FieldMatch(lo, hi, "range") for k, (lo, hi) in intervals.items()}, layout)


# Five overlapping rectangles on a 2x8-bit plane.  Columns X1..X3 split f1,
# rows Y1..Y5 split f2; P3 and P4 are complements that complete the layout.
X = [(0, 84), (85, 169), (170, 255)]
Y = [(0, 50), (51, 101), (102, 152), (153, 203), (204, 255)]


def rectangles(engine: BddEngine) -> dict[str, object]:
    sp = lambda **kw: spec_to_predicate(engine, span(PLANE, **kw))
    p1 = sp(f1=(X[0][0], X[1][1]), f2=(Y[3][0], Y[4][1]))
    p2 = sp(f1=X[1], f2=(Y[0][0], Y[1][1]))
    p5 = sp(f1=(X[1][0], X[2][1]), f2=(Y[1][0], Y[3][1]))
    return {"P1": p1, "P2": p2, "P3": ~(p1 | p2), "P4": ~p5, "P5": p5}


# names for the six classes by the pair of predicates holding them
CLASS_NAMES = {
    frozenset({"P1", "P4"}): "a1",
    frozenset({"P2", "P4"}): "a2",
    frozenset({"P3", "P5"}): "a3",
    frozenset({"P1", "P5"}): "a4",
    frozenset({"P2", "P5"}): "a5",
    frozenset({"P3", "P4"}): "a6",
}


@pytest.fixture
def plane_engine() -> BddEngine:
    return BddEngine(PLANE.width)


@pytest.fixture
def byte_engine() -> BddEngine:
    return BddEngine(BYTE.width)


# one PASS/FAIL line per acceptance criterion, repeated at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
