import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sics.bdd import BddEngine
from sics.header import (
    FIVE_TUPLE,
    FieldMatch,
    Header,
    HeaderError,
    MatchSpec,
    field_interval_node,
    pack,
    parse_behavior,
    parse_chains,
    parse_ruleset,
    range_to_prefixes,
    rewrite_of,
    ruleset_to_json,
    spec_to_predicate,
    stable_priority_sort,
    unpack,
)

from conftest import random_match


def random_header(rng: random.Random) -> tuple:
    return tuple(rng.getrandbits(f.width) for f in FIVE_TUPLE.fields)


def test_pack_unpack_round_trip():
    rng = random.Random(0)
    for _ in range(10_000):
        h = random_header(rng)
        assert unpack(pack(h)) == h
    assert pack((0, 0, 0, 0, 0)) == 0
    assert isinstance(unpack(0), Header)


def test_protocol_occupies_the_last_byte():
    e = BddEngine()
    h = pack((0, 0, 0, 0, 0x80))
    assert e.evaluate(e.mk_atom(96), h)
    assert not e.evaluate(e.mk_atom(95), h)
    assert h == 0x80
    # srcIp MSB is variable 0
    assert e.evaluate(e.mk_atom(0), pack((1 << 31, 0, 0, 0, 0)))


def test_pack_rejects_oversized_values():
    with pytest.raises(HeaderError):
        pack((1 << 32, 0, 0, 0, 0))
    with pytest.raises(HeaderError):
        pack((0, 0, 0, 0))


def test_wildcard_and_exact_port_counts():
    e = BddEngine()
    assert spec_to_predicate(e, MatchSpec.parse({})) is e.true
    assert spec_to_predicate(e, MatchSpec.parse({"srcIp": "*", "proto": "*"})) is e.true
    p = spec_to_predicate(e, MatchSpec.parse({"dstPort": 80}))
    assert e.sat_count(p) == 1 << 88


def test_range_equals_prefix():
    e = BddEngine()
    r = spec_to_predicate(e, MatchSpec.parse({"srcIp": "10.0.0.0-10.0.0.255"}))
    p = spec_to_predicate(e, MatchSpec.parse({"srcIp": "10.0.0.0/24"}))
    assert r is p


def brute_minimal_cover(lo: int, hi: int, width: int) -> int:
    # fewest aligned blocks tiling [lo, hi], by dynamic programming
    best = {hi + 1: 0}
    for start in range(hi, lo - 1, -1):
        cands = []
        size = 1
        while size <= (1 << width):
            if start % size == 0 and start + size - 1 <= hi:
                cands.append(1 + best[start + size])
            size <<= 1
        best[start] = min(cands)
    return best[lo]


def test_prefix_cover_is_exact_and_minimal():
    width = 8
    rng = random.Random(4)
    pairs = [(0, 255), (0, 0), (255, 255), (1, 254)] + [tuple(sorted(rng.sample(range(256), 2))) for _ in range(150)]
    for lo, hi in pairs:
        cover = range_to_prefixes(lo, hi, width)
        covered = []
        for v, plen in cover:
            assert v % (1 << (width - plen)) == 0
            covered += range(v, v + (1 << (width - plen)))
        assert sorted(covered) == list(range(lo, hi + 1))
        assert len(cover) == brute_minimal_cover(lo, hi, width)


def test_range_node_matches_direct_interval_construction():
    e = BddEngine()
    rng = random.Random(5)
    for _ in range(100):
        lo, hi = sorted(rng.randrange(1 << 16) for _ in range(2))
        f = FIVE_TUPLE.field("dstPort")
        assert field_interval_node(e, FIVE_TUPLE, "dstPort", lo, hi) == e.interval_node(f.offset, 16, lo, hi)


def test_random_specs_match_directly():
    e = BddEngine()
    rng = random.Random(6)
    for _ in range(25):
        m = random_match(rng, FIVE_TUPLE, wildcard=0.5)
        p = spec_to_predicate(e, m)
        for _ in range(10_000 // 25):
            # bias half the samples into the match so both outcomes occur
            if rng.random() < 0.5:
                h = tuple(rng.randint(*m.interval(n)) for n in FIVE_TUPLE.names)
            else:
                h = random_header(rng)
            assert e.evaluate(p, pack(h)) == m.matches(h)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 32), st.integers(0, (1 << 32) - 1))
def test_prefix_parsing(plen, addr):
    base = addr & ~((1 << (32 - plen)) - 1) & 0xFFFFFFFF
    text = f"{(base >> 24) & 255}.{(base >> 16) & 255}.{(base >> 8) & 255}.{base & 255}/{plen}"
    fm = MatchSpec.parse({"dstIp": text}).fields.get("dstIp")
    if plen == 0:
        assert fm is None
    else:
        assert (fm.lo, fm.hi) == (base, base + (1 << (32 - plen)) - 1)


@pytest.mark.parametrize("bad", [
    {"srcIp": "10.0.0.1/8"},
    {"srcIp": "10.0.0.0/33"},
    {"dstPort": "90-80"},
    {"dstPort": 70000},
    {"proto": "6-17"},
    {"proto": "6/4"},
    {"vlan": 1},
    {"srcIp": "300.1.1.1"},
    {"dstPort": True},
])
def test_malformed_specs_rejected(bad):
    with pytest.raises(HeaderError):
        MatchSpec.parse(bad)


def test_behavior_parsing():
    assert parse_behavior("allow") == "ALLOW"
    b = parse_behavior("REWRITE(srcIp=1.2.3.4)")
    rw = rewrite_of(b)
    assert rw.field == "srcIp" and rw.value == 0x01020304
    assert rewrite_of("DENY") is None
    with pytest.raises(HeaderError):
        parse_behavior("DROP")
    with pytest.raises(HeaderError):
        parse_behavior("REWRITE(srcIp)")


def test_ruleset_round_trip(tmp_path):
    rules = [
        {"match": {"srcIp": "10.0.0.0/8", "dstPort": "1000-2000"}, "priority": 5, "behavior": "DENY"},
        {"match": {"proto": 6}, "priority": 1, "behavior": "ALLOW"},
    ]
    path = tmp_path / "rules.json"
    path.write_text(json.dumps(rules))
    parsed = parse_ruleset(path)
    assert parse_ruleset(ruleset_to_json(parsed)) == parsed
    with pytest.raises(HeaderError):
        parse_ruleset([{"match": {}, "behavior": "ALLOW"}])
    with pytest.raises(HeaderError):
        parse_chains([{"match": {}, "chain": [], "priority": 1}])


def test_equal_priorities_keep_file_order():
    items = [type("R", (), {"priority": p, "tag": t})() for p, t in [(1, "a"), (2, "b"), (1, "c"), (2, "d")]]
    assert [r.tag for r in stable_priority_sort(items)] == ["b", "d", "a", "c"]


def test_match_spec_hash_ignores_spelling():
    a = MatchSpec.parse({"srcIp": "10.0.0.0/24"})
    b = MatchSpec({"srcIp": FieldMatch(10 << 24, (10 << 24) + 255, "range")})
    assert a == b and hash(a) == hash(b)
