import random

import pytest

from sics.bdd import BddEngine
from sics.equivalence import (
    AmbiguousRewriteError,
    EquivalenceError,
    LabelCapacityError,
    build_replacement_table,
    compute_ecs,
    compute_per_field_ecs,
    max_labels,
    representation_list,
)
from sics.header import FIVE_TUPLE, spec_to_predicate

from conftest import BYTE, CLASS_NAMES, PLANE, X, Y, random_match, rectangles


def named(ecs):
    return {CLASS_NAMES[frozenset(c.members)]: c for c in ecs.classes}


def partition_by_signature(e, preds, nbits):
    groups = {}
    for h in range(1 << nbits):
        sig = tuple(e.evaluate(p, h) for p in preds)
        groups.setdefault(sig, set()).add(h)
    return {frozenset(g) for g in groups.values()}


def class_sets(e, ecs, nbits):
    return {frozenset(h for h in range(1 << nbits) if e.evaluate(c.predicate, h)) for c in ecs.classes}


# -- five rectangles ----------------------------------------------------------

def test_rectangles_give_six_classes(plane_engine):
    e = plane_engine
    preds = rectangles(e)
    ecs = compute_ecs(e, preds, layout=PLANE)
    assert len(ecs.classes) == 6
    a = named(ecs)
    assert set(a) == {"a1", "a2", "a3", "a4", "a5", "a6"}
    assert (a["a1"].predicate | a["a4"].predicate) is preds["P1"]
    assert (a["a3"].predicate | a["a4"].predicate | a["a5"].predicate) is preds["P5"]
    assert ecs.representation("P5") == {a["a3"].label, a["a4"].label, a["a5"].label}
    assert representation_list(ecs, preds["P5"]) == {a["a3"].label, a["a4"].label, a["a5"].label}
    assert sorted(ecs.labels) == list(range(1, 7))


def test_rectangle_classification(plane_engine):
    e = plane_engine
    ecs = compute_ecs(e, rectangles(e), layout=PLANE)
    a = named(ecs)
    # the middle column crossed with the fourth row
    assert ecs.classify(PLANE.pack((100, 160))) == a["a4"].label
    rng = random.Random(0)
    for _ in range(2000):
        h = rng.getrandbits(16)
        assert ecs.classify(h) == ecs.scan(h)


def test_per_field_counts_on_rectangles(plane_engine):
    e = plane_engine
    ecs = compute_ecs(e, rectangles(e), layout=PLANE)
    f1 = compute_per_field_ecs(ecs, "f1")
    f2 = compute_per_field_ecs(ecs, "f2")
    assert len(f1) == 3 and len(f2) == 5
    assert sorted(f1.classes) == [[iv] for iv in X]
    assert sorted(f2.classes) == [[iv] for iv in Y]


def test_rewrite_moves_a4_to_a5(plane_engine):
    e = plane_engine
    preds = rectangles(e)
    ecs = compute_ecs(e, preds, layout=PLANE)
    a = named(ecs)
    v = 60     # inside the second row
    assert compute_per_field_ecs(ecs, "f2").class_of(v) == compute_per_field_ecs(ecs, "f2").class_of(Y[1][0])
    table = build_replacement_table(ecs, "f2", v, domain=a["a4"].predicate)
    assert table == {a["a4"].label: a["a5"].label}
    # classes straddling columns have images in several classes
    with pytest.raises(AmbiguousRewriteError):
        build_replacement_table(ecs, "f2", v)


def test_trivial_partitions():
    e = BddEngine()
    ecs = compute_ecs(e, [e.true], layout=FIVE_TUPLE)
    assert len(ecs.classes) == 1 and ecs.classes[0].predicate is e.true
    for f in FIVE_TUPLE.names:
        assert len(compute_per_field_ecs(ecs, f)) == 1
    assert build_replacement_table(ecs, "srcIp", 7) == {1: 1}
    assert representation_list(ecs, e.true) == {1}
    with pytest.raises(EquivalenceError):
        compute_ecs(e, [])


def test_label_capacity():
    e = BddEngine(8)
    preds = [e.mk_atom(i) for i in range(3)]
    assert max_labels(2) == 3
    with pytest.raises(LabelCapacityError):
        compute_ecs(e, preds, label_width=2, layout=BYTE)
    assert len(compute_ecs(e, preds, label_width=4, layout=BYTE).classes) == 8


# -- refinement against brute force ---------------------------------------------------

def test_partition_equals_signature_grouping():
    rng = random.Random(21)
    for _ in range(60):
        e = BddEngine(8)
        preds = [spec_to_predicate(e, random_match(rng, BYTE, 0.05)) for _ in range(rng.randint(1, 8))]
        ecs = compute_ecs(e, preds, layout=BYTE)
        assert class_sets(e, ecs, 8) == partition_by_signature(e, preds, 8)
        for k, p in enumerate(preds):
            labels = ecs.representation(k)
            assert e.or_all(ecs.by_label(l).predicate.node for l in labels) == p.node
            assert representation_list(ecs, p) == labels


def test_identities_on_five_tuple_rulesets():
    rng = random.Random(22)
    from sics.scenario import make_vocabulary
    for _ in range(10):
        e = BddEngine()
        vocab = make_vocabulary(rng)
        preds = {i: spec_to_predicate(e, vocab.match(rng)) for i in range(30)}
        ecs = compute_ecs(e, preds)
        assert sum(e.sat_count(c.predicate) for c in ecs.classes) == 1 << 104
        for i, c in enumerate(ecs.classes):
            for d in ecs.classes[i + 1:]:
                assert (c.predicate & d.predicate).is_false
        for k, p in preds.items():
            assert e.or_all(ecs.by_label(l).predicate.node for l in ecs.representation(k)) == p.node
        # an unregistered predicate: listed classes all meet it and jointly cover it
        q = spec_to_predicate(e, vocab.match(rng))
        listed = representation_list(ecs, q)
        cover = e.or_all(ecs.by_label(l).predicate.node for l in listed)
        assert e.sat_count(e.diff_node(q.node, cover)) == 0
        for c in ecs.classes:
            assert (c.label in listed) == (not (c.predicate & q).is_false)


# -- per-field classes -------------------------------------------------------------

def brute_field_classes(ecs, field):
    groups = {}
    for u in range(256):
        sig = tuple(ecs.classify(PLANE.pack(((u, w) if field == "f1" else (w, u)))) for w in range(256))
        groups.setdefault(sig, set()).add(u)
    return {frozenset(g) for g in groups.values()}


def test_per_field_equals_exhaustive_cofactors():
    rng = random.Random(23)
    for _ in range(6):
        e = BddEngine(16)
        preds = [spec_to_predicate(e, random_match(rng, PLANE, 0.2)) for _ in range(rng.randint(2, 6))]
        ecs = compute_ecs(e, preds, layout=PLANE)
        for f in ("f1", "f2"):
            pf = compute_per_field_ecs(ecs, f)
            got = [frozenset(v for lo, hi in ivs for v in range(lo, hi + 1)) for ivs in pf.classes]
            assert set(got) == brute_field_classes(ecs, f)
            for v in range(0, 256, 7):
                assert v in got[pf.class_of(v)]


def test_per_field_sampled_cofactors_on_five_tuple():
    rng = random.Random(24)
    from sics.scenario import make_vocabulary
    e = BddEngine()
    vocab = make_vocabulary(rng)
    ecs = compute_ecs(e, [spec_to_predicate(e, vocab.match(rng)) for _ in range(25)])
    for f in ("srcIp", "dstPort", "proto"):
        pf = compute_per_field_ecs(ecs, f)
        for ivs in pf.classes:
            for _ in range(20):
                u = rng.randint(*rng.choice(ivs))
                v = rng.randint(*rng.choice(ivs))
                h = rng.getrandbits(104)
                assert ecs.classify(FIVE_TUPLE.set(h, f, u)) == ecs.classify(FIVE_TUPLE.set(h, f, v))


# -- replacement tables ----------------------------------------------------------------

def test_replacement_commutes_with_reclassification():
    rng = random.Random(25)
    checked = 0
    for _ in range(40):
        e = BddEngine(16)
        preds = [spec_to_predicate(e, random_match(rng, PLANE, 0.3)) for _ in range(rng.randint(1, 5))]
        ecs = compute_ecs(e, preds, layout=PLANE)
        field = rng.choice(["f1", "f2"])
        value = rng.randrange(256)
        for c in ecs.classes:
            images = {ecs.classify(PLANE.set(h, field, value)) for h in range(1 << 16) if e.evaluate(c.predicate, h)}
            try:
                table = build_replacement_table(ecs, field, value, domain=c.predicate)
            except AmbiguousRewriteError:
                assert len(images) > 1
                continue
            assert images == {table[c.label]}
            for _ in range(100):
                h = e.sample(c.predicate, rng)
                assert ecs.classify(PLANE.set(h, field, value)) == table[ecs.classify(h)]
            checked += 1
    assert checked > 50


def test_rewrite_within_own_field_class_is_identity(plane_engine):
    e = plane_engine
    # only f1 matters, so any f2 value stays in every header's f2 class
    preds = [spec_to_predicate(e, random_match(random.Random(s), PLANE, 0.0)) for s in range(3)]
    preds = [e.wrap(e.exists_node(p.node, 8, 8)) for p in preds]
    ecs = compute_ecs(e, preds, layout=PLANE)
    table = build_replacement_table(ecs, "f2", 123)
    assert table == {c.label: c.label for c in ecs.classes}
