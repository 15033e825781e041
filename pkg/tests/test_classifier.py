import random

import pytest

from sics.bdd import BddEngine
from sics.classifier import Classifier, ClassifierError
from sics.equivalence import LabelCapacityError, compute_ecs
from sics.header import spec_to_predicate

from conftest import CLASS_NAMES, PLANE, random_match, rectangles, span


def partition(e, c, nbits=16, step=1):
    groups = {}
    for h in range(0, 1 << nbits, step):
        groups.setdefault(c.classify(h), set()).add(h)
    return {frozenset(g) for g in groups.values()}


def recompute_partition(e, preds, nbits=16, step=1):
    if not preds:
        return {frozenset(range(0, 1 << nbits, step))}
    ecs = compute_ecs(e, preds, layout=PLANE)
    groups = {}
    for h in range(0, 1 << nbits, step):
        groups.setdefault(ecs.classify(h), set()).add(h)
    return {frozenset(g) for g in groups.values()}


def rect_classifier(e):
    preds = rectangles(e)
    c = Classifier.from_ecs(compute_ecs(e, preds, layout=PLANE))
    names = {CLASS_NAMES[frozenset(m)]: l for l, m in c.members.items()}
    return c, preds, names


def test_single_class_classifies_everything_to_one():
    e = BddEngine(16)
    c = Classifier(e, PLANE)
    assert all(c.classify(h) == 1 for h in range(0, 1 << 16, 97))


def test_rectangle_point_and_scan(plane_engine):
    c, _, names = rect_classifier(plane_engine)
    assert c.classify(PLANE.pack((100, 160))) == names["a4"]
    rng = random.Random(1)
    for _ in range(10_000):
        h = rng.getrandbits(16)
        assert c.classify(h) == c.scan(h)


def test_adding_existing_class_predicate_splits_nothing(plane_engine):
    e = plane_engine
    c, _, names = rect_classifier(e)
    plan = c.add_predicate("Q", c.class_predicate(names["a4"]))
    assert plan.splits == [] and plan.new_labels == set()
    assert plan.ops == [("add", "Q", names["a4"])]
    assert c.representation_list("Q") == {names["a4"]}


def test_bisecting_a4_adds_one_label(plane_engine):
    e = plane_engine
    c, preds, names = rect_classifier(e)
    a4 = names["a4"]
    half = spec_to_predicate(e, span(PLANE, f1=(85, 120), f2=(153, 203)))
    before = {k: c.representation_list(k) for k in preds}
    v0 = c.version
    plan = c.add_predicate("Q", half)
    assert len(plan.splits) == 1 and plan.splits[0][0] == a4
    new = plan.splits[0][1]
    assert plan.new_labels == {new}
    changed = {k for k in preds if c.representation_list(k) != before[k]}
    assert changed == {"P1", "P5"}          # the predicates holding a4
    for k in changed:
        assert c.representation_list(k) == before[k] | {new}
    assert c.version == v0 + 1
    assert partition(e, c) == recompute_partition(e, list(preds.values()) + [half])


def test_delete_plan_lists_exactly_the_representation(plane_engine):
    e = plane_engine
    c, preds, _ = rect_classifier(e)
    rep = c.representation_list("P5")
    plan = c.delete_predicate("P5")
    assert sorted(plan.ops) == sorted(("del", "P5", l) for l in rep)
    assert plan.splits == [] and plan.merges == [] and plan.relabels == []
    with pytest.raises(ClassifierError):
        c.delete_predicate("P5")


def test_deleting_the_only_predicate_collapses(plane_engine):
    e = plane_engine
    c = Classifier.build(e, {"A": e.mk_atom(3)}, PLANE)
    assert len(c.classes) == 2
    c.delete_predicate("A")
    plan = c.compact()
    assert len(c.classes) == 1 and len(plan.merges) == 1
    assert plan.ops == [("purge", None, plan.merges[0][0])]
    assert partition(e, c, step=13) == {frozenset(range(0, 1 << 16, 13))}


def test_delete_then_readd_keeps_the_function(plane_engine):
    e = plane_engine
    c, preds, _ = rect_classifier(e)
    before = partition(e, c, step=3)
    old_labels = set(c.classes)
    c.delete_predicate("P2")
    c.compact()
    c.add_predicate("P2", preds["P2"])
    assert partition(e, c, step=3) == before
    # merged-away labels are never handed out again
    assert not (set(c.classes) - old_labels) & c.retired


def test_random_sequences_match_recompute():
    rng = random.Random(31)
    e = BddEngine(16)
    c = Classifier(e, PLANE)
    live = {}
    for step in range(100):
        if live and rng.random() < 0.4:
            key = rng.choice(sorted(live))
            c.delete_predicate(key)
            del live[key]
        else:
            key = f"p{step}"
            p = spec_to_predicate(e, random_match(rng, PLANE, 0.3))
            c.add_predicate(key, p)
            live[key] = p
        c.compact()
        assert partition(e, c, step=37) == recompute_partition(e, list(live.values()), step=37)
        for k, p in live.items():
            assert e.or_all(c.classes[l] for l in c.representation_list(k)) == p.node
        assert len(c.classes) == (len(compute_ecs(e, list(live.values()), layout=PLANE).classes) if live else 1)


def test_protected_labels_are_moved_not_mutated(plane_engine):
    e = plane_engine
    c, preds, names = rect_classifier(e)
    a4 = names["a4"]
    old_region = c.classes[a4]
    c.protected = lambda label: label == a4
    plan = c.add_predicate("Q", e.wrap(e.interval_node(0, 8, 85, 120)))
    assert a4 not in c.classes and a4 in c.retired
    assert any(old == a4 for old, _ in plan.relabels)
    # the retired label's headers now carry fresh labels that together cover the old class
    fresh = {c.classify(h) for h in range(1 << 16) if e.evaluate(old_region, h)}
    assert a4 not in fresh and len(fresh) == 2
    assert partition(e, c, step=11) == recompute_partition(e, list(preds.values()) + [c.predicate("Q")], step=11)
    c.protected = lambda label: False
    assert c.release({a4}).ops == [("purge", None, a4)]


def test_snapshots_are_immutable(plane_engine):
    e = plane_engine
    c, _, _ = rect_classifier(e)
    snap = c.snapshot
    h = PLANE.pack((100, 160))
    before = c.classify(h)
    c.add_predicate("Q", e.wrap(e.interval_node(0, 8, 85, 120)))
    assert c.classify(h, snap) == before
    assert c.snapshot.version > snap.version


def test_checkpoint_restore(plane_engine):
    e = plane_engine
    c, _, _ = rect_classifier(e)
    state = c.checkpoint()
    before = partition(e, c, step=7)
    c.add_predicate("Q", e.mk_atom(12))
    c.delete_predicate("P1")
    c.compact()
    c.restore(state)
    assert partition(e, c, step=7) == before
    assert "Q" not in c.preds and "P1" in c.preds


def test_capacity_and_false_predicates():
    e = BddEngine(16)
    c = Classifier(e, PLANE, label_width=2)
    c.add_predicate("a", e.mk_atom(0))
    with pytest.raises(LabelCapacityError):
        c.add_predicate("b", e.mk_atom(1))
    with pytest.raises(ClassifierError):
        Classifier(e, PLANE).add_predicate("f", e.false)


def test_batch_classification_matches_scalar():
    import numpy as np
    rng = random.Random(5)
    e = BddEngine(16)
    c = Classifier.build(e, {i: spec_to_predicate(e, random_match(rng, PLANE)) for i in range(12)}, PLANE)
    hs = [rng.getrandbits(16) for _ in range(3000)]
    bits = np.array([[(h >> (15 - i)) & 1 for i in range(16)] for h in hs], dtype=np.uint8)
    assert c.classify_batch(bits).tolist() == [c.classify(h) for h in hs]
