"""Header -> label classification with incremental predicate add/delete.

Classes are kept as BDD nodes; the header->label map is a multi-terminal
diagram rebuilt functionally on every change and published as an immutable
``(root, version)`` snapshot, so readers never see a half-applied update.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np

from .bdd import FALSE, TRUE, BddEngine, Predicate
from .equivalence import (
    DEFAULT_LABEL_WIDTH,
    EcSet,
    EquivalenceClass,
    EquivalenceError,
    LabelCapacityError,
    compute_ecs,
    max_labels,
)
from .header import FIVE_TUPLE, HeaderLayout
from .mtbdd import LabelDiagram


class ClassifierError(EquivalenceError):
    pass


@dataclass
class UpdatePlan:
    """What one or more classifier operations changed.

    ``ops`` is the ordered log the cloud instructions are derived from:
    ``("add", key, label)`` / ``("del", key, label)`` change a representation
    list, ``("purge", None, label)`` removes a label from every table.
    """

    ops: list[tuple[str, Hashable | None, int]] = field(default_factory=list)
    splits: list[tuple[int, int]] = field(default_factory=list)
    relabels: list[tuple[int, int]] = field(default_factory=list)
    merges: list[tuple[int, int]] = field(default_factory=list)
    retired: set[int] = field(default_factory=set)
    new_labels: set[int] = field(default_factory=set)
    added_predicates: list[Hashable] = field(default_factory=list)
    deleted_predicates: list[Hashable] = field(default_factory=list)

    def extend(self, other: "UpdatePlan") -> "UpdatePlan":
        self.ops.extend(other.ops)
        self.splits.extend(other.splits)
        self.relabels.extend(other.relabels)
        self.merges.extend(other.merges)
        self.retired |= other.retired
        self.new_labels |= other.new_labels
        self.added_predicates.extend(other.added_predicates)
        self.deleted_predicates.extend(other.deleted_predicates)
        return self

    @property
    def empty(self) -> bool:
        return not (self.ops or self.splits or self.relabels or self.merges or self.retired
                    or self.added_predicates or self.deleted_predicates)

    def net(self) -> tuple[dict[Hashable, set[int]], dict[Hashable, set[int]], set[int]]:
        """Net (added, removed, purged) after replaying ``ops`` in order."""
        state: dict[tuple, str] = {}
        purged = set()
        for op, key, label in self.ops:
            if op == "purge":
                purged.add(label)
            else:
                state[(key, label)] = op
        added: dict[Hashable, set[int]] = {}
        removed: dict[Hashable, set[int]] = {}
        for (key, label), op in state.items():
            (added if op == "add" else removed).setdefault(key, set()).add(label)
        return added, removed, purged


@dataclass(frozen=True)
class Snapshot:
    root: int
    version: int


class Classifier:
    """Live partition of the header space with stable, never-reused labels.

    ``protected`` labels (those pinned by in-flight flows) are never
    mutated: before such a class changes membership or splits it is moved
    to a fresh label and the old one is retired with its cloud entries intact.
    """

    def __init__(self, engine: BddEngine, layout: HeaderLayout = FIVE_TUPLE,
                 label_width: int = DEFAULT_LABEL_WIDTH):
        self.engine = engine
        self.layout = layout
        self.label_width = label_width
        self.diagram = LabelDiagram(engine)
        self.classes: dict[int, int] = {1: TRUE}
        self.members: dict[int, set] = {1: set()}
        self.preds: dict[Hashable, int] = {}
        self.rep: dict[Hashable, set[int]] = {}
        self.retired: set[int] = set()
        self._next = 2
        self._snapshot = Snapshot(self.diagram.term(1), 0)
        self.protected: Callable[[int], bool] = lambda label: False

    # -- construction ----------------------------------------------------

    @classmethod
    def from_ecs(cls, ecs: EcSet) -> "Classifier":
        self = cls(ecs.engine, ecs.layout, ecs.label_width)
        self.classes = {c.label: c.predicate.node for c in ecs.classes}
        self.members = {c.label: set(c.members) for c in ecs.classes}
        self.preds = {k: p.node for k, p in ecs.inputs.items()}
        self.rep = {k: set() for k in self.preds}
        for c in ecs.classes:
            for k in c.members:
                self.rep[k].add(c.label)
        self._next = max(self.classes) + 1
        root = self.diagram.build((node, label) for label, node in self.classes.items())
        self._snapshot = Snapshot(root, 1)
        return self

    @classmethod
    def build(cls, engine: BddEngine, predicates: dict[Hashable, Predicate],
              layout: HeaderLayout = FIVE_TUPLE, label_width: int = DEFAULT_LABEL_WIDTH) -> "Classifier":
        if not predicates:
            return cls(engine, layout, label_width)
        return cls.from_ecs(compute_ecs(engine, predicates, label_width, layout))

    # -- queries ---------------------------------------------------------

    @property
    def version(self) -> int:
        return self._snapshot.version

    @property
    def snapshot(self) -> Snapshot:
        return self._snapshot

    def classify(self, bits: int, snapshot: Snapshot | None = None) -> int:
        snap = snapshot or self._snapshot
        return self.diagram.evaluate(snap.root, bits)

    def classify_batch(self, bitmatrix: np.ndarray, snapshot: Snapshot | None = None) -> np.ndarray:
        snap = snapshot or self._snapshot
        return self.diagram.evaluate_bits(snap.root, bitmatrix)

    def scan(self, bits: int) -> int:
        for label, node in self.classes.items():
            if self.engine.evaluate(node, bits):
                return label
        return 0

    @property
    def labels(self) -> list[int]:
        return sorted(self.classes)

    def predicate(self, key: Hashable) -> Predicate:
        return self.engine.wrap(self.preds[key])

    def representation_list(self, key: Hashable) -> set[int]:
        return set(self.rep[key])

    def class_predicate(self, label: int) -> Predicate:
        return self.engine.wrap(self.classes[label])

    def to_ecs(self) -> EcSet:
        classes = [EquivalenceClass(self.engine.wrap(node), label, frozenset(self.members[label]))
                   for label, node in sorted(self.classes.items())]
        return EcSet(self.engine, self.layout, self.label_width, classes,
                     {k: self.engine.wrap(n) for k, n in self.preds.items()})

    def memory_bytes(self) -> int:
        """Rough footprint: diagram and class nodes at 3 ints each, plus lists."""
        nodes = len(self.diagram.reachable(self._snapshot.root))
        class_nodes = sum(self.engine.size(n) for n in set(self.classes.values()))
        pred_nodes = sum(self.engine.size(n) for n in set(self.preds.values()))
        rep_entries = sum(len(v) for v in self.rep.values())
        return 12 * (nodes + class_nodes + pred_nodes) + 4 * rep_entries

    # -- updates ---------------------------------------------------------

    def _fresh(self) -> int:
        if self._next > max_labels(self.label_width):
            raise LabelCapacityError(f"{self.label_width}-bit labels exhausted")
        label = self._next
        self._next += 1
        return label

    def _publish(self, root: int):
        self._snapshot = Snapshot(root, self._snapshot.version + 1)

    def _relabel_protected(self, labels: Iterable[int], plan: UpdatePlan) -> dict[int, int]:
        """Move protected classes to fresh labels; returns old -> new."""
        mapping = {}
        for old in sorted(labels):
            if not self.protected(old):
                continue
            new = self._fresh()
            mapping[old] = new
            self.classes[new] = self.classes.pop(old)
            mem = self.members.pop(old)
            self.members[new] = mem
            for k in mem:
                self.rep[k].discard(old)
                self.rep[k].add(new)
                plan.ops.append(("add", k, new))
            self.retired.add(old)
            plan.retired.add(old)
            plan.new_labels.add(new)
            plan.relabels.append((old, new))
        if mapping:
            self._publish(self.diagram.relabel(self._snapshot.root, mapping))
        return mapping

    def add_predicate(self, key: Hashable, p: Predicate) -> UpdatePlan:
        node = self.engine.node_of(p)
        if node == FALSE:
            raise ClassifierError("cannot register FALSE")
        if key in self.preds:
            raise ClassifierError(f"predicate {key!r} already registered")
        plan = UpdatePlan(added_predicates=[key])
        root = self._snapshot.root
        touched = self.diagram.labels_under(root, node)
        moved = self._relabel_protected(touched, plan)
        touched = {moved.get(l, l) for l in touched}
        mapping = {}
        inside_labels = set()
        e = self.engine
        for label in sorted(touched):
            inside, outside = e.split_node(self.classes[label], node)
            if outside == FALSE:
                inside_labels.add(label)
                continue
            new = self._fresh()
            self.classes[label] = outside
            self.classes[new] = inside
            self.members[new] = set(self.members[label])
            for k in self.members[label]:
                self.rep[k].add(new)
                plan.ops.append(("add", k, new))
            mapping[label] = new
            plan.splits.append((label, new))
            plan.new_labels.add(new)
            inside_labels.add(new)
        self.preds[key] = node
        self.rep[key] = set()
        for label in sorted(inside_labels):
            self.members[label].add(key)
            self.rep[key].add(label)
            plan.ops.append(("add", key, label))
        if mapping:
            self._publish(self.diagram.overlay(self._snapshot.root, node, mapping))
        return plan

    def delete_predicate(self, key: Hashable) -> UpdatePlan:
        if key not in self.preds:
            raise ClassifierError(f"unknown predicate {key!r}")
        plan = UpdatePlan(deleted_predicates=[key])
        self._relabel_protected(self.rep[key], plan)
        labels = self.rep.pop(key)
        del self.preds[key]
        for label in sorted(labels):
            self.members[label].discard(key)
            plan.ops.append(("del", key, label))
        return plan

    def compact(self) -> UpdatePlan:
        """Merge classes no remaining predicate tells apart; the lowest label survives."""
        plan = UpdatePlan()
        groups: dict[frozenset, list[int]] = {}
        for label in sorted(self.classes):
            groups.setdefault(frozenset(self.members[label]), []).append(label)
        mapping = {}
        for mem, labels in groups.items():
            if len(labels) < 2:
                continue
            survivor = labels[0]
            nodes = [self.classes[l] for l in labels]
            self.classes[survivor] = self.engine.or_all(nodes)
            for gone in labels[1:]:
                mapping[gone] = survivor
                del self.classes[gone]
                del self.members[gone]
                for k in mem:
                    self.rep[k].discard(gone)
                self.retired.add(gone)
                plan.retired.add(gone)
                plan.merges.append((gone, survivor))
                if not self.protected(gone):
                    plan.ops.append(("purge", None, gone))
        if mapping:
            self._publish(self.diagram.relabel(self._snapshot.root, mapping))
        return plan

    def release(self, labels: Iterable[int]) -> UpdatePlan:
        """Purge retired labels that are no longer protected."""
        plan = UpdatePlan()
        for label in sorted(labels):
            if label in self.retired and not self.protected(label):
                plan.ops.append(("purge", None, label))
        return plan

    def replace_predicates(self, changes: Sequence[tuple[Hashable, Predicate | None]]) -> UpdatePlan:
        """Apply ``(key, new predicate or None)`` changes, then compact."""
        plan = UpdatePlan()
        for key, p in changes:
            if key in self.preds:
                if p is not None and self.preds[key] == p.node:
                    continue
                plan.extend(self.delete_predicate(key))
            if p is not None and not p.is_false:
                plan.extend(self.add_predicate(key, p))
        plan.extend(self.compact())
        return plan

    def isolate(self, labels: Iterable[int]) -> UpdatePlan:
        """Move protected classes to fresh labels without changing the partition."""
        plan = UpdatePlan()
        self._relabel_protected(labels, plan)
        return plan

    def checkpoint(self) -> tuple:
        return ({k: v for k, v in self.classes.items()},
                {k: set(v) for k, v in self.members.items()},
                dict(self.preds),
                {k: set(v) for k, v in self.rep.items()},
                set(self.retired), self._next, self._snapshot)

    def restore(self, state: tuple):
        classes, members, preds, rep, retired, nxt, snap = state
        self.classes = dict(classes)
        self.members = {k: set(v) for k, v in members.items()}
        self.preds = dict(preds)
        self.rep = {k: set(v) for k, v in rep.items()}
        self.retired = set(retired)
        self._next = nxt
        self._snapshot = snap
