"""Equivalence classes of the header space and the tables derived from them."""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

from .bdd import FALSE, TRUE, BddEngine, Predicate
from .header import FIVE_TUPLE, HeaderLayout, field_value_node
from .mtbdd import LabelDiagram

DEFAULT_LABEL_WIDTH = 16
INVALID_LABEL = 0


class EquivalenceError(ValueError):
    pass


class LabelCapacityError(EquivalenceError):
    """More classes than a label of the configured width can name."""


class AmbiguousRewriteError(EquivalenceError):
    def __init__(self, label: int, targets: Iterable[int]):
        self.label = label
        self.targets = sorted(targets)
        super().__init__(f"rewrite image of class {label} spans classes {self.targets}")


def max_labels(label_width: int) -> int:
    # label 0 is reserved
    return (1 << label_width) - 1


@dataclass
class EquivalenceClass:
    predicate: Predicate
    label: int
    members: frozenset  # keys of the input predicates containing this class


@dataclass
class EcSet:
    engine: BddEngine
    layout: HeaderLayout
    label_width: int
    classes: list[EquivalenceClass]
    inputs: dict[Hashable, Predicate] = field(default_factory=dict)
    _diagram: LabelDiagram | None = field(default=None, repr=False)
    _root: int | None = field(default=None, repr=False)

    @property
    def labels(self) -> list[int]:
        return [c.label for c in self.classes]

    def by_label(self, label: int) -> EquivalenceClass:
        for c in self.classes:
            if c.label == label:
                return c
        raise KeyError(label)

    def label_map(self) -> tuple[LabelDiagram, int]:
        if self._diagram is None:
            d = LabelDiagram(self.engine)
            self._root = d.build((c.predicate.node, c.label) for c in self.classes)
            self._diagram = d
        return self._diagram, self._root

    def classify(self, bits: int) -> int:
        d, root = self.label_map()
        return d.evaluate(root, bits)

    def scan(self, bits: int) -> int:
        """Linear scan over class predicates; the reference for :meth:`classify`."""
        for c in self.classes:
            if self.engine.evaluate(c.predicate, bits):
                return c.label
        return INVALID_LABEL

    def representation(self, key: Hashable) -> set[int]:
        return {c.label for c in self.classes if key in c.members}


def compute_ecs(engine: BddEngine, predicates: Mapping[Hashable, Predicate] | Sequence[Predicate],
                label_width: int = DEFAULT_LABEL_WIDTH, layout: HeaderLayout = FIVE_TUPLE) -> EcSet:
    """Coarsest partition of the header space refining every input predicate.

    Starts from ``{TRUE}`` and splits each class by each predicate, dropping
    empty halves.  Labels are handed out in discovery order from 1.
    """
    if not isinstance(predicates, Mapping):
        predicates = dict(enumerate(predicates))
    if not predicates:
        raise EquivalenceError("at least one predicate is required")
    limit = max_labels(label_width)
    classes: list[tuple[int, set]] = [(TRUE, set())]
    by_node: dict[int, list] = {}
    for key, p in predicates.items():
        by_node.setdefault(engine.node_of(p), []).append(key)
    for node, keys in by_node.items():
        nxt = []
        for c, members in classes:
            inside = engine.and_node(c, node)
            if inside == FALSE:
                nxt.append((c, members))
            elif inside == c:
                members.update(keys)
                nxt.append((c, members))
            else:
                nxt.append((inside, members | set(keys)))
                nxt.append((engine.diff_node(c, node), members))
        classes = nxt
        if len(classes) > limit:
            raise LabelCapacityError(
                f"{len(classes)} classes exceed the {limit} labels of a {label_width}-bit label")
    out = [EquivalenceClass(engine.wrap(c), i + 1, frozenset(m)) for i, (c, m) in enumerate(classes)]
    return EcSet(engine, layout, label_width, out, dict(predicates))


def representation_list(ecs: EcSet, p: Predicate) -> set[int]:
    """Labels of the classes that intersect ``p``."""
    d, root = ecs.label_map()
    return d.labels_under(root, ecs.engine.node_of(p))


# -- per-field classes ---------------------------------------------------


@dataclass
class PerFieldEcs:
    """Partition of one field's domain; each class is a sorted list of intervals."""

    field: str
    classes: list[list[tuple[int, int]]]

    def __post_init__(self):
        bounds = []
        for idx, intervals in enumerate(self.classes):
            for lo, hi in intervals:
                bounds.append((lo, hi, idx))
        bounds.sort()
        self._starts = [b[0] for b in bounds]
        self._bounds = bounds

    def __len__(self):
        return len(self.classes)

    def class_of(self, value: int) -> int:
        i = bisect_right(self._starts, value) - 1
        lo, hi, idx = self._bounds[i]
        if not lo <= value <= hi:
            raise KeyError(value)
        return idx


def _segments(d: LabelDiagram, node: int, first: int, width: int,
              memo: dict[tuple[int, int], list[tuple[int, int, int]]], i: int = 0) -> list[tuple[int, int, int]]:
    """Piecewise-constant exits of ``node`` over field bits ``i..width-1``.

    Returns ``(lo, hi, exit_node)`` over the relative range ``[0, 2**(width-i))``.
    """
    key = (node, i)
    hit = memo.get(key)
    if hit is not None:
        return hit
    span = 1 << (width - i)
    v = d.node_var(node)
    if i == width or v >= first + width:
        out = [(0, span - 1, node)]
    else:
        half = span >> 1
        if v == first + i:
            left = _segments(d, d.node_low(node), first, width, memo, i + 1)
            right = _segments(d, d.node_high(node), first, width, memo, i + 1)
        else:
            left = right = _segments(d, node, first, width, memo, i + 1)
        out = list(left)
        for lo, hi, n in right:
            if out and out[-1][2] == n and out[-1][1] == lo + half - 1:
                out[-1] = (out[-1][0], hi + half, n)
            else:
                out.append((lo + half, hi + half, n))
    memo[key] = out
    return out


def compute_per_field_ecs(ecs: EcSet, field_name: str) -> PerFieldEcs:
    """Group field values whose cofactor of the header->label map is identical.

    Only diagram nodes where the field's variable block is entered matter;
    two values are equivalent iff they lead every such node to the same exit.
    """
    f = ecs.layout.field(field_name)
    d, root = ecs.label_map()
    first, width = f.offset, f.width
    entries = []
    seen = set()
    stack = [root]
    while stack:
        n = stack.pop()
        if n in seen:
            continue
        seen.add(n)
        v = d.node_var(n)
        if v < first:
            stack.append(d.node_low(n))
            stack.append(d.node_high(n))
        elif v < first + width:
            entries.append(n)
    full = (1 << width) - 1
    if not entries:
        return PerFieldEcs(field_name, [[(0, full)]])
    memo: dict = {}
    segs = [_segments(d, e, first, width, memo) for e in sorted(entries)]
    cuts = sorted({lo for s in segs for lo, _, _ in s})
    groups: dict[tuple, list[tuple[int, int]]] = {}
    ptr = [0] * len(segs)
    for k, start in enumerate(cuts):
        end = cuts[k + 1] - 1 if k + 1 < len(cuts) else full
        sig = []
        for j, s in enumerate(segs):
            while s[ptr[j]][1] < start:
                ptr[j] += 1
            sig.append(s[ptr[j]][2])
        intervals = groups.setdefault(tuple(sig), [])
        if intervals and intervals[-1][1] == start - 1:
            intervals[-1] = (intervals[-1][0], end)
        else:
            intervals.append((start, end))
    return PerFieldEcs(field_name, list(groups.values()))


# -- label replacement -------------------------------------------------


def rewrite_image_node(engine: BddEngine, layout: HeaderLayout, pred: int, field_name: str, value: int) -> int:
    """Headers ``h[field <- value]`` for ``h`` in ``pred``."""
    f = layout.field(field_name)
    free = engine.exists_node(pred, f.offset, f.width)
    return engine.and_node(free, field_value_node(engine, layout, field_name, value))


def build_replacement_table(ecs: EcSet, field_name: str, value: int,
                            domain: Predicate | None = None) -> dict[int, int]:
    """Old label -> label of the class holding the rewritten headers.

    Only classes meeting ``domain`` (the transformer's input traffic, all
    headers by default) get an entry.  Raises :class:`AmbiguousRewriteError`
    when some class's image straddles several classes.
    """
    f = ecs.layout.field(field_name)
    if not 0 <= value < (1 << f.width):
        raise EquivalenceError(f"{field_name}={value} outside the field domain")
    engine = ecs.engine
    d, root = ecs.label_map()
    dom = TRUE if domain is None else engine.node_of(domain)
    table = {}
    for c in ecs.classes:
        part = engine.and_node(c.predicate.node, dom)
        if part == FALSE:
            continue
        image = rewrite_image_node(engine, ecs.layout, part, field_name, value)
        targets = d.labels_under(root, image)
        if len(targets) != 1:
            raise AmbiguousRewriteError(c.label, targets)
        table[c.label] = next(iter(targets))
    return table
