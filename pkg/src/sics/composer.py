"""Rule composition: overall chains, virtual-switch forwarding tables and
per-behavior middlebox predicates, assembled into an abstract function network."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

from .bdd import FALSE, TRUE, BddEngine, Predicate
from .header import (
    ALLOW,
    ChainRequirement,
    HeaderLayout,
    MatchSpec,
    MiddleboxRule,
    rewrite_of,
    spec_to_node,
    stable_priority_sort,
)


class CompositionError(ValueError):
    pass


class Port(NamedTuple):
    """A virtual-switch port: one per (middlebox, occurrence within a chain)."""

    box: str
    occ: int

    def __str__(self):
        if self.box in (INGRESS_ID, EGRESS_ID):
            return self.box
        return f"{self.box}#{self.occ}"


INGRESS_ID = "ingress"
EGRESS_ID = "egress"
INGRESS = Port(INGRESS_ID, 0)
EGRESS = Port(EGRESS_ID, 0)
RESERVED_IDS = frozenset({INGRESS_ID, EGRESS_ID})


@dataclass(frozen=True)
class ChainAssignment:
    predicate: Predicate
    chain: tuple[str, ...]


def chain_ports(chain: Sequence[str]) -> tuple[Port, ...]:
    seen: dict[str, int] = {}
    out = []
    for box in chain:
        seen[box] = seen.get(box, 0) + 1
        out.append(Port(box, seen[box]))
    return tuple(out)


# -- overall chains ----------------------------------------------------


def compute_overall_chains(engine: BddEngine, reqs: Iterable[ChainRequirement]) -> list[ChainAssignment]:
    """Split requirement sets so each piece carries the priority-ordered
    concatenation of every chain that applies to it."""
    reqs = stable_priority_sort(reqs)
    sets = [spec_to_node(engine, r.match) for r in reqs]
    done = FALSE
    out: list[ChainAssignment] = []
    for i, req in enumerate(reqs):
        s = engine.diff_node(sets[i], done)
        done = engine.or_node(done, sets[i])
        if s == FALSE:
            continue
        pieces = [(s, tuple(req.chain))]
        for j in range(i + 1, len(reqs)):
            s_j = sets[j]
            nxt = []
            for f, chain in pieces:
                both = engine.and_node(f, s_j)
                if both == FALSE:
                    nxt.append((f, chain))
                    continue
                nxt.append((both, chain + tuple(reqs[j].chain)))
                rest = engine.diff_node(f, s_j)
                if rest != FALSE:
                    nxt.append((rest, chain))
            pieces = nxt
        out.extend(ChainAssignment(engine.wrap(f), chain) for f, chain in pieces)
    return out


# -- forwarding table (virtual switch) -----------------------------------


@dataclass
class SubTable:
    """Entries of one input port, merged so each output port has one predicate.

    Traffic matched by no entry takes the default route to egress; explicit
    egress entries are folded into that default.
    """

    input_port: Port
    entries: dict[Port, Predicate] = field(default_factory=dict)

    def lookup(self, engine: BddEngine, bits: int) -> Port:
        for out, pred in self.entries.items():
            if engine.evaluate(pred, bits):
                return out
        return EGRESS


@dataclass(frozen=True)
class Reroute:
    """Send traffic bound for ``port`` that matches ``predicate`` to a replica box."""

    port: Port
    predicate: Predicate
    replica: str


def unmerged_entries(assignments: Iterable[ChainAssignment]) -> list[tuple[Port, Predicate, Port]]:
    rows = []
    for a in assignments:
        seq = (INGRESS,) + chain_ports(a.chain) + (EGRESS,)
        for k in range(len(seq) - 1):
            rows.append((seq[k], a.predicate, seq[k + 1]))
    return rows


def build_forwarding_table(engine: BddEngine, assignments: Sequence[ChainAssignment],
                           inventory: Iterable[str], reroutes: Sequence[Reroute] = ()) -> dict[Port, SubTable]:
    inventory = set(inventory)
    for a in assignments:
        for box in a.chain:
            if box not in inventory:
                raise CompositionError(f"chain references unknown middlebox {box!r}")
    grouped: dict[Port, dict[Port, list[int]]] = {INGRESS: {}}
    for inp, pred, out in unmerged_entries(assignments):
        grouped.setdefault(inp, {})
        if out != EGRESS:
            grouped[inp].setdefault(out, []).append(pred.node)
    tables: dict[Port, dict[Port, int]] = {}
    for inp, outs in grouped.items():
        tables[inp] = {out: engine.or_all(nodes) for out, nodes in outs.items()}
    for rr in reroutes:
        if rr.replica in RESERVED_IDS:
            raise CompositionError("replica id is reserved")
        target = Port(rr.replica, rr.port.occ)
        for inp in list(tables):
            entries = tables[inp]
            if rr.port not in entries:
                continue
            old = entries[rr.port]
            moved = engine.and_node(old, rr.predicate.node)
            kept = engine.diff_node(old, rr.predicate.node)
            if kept == FALSE:
                del entries[rr.port]
            else:
                entries[rr.port] = kept
            if moved != FALSE:
                entries[target] = engine.or_node(entries.get(target, FALSE), moved)
        if rr.port in tables:
            tables.setdefault(target, {})
            for out, node in tables[rr.port].items():
                tables[target][out] = engine.or_node(tables[target].get(out, FALSE), node)
    return {inp: SubTable(inp, {out: engine.wrap(n) for out, n in outs.items() if n != FALSE})
            for inp, outs in tables.items()}


def table_size(tables: dict[Port, SubTable]) -> int:
    return sum(len(t.entries) for t in tables.values())


# -- behavior predicates -----------------------------------------------


def compose_behaviors(engine: BddEngine, rules: Iterable[MiddleboxRule],
                      default: str = ALLOW) -> list[tuple[str, Predicate]]:
    """One predicate per behavior under first-match semantics.

    Behaviors appear in order of first use, the default last if unused by
    rules; the default absorbs every header no rule matches.  Predicates are
    pairwise disjoint and cover TRUE.

    The residual construction runs divide-and-conquer over the priority
    order: a block's result is its upper half's result plus the lower half's
    pieces minus whatever the upper half already matched.  This gives the
    same predicates as the rule-at-a-time loop with far smaller operands.
    """
    rules = stable_priority_sort(rules)
    order: dict[str, int] = {}
    cache: dict[MatchSpec, int] = {}
    leaves = []
    for r in rules:
        order.setdefault(r.behavior, len(order))
        node = cache.get(r.match)
        if node is None:
            node = spec_to_node(engine, r.match)
            cache[r.match] = node
        leaves.append((node, r.behavior))

    def go(lo: int, hi: int) -> tuple[int, dict[str, int]]:
        if hi - lo == 1:
            node, b = leaves[lo]
            return node, ({b: node} if node != FALSE else {})
        mid = (lo + hi) // 2
        done_l, left = go(lo, mid)
        if done_l == TRUE:
            return done_l, left
        done_r, right = go(mid, hi)
        out = dict(left)
        for b, node in right.items():
            rest = engine.diff_node(node, done_l)
            if rest != FALSE:
                out[b] = engine.or_node(out[b], rest) if b in out else rest
        return engine.or_node(done_l, done_r), out

    done, pieces = go(0, len(leaves)) if leaves else (FALSE, {})
    order.setdefault(default, len(order))
    rest = engine.not_node(done)
    if rest != FALSE:
        pieces[default] = engine.or_node(pieces[default], rest) if default in pieces else rest
    return [(b, engine.wrap(pieces.get(b, FALSE))) for b in sorted(order, key=order.get)]


def first_match(rules: Sequence[MiddleboxRule], values: Sequence[int], default: str = ALLOW) -> str:
    """Linear first-match over plaintext rules (no BDDs)."""
    for r in stable_priority_sort(rules):
        if r.match.matches(values):
            return r.behavior
    return default


# -- abstract function network ---------------------------------------------


@dataclass
class BoxSpec:
    box_id: str
    rules: list[MiddleboxRule]
    default: str = ALLOW
    stateful: bool = False
    function: str | None = None  # replicas share their original's function

    @property
    def is_transformer(self) -> bool:
        return any(rewrite_of(r.behavior) is not None for r in self.rules) or \
            rewrite_of(self.default) is not None


@dataclass(frozen=True)
class InsertMark:
    """Traffic leaving ``port`` that matches ``predicate`` visits ``box`` first and
    then continues from ``port`` as if nothing happened."""

    port: Port
    predicate: Predicate
    box: str


@dataclass(frozen=True)
class BypassMark:
    """Traffic arriving at ``port`` that matches ``predicate`` skips the box there."""

    port: Port
    predicate: Predicate


@dataclass
class AbstractFunctionNetwork:
    engine: BddEngine
    layout: HeaderLayout
    boxes: dict[str, BoxSpec]
    requirements: list[ChainRequirement]
    behaviors: dict[str, list[tuple[str, Predicate]]]
    assignments: list[ChainAssignment]
    vswitch: dict[Port, SubTable]
    reroutes: list[Reroute] = field(default_factory=list)
    inserts: list[InsertMark] = field(default_factory=list)
    bypasses: list[BypassMark] = field(default_factory=list)

    @property
    def ingress(self) -> Port:
        return INGRESS

    @property
    def egress(self) -> Port:
        return EGRESS

    def ports(self) -> list[Port]:
        seen = {INGRESS: None}
        for t in self.vswitch.values():
            for out in t.entries:
                seen.setdefault(out, None)
        for t in self.vswitch:
            seen.setdefault(t, None)
        for m in self.inserts:
            seen.setdefault(m.port, None)
        seen.pop(EGRESS, None)
        return list(seen)

    def predicates(self) -> dict[tuple, Predicate]:
        """Every predicate the header-space mapping must respect, keyed by source.

        Keys: ``("box", box_id, behavior)``, ``("fwd", in_port, out_port)``,
        ``("new", port, box)`` and ``("bypass", port)``.
        """
        out: dict[tuple, Predicate] = {}
        for box_id, preds in self.behaviors.items():
            for behavior, p in preds:
                if not p.is_false:
                    out[("box", box_id, behavior)] = p
        for inp, table in self.vswitch.items():
            for port, p in table.entries.items():
                out[("fwd", inp, port)] = p
        for m in self.inserts:
            key = ("new", m.port, m.box)
            out[key] = out[key] | m.predicate if key in out else m.predicate
        for b in self.bypasses:
            key = ("bypass", b.port)
            out[key] = out[key] | b.predicate if key in out else b.predicate
        return {k: p for k, p in out.items() if not p.is_false}

    def walk(self, bits: int) -> list[Port]:
        """Ports visited from ingress for an unmodified header (egress excluded)."""
        hops = []
        port = INGRESS
        limit = sum(len(a.chain) for a in self.assignments) + len(self.boxes) + 2
        while True:
            table = self.vswitch.get(port)
            nxt = table.lookup(self.engine, bits) if table is not None else EGRESS
            if nxt == EGRESS:
                return hops
            hops.append(nxt)
            port = nxt
            if len(hops) > limit:
                raise CompositionError("forwarding loop")

    def rewrites(self) -> list[tuple[str, str, Predicate]]:
        """(box, behavior, predicate) for every rewriting behavior."""
        out = []
        for box_id, preds in self.behaviors.items():
            for behavior, p in preds:
                if rewrite_of(behavior, self.layout) is not None and not p.is_false:
                    out.append((box_id, behavior, p))
        return out


def compose_network(engine: BddEngine, layout: HeaderLayout, boxes: dict[str, BoxSpec],
                    requirements: Sequence[ChainRequirement],
                    reroutes: Sequence[Reroute] = (), inserts: Sequence[InsertMark] = (),
                    bypasses: Sequence[BypassMark] = (),
                    behaviors: dict[str, list[tuple[str, Predicate]]] | None = None) -> AbstractFunctionNetwork:
    """Assemble the network; ``behaviors`` may supply already-composed boxes."""
    for box_id in boxes:
        if box_id in RESERVED_IDS:
            raise CompositionError(f"middlebox id {box_id!r} is reserved")
    known = dict(behaviors or {})
    out: dict[str, list[tuple[str, Predicate]]] = {}
    for bid, b in boxes.items():
        src = b.function or bid
        if src not in boxes:
            raise CompositionError(f"replica {bid!r} of unknown middlebox {src!r}")
        if src not in known:
            known[src] = compose_behaviors(engine, boxes[src].rules, boxes[src].default)
        out[bid] = known[src]
    assignments = compute_overall_chains(engine, requirements)
    vswitch = build_forwarding_table(engine, assignments, boxes, reroutes)
    seen_ports: dict[Port, list[int]] = {}
    for m in inserts:
        if m.box not in boxes:
            raise CompositionError(f"insert references unknown middlebox {m.box!r}")
        for other in seen_ports.get(m.port, []):
            if engine.intersects(other, m.predicate.node):
                raise CompositionError(f"overlapping inserts at port {m.port}")
        seen_ports.setdefault(m.port, []).append(m.predicate.node)
    return AbstractFunctionNetwork(engine, layout, dict(boxes), list(requirements), out,
                                   assignments, vswitch, list(reroutes), list(inserts), list(bypasses))


# -- plaintext network configuration ---------------------------------------


@dataclass(frozen=True)
class InsertSpec:
    port: Port
    match: MatchSpec
    box: str


@dataclass(frozen=True)
class BypassSpec:
    port: Port
    match: MatchSpec


@dataclass(frozen=True)
class RerouteSpec:
    port: Port
    match: MatchSpec
    replica: str


@dataclass
class NetworkConfig:
    """Everything the gateway knows in plaintext: rules, chains and patches."""

    layout: HeaderLayout
    boxes: dict[str, BoxSpec]
    requirements: list[ChainRequirement]
    reroutes: list[RerouteSpec] = field(default_factory=list)
    inserts: list[InsertSpec] = field(default_factory=list)
    bypasses: list[BypassSpec] = field(default_factory=list)

    def copy(self) -> "NetworkConfig":
        boxes = {k: BoxSpec(b.box_id, list(b.rules), b.default, b.stateful, b.function)
                 for k, b in self.boxes.items()}
        return NetworkConfig(self.layout, boxes, list(self.requirements), list(self.reroutes),
                             list(self.inserts), list(self.bypasses))

    def function_of(self, box_id: str) -> str:
        return self.boxes[box_id].function or box_id

    def rules_of(self, box_id: str) -> BoxSpec:
        return self.boxes[self.function_of(box_id)]


def compose_config(engine: BddEngine, cfg: NetworkConfig,
                   behaviors: dict[str, list[tuple[str, Predicate]]] | None = None) -> AbstractFunctionNetwork:
    sp = lambda m: engine.wrap(spec_to_node(engine, m))
    return compose_network(
        engine, cfg.layout, cfg.boxes, cfg.requirements,
        [Reroute(r.port, sp(r.match), r.replica) for r in cfg.reroutes],
        [InsertMark(m.port, sp(m.match), m.box) for m in cfg.inserts],
        [BypassMark(b.port, sp(b.match)) for b in cfg.bypasses],
        behaviors)
