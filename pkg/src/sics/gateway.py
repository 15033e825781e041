"""Trusted edge: header encryption, labeling, flow pinning, field restoration
and translation of configuration changes into cloud table updates."""

from __future__ import annotations

import copy
import itertools
import logging
import time
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from . import cloud as C
from .bdd import FALSE, TRUE, BddEngine, Predicate
from .classifier import Classifier, UpdatePlan
from .composer import (
    EGRESS,
    INGRESS,
    AbstractFunctionNetwork,
    BoxSpec,
    BypassSpec,
    InsertSpec,
    NetworkConfig,
    Port,
    RerouteSpec,
    compose_behaviors,
    compose_config,
)
from .equivalence import DEFAULT_LABEL_WIDTH, compute_ecs
from .header import COUNT, DENY, ChainRequirement, MiddleboxRule, rewrite_of
from .wire import LABEL_BITS, FramingError, SicsPacket

log = logging.getLogger(__name__)


class GatewayError(RuntimeError):
    pass


class PaddingError(FramingError):
    """Decrypted block has nonzero padding: wrong key or tampered ciphertext."""


class UnknownPoolIndex(FramingError):
    pass


class UpdateTimeout(GatewayError):
    pass


# -- cipher ----------------------------------------------------------------


def parse_key(text: str | bytes) -> bytes:
    if isinstance(text, bytes):
        key = text
    else:
        try:
            key = bytes.fromhex(text.strip())
        except ValueError:
            raise GatewayError("key must be 32 hex digits") from None
    if len(key) != 16:
        raise GatewayError("key must be 128 bits")
    return key


class HeaderCipher:
    """AES-128 on a single block holding the header left-aligned over zero padding."""

    def __init__(self, key: bytes, header_bits: int = 104):
        if header_bits > 128:
            raise GatewayError("header does not fit one block")
        c = Cipher(algorithms.AES(parse_key(key)), modes.ECB())
        self._enc = c.encryptor()
        self._dec = c.decryptor()
        self.pad = 128 - header_bits

    def encrypt(self, bits: int) -> bytes:
        return self._enc.update((bits << self.pad).to_bytes(16, "big"))

    def encrypt_many(self, values: Sequence[int]) -> list[bytes]:
        pad = self.pad
        blob = self._enc.update(b"".join((v << pad).to_bytes(16, "big") for v in values))
        return [blob[i:i + 16] for i in range(0, len(blob), 16)]

    def decrypt(self, ct: bytes) -> int:
        v = int.from_bytes(self._dec.update(ct), "big")
        if v & ((1 << self.pad) - 1):
            raise PaddingError("nonzero padding after decryption")
        return v >> self.pad


# -- flow pinning ----------------------------------------------------------


class FlowTable:
    """Header -> label for live flows; a flow keeps its label until it ends or idles out."""

    def __init__(self, idle_timeout: float = 30.0):
        self.idle_timeout = idle_timeout
        self.flows: dict[int, list] = {}     # key -> [label, last seen]
        self.pins: Counter = Counter()

    def __len__(self):
        return len(self.flows)

    def lookup(self, key: int, now: float) -> int | None:
        e = self.flows.get(key)
        if e is None:
            return None
        if now - e[1] > self.idle_timeout:
            self._remove(key)
            return None
        e[1] = now
        return e[0]

    def insert(self, key: int, label: int, now: float):
        self.terminate(key)
        self.flows[key] = [label, now]
        self.pins[label] += 1

    def _remove(self, key: int):
        label = self.flows.pop(key)[0]
        self.pins[label] -= 1
        if not self.pins[label]:
            del self.pins[label]

    def terminate(self, key: int) -> bool:
        if key in self.flows:
            self._remove(key)
            return True
        return False

    def expire(self, now: float) -> int:
        stale = [k for k, (_, t) in self.flows.items() if now - t > self.idle_timeout]
        for k in stale:
            self._remove(k)
        return len(stale)

    def pinned(self) -> set[int]:
        return set(self.pins)


# -- field pool --------------------------------------------------------------


class FieldPool:
    """Indexes naming the set of field values transformers have written.

    Index 0 means nothing was rewritten.  The cloud learns only the index
    transitions each rewrite performs, never the values.
    """

    def __init__(self, max_index: int = 0xFFFF):
        self.states: list[tuple[tuple[str, int], ...]] = [()]
        self.index: dict[tuple, int] = {(): 0}
        self.max_index = max_index

    def __len__(self):
        return len(self.states)

    def intern(self, state: dict[str, int]) -> int:
        key = tuple(sorted(state.items()))
        i = self.index.get(key)
        if i is None:
            i = len(self.states)
            if i > self.max_index:
                raise GatewayError("field pool exhausted")
            self.states.append(key)
            self.index[key] = i
        return i

    def transition(self, idx: int, field_name: str, value: int) -> int:
        state = dict(self.states[idx])
        state[field_name] = value
        return self.intern(state)

    def restore(self, bits: int, idx: int, layout) -> int:
        if not 0 <= idx < len(self.states):
            raise UnknownPoolIndex(f"pool index {idx}")
        for name, value in self.states[idx]:
            bits = layout.set(bits, name, value)
        return bits

    def reachable(self, rewrites: Iterable[tuple[str, int]]) -> dict[tuple[str, int], dict[int, int]]:
        """Transition maps for every rewrite over all states reachable from 0."""
        rewrites = sorted(set(rewrites))
        maps: dict[tuple[str, int], dict[int, int]] = {rw: {} for rw in rewrites}
        frontier = [0]
        seen = {0}
        while frontier:
            i = frontier.pop()
            for rw in rewrites:
                j = self.transition(i, *rw)
                maps[rw][i] = j
                if j not in seen:
                    seen.add(j)
                    frontier.append(j)
        return maps


# -- update descriptions -----------------------------------------------------


@dataclass
class UpdateReport:
    plan: UpdatePlan
    records: list[C.Record]
    predicate_changes: int
    elapsed_ms: float
    epoch: int

    @property
    def empty(self) -> bool:
        return not self.records


def _action(behavior: str) -> int:
    if behavior == DENY:
        return C.ACT_DENY
    if behavior == COUNT:
        return C.ACT_COUNT
    if behavior.startswith("REWRITE("):
        return C.ACT_REWRITE
    return C.ACT_ALLOW


_CASE_PUT = {"rule": 1, "replace": 1, "adapter": 3, "new": 3, "bypass": 3}
_CASE_DEL = {"rule": 2, "replace": 2, "adapter": 4, "new": 4, "bypass": 4}


class Gateway:
    """Owns the plaintext configuration, the classifier and the cloud's table mirror."""

    def __init__(self, cfg: NetworkConfig, key: str | bytes, cloud: C.Cloud | None = None,
                 label_width: int = DEFAULT_LABEL_WIDTH, idle_timeout: float = 30.0,
                 closure: bool = True, engine: BddEngine | None = None, ack_budget: int = 10_000_000):
        if label_width > LABEL_BITS:
            raise GatewayError(f"labels travel in {LABEL_BITS} bits")
        self.layout = cfg.layout
        self.engine = engine or BddEngine(cfg.layout.width)
        self.cipher = HeaderCipher(parse_key(key), cfg.layout.width)
        self.cloud = cloud if cloud is not None else C.Cloud()
        self.label_width = label_width
        self.closure = closure
        self.flows = FlowTable(idle_timeout)
        self.pool = FieldPool()
        self.ack_budget = ack_budget
        self.clock = 0.0
        self.counters = Counter()
        self.updating = False
        self.buffer: list[tuple[int, bytes]] = []
        self.epoch = 0
        self.box_codes: dict[str, int] = {"ingress": C.INGRESS_BOX, "egress": C.EGRESS_BOX}
        self.port_codes: dict[Port, int] = {INGRESS: C.INGRESS_PORT, EGRESS: C.EGRESS_PORT}
        self.behavior_codes: dict[str, int] = {}
        self.mirror: dict[int, dict[tuple, int]] = {}
        self.mirror_pool: dict[tuple[int, int], dict[int, int]] = {}
        self.defined_boxes: set[str] = set()
        self.timings: dict[str, float] = {}
        self._build(cfg)

    # -- construction ------------------------------------------------------

    def _build(self, cfg: NetworkConfig):
        t0 = time.perf_counter()
        self.cfg = cfg.copy()
        self.behaviors = {bid: compose_behaviors(self.engine, b.rules, b.default)
                          for bid, b in cfg.boxes.items() if not b.function}
        self.net = compose_config(self.engine, self.cfg, self.behaviors)
        t1 = time.perf_counter()
        self.preds = self._all_predicates(self.net)
        ecs = compute_ecs(self.engine, self.preds, self.label_width, self.layout) if self.preds else None
        t2 = time.perf_counter()
        self.classifier = Classifier.from_ecs(ecs) if ecs else Classifier(self.engine, self.layout, self.label_width)
        self.classifier.protected = self._is_protected
        self._protected: set[int] = set()
        t3 = time.perf_counter()
        records = self._definitions()
        records += self._diff_labels(set(self.classifier.classes), set(), set())
        records += self._pool_records()
        self.cloud.provision(C.encode_records(records))
        t4 = time.perf_counter()
        self.timings = {"compose_ms": (t1 - t0) * 1e3, "ec_ms": (t2 - t1) * 1e3,
                        "classifier_ms": (t3 - t2) * 1e3, "provision_ms": (t4 - t3) * 1e3}
        self.provision_records = len(records)

    def _all_predicates(self, net: AbstractFunctionNetwork) -> dict[Hashable, Predicate]:
        base = net.predicates()
        if not self.closure:
            return base
        rewrites: dict[str, set[int]] = {}
        for _, behavior, _ in net.rewrites():
            rw = rewrite_of(behavior, self.layout)
            rewrites.setdefault(rw.field, set()).add(rw.value)
        if not rewrites:
            return base
        return {**base, **self._closure(base, rewrites)}

    def _closure(self, base: dict[Hashable, Predicate], rewrites: dict[str, set[int]]) -> dict:
        """Cofactors of every predicate under every combination of rewritten values.

        With these registered, a class's image under any rewrite lies inside
        one class, so label replacement is always well defined.
        """
        e = self.engine
        fields = sorted(rewrites)
        choices = [[None] + sorted(rewrites[f]) for f in fields]
        out = {}
        for key, p in base.items():
            for combo in itertools.product(*choices):
                sigma = tuple((f, v) for f, v in zip(fields, combo) if v is not None)
                if not sigma:
                    continue
                node = p.node
                for f, v in sigma:
                    fd = self.layout.field(f)
                    node = e.restrict_node(node, fd.offset, fd.width, v)
                if node in (TRUE, FALSE, p.node):
                    continue
                out[("cof", key, sigma)] = e.wrap(node)
        return out

    # -- codes -------------------------------------------------------------

    def _box_code(self, box: str) -> int:
        c = self.box_codes.get(box)
        if c is None:
            c = self.box_codes[box] = len(self.box_codes) + 1
        return c

    def _port_code(self, port: Port) -> int:
        c = self.port_codes.get(port)
        if c is None:
            c = self.port_codes[port] = len(self.port_codes) + 1
        return c

    def _beh_code(self, behavior: str) -> int:
        c = self.behavior_codes.get(behavior)
        if c is None:
            c = self.behavior_codes[behavior] = len(self.behavior_codes) + 1
        return c

    def decode_box(self, code: int) -> str:
        return self._rev(self.box_codes)[code]

    def decode_behavior(self, code: int) -> str:
        return self._rev(self.behavior_codes)[code]

    def _rev(self, d: dict) -> dict:
        cache = getattr(self, "_rev_cache", None)
        if cache is None or cache[0] != (len(self.box_codes), len(self.behavior_codes)):
            cache = ((len(self.box_codes), len(self.behavior_codes)),
                     {id(self.box_codes): {v: k for k, v in self.box_codes.items()},
                      id(self.behavior_codes): {v: k for k, v in self.behavior_codes.items()}})
            self._rev_cache = cache
        return cache[1][id(d)]

    def _definitions(self) -> list[C.Record]:
        """Behavior, box and port definitions not yet sent."""
        recs = []
        seen_beh = set(self.behavior_codes)
        for bid, box in self.cfg.boxes.items():
            spec = self.cfg.rules_of(bid)
            for b in [r.behavior for r in spec.rules] + [spec.default]:
                if b not in seen_beh:
                    seen_beh.add(b)
                    recs.append(C.Record(C.REC_BEHAVIOR, 0, (self._beh_code(b), _action(b))))
        for bid, box in self.cfg.boxes.items():
            if bid in self.defined_boxes:
                continue
            spec = self.cfg.rules_of(bid)
            kind = C.KIND_TRANSFORMER if spec.is_transformer else C.KIND_STATIC
            recs.append(C.Record(C.REC_BOX, 0, (self._box_code(bid), kind, int(box.stateful),
                                                self._beh_code(spec.default))))
            self.defined_boxes.add(bid)
        for port in self.net.ports():
            if port not in self.port_codes:
                recs.append(C.Record(C.REC_PORT, 0, (self._port_code(port), self._box_code(port.box), port.occ)))
        return recs

    # -- desired cloud state -----------------------------------------------

    def _entries(self, label: int) -> dict[tuple, int]:
        out = {}
        for key in self.classifier.members[label]:
            tag = key[0]
            if tag == "box":
                _, box, behavior = key
                bc = self._box_code(box)
                beh = self._beh_code(behavior)
                out[("rule", bc)] = beh
                rw = rewrite_of(behavior, self.layout)
                if rw is not None:
                    out[("replace", bc, beh)] = self._replacement(label, rw.field, rw.value)
            elif tag == "fwd":
                out[("adapter", self._port_code(key[1]))] = self._port_code(key[2])
            elif tag == "new":
                out[("new", self._port_code(key[1]))] = self._box_code(key[2])
            elif tag == "bypass":
                out[("bypass", self._port_code(key[1]))] = 1
        return out

    def _replacement(self, label: int, field_name: str, value: int) -> int:
        """Label of the class holding the rewritten members of ``label``.

        Under the cofactor closure any member gives the same answer, so one
        representative is classified.  Without it the image is checked exactly.
        """
        node = self.classifier.classes[label]
        if self.closure:
            h = self.layout.set(self.engine.pick(node), field_name, value)
            return self.classifier.classify(h)
        from .equivalence import AmbiguousRewriteError, rewrite_image_node
        image = rewrite_image_node(self.engine, self.layout, node, field_name, value)
        targets = self.classifier.diagram.labels_under(self.classifier.snapshot.root, image)
        if len(targets) != 1:
            raise AmbiguousRewriteError(label, targets)
        return next(iter(targets))

    def _record(self, entry: tuple, label: int, value: int | None, put: bool) -> C.Record:
        kind = entry[0]
        case = (_CASE_PUT if put else _CASE_DEL)[kind]
        if kind == "rule":
            return C.Record(C.REC_RULE_PUT, case, (entry[1], label, value)) if put else \
                C.Record(C.REC_RULE_DEL, case, (entry[1], label))
        if kind == "replace":
            return C.Record(C.REC_REPLACE_PUT, case, (entry[1], entry[2], label, value)) if put else \
                C.Record(C.REC_REPLACE_DEL, case, (entry[1], entry[2], label))
        if kind == "adapter":
            return C.Record(C.REC_ADAPTER_PUT, case, (entry[1], label, value)) if put else \
                C.Record(C.REC_ADAPTER_DEL, case, (entry[1], label))
        mk = C.MARK_NEW if kind == "new" else C.MARK_BYPASS
        box = value if kind == "new" else 0
        return C.Record(C.REC_MARKER_PUT, case, (mk, entry[1], label, box)) if put else \
            C.Record(C.REC_MARKER_DEL, case, (mk, entry[1], label))

    def _diff_labels(self, touched: set[int], purged: set[int], targets_changed: set[int]) -> list[C.Record]:
        """Records bringing the cloud's entries for ``touched`` labels up to date."""
        dels, puts, tail = [], [], []
        live = self.classifier.classes
        check = set(touched)
        if targets_changed:
            for label, entries in self.mirror.items():
                if label in live and label not in self._protected and any(
                        k[0] == "replace" and v in targets_changed for k, v in entries.items()):
                    check.add(label)
        for label in sorted(check):
            if label not in live:
                continue
            want = self._entries(label)
            have = self.mirror.get(label, {})
            for k, v in have.items():
                if k not in want:
                    dels.append(self._record(k, label, None, False))
            for k, v in want.items():
                if have.get(k) != v:
                    puts.append(self._record(k, label, v, True))
            self.mirror[label] = want
        for label in sorted(purged):
            tail.append(C.Record(C.REC_PURGE, 2, (label,)))
            self.mirror.pop(label, None)
        return dels + puts + tail

    def _pool_records(self) -> list[C.Record]:
        want: dict[tuple[int, int], dict[int, int]] = {}
        rewrites = {}
        for box, behavior, _ in self.net.rewrites():
            rw = rewrite_of(behavior, self.layout)
            rewrites.setdefault((rw.field, rw.value), []).append((self._box_code(box), self._beh_code(behavior)))
        maps = self.pool.reachable(rewrites)
        for rw, owners in rewrites.items():
            for owner in owners:
                want[owner] = maps[rw]
        recs = []
        for owner, have in self.mirror_pool.items():
            for i in have:
                if i not in want.get(owner, {}):
                    recs.append(C.Record(C.REC_POOL_DEL, 0, (*owner, i)))
        for owner, m in want.items():
            have = self.mirror_pool.get(owner, {})
            for i, o in sorted(m.items()):
                if have.get(i) != o:
                    recs.append(C.Record(C.REC_POOL_MAP, 0, (*owner, i, o)))
        self.mirror_pool = {k: dict(v) for k, v in want.items()}
        return recs

    # -- protection --------------------------------------------------------

    def _is_protected(self, label: int) -> bool:
        return label in self._protected

    def _compute_protected(self) -> set[int]:
        """Pinned labels plus every label their replacement entries lead to."""
        out = set()
        frontier = list(self.flows.pinned())
        while frontier:
            label = frontier.pop()
            if label in out:
                continue
            out.add(label)
            for k, v in self.mirror.get(label, {}).items():
                if k[0] == "replace":
                    frontier.append(v)
        return out

    # -- updates -------------------------------------------------------------

    def _editable(self, box: str) -> tuple[NetworkConfig, BoxSpec]:
        if box not in self.cfg.boxes:
            raise GatewayError(f"unknown middlebox {box!r}")
        cfg = self.cfg.copy()
        return cfg, cfg.rules_of(box)

    def insert_rule(self, box: str, rule: MiddleboxRule) -> UpdateReport:
        cfg, spec = self._editable(box)
        spec.rules.append(rule)
        return self.apply_config(cfg, changed_boxes={cfg.function_of(box)})

    def delete_rule(self, box: str, rule: MiddleboxRule) -> UpdateReport:
        cfg, spec = self._editable(box)
        try:
            spec.rules.remove(rule)
        except ValueError:
            raise GatewayError(f"rule not present at {box}") from None
        return self.apply_config(cfg, changed_boxes={cfg.function_of(box)})

    def insert_chain(self, req: ChainRequirement) -> UpdateReport:
        cfg = self.cfg.copy()
        cfg.requirements.append(req)
        return self.apply_config(cfg)

    def delete_chain(self, req: ChainRequirement) -> UpdateReport:
        cfg = self.cfg.copy()
        try:
            cfg.requirements.remove(req)
        except ValueError:
            raise GatewayError("chain requirement not present") from None
        return self.apply_config(cfg)

    def insert_box(self, mark: InsertSpec, box: BoxSpec | None = None) -> UpdateReport:
        cfg = self.cfg.copy()
        if box is not None:
            cfg.boxes[box.box_id] = box
        cfg.inserts.append(mark)
        return self.apply_config(cfg, changed_boxes={box.box_id} if box is not None else set())

    def bypass_box(self, mark: BypassSpec) -> UpdateReport:
        cfg = self.cfg.copy()
        cfg.bypasses.append(mark)
        return self.apply_config(cfg)

    def reroute(self, rr: RerouteSpec) -> UpdateReport:
        """Send part of a port's traffic to a replica of the same function."""
        cfg = self.cfg.copy()
        if rr.replica not in cfg.boxes:
            orig = cfg.boxes[cfg.function_of(rr.port.box)]
            cfg.boxes[rr.replica] = BoxSpec(rr.replica, [], orig.default, orig.stateful,
                                            cfg.function_of(rr.port.box))
        cfg.reroutes.append(rr)
        return self.apply_config(cfg)

    def apply_config(self, cfg: NetworkConfig, changed_boxes: set[str] | None = None) -> UpdateReport:
        """Move to ``cfg``: recompose, diff predicates, update classifier and cloud.

        Boxes not in ``changed_boxes`` keep their composed behaviors; pass
        ``None`` to recompose everything.
        """
        t0 = time.perf_counter()
        cfg = cfg.copy()
        behaviors = {}
        for bid, b in cfg.boxes.items():
            if b.function:
                continue
            if changed_boxes is not None and bid not in changed_boxes and bid in self.behaviors \
                    and self._same_box(self.cfg.boxes.get(bid), b):
                behaviors[bid] = self.behaviors[bid]
            else:
                behaviors[bid] = compose_behaviors(self.engine, b.rules, b.default)
        net = compose_config(self.engine, cfg, behaviors)
        preds = self._all_predicates(net)
        changes = [(k, None) for k in self.preds if k not in preds]
        changes += [(k, p) for k, p in preds.items() if k not in self.preds or self.preds[k] is not p]
        state = (self.cfg, self.behaviors, self.net, self.preds, self.classifier.checkpoint(),
                 copy.deepcopy(self.mirror), copy.deepcopy(self.mirror_pool), set(self.defined_boxes),
                 dict(self.box_codes), dict(self.port_codes), dict(self.behavior_codes))
        self.cfg, self.behaviors, self.net, self.preds = cfg, behaviors, net, preds
        if not changes and not self._definitions_pending():
            return UpdateReport(UpdatePlan(), [], 0, (time.perf_counter() - t0) * 1e3, self.epoch)
        try:
            self._protected = self._compute_protected()
            plan = self.classifier.replace_predicates(changes)
            records = self._definitions()
            records += self._records_for(plan)
            records += self._pool_records()
            self._send(records)
        except BaseException:
            (self.cfg, self.behaviors, self.net, self.preds, ck, self.mirror, self.mirror_pool,
             self.defined_boxes, self.box_codes, self.port_codes, self.behavior_codes) = state
            self.classifier.restore(ck)
            raise
        finally:
            self._protected = set()
        return UpdateReport(plan, records, len(changes), (time.perf_counter() - t0) * 1e3, self.epoch)

    @staticmethod
    def _same_box(a: BoxSpec | None, b: BoxSpec) -> bool:
        return a is not None and a.rules == b.rules and a.default == b.default

    def _definitions_pending(self) -> bool:
        return any(b not in self.defined_boxes for b in self.cfg.boxes) or \
            any(p not in self.port_codes for p in self.net.ports())

    def _records_for(self, plan: UpdatePlan) -> list[C.Record]:
        touched = {label for _, _, label in plan.ops}
        purged = {label for op, _, label in plan.ops if op == "purge"}
        changed = touched | {old for old, _ in plan.relabels} | {gone for gone, _ in plan.merges}
        # a protected label whose replacement target moves is moved to a fresh label first
        while True:
            moved = []
            for label in sorted(self._protected & set(self.classifier.classes)):
                entries = self.mirror.get(label, {})
                if any(k[0] == "replace" and v in changed for k, v in entries.items()):
                    moved.append(label)
            if not moved:
                break
            extra = self.classifier.isolate(moved)
            plan.extend(extra)
            touched |= {label for _, _, label in extra.ops}
            changed |= {old for old, _ in extra.relabels}
        return self._diff_labels(touched - purged, purged, changed)

    def release(self) -> UpdateReport:
        """Purge retired labels no flow pins any more."""
        t0 = time.perf_counter()
        self._protected = self._compute_protected()
        try:
            plan = self.classifier.release(self.classifier.retired - self._protected)
            purged = {label for op, _, label in plan.ops if op == "purge"}
            records = self._diff_labels(set(), purged, purged)
            self.classifier.retired -= purged
            if records:
                self._send(records)
        finally:
            self._protected = set()
        return UpdateReport(plan, records, 0, (time.perf_counter() - t0) * 1e3, self.epoch)

    def _send(self, records: list[C.Record]):
        """Ship a batch behind a drain barrier and wait for its acknowledgement."""
        self.updating = True
        self.epoch += 1
        epoch = self.epoch
        try:
            self.cloud.submit(C.encode_records(records + [C.Record(C.REC_BARRIER, 0, (epoch,))]))
            if not self.cloud.run_until_ack(epoch, self.ack_budget):
                self.epoch -= 1
                self.counters["update_timeouts"] += 1
                raise UpdateTimeout(f"no acknowledgement for update {epoch}")
        finally:
            self.updating = False
        self.counters["updates"] += 1
        self._flush()

    # -- packet path ---------------------------------------------------------

    def label_for(self, bits: int) -> int:
        label = self.flows.lookup(bits, self.clock)
        if label is None:
            label = self.classifier.classify(bits)
            self.flows.insert(bits, label, self.clock)
        return label

    def egress_encode(self, bits: int, payload: bytes = b"") -> bytes:
        return SicsPacket(self.label_for(bits), 0, self.cipher.encrypt(bits), payload).to_bytes()

    def encode_batch(self, headers: Sequence[int], payload: bytes = b"", pin: bool = True) -> list[bytes]:
        """Frames for many headers: one vectorised classification, one cipher call."""
        n = len(headers)
        labels = [None] * n
        todo = []
        for i, h in enumerate(headers):
            lab = self.flows.lookup(h, self.clock) if pin else None
            if lab is None:
                todo.append(i)
            labels[i] = lab
        if todo:
            nbytes = (self.layout.width + 7) // 8
            raw = b"".join((headers[i] << (nbytes * 8 - self.layout.width)).to_bytes(nbytes, "big") for i in todo)
            bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8).reshape(len(todo), nbytes), axis=1)
            got = self.classifier.classify_batch(bits[:, :self.layout.width])
            for i, lab in zip(todo, got.tolist()):
                labels[i] = lab
                if pin:
                    self.flows.insert(headers[i], lab, self.clock)
        cts = self.cipher.encrypt_many(headers)
        return [SicsPacket(lab, 0, ct, payload).to_bytes() for lab, ct in zip(labels, cts)]

    def send(self, bits: int, payload: bytes = b"", pid: int = 0):
        frame = self.egress_encode(bits, payload)
        if self.updating:
            self.buffer.append((pid, frame))
        else:
            self.cloud.inject(frame, pid)

    def _flush(self):
        buf, self.buffer = self.buffer, []
        for pid, frame in buf:
            self.cloud.inject(frame, pid)

    def end_flow(self, bits: int) -> bool:
        return self.flows.terminate(bits)

    def tick(self, seconds: float):
        self.clock += seconds
        self.flows.expire(self.clock)

    def ingress_decode(self, frame: bytes) -> tuple[int, bytes]:
        pkt = SicsPacket.from_bytes(frame)
        bits = self.cipher.decrypt(pkt.header_ct)
        if pkt.pool_index:
            bits = self.pool.restore(bits, pkt.pool_index, self.layout)
        return bits, pkt.payload

    def receive(self, frame: bytes) -> tuple[int, bytes] | None:
        try:
            return self.ingress_decode(frame)
        except FramingError as exc:
            self.counters["decode_errors"] += 1
            log.debug("dropping returned frame: %s", exc)
            return None

    # -- inspection ----------------------------------------------------------

    def representation(self, key: Hashable) -> set[int]:
        return self.classifier.representation_list(key)

    def memory_bytes(self) -> int:
        return self.classifier.memory_bytes() + 24 * len(self.flows) + \
            16 * sum(len(v) for v in self.mirror.values())
