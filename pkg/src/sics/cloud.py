"""Untrusted side: box instances that forward and act on packets by label only.

The cloud receives provisioning and update batches as byte strings of
length-prefixed records (little-endian, layout in :data:`RECORD_FORMATS`) and
packets as :mod:`sics.wire` frames.  It never sees plaintext headers, keys or
rules; behaviors arrive as opaque codes tagged with an action class.

Record framing::

    u32 body length | u8 kind | u8 case | kind-specific fields

``case`` is 1..4 for update records (box insert / box delete / switch insert /
switch delete) and 0 for provisioning.
"""

from __future__ import annotations

import struct
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from .cuckoo import CuckooTable
from .wire import FramingError, SicsPacket

# action classes
ACT_ALLOW, ACT_DENY, ACT_COUNT, ACT_REWRITE = range(4)

# instance kinds
KIND_STATIC, KIND_TRANSFORMER, KIND_INGRESS, KIND_EGRESS = range(4)

INGRESS_BOX = 1
EGRESS_BOX = 2
INGRESS_PORT = 1
EGRESS_PORT = 2

MARK_NEW = 1
MARK_BYPASS = 2

(REC_BEHAVIOR, REC_BOX, REC_PORT, REC_RULE_PUT, REC_RULE_DEL, REC_ADAPTER_PUT, REC_ADAPTER_DEL,
 REC_REPLACE_PUT, REC_REPLACE_DEL, REC_POOL_MAP, REC_MARKER_PUT, REC_MARKER_DEL, REC_PURGE,
 REC_BARRIER, REC_POOL_DEL) = range(1, 16)

# kind -> struct format of the fields after (kind, case)
RECORD_FORMATS = {
    REC_BEHAVIOR: "HB",        # behavior code, action class
    REC_BOX: "HBBH",           # box code, kind, stateful, default behavior code
    REC_PORT: "HHH",           # port code, box code, occurrence
    REC_RULE_PUT: "HHH",       # box, label, behavior
    REC_RULE_DEL: "HH",        # box, label
    REC_ADAPTER_PUT: "HHH",    # port, label, next port
    REC_ADAPTER_DEL: "HH",     # port, label
    REC_REPLACE_PUT: "HHHH",   # box, behavior, old label, new label
    REC_REPLACE_DEL: "HHH",    # box, behavior, old label
    REC_POOL_MAP: "HHHH",      # box, behavior, in index, out index
    REC_POOL_DEL: "HHH",       # box, behavior, in index
    REC_MARKER_PUT: "BHHH",    # marker kind, port, label, box (0 for bypass)
    REC_MARKER_DEL: "BHH",     # marker kind, port, label
    REC_PURGE: "H",            # label
    REC_BARRIER: "I",          # epoch
}
_STRUCTS = {k: struct.Struct("<BB" + f) for k, f in RECORD_FORMATS.items()}
_LEN = struct.Struct("<I")


class CloudError(ValueError):
    pass


class Record(NamedTuple):
    kind: int
    case: int
    fields: tuple


def encode_records(records: Iterable[Record]) -> bytes:
    out = bytearray()
    for r in records:
        body = _STRUCTS[r.kind].pack(r.kind, r.case, *r.fields)
        out += _LEN.pack(len(body))
        out += body
    return bytes(out)


def decode_records(blob: bytes) -> list[Record]:
    out = []
    pos = 0
    while pos < len(blob):
        if pos + 4 > len(blob):
            raise CloudError("truncated record length")
        (n,) = _LEN.unpack_from(blob, pos)
        pos += 4
        body = blob[pos:pos + n]
        if len(body) != n or n < 2:
            raise CloudError("truncated record")
        kind = body[0]
        st = _STRUCTS.get(kind)
        if st is None or st.size != n:
            raise CloudError(f"bad record kind {kind} / size {n}")
        vals = st.unpack(body)
        out.append(Record(kind, vals[1], tuple(vals[2:])))
        pos += n
    return out


# -- instances -------------------------------------------------------------


@dataclass
class BoxInstance:
    code: int
    kind: int
    stateful: bool = False
    default: int = 0
    rules: CuckooTable = field(default_factory=lambda: CuckooTable(4096))
    replace: dict[int, CuckooTable] = field(default_factory=dict)
    pool: dict[int, dict[int, int]] = field(default_factory=dict)
    state: dict[tuple[int, bytes], int] = field(default_factory=dict)
    alive: bool = True
    processed: int = 0

    def clone(self) -> "BoxInstance":
        return BoxInstance(self.code, self.kind, self.stateful, self.default, self.rules.copy(),
                           {b: t.copy() for b, t in self.replace.items()},
                           {b: dict(m) for b, m in self.pool.items()}, dict(self.state))


@dataclass
class PortTables:
    """Adapter and marker tables of one virtual-switch port, held at its box."""

    code: int
    box: int
    occ: int
    adapter: CuckooTable = field(default_factory=lambda: CuckooTable(1024))
    new: CuckooTable = field(default_factory=lambda: CuckooTable(64))
    bypass: CuckooTable = field(default_factory=lambda: CuckooTable(64))

    def clone(self) -> "PortTables":
        return PortTables(self.code, self.box, self.occ, self.adapter.copy(), self.new.copy(),
                          self.bypass.copy())


@dataclass(slots=True)
class InFlight:
    pid: int
    pkt: SicsPacket
    port: int
    arrive: bool = False         # True: about to be processed at the port's box
    insert_done: bool = False
    hops: list = field(default_factory=list)       # (box code, behavior code)
    epochs: set = field(default_factory=set)
    steps: int = 0


@dataclass
class Delivery:
    pid: int
    frame: bytes | None          # None when dropped
    hops: list
    epochs: set
    reason: str = ""


MAX_STEPS = 256


class Cloud:
    """Event-driven simulation of the outsourced middleboxes.

    Events sit in one FIFO queue; a packet event moves a packet one hop and
    re-enqueues it.  With ``barrier=True`` an update batch waits until every
    packet already in flight has left the cloud.
    """

    def __init__(self, barrier: bool = True):
        self.barrier = barrier
        self.behaviors: dict[int, int] = {}
        self.instances: dict[int, BoxInstance] = {
            INGRESS_BOX: BoxInstance(INGRESS_BOX, KIND_INGRESS),
            EGRESS_BOX: BoxInstance(EGRESS_BOX, KIND_EGRESS),
        }
        self.ports: dict[int, PortTables] = {
            INGRESS_PORT: PortTables(INGRESS_PORT, INGRESS_BOX, 0),
            EGRESS_PORT: PortTables(EGRESS_PORT, EGRESS_BOX, 0),
        }
        self.queue: deque = deque()
        self.delivered: deque[Delivery] = deque()
        self.acks: list[int] = []
        self.epoch = 0
        self.counters = {"framing": 0, "alarms": 0, "dropped": 0, "delivered": 0, "records": 0}
        self.lose_batches = 0      # fault injection: swallow the next n update batches
        self.failed_at: dict[int, float] = {}

    # -- control path ------------------------------------------------------

    def submit(self, blob: bytes):
        """Queue an update batch; it ends with a barrier record."""
        self.queue.append(("ctl", blob))

    def provision(self, blob: bytes):
        """Apply a batch immediately (setup time, nothing in flight)."""
        self._apply(decode_records(blob))

    def _apply(self, records: list[Record]):
        for r in records:
            self._apply_one(r)
        self.counters["records"] += len(records)

    def _apply_one(self, r: Record):
        k, f = r.kind, r.fields
        if k == REC_BEHAVIOR:
            self.behaviors[f[0]] = f[1]
        elif k == REC_BOX:
            code, kind, stateful, default = f
            inst = self.instances.get(code)
            if inst is None:
                self.instances[code] = BoxInstance(code, kind, bool(stateful), default)
            else:
                inst.kind, inst.stateful, inst.default = kind, bool(stateful), default
        elif k == REC_PORT:
            code, box, occ = f
            self._box(box)
            if code not in self.ports:
                self.ports[code] = PortTables(code, box, occ)
        elif k == REC_RULE_PUT:
            self._box(f[0]).rules[f[1]] = f[2]
        elif k == REC_RULE_DEL:
            if self._box(f[0]).rules.pop(f[1]) is None:
                raise CloudError(f"box {f[0]} has no rule for label {f[1]}")
        elif k == REC_ADAPTER_PUT:
            self._port(f[2])
            self._port(f[0]).adapter[f[1]] = f[2]
        elif k == REC_ADAPTER_DEL:
            if self._port(f[0]).adapter.pop(f[1]) is None:
                raise CloudError(f"port {f[0]} has no entry for label {f[1]}")
        elif k == REC_REPLACE_PUT:
            box, beh, old, new = f
            self._box(box).replace.setdefault(beh, CuckooTable(1024))[old] = new
        elif k == REC_REPLACE_DEL:
            box, beh, old = f
            t = self._box(box).replace.get(beh)
            if t is None or t.pop(old) is None:
                raise CloudError(f"box {box} has no replacement for label {old}")
        elif k == REC_POOL_MAP:
            box, beh, i, o = f
            self._box(box).pool.setdefault(beh, {})[i] = o
        elif k == REC_POOL_DEL:
            box, beh, i = f
            self._box(box).pool.get(beh, {}).pop(i, None)
        elif k == REC_MARKER_PUT:
            kind, port, label, box = f
            pt = self._port(port)
            if kind == MARK_NEW:
                self._box(box)
                pt.new[label] = box
            else:
                pt.bypass[label] = 1
        elif k == REC_MARKER_DEL:
            kind, port, label = f
            pt = self._port(port)
            t = pt.new if kind == MARK_NEW else pt.bypass
            if t.pop(label) is None:
                raise CloudError(f"port {port} has no marker for label {label}")
        elif k == REC_PURGE:
            self._purge(f[0])
        elif k == REC_BARRIER:
            self.epoch = f[0]
        else:
            raise CloudError(f"unknown record kind {k}")

    def _box(self, code: int) -> BoxInstance:
        inst = self.instances.get(code)
        if inst is None:
            raise CloudError(f"unknown box {code}")
        return inst

    def _port(self, code: int) -> PortTables:
        pt = self.ports.get(code)
        if pt is None:
            raise CloudError(f"unknown port {code}")
        return pt

    def _purge(self, label: int):
        # stateful entries survive: a retired label's connections are left alone
        for inst in self.instances.values():
            inst.rules.pop(label)
            for t in inst.replace.values():
                t.pop(label)
        for pt in self.ports.values():
            pt.adapter.pop(label)
            pt.new.pop(label)
            pt.bypass.pop(label)

    # -- failures ----------------------------------------------------------

    def fail(self, box: int):
        self._box(box).alive = False
        self.failed_at[box] = time.perf_counter()

    def recover(self, box: int) -> BoxInstance:
        """Replace a failed instance with a fresh one carrying its tables and state."""
        old = self._box(box)
        fresh = old.clone()
        fresh.alive = True
        self.instances[box] = fresh
        return fresh

    # -- packet path -------------------------------------------------------

    def inject(self, frame: bytes, pid: int):
        try:
            pkt = SicsPacket.from_bytes(frame)
        except FramingError:
            self.counters["framing"] += 1
            self.delivered.append(Delivery(pid, None, [], set(), "framing"))
            return
        self.queue.append(("pkt", InFlight(pid, pkt, INGRESS_PORT)))

    def _drop(self, f: InFlight, reason: str):
        self.counters["dropped"] += 1
        if reason != "deny":
            self.counters["alarms"] += 1
        self.delivered.append(Delivery(f.pid, None, f.hops, f.epochs, reason))

    def _process(self, inst: BoxInstance, f: InFlight) -> bool:
        """Run the box's behavior; False when the packet is dropped."""
        pkt = f.pkt
        label = pkt.label
        beh = inst.rules.get(label, inst.default)
        f.hops.append((inst.code, beh))
        f.epochs.add(self.epoch)
        inst.processed += 1
        act = self.behaviors.get(beh, ACT_ALLOW)
        if inst.stateful:
            key = (label, pkt.header_ct)
            inst.state[key] = inst.state.get(key, 0) + 1
        if act == ACT_DENY:
            self._drop(f, "deny")
            return False
        if act == ACT_REWRITE:
            table = inst.replace.get(beh)
            new = table.get(label) if table is not None else None
            idx = inst.pool.get(beh, {}).get(pkt.pool_index)
            if new is None or idx is None:
                self._drop(f, "replacement hole")
                return False
            pkt.label = new
            pkt.pool_index = idx
        return True

    def _step(self, f: InFlight):
        f.steps += 1
        if f.steps > MAX_STEPS:
            self._drop(f, "loop")
            return
        if f.arrive:
            pt = self.ports[f.port]
            inst = self.instances[pt.box]
            if not inst.alive:
                self._drop(f, "instance down")
                return
            if not self._process(inst, f):
                return
            f.arrive = False
            f.insert_done = False
            self.queue.append(("pkt", f))
            return
        pt = self.ports[f.port]
        label = f.pkt.label
        if not f.insert_done:
            target = pt.new.get(label)
            if target is not None:
                inst = self.instances[target]
                if not inst.alive:
                    self._drop(f, "instance down")
                    return
                if not self._process(inst, f):
                    return
                f.insert_done = True
                self.queue.append(("pkt", f))
                return
        nxt = pt.adapter.get(f.pkt.label, EGRESS_PORT)
        f.insert_done = False
        if nxt == EGRESS_PORT:
            f.epochs.add(self.epoch)
            self.counters["delivered"] += 1
            self.delivered.append(Delivery(f.pid, f.pkt.to_bytes(), f.hops, f.epochs))
            return
        f.port = nxt
        f.arrive = f.pkt.label not in self.ports[nxt].bypass
        self.queue.append(("pkt", f))

    def step(self) -> bool:
        if not self.queue:
            return False
        kind, item = self.queue.popleft()
        if kind == "pkt":
            self._step(item)
            return True
        if self.barrier:
            self._drain()
        self._apply_batch(item)
        return True

    def _drain(self):
        held = deque()
        while self.queue:
            kind, item = self.queue.popleft()
            if kind == "pkt":
                self._step(item)
            else:
                held.append((kind, item))
        self.queue.extend(held)

    def _apply_batch(self, blob: bytes):
        records = decode_records(blob)
        if self.lose_batches:
            self.lose_batches -= 1
            return
        self._apply(records)
        for r in records:
            if r.kind == REC_BARRIER:
                self.acks.append(r.fields[0])

    def run(self, max_events: int | None = None) -> int:
        n = 0
        while self.queue and (max_events is None or n < max_events):
            self.step()
            n += 1
        return n

    def run_until_ack(self, epoch: int, max_events: int = 1_000_000) -> bool:
        n = 0
        while epoch not in self.acks:
            if not self.queue or n >= max_events:
                return False
            self.step()
            n += 1
        return True

    def process_all(self, frames: Iterable[tuple[int, bytes]]) -> list[Delivery]:
        """Push frames through one at a time to completion; used for bulk replay."""
        out = []
        for pid, frame in frames:
            self.inject(frame, pid)
            self.run()
            while self.delivered:
                out.append(self.delivered.popleft())
        return out

    # -- inspection --------------------------------------------------------

    def table_keys(self) -> list[tuple[str, int, int]]:
        """Every (table, owner, key) held; used by the label-only audit."""
        out = []
        for inst in self.instances.values():
            out += [("rule", inst.code, k) for k in inst.rules.keys()]
            for beh, t in inst.replace.items():
                out += [("replace", inst.code, k) for k in t.keys()]
        for pt in self.ports.values():
            out += [("adapter", pt.code, k) for k in pt.adapter.keys()]
            out += [("new", pt.code, k) for k in pt.new.keys()]
            out += [("bypass", pt.code, k) for k in pt.bypass.keys()]
        return out

    def memory_bytes(self) -> int:
        total = 0
        for inst in self.instances.values():
            total += inst.rules.memory_bytes()
            total += sum(t.memory_bytes() for t in inst.replace.values())
        for pt in self.ports.values():
            total += pt.adapter.memory_bytes() + pt.new.memory_bytes() + pt.bypass.memory_bytes()
        return total
