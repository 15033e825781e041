"""End-to-end drivers: equivalence runs, benchmarks and event replays."""

from __future__ import annotations

import csv
import io
import random
import statistics
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .cloud import Cloud, Delivery
from .composer import BoxSpec, BypassSpec, InsertSpec, NetworkConfig, Port, RerouteSpec
from .gateway import Gateway
from .wire import SicsPacket
from .header import (
    FIVE_TUPLE,
    ChainRequirement,
    MatchSpec,
    MiddleboxRule,
    parse_ruleset,
    spec_to_node,
    spec_to_predicate,
)
from .reference import Outcome, ReferencePipeline
from .scenario import (
    Scenario,
    Vocabulary,
    _port_from_json,
    class_trace,
    config_from_json,
    make_vocabulary,
    random_config,
    synthetic_rules,
    uniform_trace,
)

DEFAULT_KEY = "000102030405060708090a0b0c0d0e0f"


class HarnessError(RuntimeError):
    pass


# -- the label pipeline as a black box -------------------------------------------


class SicsSystem:
    def __init__(self, cfg: NetworkConfig, key: str = DEFAULT_KEY, label_width: int = 16,
                 barrier: bool = True, closure: bool = True):
        self.cloud = Cloud(barrier=barrier)
        self.gateway = Gateway(cfg, key, self.cloud, label_width, closure=closure)
        self.layout = cfg.layout

    def outcome(self, d: Delivery) -> Outcome:
        gw = self.gateway
        hops = tuple((gw.decode_box(b), gw.decode_behavior(c)) for b, c in d.hops)
        if d.frame is None:
            return Outcome(hops, None)
        decoded = gw.receive(d.frame)
        if decoded is None:
            return Outcome(hops, None)
        return Outcome(hops, self.layout.unpack(decoded[0]))

    def run(self, headers: Sequence[int], pin: bool = False) -> list[Outcome]:
        frames = self.gateway.encode_batch(list(headers), pin=pin)
        got = {d.pid: d for d in self.cloud.process_all(enumerate(frames))}
        return [self.outcome(got[i]) for i in range(len(frames))]

    def trace(self, n: int, rng: random.Random, distribution: str = "class") -> list[int]:
        if distribution == "uniform":
            return uniform_trace(self.layout.width, n, rng)
        c = self.gateway.classifier
        nodes = [c.classes[label] for label in sorted(c.classes)]
        return class_trace(self.gateway.engine, nodes, n, rng)


# -- equivalence -----------------------------------------------------------------


@dataclass
class Mismatch:
    index: int
    header: tuple
    sics: Outcome
    reference: Outcome


@dataclass
class EquivalenceReport:
    packets: int
    mismatches: list[Mismatch]
    classes: int
    seconds: float
    timings: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.mismatches


def compare(layout, headers: Sequence[int], sics: Sequence[Outcome], ref: Sequence[Outcome]) -> list[Mismatch]:
    return [Mismatch(i, layout.unpack(h), a, b)
            for i, (h, a, b) in enumerate(zip(headers, sics, ref)) if a != b]


def run_equivalence(cfg: NetworkConfig, headers: Sequence[int] | None = None, n: int = 10_000,
                    seed: int = 0, key: str = DEFAULT_KEY, label_width: int = 16,
                    distribution: str = "class") -> EquivalenceReport:
    t0 = time.perf_counter()
    system = SicsSystem(cfg, key, label_width)
    if headers is None:
        headers = system.trace(n, random.Random(seed), distribution)
    sics = system.run(headers)
    ref = ReferencePipeline(cfg).run_batch(np.array([cfg.layout.unpack(h) for h in headers], dtype=np.int64)
                                           .reshape(len(headers), len(cfg.layout.fields)))
    mism = compare(cfg.layout, headers, sics, ref)
    return EquivalenceReport(len(headers), mism, len(system.gateway.classifier.classes),
                             time.perf_counter() - t0, dict(system.gateway.timings))


def fuzz_equivalence(scenarios: int, seed: int = 0, packets: int = 10_000, max_boxes: int = 10,
                     max_chains: int = 5, max_rules: int = 1000, patches: bool = True) -> list[EquivalenceReport]:
    out = []
    for k in range(scenarios):
        rng = random.Random(seed * 1_000_003 + k)
        cfg = random_config(rng, max_boxes, max_chains, max_rules, patches=patches)
        out.append(run_equivalence(cfg, n=packets, seed=rng.getrandbits(32)))
    return out


# -- benchmarks --------------------------------------------------------------------

BENCH_COLUMNS = ["size", "compose_ms", "ec_ms", "classifier_build_ms", "construction_ms", "classes",
                 "median_add_ms", "worst_add_ms", "classify_qps", "scalar_classify_qps", "memory_bytes",
                 "box_lookup_qps", "linear_scan_qps"]


def synthetic_config(size: int, seed: int = 0, boxes: int = 4, vocab: Vocabulary | None = None) -> NetworkConfig:
    """``size`` rules spread over firewalls and monitors, chained three ways."""
    rng = random.Random(seed)
    vocab = vocab or make_vocabulary(rng, 8, 0.5)
    specs = {}
    per = [size // boxes + (1 if i < size % boxes else 0) for i in range(boxes)]
    for i, n in enumerate(per):
        if i % 2 == 0:
            specs[f"fw{i}"] = BoxSpec(f"fw{i}", synthetic_rules(rng, n, vocab, ("ALLOW", "DENY")), "ALLOW")
        else:
            specs[f"mon{i}"] = BoxSpec(f"mon{i}", synthetic_rules(rng, n, vocab, ("COUNT", "ALLOW")), "ALLOW",
                                       stateful=True)
    ids = list(specs)
    coarse = Vocabulary(vocab.src_prefixes, vocab.dst_prefixes, vocab.port_ranges, vocab.protos, 0.75)
    reqs = [ChainRequirement(coarse.match(rng), tuple(rng.sample(ids, min(len(ids), 2))), k) for k in range(3)]
    return NetworkConfig(FIVE_TUPLE, specs, reqs)


def _qps(fn, n: int, repeats: int = 5) -> float:
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return n / statistics.median(times)


def bench_size(size: int, seed: int = 0, adds: int = 50, queries: int = 100_000,
               lookup_rules: int = 10_000) -> dict:
    rng = random.Random(seed)
    vocab = make_vocabulary(rng, 8, 0.5)
    cfg = synthetic_config(size, seed, vocab=vocab)
    system = SicsSystem(cfg)
    gw = system.gateway
    t = gw.timings
    row = {"size": size, "compose_ms": t["compose_ms"], "ec_ms": t["ec_ms"],
           "classifier_build_ms": t["classifier_ms"],
           "construction_ms": t["compose_ms"] + t["ec_ms"] + t["classifier_ms"],
           "classes": len(gw.classifier.classes)}
    lat = add_latencies(gw.classifier, vocab, rng, adds)
    row["median_add_ms"] = statistics.median(lat) if lat else 0.0
    row["worst_add_ms"] = max(lat) if lat else 0.0
    # classification throughput
    headers = uniform_trace(gw.layout.width, queries, rng)
    nbytes = (gw.layout.width + 7) // 8
    raw = b"".join(h.to_bytes(nbytes, "big") for h in headers)
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8).reshape(queries, nbytes), axis=1)
    gw.classifier.classify_batch(bits[:100])
    row["classify_qps"] = _qps(lambda: gw.classifier.classify_batch(bits), queries)
    few = headers[:10_000]
    row["scalar_classify_qps"] = _qps(lambda: [gw.classifier.classify(h) for h in few], len(few), 3)
    row["memory_bytes"] = gw.memory_bytes()
    lk = bench_box_lookup(lookup_rules, seed)
    row.update(lk)
    return row


def add_latencies(c, vocab: Vocabulary, rng: random.Random, adds: int) -> list[float]:
    """Milliseconds per add of a fresh rule-shaped predicate; each is removed again afterwards."""
    lat = []
    for k in range(adds):
        p = spec_to_predicate(c.engine, vocab.match(rng))
        if p.is_false:
            continue
        t0 = time.perf_counter()
        c.add_predicate(("bench", k), p)
        lat.append((time.perf_counter() - t0) * 1e3)
        c.delete_predicate(("bench", k))
        c.compact()
    return lat


def bench_box_lookup(n_rules: int, seed: int = 0, queries: int = 20_000) -> dict:
    """Label-table lookups against first-match over the same firewall's plaintext rules."""
    rng = random.Random(seed + 17)
    vocab = make_vocabulary(rng, 8, 0.5)
    rules = synthetic_rules(rng, n_rules, vocab, ("ALLOW", "DENY"))
    cfg = NetworkConfig(FIVE_TUPLE, {"fw": BoxSpec("fw", rules, "ALLOW")},
                        [ChainRequirement(MatchSpec.wildcard(), ("fw",), 1)])
    system = SicsSystem(cfg)
    gw = system.gateway
    inst = system.cloud.instances[gw.box_codes["fw"]]
    labels = sorted(gw.classifier.classes)
    qs = [labels[rng.randrange(len(labels))] for _ in range(queries)]
    table = inst.rules

    def lookups():
        get = table.get
        for q in qs:
            get(q, 0)

    box_qps = _qps(lookups, len(qs))
    ref = ReferencePipeline(cfg)
    hs = [FIVE_TUPLE.unpack(h) for h in uniform_trace(104, 200, rng)]
    linear = _qps(lambda: [ref.behavior("fw", h) for h in hs], len(hs), 3)
    return {"box_lookup_qps": box_qps, "linear_scan_qps": linear}


def run_benchmarks(sizes: Iterable[int], seed: int = 0, **kw) -> list[dict]:
    return [bench_size(s, seed, **kw) for s in sizes]


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.3f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


# -- event replay --------------------------------------------------------------------


@dataclass
class EventResult:
    index: int
    kind: str
    reaction_ms: float
    records: int = 0
    detail: dict = field(default_factory=dict)


@dataclass
class ReplayReport:
    events: list[EventResult]
    packets: int
    violations: list[int]          # packet indexes matching no allowed configuration
    mixed_epochs: list[int]        # packets whose hops straddled an update
    label_changes: list[int]       # flows whose label changed while pinned
    delivered: int

    @property
    def consistent(self) -> bool:
        return not self.violations and not self.label_changes


def _rule_from_json(obj: dict) -> MiddleboxRule:
    return parse_ruleset([obj])[0]


def _apply_event(system: SicsSystem, ev: dict) -> tuple[int, dict]:
    """Trigger one scripted event; returns (records sent, detail)."""
    gw, cloud = system.gateway, system.cloud
    kind = ev["type"]
    if kind in ("insert_rule", "delete_rule"):
        box = ev["box"]
        if box not in gw.cfg.boxes:
            raise HarnessError(f"event references unknown instance {box!r}")
        rule = ev["rule"] if isinstance(ev["rule"], MiddleboxRule) else _rule_from_json(ev["rule"])
        rep = gw.insert_rule(box, rule) if kind == "insert_rule" else gw.delete_rule(box, rule)
        return len(rep.records), {}
    if kind in ("insert_chain", "delete_chain"):
        req = ev["chain"]
        if not isinstance(req, ChainRequirement):
            req = ChainRequirement(MatchSpec.parse(req.get("match")), tuple(req["chain"]), int(req.get("priority", 0)))
        rep = gw.insert_chain(req) if kind == "insert_chain" else gw.delete_chain(req)
        return len(rep.records), {}
    if kind == "config":
        cfg = ev["config"] if isinstance(ev["config"], NetworkConfig) else config_from_json(ev["config"])
        rep = gw.apply_config(cfg)
        return len(rep.records), {}
    if kind == "fail":
        box = ev["box"]
        if box not in gw.box_codes:
            raise HarnessError(f"event references unknown instance {box!r}")
        code = gw.box_codes[box]
        cloud.fail(code)
        cloud.recover(code)
        return 0, {}
    if kind == "overload":
        port = ev["port"] if isinstance(ev["port"], Port) else _port_from_json(ev["port"])
        if port.box not in gw.cfg.boxes:
            raise HarnessError(f"event references unknown instance {port.box!r}")
        match = ev["match"] if isinstance(ev["match"], MatchSpec) else MatchSpec.parse(ev["match"])
        replica = ev.get("replica") or f"{port.box}_replica{len(gw.cfg.boxes)}"
        expected = reroute_expectation(gw, port, match)
        rep = gw.reroute(RerouteSpec(port, match, replica))
        return len(rep.records), {"replica": replica, **rerouted_labels(gw, expected, replica, port.occ)}
    if kind == "insert_box":
        port = ev["port"] if isinstance(ev["port"], Port) else _port_from_json(ev["port"])
        match = ev["match"] if isinstance(ev["match"], MatchSpec) else MatchSpec.parse(ev["match"])
        rep = gw.insert_box(InsertSpec(port, match, ev["box"]), ev.get("spec"))
        return len(rep.records), {}
    if kind == "bypass":
        port = ev["port"] if isinstance(ev["port"], Port) else _port_from_json(ev["port"])
        match = ev["match"] if isinstance(ev["match"], MatchSpec) else MatchSpec.parse(ev["match"])
        rep = gw.bypass_box(BypassSpec(port, match))
        return len(rep.records), {}
    raise HarnessError(f"unknown event type {kind!r}")


def reroute_expectation(gw: Gateway, port: Port, match: MatchSpec) -> dict[Port, int]:
    """Per input port, the traffic now forwarded to ``port`` that also matches ``match``."""
    e = gw.engine
    m = spec_to_node(e, match)
    return {key[1]: e.and_node(p.node, m) for key, p in gw.preds.items()
            if key[0] == "fwd" and key[2] == port}


def rerouted_labels(gw: Gateway, expected: dict[Port, int], replica: str, occ: int) -> dict:
    """Labels steered to the replica against the labels whose class lies inside the scripted slice."""
    e = gw.engine
    target = Port(replica, occ)
    got, want = set(), set()
    for key, labels in gw.classifier.rep.items():
        if key[0] == "fwd" and key[2] == target:
            got |= labels
    for src, node in expected.items():
        for label, cls in gw.classifier.classes.items():
            if e.implies(cls, node):
                want.add(label)
    return {"rerouted": sorted(got), "expected": sorted(want)}


def run_event_script(cfg: NetworkConfig, events: Sequence[dict], trace: Sequence[int] | None = None,
                     n: int = 2000, seed: int = 0, key: str = DEFAULT_KEY, barrier: bool = True,
                     flows: int = 0, pipeline_depth: int = 3) -> ReplayReport:
    """Replay a trace with scripted events at given packet indexes.

    Packets are injected while earlier ones are still in flight (the cloud
    advances ``pipeline_depth`` events per injected packet).  Every outcome
    must equal the reference outcome under some configuration that was in
    force while the packet (or its pinned flow) was alive.
    """
    system = SicsSystem(cfg, key, barrier=barrier)
    gw, cloud = system.gateway, system.cloud
    rng = random.Random(seed)
    if trace is None:
        if flows:
            pool = system.trace(flows, rng)
            trace = [pool[rng.randrange(len(pool))] for _ in range(n)]
        else:
            trace = system.trace(n, rng)
    by_index: dict[int, list[dict]] = {}
    for ev in events:
        by_index.setdefault(int(ev.get("at", 0)), []).append(ev)
    configs = [gw.cfg.copy()]
    refs = [ReferencePipeline(configs[0])]
    sent_cfg: list[int] = []
    pinned_since: dict[int, int] = {}
    labels_seen: dict[int, set] = {}
    label_changes = []
    results: list[EventResult] = []
    pending_reaction: list[tuple[EventResult, float]] = []
    deliveries: dict[int, Delivery] = {}

    def collect():
        while cloud.delivered:
            d = cloud.delivered.popleft()
            deliveries[d.pid] = d
            if pending_reaction:
                for res, t0 in pending_reaction:
                    res.reaction_ms = (time.perf_counter() - t0) * 1e3
                pending_reaction.clear()

    for i, h in enumerate(trace):
        for ev in by_index.get(i, []):
            res = EventResult(i, ev["type"], 0.0)
            t0 = time.perf_counter()
            res.records, res.detail = _apply_event(system, ev)
            collect()
            pending_reaction.append((res, t0))
            results.append(res)
            configs.append(gw.cfg.copy())
            refs.append(ReferencePipeline(configs[-1]))
        k = len(configs) - 1
        label = gw.flows.lookup(h, gw.clock)
        if label is None:
            pinned_since[h] = k
        frame = gw.egress_encode(h)
        lab = SicsPacket.from_bytes(frame).label
        seen = labels_seen.setdefault(h, set())
        if label is not None and lab != label:
            label_changes.append(i)
        seen.add(lab)
        sent_cfg.append(pinned_since.get(h, k))
        cloud.inject(frame, i)
        cloud.run(pipeline_depth)
        collect()
    cloud.run()
    collect()
    for res, t0 in pending_reaction:
        res.reaction_ms = (time.perf_counter() - t0) * 1e3
    violations, mixed = [], []
    cache: dict[tuple[int, int], Outcome] = {}
    for i, h in enumerate(trace):
        d = deliveries.get(i)
        if d is None:
            violations.append(i)
            continue
        if len(d.epochs) > 1:
            mixed.append(i)
        got = system.outcome(d)
        values = cfg.layout.unpack(h)
        ok = False
        for c in range(sent_cfg[i], len(configs)):
            key_ = (c, h)
            if key_ not in cache:
                cache[key_] = refs[c].run(values)
            if cache[key_] == got:
                ok = True
                break
        if not ok:
            violations.append(i)
    return ReplayReport(results, len(trace), violations, mixed, label_changes, len(deliveries))


# -- scenario entry points and reports -------------------------------------------------


def check_scenario(sc: Scenario) -> EquivalenceReport:
    return run_equivalence(sc.config, n=sc.trace_count, seed=sc.trace_seed, key=sc.key,
                           label_width=sc.label_width, distribution=sc.distribution)


def replay_scenario(sc: Scenario, barrier: bool = True) -> ReplayReport:
    return run_event_script(sc.config, sc.events, n=sc.trace_count, seed=sc.trace_seed, key=sc.key,
                            barrier=barrier)


def equivalence_to_json(rep: EquivalenceReport, timings: bool = False) -> dict:
    """Report as plain data; timing fields only on request so reruns compare byte for byte."""
    out = {"packets": rep.packets, "classes": rep.classes, "mismatches": len(rep.mismatches),
           "examples": [{"index": m.index, "header": list(m.header),
                         "sics": {"hops": [list(h) for h in m.sics.hops], "header": m.sics.header},
                         "reference": {"hops": [list(h) for h in m.reference.hops],
                                       "header": m.reference.header}}
                        for m in rep.mismatches[:20]]}
    if timings:
        out["seconds"] = rep.seconds
        out["timings"] = rep.timings
    return out


def replay_to_json(rep: ReplayReport, timings: bool = True) -> dict:
    events = []
    for e in rep.events:
        d = {"at": e.index, "type": e.kind, "records": e.records, **e.detail}
        if timings:
            d["reaction_ms"] = e.reaction_ms
        events.append(d)
    return {"packets": rep.packets, "delivered": rep.delivered, "violations": rep.violations[:50],
            "violation_count": len(rep.violations), "mixed_epoch_packets": len(rep.mixed_epochs),
            "label_changes": len(rep.label_changes), "consistent": rep.consistent, "events": events}
