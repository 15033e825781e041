"""Scenario files, synthetic rulesets and traces.

Synthetic rules follow the ClassBench habit of prefix pairs plus port ranges,
drawn from a small shared vocabulary so that rules overlap heavily and the
number of equivalence classes stays bounded.  Knobs live in
:class:`Vocabulary`.
"""

from __future__ import annotations

import ipaddress
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .bdd import BddEngine
from .composer import (
    BoxSpec,
    BypassSpec,
    InsertSpec,
    NetworkConfig,
    Port,
    RerouteSpec,
)
from .header import (
    ALLOW,
    COUNT,
    DENY,
    FIVE_TUPLE,
    ChainRequirement,
    FieldMatch,
    HeaderLayout,
    MatchSpec,
    MiddleboxRule,
    chains_to_json,
    load_json,
    parse_behavior,
    parse_chains,
    parse_ruleset,
    rewrite_behavior,
    ruleset_to_json,
)


class ScenarioError(ValueError):
    pass


# -- vocabulary --------------------------------------------------------------


@dataclass
class Vocabulary:
    src_prefixes: list[tuple[int, int]]      # (value, length)
    dst_prefixes: list[tuple[int, int]]
    port_ranges: list[tuple[int, int]]
    protos: list[int]
    wildcard: float = 0.45                   # per-field wildcard probability

    def field_match(self, rng: random.Random, name: str) -> FieldMatch | None:
        if rng.random() < self.wildcard:
            return None
        if name in ("srcIp", "dstIp"):
            v, plen = rng.choice(self.src_prefixes if name == "srcIp" else self.dst_prefixes)
            return FieldMatch(v, v + (1 << (32 - plen)) - 1, "prefix", plen)
        if name in ("srcPort", "dstPort"):
            lo, hi = rng.choice(self.port_ranges)
            return FieldMatch(lo, hi, "range" if lo != hi else "exact")
        p = rng.choice(self.protos)
        return FieldMatch(p, p, "exact")

    def match(self, rng: random.Random, layout: HeaderLayout = FIVE_TUPLE) -> MatchSpec:
        fields = {}
        for name in layout.names:
            fm = self.field_match(rng, name)
            if fm is not None:
                fields[name] = fm
        return MatchSpec(fields, layout)


def _prefix_pool(rng: random.Random, n: int) -> list[tuple[int, int]]:
    """Prefixes grown as a tree so some nest inside others."""
    pool = []
    roots = [(10 << 24, 8), (172 << 24 | 16 << 16, 12), (192 << 24 | 168 << 16, 16)]
    frontier = list(roots)
    while len(pool) < n:
        v, plen = rng.choice(frontier)
        pool.append((v, plen))
        if plen < 28:
            child_len = plen + rng.choice((4, 8))
            child_len = min(child_len, 28)
            sub = rng.getrandbits(child_len - plen) << (32 - child_len)
            frontier.append((v | sub, child_len))
    return sorted(set(pool))


def make_vocabulary(rng: random.Random, size: int = 6, wildcard: float = 0.45) -> Vocabulary:
    ports = [(0, 1023), (80, 80), (443, 443), (53, 53), (1024, 65535), (8000, 8999), (22, 22)]
    return Vocabulary(_prefix_pool(rng, size), _prefix_pool(rng, size),
                      ports[:max(2, min(len(ports), size))], [6, 17], wildcard)


# -- rulesets ----------------------------------------------------------------


def synthetic_rules(rng: random.Random, n: int, vocab: Vocabulary, behaviors: Sequence[str] = (ALLOW, DENY),
                    layout: HeaderLayout = FIVE_TUPLE) -> list[MiddleboxRule]:
    return [MiddleboxRule(vocab.match(rng, layout), n - i, rng.choice(list(behaviors))) for i in range(n)]


def _host_in(rng: random.Random, prefix: tuple[int, int]) -> int:
    v, plen = prefix
    return v | rng.getrandbits(32 - plen) if plen < 32 else v


def random_box(rng: random.Random, box_id: str, kind: str, n_rules: int, vocab: Vocabulary) -> BoxSpec:
    if kind == "firewall":
        rules = synthetic_rules(rng, n_rules, vocab, (ALLOW, DENY))
        return BoxSpec(box_id, rules, ALLOW)
    if kind == "monitor":
        rules = synthetic_rules(rng, n_rules, vocab, (COUNT, ALLOW))
        return BoxSpec(box_id, rules, ALLOW, stateful=True)
    if kind == "nat":
        # a NAT maps selected sources onto one or two public addresses
        publics = [_host_in(rng, rng.choice(vocab.src_prefixes)) for _ in range(rng.randint(1, 2))]
        acts = [rewrite_behavior("srcIp", p) for p in publics] + [ALLOW]
        rules = synthetic_rules(rng, max(1, n_rules), vocab, acts)
        return BoxSpec(box_id, rules, ALLOW, stateful=True)
    raise ScenarioError(f"unknown box kind {kind!r}")


def random_config(rng: random.Random, max_boxes: int = 10, max_chains: int = 5, max_rules: int = 1000,
                  transformers: bool = True, vocab: Vocabulary | None = None,
                  patches: bool = False) -> NetworkConfig:
    vocab = vocab or make_vocabulary(rng)
    n_boxes = rng.randint(1, max_boxes)
    kinds = ["firewall", "monitor"] + (["nat"] if transformers else [])
    boxes = {}
    for i in range(n_boxes):
        kind = rng.choice(kinds)
        # log-uniform rule counts keep most boxes small and a few large
        n = int(round(max_rules ** rng.random())) if max_rules > 0 else 0
        boxes[f"{kind}{i}"] = random_box(rng, f"{kind}{i}", kind, n, vocab)
    ids = list(boxes)
    reqs = []
    for k in range(rng.randint(0, max_chains)):
        chain = [rng.choice(ids) for _ in range(rng.randint(1, 3))]
        coarse = Vocabulary(vocab.src_prefixes, vocab.dst_prefixes, vocab.port_ranges, vocab.protos, 0.7)
        reqs.append(ChainRequirement(coarse.match(rng), tuple(chain), rng.randint(0, 9)))
    cfg = NetworkConfig(FIVE_TUPLE, boxes, reqs)
    if patches and reqs:
        add_random_patches(rng, cfg, vocab)
    return cfg


def chain_port_list(cfg: NetworkConfig) -> list[Port]:
    from .composer import chain_ports
    ports = []
    for r in cfg.requirements:
        for p in chain_ports(r.chain):
            if p not in ports:
                ports.append(p)
    return ports


def add_random_patches(rng: random.Random, cfg: NetworkConfig, vocab: Vocabulary):
    """Scatter an insert, a bypass and a reroute over existing chain ports."""
    from .composer import INGRESS
    ports = chain_port_list(cfg)
    if not ports:
        return
    coarse = Vocabulary(vocab.src_prefixes, vocab.dst_prefixes, vocab.port_ranges, vocab.protos, 0.75)
    if rng.random() < 0.7:
        box = rng.choice(list(cfg.boxes))
        cfg.inserts.append(InsertSpec(rng.choice([INGRESS] + ports), coarse.match(rng), box))
    if rng.random() < 0.7:
        cfg.bypasses.append(BypassSpec(rng.choice(ports), coarse.match(rng)))
    if rng.random() < 0.7:
        port = rng.choice(ports)
        replica = f"{cfg.function_of(port.box)}_r{len(cfg.boxes)}"
        orig = cfg.rules_of(port.box)
        cfg.boxes[replica] = BoxSpec(replica, [], orig.default, orig.stateful, cfg.function_of(port.box))
        cfg.reroutes.append(RerouteSpec(port, coarse.match(rng), replica))


# -- traces ------------------------------------------------------------------


def class_trace(engine: BddEngine, class_nodes: Sequence[int], n: int, rng: random.Random) -> list[int]:
    """Headers drawn uniformly over classes, then uniformly inside the class."""
    if not class_nodes:
        return [rng.getrandbits(engine.nvars) for _ in range(n)]
    return [engine.sample(class_nodes[rng.randrange(len(class_nodes))], rng) for _ in range(n)]


def uniform_trace(nbits: int, n: int, rng: random.Random) -> list[int]:
    return [rng.getrandbits(nbits) for _ in range(n)]


# -- scenario files ----------------------------------------------------------


@dataclass
class Scenario:
    config: NetworkConfig
    key: str = "000102030405060708090a0b0c0d0e0f"
    trace_count: int = 1000
    trace_seed: int = 0
    distribution: str = "class"          # "class" or "uniform"
    events: list[dict] = field(default_factory=list)
    label_width: int = 16


def _port_from_json(obj) -> Port:
    if isinstance(obj, str):
        if obj in ("ingress", "egress"):
            return Port(obj, 0)
        box, _, occ = obj.partition("#")
        return Port(box, int(occ or 1))
    return Port(obj[0], int(obj[1]))


def _port_to_json(p: Port) -> str:
    return str(p)


def config_from_json(obj: dict, base: Path | None = None) -> NetworkConfig:
    def resolve(v):
        if isinstance(v, str):
            path = Path(v)
            if base is not None and not path.is_absolute():
                path = base / path
            return load_json(path)
        return v

    layout = FIVE_TUPLE
    boxes = {}
    for b in obj.get("boxes", []):
        bid = b["id"]
        rules = parse_ruleset(resolve(b.get("rules", [])), layout)
        boxes[bid] = BoxSpec(bid, rules, parse_behavior(b.get("default", ALLOW), layout),
                             bool(b.get("stateful", False)), b.get("function"))
    reqs = parse_chains(resolve(obj.get("chains", [])), layout)
    for r in reqs:
        for bid in r.chain:
            if bid not in boxes:
                raise ScenarioError(f"chain references unknown middlebox {bid!r}")
    cfg = NetworkConfig(layout, boxes, reqs)
    for m in obj.get("inserts", []):
        cfg.inserts.append(InsertSpec(_port_from_json(m["port"]), MatchSpec.parse(m.get("match"), layout), m["box"]))
    for m in obj.get("bypasses", []):
        cfg.bypasses.append(BypassSpec(_port_from_json(m["port"]), MatchSpec.parse(m.get("match"), layout)))
    for m in obj.get("reroutes", []):
        cfg.reroutes.append(RerouteSpec(_port_from_json(m["port"]), MatchSpec.parse(m.get("match"), layout),
                                        m["replica"]))
    return cfg


def config_to_json(cfg: NetworkConfig) -> dict:
    return {
        "boxes": [{"id": b.box_id, "rules": ruleset_to_json(b.rules), "default": b.default,
                   "stateful": b.stateful, **({"function": b.function} if b.function else {})}
                  for b in cfg.boxes.values()],
        "chains": chains_to_json(cfg.requirements),
        "inserts": [{"port": _port_to_json(m.port), "match": m.match.to_json(), "box": m.box} for m in cfg.inserts],
        "bypasses": [{"port": _port_to_json(m.port), "match": m.match.to_json()} for m in cfg.bypasses],
        "reroutes": [{"port": _port_to_json(m.port), "match": m.match.to_json(), "replica": m.replica}
                     for m in cfg.reroutes],
    }


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    cfg = config_from_json(obj, path.parent)
    trace = obj.get("trace", {})
    return Scenario(cfg, obj.get("key", Scenario.key), int(trace.get("count", 1000)), int(trace.get("seed", 0)),
                    trace.get("distribution", "class"), list(obj.get("events", [])),
                    int(obj.get("label_width", 16)))


def scenario_to_json(sc: Scenario) -> dict:
    return {**config_to_json(sc.config), "key": sc.key, "label_width": sc.label_width,
            "trace": {"count": sc.trace_count, "seed": sc.trace_seed, "distribution": sc.distribution},
            "events": sc.events}


def format_ip(v: int) -> str:
    return str(ipaddress.IPv4Address(v))
