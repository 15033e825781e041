"""Header layouts, match specifications, rules and their conversion to predicates."""

from __future__ import annotations

import ipaddress
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

from .bdd import TRUE, BddEngine, Predicate


class HeaderError(ValueError):
    pass


class Field(NamedTuple):
    name: str
    width: int
    offset: int
    is_ip: bool = False


class HeaderLayout:
    """Ordered header fields packed MSB-first into one bit string.

    The five-tuple layout is the production one; small layouts exist so
    exhaustive oracles can enumerate every header.
    """

    def __init__(self, fields: Sequence[tuple[str, int] | tuple[str, int, bool]]):
        out = []
        offset = 0
        for spec in fields:
            name, width = spec[0], spec[1]
            is_ip = bool(spec[2]) if len(spec) > 2 else False
            if width <= 0:
                raise HeaderError(f"field {name} has non-positive width")
            out.append(Field(name, width, offset, is_ip))
            offset += width
        self.fields: tuple[Field, ...] = tuple(out)
        self.width = offset
        self.by_name = {f.name: f for f in self.fields}
        self.names = tuple(f.name for f in self.fields)

    def __repr__(self):
        return "HeaderLayout(" + ", ".join(f"{f.name}:{f.width}" for f in self.fields) + ")"

    def field(self, name: str) -> Field:
        try:
            return self.by_name[name]
        except KeyError:
            raise HeaderError(f"unknown header field {name!r}") from None

    def pack(self, values: Sequence[int]) -> int:
        if len(values) != len(self.fields):
            raise HeaderError(f"expected {len(self.fields)} field values, got {len(values)}")
        bits = 0
        for f, v in zip(self.fields, values):
            if not 0 <= v < (1 << f.width):
                raise HeaderError(f"{f.name}={v} does not fit in {f.width} bits")
            bits = (bits << f.width) | v
        return bits

    def unpack(self, bits: int) -> tuple[int, ...]:
        out = []
        for f in reversed(self.fields):
            out.append(bits & ((1 << f.width) - 1))
            bits >>= f.width
        return tuple(reversed(out))

    def get(self, bits: int, name: str) -> int:
        f = self.field(name)
        return (bits >> (self.width - f.offset - f.width)) & ((1 << f.width) - 1)

    def set(self, bits: int, name: str, value: int) -> int:
        f = self.field(name)
        shift = self.width - f.offset - f.width
        mask = ((1 << f.width) - 1) << shift
        return (bits & ~mask) | (value << shift)


class Header(NamedTuple):
    srcIp: int
    srcPort: int
    dstIp: int
    dstPort: int
    proto: int

    def __str__(self):
        return (f"{ipaddress.IPv4Address(self.srcIp)}:{self.srcPort} -> "
                f"{ipaddress.IPv4Address(self.dstIp)}:{self.dstPort} proto {self.proto}")


FIVE_TUPLE = HeaderLayout([
    ("srcIp", 32, True),
    ("srcPort", 16),
    ("dstIp", 32, True),
    ("dstPort", 16),
    ("proto", 8),
])


def pack(h: Sequence[int], layout: HeaderLayout = FIVE_TUPLE) -> int:
    return layout.pack(h)


def unpack(bits: int, layout: HeaderLayout = FIVE_TUPLE) -> Header | tuple[int, ...]:
    values = layout.unpack(bits)
    if layout is FIVE_TUPLE:
        return Header(*values)
    return values


# -- match specifications ----------------------------------------------


@dataclass(frozen=True)
class FieldMatch:
    """Inclusive interval ``[lo, hi]``; ``kind`` remembers how it was written."""

    lo: int
    hi: int
    kind: str = "range"  # "any" | "exact" | "prefix" | "range"
    prefix_len: int | None = None

    def contains(self, v: int) -> bool:
        return self.lo <= v <= self.hi


def range_to_prefixes(lo: int, hi: int, width: int) -> list[tuple[int, int]]:
    """Minimal prefix cover of ``[lo, hi]`` as ``(value, prefix_len)`` pairs."""
    if not 0 <= lo <= hi < (1 << width):
        raise HeaderError(f"bad range [{lo}, {hi}] for width {width}")
    out = []
    while lo <= hi:
        # largest aligned block starting at lo that stays within hi
        size = lo & -lo if lo else 1 << width
        while size > hi - lo + 1:
            size >>= 1
        plen = width - size.bit_length() + 1
        out.append((lo, plen))
        lo += size
    return out


def _parse_scalar(text: str, f: Field) -> int:
    text = text.strip()
    if f.is_ip and "." in text:
        try:
            return int(ipaddress.IPv4Address(text))
        except ipaddress.AddressValueError as e:
            raise HeaderError(f"{f.name}: bad address {text!r}") from e
    try:
        v = int(text, 0)
    except ValueError:
        raise HeaderError(f"{f.name}: cannot parse {text!r}") from None
    if not 0 <= v < (1 << f.width):
        raise HeaderError(f"{f.name}: value {v} out of range")
    return v


def parse_field(value, f: Field) -> FieldMatch:
    full = (1 << f.width) - 1
    if value is None or value == "*":
        return FieldMatch(0, full, "any")
    if isinstance(value, bool):
        raise HeaderError(f"{f.name}: boolean is not a match value")
    if isinstance(value, int):
        if not 0 <= value <= full:
            raise HeaderError(f"{f.name}: value {value} out of range")
        return FieldMatch(value, value, "exact")
    if not isinstance(value, str):
        raise HeaderError(f"{f.name}: unsupported match value {value!r}")
    text = value.strip()
    is_proto = f.name == "proto"
    if "/" in text:
        if is_proto:
            raise HeaderError("proto supports exact or wildcard only")
        base, _, plen_s = text.partition("/")
        try:
            plen = int(plen_s)
        except ValueError:
            raise HeaderError(f"{f.name}: bad prefix length in {text!r}") from None
        if not 0 <= plen <= f.width:
            raise HeaderError(f"{f.name}: prefix length {plen} outside [0, {f.width}]")
        v = _parse_scalar(base, f)
        span = 1 << (f.width - plen)
        lo = v & ~(span - 1)
        if lo != v:
            raise HeaderError(f"{f.name}: {text!r} has host bits set")
        return FieldMatch(lo, lo + span - 1, "prefix", plen)
    # "lo-hi"; a leading '-' is never valid for unsigned fields
    if "-" in text[1:]:
        if is_proto:
            raise HeaderError("proto supports exact or wildcard only")
        a, _, b = text.partition("-")
        lo = _parse_scalar(a, f)
        hi = _parse_scalar(b, f)
        if lo > hi:
            raise HeaderError(f"{f.name}: range {text!r} has lo > hi")
        if lo == 0 and hi == full:
            return FieldMatch(lo, hi, "any")
        return FieldMatch(lo, hi, "range")
    v = _parse_scalar(text, f)
    return FieldMatch(v, v, "exact")


class MatchSpec:
    """Per-field constraints; absent fields are wildcards."""

    __slots__ = ("layout", "fields", "_key")

    def __init__(self, fields: Mapping[str, FieldMatch] | None = None,
                 layout: HeaderLayout = FIVE_TUPLE):
        self.layout = layout
        cleaned = {}
        for name, fm in (fields or {}).items():
            f = layout.field(name)
            if not 0 <= fm.lo <= fm.hi < (1 << f.width):
                raise HeaderError(f"{name}: bad interval [{fm.lo}, {fm.hi}]")
            if fm.lo == 0 and fm.hi == (1 << f.width) - 1:
                continue
            cleaned[name] = fm
        self.fields: dict[str, FieldMatch] = cleaned
        self._key = tuple((n, cleaned[n].lo, cleaned[n].hi) for n in layout.names if n in cleaned)

    @classmethod
    def parse(cls, obj: Mapping | None, layout: HeaderLayout = FIVE_TUPLE) -> "MatchSpec":
        obj = obj or {}
        unknown = set(obj) - set(layout.names)
        if unknown:
            raise HeaderError(f"unknown match fields: {sorted(unknown)}")
        return cls({n: parse_field(obj[n], layout.field(n)) for n in obj}, layout)

    @classmethod
    def wildcard(cls, layout: HeaderLayout = FIVE_TUPLE) -> "MatchSpec":
        return cls({}, layout)

    def interval(self, name: str) -> tuple[int, int]:
        fm = self.fields.get(name)
        if fm is None:
            return 0, (1 << self.layout.field(name).width) - 1
        return fm.lo, fm.hi

    def matches(self, values: Sequence[int]) -> bool:
        """Direct field-by-field check (no BDDs)."""
        for f, v in zip(self.layout.fields, values):
            fm = self.fields.get(f.name)
            if fm is not None and not (fm.lo <= v <= fm.hi):
                return False
        return True

    def to_json(self) -> dict:
        out = {}
        for name in self.layout.names:
            fm = self.fields.get(name)
            if fm is None:
                continue
            f = self.layout.field(name)
            if fm.lo == fm.hi:
                out[name] = _fmt(fm.lo, f)
            elif fm.kind == "prefix" and f.is_ip:
                out[name] = f"{_fmt(fm.lo, f)}/{fm.prefix_len}"
            else:
                out[name] = f"{_fmt(fm.lo, f)}-{_fmt(fm.hi, f)}"
        return out

    def __eq__(self, other):
        return isinstance(other, MatchSpec) and other.layout is self.layout and other._key == self._key

    def __hash__(self):
        return hash(self._key)

    def __repr__(self):
        return f"MatchSpec({self.to_json()})"


def _fmt(v: int, f: Field):
    if f.is_ip and f.width == 32:
        return str(ipaddress.IPv4Address(v))
    return v


def field_interval_node(engine: BddEngine, layout: HeaderLayout, name: str, lo: int, hi: int) -> int:
    """Node for ``lo <= field <= hi`` built as the union of its minimal prefix cover."""
    f = layout.field(name)
    nodes = []
    for value, plen in range_to_prefixes(lo, hi, f.width):
        bits = [(value >> (f.width - 1 - i)) & 1 for i in range(plen)]
        nodes.append(engine.cube_node(f.offset, bits))
    return engine.or_all(nodes)


def spec_to_node(engine: BddEngine, m: MatchSpec) -> int:
    if engine.nvars != m.layout.width:
        raise HeaderError("engine width does not match the header layout")
    node = TRUE
    # conjoin bottom-up so each step only prefixes the accumulated tail
    for f in reversed(m.layout.fields):
        fm = m.fields.get(f.name)
        if fm is None:
            continue
        node = engine.and_node(field_interval_node(engine, m.layout, f.name, fm.lo, fm.hi), node)
    return node


def spec_to_predicate(engine: BddEngine, m: MatchSpec) -> Predicate:
    return engine.wrap(spec_to_node(engine, m))


def field_value_node(engine: BddEngine, layout: HeaderLayout, name: str, value: int) -> int:
    f = layout.field(name)
    bits = [(value >> (f.width - 1 - i)) & 1 for i in range(f.width)]
    return engine.cube_node(f.offset, bits)


# -- rules and chain requirements ---------------------------------------

ALLOW = "ALLOW"
DENY = "DENY"
COUNT = "COUNT"


@dataclass(frozen=True)
class Rewrite:
    field: str
    value: int


def parse_behavior(text: str, layout: HeaderLayout = FIVE_TUPLE) -> str:
    """Validate and normalise a behavior id: ALLOW, DENY, COUNT or REWRITE(field=value)."""
    t = text.strip()
    up = t.upper()
    if up in (ALLOW, DENY, COUNT):
        return up
    if up.startswith("REWRITE(") and t.endswith(")"):
        inner = t[len("REWRITE("):-1]
        name, sep, val = inner.partition("=")
        if not sep:
            raise HeaderError(f"bad rewrite behavior {text!r}")
        f = layout.field(name.strip())
        v = _parse_scalar(val, f)
        return f"REWRITE({f.name}={_fmt(v, f)})"
    raise HeaderError(f"unknown behavior {text!r}")


def rewrite_of(behavior: str, layout: HeaderLayout = FIVE_TUPLE) -> Rewrite | None:
    if not behavior.startswith("REWRITE("):
        return None
    name, _, val = behavior[len("REWRITE("):-1].partition("=")
    f = layout.field(name)
    return Rewrite(name, _parse_scalar(val, f))


def rewrite_behavior(field_name: str, value: int, layout: HeaderLayout = FIVE_TUPLE) -> str:
    f = layout.field(field_name)
    return f"REWRITE({field_name}={_fmt(value, f)})"


@dataclass(frozen=True)
class MiddleboxRule:
    match: MatchSpec
    priority: int
    behavior: str


@dataclass(frozen=True)
class ChainRequirement:
    match: MatchSpec
    chain: tuple[str, ...]
    priority: int

    def __post_init__(self):
        if not self.chain:
            raise HeaderError("chain must be non-empty")


def stable_priority_sort(items: Iterable, key=lambda x: x.priority) -> list:
    """Descending priority; file order breaks ties (earlier wins)."""
    return sorted(items, key=lambda x: -key(x))


def load_json(path_or_obj):
    if isinstance(path_or_obj, (str, Path)):
        with open(path_or_obj) as fh:
            return json.load(fh)
    return path_or_obj


def parse_ruleset(obj, layout: HeaderLayout = FIVE_TUPLE) -> list[MiddleboxRule]:
    data = load_json(obj)
    if not isinstance(data, list):
        raise HeaderError("ruleset must be a JSON array")
    rules = []
    for i, entry in enumerate(data):
        try:
            rules.append(MiddleboxRule(
                MatchSpec.parse(entry.get("match"), layout),
                int(entry["priority"]),
                parse_behavior(entry["behavior"], layout),
            ))
        except (KeyError, TypeError) as e:
            raise HeaderError(f"rule #{i}: missing or malformed key {e}") from e
    return rules


def parse_chains(obj, layout: HeaderLayout = FIVE_TUPLE) -> list[ChainRequirement]:
    data = load_json(obj)
    if not isinstance(data, list):
        raise HeaderError("chain requirements must be a JSON array")
    reqs = []
    for i, entry in enumerate(data):
        try:
            reqs.append(ChainRequirement(
                MatchSpec.parse(entry.get("match"), layout),
                tuple(str(x) for x in entry["chain"]),
                int(entry["priority"]),
            ))
        except (KeyError, TypeError) as e:
            raise HeaderError(f"chain requirement #{i}: missing or malformed key {e}") from e
    return reqs


def ruleset_to_json(rules: Iterable[MiddleboxRule]) -> list[dict]:
    return [{"match": r.match.to_json(), "priority": r.priority, "behavior": r.behavior} for r in rules]


def chains_to_json(reqs: Iterable[ChainRequirement]) -> list[dict]:
    return [{"match": r.match.to_json(), "chain": list(r.chain), "priority": r.priority} for r in reqs]
