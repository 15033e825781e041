"""Reduced ordered binary decision diagrams over a fixed-width header space.

Nodes live in flat lists owned by a :class:`BddEngine`; a node is an integer
index.  ``0`` is FALSE and ``1`` is TRUE.  Hash-consing through the unique
table makes every Boolean function map to exactly one node, so logical
equality is integer (and :class:`Predicate` object) identity.

There are no complement edges and no garbage collection.
"""

from __future__ import annotations

import random
import sys
from typing import Iterable

FALSE = 0
TRUE = 1

HEADER_BITS = 104

# apply recursion is bounded by the variable count, but each level costs two
# Python frames
if sys.getrecursionlimit() < 4000:
    sys.setrecursionlimit(4000)


class BddError(Exception):
    pass


class EngineMismatchError(BddError):
    """Operands were created by different engines."""


class Predicate:
    """Handle on a canonical node.  Interned: one object per node per engine."""

    __slots__ = ("engine", "node", "__weakref__")

    def __init__(self, engine: "BddEngine", node: int):
        self.engine = engine
        self.node = node

    def _other(self, other: "Predicate") -> int:
        if not isinstance(other, Predicate):
            return NotImplemented
        if other.engine is not self.engine:
            raise EngineMismatchError("operands belong to different BDD engines")
        return other.node

    def __and__(self, other):
        o = self._other(other)
        if o is NotImplemented:
            return o
        return self.engine.wrap(self.engine.and_node(self.node, o))

    def __or__(self, other):
        o = self._other(other)
        if o is NotImplemented:
            return o
        return self.engine.wrap(self.engine.or_node(self.node, o))

    def __sub__(self, other):
        o = self._other(other)
        if o is NotImplemented:
            return o
        return self.engine.wrap(self.engine.diff_node(self.node, o))

    def __xor__(self, other):
        o = self._other(other)
        if o is NotImplemented:
            return o
        e = self.engine
        return e.wrap(e.or_node(e.diff_node(self.node, o), e.diff_node(o, self.node)))

    def __invert__(self):
        return self.engine.wrap(self.engine.not_node(self.node))

    def __bool__(self):
        raise TypeError("use .is_false / .is_true; a Predicate has no truth value")

    @property
    def is_false(self) -> bool:
        return self.node == FALSE

    @property
    def is_true(self) -> bool:
        return self.node == TRUE

    def __repr__(self):
        if self.node <= TRUE:
            return "Predicate(TRUE)" if self.node else "Predicate(FALSE)"
        return f"Predicate(#{self.node}, var={self.engine.var_of(self.node)})"

    # identity semantics: the engine interns objects, so the default
    # __eq__/__hash__ (object identity) is exactly canonical equality


class BddEngine:
    """Owner of the unique table, operation caches and interned handles."""

    def __init__(self, nvars: int = HEADER_BITS):
        if nvars <= 0:
            raise ValueError("nvars must be positive")
        self.nvars = nvars
        # terminals sit below every variable
        self._var = [nvars, nvars]
        self._lo = [FALSE, TRUE]
        self._hi = [FALSE, TRUE]
        self._unique: dict[int, int] = {}          # packed (var, lo, hi) -> node
        self._split_memo: dict[int, tuple[int, int]] = {}
        self._and_memo: dict[int, int] = {}
        self._or_memo: dict[int, int] = {}
        self._diff_memo: dict[int, int] = {}
        self._not_memo: dict[int, int] = {FALSE: TRUE, TRUE: FALSE}
        self._count_memo: dict[int, int] = {FALSE: 0, TRUE: 1}
        self._handles: dict[int, Predicate] = {}
        self.false = self.wrap(FALSE)
        self.true = self.wrap(TRUE)

    # -- node plumbing -------------------------------------------------

    def wrap(self, node: int) -> Predicate:
        h = self._handles.get(node)
        if h is None:
            h = Predicate(self, node)
            self._handles[node] = h
        return h

    def node_of(self, p: Predicate) -> int:
        if p.engine is not self:
            raise EngineMismatchError("predicate belongs to a different engine")
        return p.node

    def var_of(self, node: int) -> int:
        return self._var[node]

    def low(self, node: int) -> int:
        return self._lo[node]

    def high(self, node: int) -> int:
        return self._hi[node]

    def __len__(self):
        return len(self._var)

    def mk(self, var: int, lo: int, hi: int) -> int:
        if lo == hi:
            return lo
        key = (((var << 32) | lo) << 32) | hi
        n = self._unique.get(key)
        if n is None:
            n = len(self._var)
            self._var.append(var)
            self._lo.append(lo)
            self._hi.append(hi)
            self._unique[key] = n
        return n

    def clear_caches(self):
        """Drop operation memos (nodes and handles are kept)."""
        self._and_memo.clear()
        self._or_memo.clear()
        self._diff_memo.clear()
        self._split_memo.clear()

    # -- constructors ----------------------------------------------------

    def mk_atom(self, bit: int) -> Predicate:
        if not 0 <= bit < self.nvars:
            raise BddError(f"bit index {bit} outside [0, {self.nvars})")
        return self.wrap(self.mk(bit, FALSE, TRUE))

    def cube_node(self, first_bit: int, bits: Iterable[int], tail: int = TRUE) -> int:
        """Conjunction fixing consecutive variables from ``first_bit`` to ``bits``."""
        bits = list(bits)
        node = tail
        for i in range(len(bits) - 1, -1, -1):
            v = first_bit + i
            node = self.mk(v, node, FALSE) if not bits[i] else self.mk(v, FALSE, node)
        return node

    def interval_node(self, first_bit: int, width: int, lo: int, hi: int) -> int:
        """Predicate ``lo <= x <= hi`` over an unsigned MSB-first block of variables."""
        if not 0 <= lo <= hi < (1 << width):
            raise BddError(f"bad interval [{lo}, {hi}] for width {width}")
        # build bottom-up: ge[i] / le[i] are the constraints on the suffix
        # starting at bit i, given that the prefix equals lo's / hi's prefix
        ge = TRUE
        le = TRUE
        both = TRUE
        for i in range(width - 1, -1, -1):
            v = first_bit + i
            lb = (lo >> (width - 1 - i)) & 1
            hb = (hi >> (width - 1 - i)) & 1
            # x >= lo on suffix
            if lb:
                new_ge = self.mk(v, FALSE, ge)
            else:
                new_ge = self.mk(v, ge, TRUE)
            if hb:
                new_le = self.mk(v, TRUE, le)
            else:
                new_le = self.mk(v, le, FALSE)
            if lb == hb:
                new_both = self.mk(v, both, FALSE) if not lb else self.mk(v, FALSE, both)
            else:
                # lb == 0, hb == 1 (lo <= hi keeps the prefix ordered)
                new_both = self.mk(v, ge, le)
            ge, le, both = new_ge, new_le, new_both
        return both

    # -- Boolean operations (node level) --------------------------------

    def and_node(self, a: int, b: int) -> int:
        if a == FALSE or b == FALSE:
            return FALSE
        if a == TRUE:
            return b
        if b == TRUE or a == b:
            return a
        if a > b:
            a, b = b, a
        key = (a << 32) | b
        r = self._and_memo.get(key)
        if r is not None:
            return r
        var = self._var
        va = var[a]
        vb = var[b]
        if va == vb:
            r = self.mk(va, self.and_node(self._lo[a], self._lo[b]),
                        self.and_node(self._hi[a], self._hi[b]))
        elif va < vb:
            r = self.mk(va, self.and_node(self._lo[a], b), self.and_node(self._hi[a], b))
        else:
            r = self.mk(vb, self.and_node(a, self._lo[b]), self.and_node(a, self._hi[b]))
        self._and_memo[key] = r
        return r

    def or_node(self, a: int, b: int) -> int:
        if a == TRUE or b == TRUE:
            return TRUE
        if a == FALSE:
            return b
        if b == FALSE or a == b:
            return a
        if a > b:
            a, b = b, a
        key = (a << 32) | b
        r = self._or_memo.get(key)
        if r is not None:
            return r
        var = self._var
        va = var[a]
        vb = var[b]
        if va == vb:
            r = self.mk(va, self.or_node(self._lo[a], self._lo[b]),
                        self.or_node(self._hi[a], self._hi[b]))
        elif va < vb:
            r = self.mk(va, self.or_node(self._lo[a], b), self.or_node(self._hi[a], b))
        else:
            r = self.mk(vb, self.or_node(a, self._lo[b]), self.or_node(a, self._hi[b]))
        self._or_memo[key] = r
        return r

    def diff_node(self, a: int, b: int) -> int:
        """``a AND NOT b`` without materialising the negation."""
        if a == FALSE or b == TRUE or a == b:
            return FALSE
        if b == FALSE:
            return a
        if a == TRUE:
            return self.not_node(b)
        key = (a << 32) | b
        r = self._diff_memo.get(key)
        if r is not None:
            return r
        var = self._var
        va = var[a]
        vb = var[b]
        if va == vb:
            r = self.mk(va, self.diff_node(self._lo[a], self._lo[b]),
                        self.diff_node(self._hi[a], self._hi[b]))
        elif va < vb:
            r = self.mk(va, self.diff_node(self._lo[a], b), self.diff_node(self._hi[a], b))
        else:
            r = self.mk(vb, self.diff_node(a, self._lo[b]), self.diff_node(a, self._hi[b]))
        self._diff_memo[key] = r
        return r

    def split_node(self, a: int, b: int) -> tuple[int, int]:
        """``(a AND b, a AND NOT b)`` in one walk over the pair."""
        memo = self._split_memo
        unique = self._unique
        var, lo, hi = self._var, self._lo, self._hi
        not_node = self.not_node

        def mk(v: int, l: int, h: int) -> int:
            if l == h:
                return l
            key = (((v << 32) | l) << 32) | h
            n = unique.get(key)
            if n is None:
                n = len(var)
                var.append(v)
                lo.append(l)
                hi.append(h)
                unique[key] = n
            return n

        def go(a: int, b: int) -> tuple[int, int]:
            if a == FALSE:
                return FALSE, FALSE
            if b == TRUE or a == b:
                return a, FALSE
            if b == FALSE:
                return FALSE, a
            if a == TRUE:
                return b, not_node(b)
            key = (a << 32) | b
            r = memo.get(key)
            if r is not None:
                return r
            va = var[a]
            vb = var[b]
            if va == vb:
                l_in, l_out = go(lo[a], lo[b])
                h_in, h_out = go(hi[a], hi[b])
            elif va < vb:
                l_in, l_out = go(lo[a], b)
                h_in, h_out = go(hi[a], b)
            else:
                va = vb
                l_in, l_out = go(a, lo[b])
                h_in, h_out = go(a, hi[b])
            r = (mk(va, l_in, h_in), mk(va, l_out, h_out))
            memo[key] = r
            return r

        return go(a, b)

    def not_node(self, a: int) -> int:
        r = self._not_memo.get(a)
        if r is not None:
            return r
        r = self.mk(self._var[a], self.not_node(self._lo[a]), self.not_node(self._hi[a]))
        self._not_memo[a] = r
        self._not_memo[r] = a
        return r

    def or_all(self, nodes: Iterable[int]) -> int:
        """Balanced disjunction; far cheaper than a left fold for many operands."""
        items = [n for n in nodes if n != FALSE]
        if not items:
            return FALSE
        while len(items) > 1:
            nxt = [self.or_node(items[i], items[i + 1]) for i in range(0, len(items) - 1, 2)]
            if len(items) % 2:
                nxt.append(items[-1])
            items = nxt
        return items[0]

    def intersects(self, a: int, b: int) -> bool:
        return self.and_node(a, b) != FALSE

    def implies(self, a: int, b: int) -> bool:
        return self.diff_node(a, b) == FALSE

    # -- Predicate-level API --------------------------------------------

    def and_(self, a: Predicate, b: Predicate) -> Predicate:
        return a & b

    def or_(self, a: Predicate, b: Predicate) -> Predicate:
        return a | b

    def not_(self, a: Predicate) -> Predicate:
        return ~a

    def diff(self, a: Predicate, b: Predicate) -> Predicate:
        return a - b

    def evaluate(self, p: Predicate | int, bits: int) -> bool:
        """Follow ``bits`` (an ``nvars``-bit int, variable 0 = MSB) to a terminal."""
        node = p.node if isinstance(p, Predicate) else p
        var = self._var
        lo = self._lo
        hi = self._hi
        top = self.nvars - 1
        while node > TRUE:
            if (bits >> (top - var[node])) & 1:
                node = hi[node]
            else:
                node = lo[node]
        return node == TRUE

    def _count(self, node: int) -> int:
        # satisfying assignments of the variables var(node)..nvars-1
        r = self._count_memo.get(node)
        if r is not None:
            return r
        v = self._var[node]
        lo = self._lo[node]
        hi = self._hi[node]
        r = (self._count(lo) << (self._var[lo] - v - 1)) + (self._count(hi) << (self._var[hi] - v - 1))
        self._count_memo[node] = r
        return r

    def sat_count(self, p: Predicate | int) -> int:
        node = p.node if isinstance(p, Predicate) else p
        return self._count(node) << self._var[node]

    def sample(self, p: Predicate | int, rng: random.Random) -> int:
        """Uniformly random satisfying assignment, as an ``nvars``-bit int."""
        node = p.node if isinstance(p, Predicate) else p
        if node == FALSE:
            raise BddError("cannot sample from FALSE")
        var = self._var
        bits = 0
        level = 0
        n = self.nvars
        while True:
            v = var[node]
            # free variables skipped by the edge into this node
            for i in range(level, min(v, n)):
                if rng.getrandbits(1):
                    bits |= 1 << (n - 1 - i)
            if node == TRUE:
                return bits
            lo = self._lo[node]
            hi = self._hi[node]
            c_lo = self._count(lo) << (var[lo] - v - 1)
            c_hi = self._count(hi) << (var[hi] - v - 1)
            if rng.randrange(c_lo + c_hi) < c_hi:
                bits |= 1 << (n - 1 - v)
                node = hi
            else:
                node = lo
            level = v + 1

    def pick(self, p: Predicate | int) -> int:
        """Smallest satisfying assignment (free variables 0)."""
        node = p.node if isinstance(p, Predicate) else p
        if node == FALSE:
            raise BddError("cannot pick from FALSE")
        bits = 0
        top = self.nvars - 1
        while node != TRUE:
            lo = self._lo[node]
            if lo != FALSE:
                node = lo
            else:
                bits |= 1 << (top - self._var[node])
                node = self._hi[node]
        return bits

    def support(self, p: Predicate | int) -> set[int]:
        node = p.node if isinstance(p, Predicate) else p
        seen = set()
        out = set()
        stack = [node]
        while stack:
            n = stack.pop()
            if n <= TRUE or n in seen:
                continue
            seen.add(n)
            out.add(self._var[n])
            stack.append(self._lo[n])
            stack.append(self._hi[n])
        return out

    def size(self, p: Predicate | int) -> int:
        """Number of internal nodes reachable from ``p``."""
        node = p.node if isinstance(p, Predicate) else p
        seen = set()
        stack = [node]
        while stack:
            n = stack.pop()
            if n <= TRUE or n in seen:
                continue
            seen.add(n)
            stack.append(self._lo[n])
            stack.append(self._hi[n])
        return len(seen)

    def restrict_node(self, node: int, first_bit: int, width: int, value: int) -> int:
        """Cofactor: fix the variable block ``[first_bit, first_bit+width)`` to ``value``."""
        last = first_bit + width
        memo: dict[int, int] = {}
        var = self._var
        lo = self._lo
        hi = self._hi

        def go(n: int) -> int:
            v = var[n]
            if v >= last:
                return n
            r = memo.get(n)
            if r is not None:
                return r
            if v >= first_bit:
                if (value >> (last - 1 - v)) & 1:
                    r = go(hi[n])
                else:
                    r = go(lo[n])
            else:
                r = self.mk(v, go(lo[n]), go(hi[n]))
            memo[n] = r
            return r

        return go(node)

    def exists_node(self, node: int, first_bit: int, width: int) -> int:
        """Existentially quantify the variable block ``[first_bit, first_bit+width)``."""
        last = first_bit + width
        memo: dict[int, int] = {}
        var = self._var
        lo = self._lo
        hi = self._hi

        def go(n: int) -> int:
            v = var[n]
            if v >= last:
                return n
            r = memo.get(n)
            if r is not None:
                return r
            if v >= first_bit:
                r = self.or_node(go(lo[n]), go(hi[n]))
            else:
                r = self.mk(v, go(lo[n]), go(hi[n]))
            memo[n] = r
            return r

        return go(node)
