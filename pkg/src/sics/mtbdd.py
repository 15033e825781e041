"""Multi-terminal decision diagrams whose leaves are integer labels.

A diagram is built over the same variable order as a :class:`BddEngine` and
is combined with that engine's predicates (passed as node ids).  Label 0 is
the "unassigned" leaf.
"""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from .bdd import FALSE, TRUE, BddEngine

UNASSIGNED = 0


class OverlapError(ValueError):
    """Two regions being merged both carry a label."""


class LabelDiagram:
    def __init__(self, engine: BddEngine):
        self.engine = engine
        self.nvars = engine.nvars
        self._var: list[int] = []
        self._lo: list[int] = []
        self._hi: list[int] = []
        self._unique: dict[int, int] = {}          # packed (var, lo, hi) -> node
        self._terms: dict[int, int] = {}
        self._merge_memo: dict[int, int] = {}
        self._compiled: dict[int, tuple] = {}
        self.empty = self.term(UNASSIGNED)

    # -- node plumbing ---------------------------------------------------

    def term(self, label: int) -> int:
        n = self._terms.get(label)
        if n is None:
            n = len(self._var)
            self._var.append(self.nvars)
            self._lo.append(label)
            self._hi.append(label)
            self._terms[label] = n
        return n

    def is_term(self, n: int) -> bool:
        return self._var[n] == self.nvars

    def label_of(self, n: int) -> int:
        return self._lo[n]

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

    def __len__(self):
        return len(self._var)

    # -- construction ----------------------------------------------------

    def lift(self, pred: int, label: int) -> int:
        """``label`` where ``pred`` holds, unassigned elsewhere."""
        e = self.engine
        memo: dict[int, int] = {FALSE: self.empty, TRUE: self.term(label)}

        def go(n: int) -> int:
            r = memo.get(n)
            if r is None:
                r = self.mk(e.var_of(n), go(e.low(n)), go(e.high(n)))
                memo[n] = r
            return r

        return go(pred)

    def merge(self, a: int, b: int) -> int:
        """Union of two diagrams whose labelled regions are disjoint."""
        empty = self.empty
        if a == empty or a == b:
            return b
        if b == empty:
            return a
        var = self._var
        nv = self.nvars
        va = var[a]
        vb = var[b]
        if va == nv and vb == nv:
            raise OverlapError(f"labels {self._lo[a]} and {self._lo[b]} overlap")
        if a > b:
            a, b = b, a
            va, vb = vb, va
        key = (a << 32) | b
        r = self._merge_memo.get(key)
        if r is not None:
            return r
        if va == vb:
            r = self.mk(va, self.merge(self._lo[a], self._lo[b]), self.merge(self._hi[a], self._hi[b]))
        elif va < vb:
            r = self.mk(va, self.merge(self._lo[a], b), self.merge(self._hi[a], b))
        else:
            r = self.mk(vb, self.merge(a, self._lo[b]), self.merge(a, self._hi[b]))
        self._merge_memo[key] = r
        return r

    def build(self, classes: Iterable[tuple[int, int]]) -> int:
        """Diagram from disjoint ``(predicate node, label)`` pairs."""
        items = [self.lift(p, label) for p, label in classes]
        if not items:
            return self.empty
        while len(items) > 1:
            nxt = [self.merge(items[i], items[i + 1]) for i in range(0, len(items) - 1, 2)]
            if len(items) % 2:
                nxt.append(items[-1])
            items = nxt
        return items[0]

    # -- transformations -------------------------------------------------

    def relabel(self, root: int, mapping: Mapping[int, int]) -> int:
        if not mapping:
            return root
        return self._relabel(root, mapping, {})

    def _relabel(self, root: int, mapping: Mapping[int, int], memo: dict[int, int]) -> int:
        var, lo, hi = self._var, self._lo, self._hi
        nv = self.nvars
        mk, term = self.mk, self.term

        def go(n: int) -> int:
            r = memo.get(n)
            if r is not None:
                return r
            if var[n] == nv:
                lbl = lo[n]
                r = term(mapping.get(lbl, lbl))
            else:
                r = mk(var[n], go(lo[n]), go(hi[n]))
            memo[n] = r
            return r

        return go(root)

    def overlay(self, root: int, pred: int, mapping: Mapping[int, int]) -> int:
        """Relabel through ``mapping`` only where ``pred`` holds."""
        if not mapping or pred == FALSE:
            return root
        if pred == TRUE:
            return self.relabel(root, mapping)
        e = self.engine
        pvar, plo, phi = e._var, e._lo, e._hi
        memo: dict[int, int] = {}
        relabel_memo: dict[int, int] = {}
        var, lo, hi = self._var, self._lo, self._hi
        nv = self.nvars
        mk = self.mk
        relabel = self._relabel

        def go(m: int, p: int) -> int:
            if p == FALSE:
                return m
            if p == TRUE:
                return relabel(m, mapping, relabel_memo)
            key = (m << 32) | p
            r = memo.get(key)
            if r is not None:
                return r
            vm = var[m]
            vp = pvar[p]
            if vm == nv or vp < vm:
                r = mk(vp, go(m, plo[p]), go(m, phi[p]))
            elif vm < vp:
                r = mk(vm, go(lo[m], p), go(hi[m], p))
            else:
                r = mk(vm, go(lo[m], plo[p]), go(hi[m], phi[p]))
            memo[key] = r
            return r

        return go(root, pred)

    # -- queries ---------------------------------------------------------

    def evaluate(self, root: int, bits: int) -> int:
        var = self._var
        lo = self._lo
        hi = self._hi
        nv = self.nvars
        top = nv - 1
        n = root
        while var[n] != nv:
            if (bits >> (top - var[n])) & 1:
                n = hi[n]
            else:
                n = lo[n]
        return lo[n]

    def labels(self, root: int) -> set[int]:
        out = set()
        seen = set()
        stack = [root]
        nv = self.nvars
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen.add(n)
            if self._var[n] == nv:
                out.add(self._lo[n])
            else:
                stack.append(self._lo[n])
                stack.append(self._hi[n])
        return out

    def labels_under(self, root: int, pred: int) -> set[int]:
        """Labels of every leaf reachable on a path where ``pred`` holds."""
        e = self.engine
        pvar, plo, phi = e._var, e._lo, e._hi
        var, lo, hi = self._var, self._lo, self._hi
        nv = self.nvars
        out: set[int] = set()
        seen: set[int] = set()
        free: set[int] = set()           # diagram nodes reached with pred already TRUE
        stack = [(root, pred)]
        pop, push = stack.pop, stack.append
        while stack:
            m, p = pop()
            if p == TRUE:
                if m in free:
                    continue
                free.add(m)
                if var[m] == nv:
                    out.add(lo[m])
                else:
                    push((lo[m], TRUE))
                    push((hi[m], TRUE))
                continue
            if p == FALSE:
                continue
            key = (m << 32) | p
            if key in seen:
                continue
            seen.add(key)
            vm = var[m]
            if vm == nv:
                out.add(lo[m])
                continue
            vp = pvar[p]
            if vm < vp:
                push((lo[m], p))
                push((hi[m], p))
            elif vp < vm:
                push((m, plo[p]))
                push((m, phi[p]))
            else:
                push((lo[m], plo[p]))
                push((hi[m], phi[p]))
        return out

    def region(self, root: int, label: int) -> int:
        """BDD node (in the engine) of headers mapped to ``label``."""
        e = self.engine
        memo: dict[int, int] = {}
        var = self._var
        nv = self.nvars

        def go(n: int) -> int:
            if var[n] == nv:
                return TRUE if self._lo[n] == label else FALSE
            r = memo.get(n)
            if r is None:
                r = e.mk(var[n], go(self._lo[n]), go(self._hi[n]))
                memo[n] = r
            return r

        return go(root)

    def reachable(self, root: int) -> list[int]:
        seen = {}
        stack = [root]
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen[n] = None
            if self._var[n] != self.nvars:
                stack.append(self._lo[n])
                stack.append(self._hi[n])
        return list(seen)

    def node_var(self, n: int) -> int:
        return self._var[n]

    def node_low(self, n: int) -> int:
        return self._lo[n]

    def node_high(self, n: int) -> int:
        return self._hi[n]

    # -- vectorised lookup -------------------------------------------------

    def compile(self, root: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, int, int]:
        """Flat arrays for :meth:`evaluate_bits`: leaves loop onto themselves."""
        hit = self._compiled.get(root)
        if hit is not None:
            return hit
        nodes = self.reachable(root)
        index = {n: i for i, n in enumerate(nodes)}
        k = len(nodes)
        var = np.zeros(k, dtype=np.int64)
        lo = np.zeros(k, dtype=np.int64)
        hi = np.zeros(k, dtype=np.int64)
        label = np.zeros(k, dtype=np.int64)
        depth = 0
        level: dict[int, int] = {}
        for n in sorted(nodes, key=lambda n: -self._var[n]):
            i = index[n]
            if self._var[n] == self.nvars:
                var[i] = 0
                lo[i] = hi[i] = i
                label[i] = self._lo[n]
                level[n] = 0
            else:
                var[i] = self._var[n]
                lo[i] = index[self._lo[n]]
                hi[i] = index[self._hi[n]]
                level[n] = 1 + max(level[self._lo[n]], level[self._hi[n]])
        depth = level[root]
        out = (var, lo, hi, label, index[root], depth)
        if len(self._compiled) > 8:
            self._compiled.clear()
        self._compiled[root] = out
        return out

    def evaluate_bits(self, root: int, bitmatrix: np.ndarray) -> np.ndarray:
        """Labels for each row of an ``(N, nvars)`` 0/1 matrix."""
        var, lo, hi, label, start, depth = self.compile(root)
        n = bitmatrix.shape[0]
        cur = np.full(n, start, dtype=np.int64)
        rows = np.arange(n)
        for _ in range(depth):
            b = bitmatrix[rows, var[cur]]
            cur = np.where(b != 0, hi[cur], lo[cur])
        return label[cur]
