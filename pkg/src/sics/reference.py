"""Plaintext reference pipeline: the ground truth the label pipeline is checked against.

No predicates, labels or ciphers.  Chains come from matching the current
header against every requirement, behaviors from linear first-match over
each box's rules.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .composer import EGRESS, INGRESS, NetworkConfig, Port, chain_ports
from .header import DENY, MatchSpec, rewrite_of, stable_priority_sort


@dataclass(frozen=True)
class Outcome:
    hops: tuple[tuple[str, str], ...]   # (box id, behavior) in visit order
    header: tuple[int, ...] | None      # final header, None when dropped


class ReferenceError(RuntimeError):
    pass


class ReferencePipeline:
    def __init__(self, cfg: NetworkConfig, max_hops: int = 256):
        self.cfg = cfg
        self.layout = cfg.layout
        self.max_hops = max_hops
        self.reqs = stable_priority_sort(cfg.requirements)
        self.rules = {bid: stable_priority_sort(cfg.rules_of(bid).rules) for bid in cfg.boxes}
        self.defaults = {bid: cfg.rules_of(bid).default for bid in cfg.boxes}
        self.replica_base = {r.replica: cfg.boxes[r.replica].function for r in cfg.reroutes
                             if r.replica in cfg.boxes}
        self.rewrites = {}
        for bid in cfg.boxes:
            for r in self.rules[bid]:
                self._rewrite(r.behavior)
            self._rewrite(self.defaults[bid])
        self._next = lru_cache(maxsize=None)(self._next_uncached)

    def _rewrite(self, behavior: str):
        if behavior not in self.rewrites:
            rw = rewrite_of(behavior, self.layout)
            self.rewrites[behavior] = None if rw is None else (self.layout.names.index(rw.field), rw.value)
        return self.rewrites[behavior]

    # -- scalar walk -------------------------------------------------------

    def chain_mask(self, h: Sequence[int]) -> int:
        mask = 0
        for k, r in enumerate(self.reqs):
            if r.match.matches(h):
                mask |= 1 << k
        return mask

    def _next_uncached(self, mask: int, port: Port) -> Port:
        chain: tuple[str, ...] = ()
        for k, r in enumerate(self.reqs):
            if mask >> k & 1:
                chain += tuple(r.chain)
        ports = chain_ports(chain)
        base = port
        if port.box in self.replica_base:
            base = Port(self.replica_base[port.box], port.occ)
        if base == INGRESS:
            return ports[0] if ports else EGRESS
        try:
            i = ports.index(base)
        except ValueError:
            return EGRESS
        return ports[i + 1] if i + 1 < len(ports) else EGRESS

    def next_port(self, port: Port, h: Sequence[int]) -> Port:
        q = self._next(self.chain_mask(h), port)
        for rr in self.cfg.reroutes:
            if rr.port == q and rr.match.matches(h):
                return Port(rr.replica, q.occ)
        return q

    def behavior(self, box: str, h: Sequence[int]) -> str:
        for r in self.rules[box]:
            if r.match.matches(h):
                return r.behavior
        return self.defaults[box]

    def _visit(self, box: str, h: list[int], hops: list) -> bool:
        b = self.behavior(box, h)
        hops.append((box, b))
        if b == DENY:
            return False
        rw = self._rewrite(b)
        if rw is not None:
            h[rw[0]] = rw[1]
        return True

    def run(self, header: Sequence[int]) -> Outcome:
        h = list(header)
        hops: list[tuple[str, str]] = []
        port = INGRESS
        inserted = False
        for _ in range(self.max_hops):
            if not inserted:
                ins = next((m for m in self.cfg.inserts if m.port == port and m.match.matches(h)), None)
                if ins is not None:
                    if not self._visit(ins.box, h, hops):
                        return Outcome(tuple(hops), None)
                    inserted = True
                    continue
            inserted = False
            q = self.next_port(port, h)
            if q == EGRESS:
                return Outcome(tuple(hops), tuple(h))
            port = q
            if any(b.port == q and b.match.matches(h) for b in self.cfg.bypasses):
                continue
            if not self._visit(q.box, h, hops):
                return Outcome(tuple(hops), None)
        raise ReferenceError("walk did not terminate")

    # -- vectorised walk -----------------------------------------------------

    def run_batch(self, headers: np.ndarray) -> list[Outcome]:
        """Same walk for an ``(N, fields)`` integer array, one state step per round."""
        H = np.array(headers, dtype=np.int64, copy=True)
        n = H.shape[0]
        ports: list[Port] = [INGRESS]
        port_ix = {INGRESS: 0}

        def pid(p: Port) -> int:
            i = port_ix.get(p)
            if i is None:
                i = port_ix[p] = len(ports)
                ports.append(p)
            return i

        cur = np.zeros(n, dtype=np.int64)
        arrive = np.zeros(n, dtype=bool)
        inserted = np.zeros(n, dtype=bool)
        active = np.ones(n, dtype=bool)
        dropped = np.zeros(n, dtype=bool)
        hops: list[list] = [[] for _ in range(n)]
        rounds = 0
        while active.any():
            rounds += 1
            if rounds > 4 * self.max_hops:
                raise ReferenceError("walk did not terminate")
            idx_all = np.nonzero(active)[0]
            arr = idx_all[arrive[idx_all]]
            leave = idx_all[~arrive[idx_all]]
            # boxes
            for p_i in np.unique(cur[arr]):
                sel = arr[cur[arr] == p_i]
                self._visit_batch(ports[p_i].box, sel, H, hops, dropped, active)
                arrive[sel] = False
                inserted[sel] = False
            if leave.size == 0:
                continue
            # inserts
            pending = np.ones(leave.size, dtype=bool)
            for p_i in np.unique(cur[leave]):
                port = ports[p_i]
                marks = [m for m in self.cfg.inserts if m.port == port]
                if not marks:
                    continue
                pos = np.nonzero((cur[leave] == p_i) & ~inserted[leave])[0]
                for m in marks:
                    if pos.size == 0:
                        break
                    hit = match_mask(m.match, H[leave[pos]])
                    sel = leave[pos[hit]]
                    if sel.size:
                        self._visit_batch(m.box, sel, H, hops, dropped, active)
                        inserted[sel] = True
                        pending[pos[hit]] = False
                    pos = pos[~hit]
            look = leave[pending]
            if look.size == 0:
                continue
            inserted[look] = False
            masks = np.zeros(look.size, dtype=np.int64)
            for k, r in enumerate(self.reqs):
                masks |= match_mask(r.match, H[look]).astype(np.int64) << k
            nxt = np.empty(look.size, dtype=np.int64)
            width = len(ports)
            keys = masks * width + cur[look]
            for key in np.unique(keys):
                mask, p_i = divmod(int(key), width)
                nxt[keys == key] = pid(self._next(mask, ports[p_i]))
            for rr in self.cfg.reroutes:
                src = port_ix.get(rr.port)
                if src is None:
                    continue
                on = np.nonzero(nxt == src)[0]
                if on.size:
                    hit = on[match_mask(rr.match, H[look[on]])]
                    nxt[hit] = pid(Port(rr.replica, rr.port.occ))
            egress = pid(EGRESS)
            done = look[nxt == egress]
            active[done] = False
            go = nxt != egress
            moving = look[go]
            cur[moving] = nxt[go]
            arrive[moving] = True
            for b in self.cfg.bypasses:
                b_i = port_ix.get(b.port)
                if b_i is None:
                    continue
                on = moving[cur[moving] == b_i]
                if on.size:
                    arrive[on[match_mask(b.match, H[on])]] = False
        return [Outcome(tuple(hops[i]), None if dropped[i] else tuple(int(v) for v in H[i]))
                for i in range(n)]

    def _visit_batch(self, box: str, sel: np.ndarray, H: np.ndarray, hops, dropped, active):
        rules = self.rules[box]
        win = first_match_index(rules, H[sel], self.layout)
        names = [r.behavior for r in rules] + [self.defaults[box]]
        for w in np.unique(win):
            b = names[w]
            part = sel[win == w]
            for i in part.tolist():
                hops[i].append((box, b))
            if b == DENY:
                dropped[part] = True
                active[part] = False
                continue
            rw = self._rewrite(b)
            if rw is not None:
                H[part, rw[0]] = rw[1]


def match_mask(m: MatchSpec, H: np.ndarray) -> np.ndarray:
    ok = np.ones(H.shape[0], dtype=bool)
    for j, name in enumerate(m.layout.names):
        fm = m.fields.get(name)
        if fm is not None:
            col = H[:, j]
            ok &= (col >= fm.lo) & (col <= fm.hi)
    return ok


def first_match_index(rules, H: np.ndarray, layout, chunk: int = 4096) -> np.ndarray:
    """Index of the first matching rule per row; ``len(rules)`` when none match."""
    n = H.shape[0]
    k = len(rules)
    out = np.full(n, k, dtype=np.int64)
    if k == 0 or n == 0:
        return out
    widths = [f.width for f in layout.fields]
    lo = np.zeros((k, len(widths)), dtype=np.int64)
    hi = np.array([[(1 << w) - 1 for w in widths]] * k, dtype=np.int64)
    for i, r in enumerate(rules):
        for j, name in enumerate(layout.names):
            fm = r.match.fields.get(name)
            if fm is not None:
                lo[i, j] = fm.lo
                hi[i, j] = fm.hi
    rows = max(1, chunk * 64 // max(k, 1))
    for s in range(0, n, rows):
        part = H[s:s + rows, None, :]
        m = ((part >= lo[None]) & (part <= hi[None])).all(axis=2)
        anyhit = m.any(axis=1)
        first = m.argmax(axis=1)
        out[s:s + rows] = np.where(anyhit, first, k)
    return out
