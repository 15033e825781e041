"""(2,4)-cuckoo hash table for small integer keys.

Two hash functions, four slots per bucket.  A lookup probes at most eight
slots.  Inserts evict along a random walk and the table doubles when a
walk exceeds ``max_kicks``.
"""

from __future__ import annotations

import random
from typing import Iterator

_EMPTY = -1
SLOTS = 4
_M1 = 0x9E3779B1
_M2 = 0x85EBCA77
_MASK32 = 0xFFFFFFFF


class CuckooTable:
    def __init__(self, buckets: int = 4096, max_kicks: int = 256, seed: int = 0):
        if buckets <= 0 or buckets & (buckets - 1):
            raise ValueError("bucket count must be a power of two")
        self.max_kicks = max_kicks
        self._rng = random.Random(seed)
        self._alloc(buckets)
        self._len = 0
        self._pending = None

    def _alloc(self, buckets: int):
        self.buckets = buckets
        self._shift = 32 - buckets.bit_length() + 1
        self._keys = [_EMPTY] * (buckets * SLOTS)
        self._vals = [0] * (buckets * SLOTS)

    def _b1(self, key: int) -> int:
        return (((key * _M1) & _MASK32) >> self._shift) * SLOTS

    def _b2(self, key: int) -> int:
        return ((((key ^ 0x5BD1E995) * _M2) & _MASK32) >> self._shift) * SLOTS

    def __len__(self):
        return self._len

    def get(self, key: int, default=None):
        keys = self._keys
        b = (((key * _M1) & _MASK32) >> self._shift) * SLOTS
        if keys[b] == key:
            return self._vals[b]
        if keys[b + 1] == key:
            return self._vals[b + 1]
        if keys[b + 2] == key:
            return self._vals[b + 2]
        if keys[b + 3] == key:
            return self._vals[b + 3]
        b = ((((key ^ 0x5BD1E995) * _M2) & _MASK32) >> self._shift) * SLOTS
        for i in range(b, b + SLOTS):
            if keys[i] == key:
                return self._vals[i]
        return default

    def __contains__(self, key: int) -> bool:
        return self._find(key) >= 0

    def __getitem__(self, key: int):
        i = self._find(key)
        if i < 0:
            raise KeyError(key)
        return self._vals[i]

    def _find(self, key: int) -> int:
        keys = self._keys
        for b in (self._b1(key), self._b2(key)):
            for i in range(b, b + SLOTS):
                if keys[i] == key:
                    return i
        return -1

    def __setitem__(self, key: int, value):
        if key < 0:
            raise KeyError("keys must be non-negative")
        i = self._find(key)
        if i >= 0:
            self._vals[i] = value
            return
        if not self._place(key, value):
            # the walk left some other entry homeless; a resize re-places it
            self._grow()
        self._len += 1

    def _place(self, key: int, value) -> bool:
        keys, vals = self._keys, self._vals
        for _ in range(self.max_kicks):
            for b in (self._b1(key), self._b2(key)):
                for i in range(b, b + SLOTS):
                    if keys[i] == _EMPTY:
                        keys[i] = key
                        vals[i] = value
                        return True
            b = self._b1(key) if self._rng.random() < 0.5 else self._b2(key)
            i = b + self._rng.randrange(SLOTS)
            keys[i], key = key, keys[i]
            vals[i], value = value, vals[i]
        self._pending = (key, value)
        return False

    def _grow(self):
        items = list(self.items())
        if self._pending is not None:
            items.append(self._pending)
            self._pending = None
        buckets = self.buckets * 2
        while True:
            self._alloc(buckets)
            if all(self._place(k, v) for k, v in items):
                return
            self._pending = None
            buckets *= 2

    def __delitem__(self, key: int):
        i = self._find(key)
        if i < 0:
            raise KeyError(key)
        self._keys[i] = _EMPTY
        self._vals[i] = 0
        self._len -= 1

    def pop(self, key: int, default=None):
        i = self._find(key)
        if i < 0:
            return default
        v = self._vals[i]
        self._keys[i] = _EMPTY
        self._vals[i] = 0
        self._len -= 1
        return v

    def keys(self) -> Iterator[int]:
        return (k for k in self._keys if k != _EMPTY)

    def items(self) -> Iterator[tuple[int, object]]:
        return ((k, v) for k, v in zip(self._keys, self._vals) if k != _EMPTY)

    def __iter__(self):
        return self.keys()

    def memory_bytes(self, key_bytes: int = 2, value_bytes: int = 2) -> int:
        return self.buckets * SLOTS * (key_bytes + value_bytes)

    def copy(self) -> "CuckooTable":
        t = CuckooTable.__new__(CuckooTable)
        t.max_kicks = self.max_kicks
        t._rng = random.Random(self._rng.random())
        t.buckets = self.buckets
        t._shift = self._shift
        t._keys = list(self._keys)
        t._vals = list(self._vals)
        t._len = self._len
        t._pending = None
        return t
