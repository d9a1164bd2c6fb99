"""Deterministic mergeable quantile summary with a bounded rank error.

Threshold fitting needs one order statistic per detector unit over a
population that can be too large to sort in memory. This summary keeps
weighted level buffers (level ``l`` items stand for ``2**l`` original
values). When a level overflows its capacity the buffer is sorted and every
other element is promoted to the next level, alternating the kept parity.
Each such compaction perturbs any rank by at most the level weight, so with
capacity ``ceil(level_budget / epsilon)`` the total rank error stays below
``epsilon * n`` for any stream shorter than ``capacity * 2**level_budget``.

Everything is deterministic: no randomness, and a fixed sequence of
``update``/``merge`` calls always yields the same state. All stored values
are elements of the original stream (compaction selects, never averages),
so queries return genuine population values.
"""

from __future__ import annotations

import math

import numpy as np

_LEVEL_BUDGET = 20  # supported stream length: capacity * 2**_LEVEL_BUDGET values


class QuantileSketch:
    """Streaming rank summary; see module docstring for the error model."""

    def __init__(self, epsilon: float = 1e-3):
        if not 0.0 < epsilon < 1.0:
            raise ValueError("epsilon must be in (0, 1)")
        self.epsilon = float(epsilon)
        cap = math.ceil(_LEVEL_BUDGET / epsilon)
        self.capacity = cap + (cap % 2)  # even, so buffers pair up cleanly
        self._levels: list[np.ndarray] = [np.empty(0, dtype=np.float64)]
        self._parity: list[int] = [0]
        self._pending: list[np.ndarray] = []  # level-0 arrivals not yet folded in
        self._pending_count = 0
        self.count = 0
        # sum of compaction weights: worst-case rank perturbation so far
        self.rank_error_bound = 0

    def update(self, values: np.ndarray) -> None:
        """Ingest a batch of finite values."""
        arr = np.asarray(values, dtype=np.float64).ravel()
        if arr.size == 0:
            return
        if not np.all(np.isfinite(arr)):
            raise ValueError("sketch input must be finite")
        self._pending.append(arr)
        self._pending_count += arr.size
        self.count += arr.size
        if self._pending_count + self._levels[0].size >= self.capacity:
            self._flush_pending()
            self._compact_overflowing()

    def _flush_pending(self) -> None:
        if self._pending:
            self._levels[0] = np.concatenate([self._levels[0], *self._pending])
            self._pending = []
            self._pending_count = 0

    def _compact_overflowing(self) -> None:
        level = 0
        while level < len(self._levels):
            if self._levels[level].size >= self.capacity:
                self._compact_level(level)
            level += 1
        if len(self._levels) > _LEVEL_BUDGET + 1:
            raise ValueError(
                f"stream too long for epsilon={self.epsilon}: exceeded "
                f"{_LEVEL_BUDGET} compaction levels"
            )

    def _compact_level(self, level: int) -> None:
        buf = np.sort(self._levels[level])
        if buf.size % 2 == 1:
            # hold the largest element back so the rest pairs up
            leftover, buf = buf[-1:], buf[:-1]
        else:
            leftover = buf[:0]
        promoted = buf[self._parity[level] :: 2]
        self._parity[level] ^= 1
        self._levels[level] = leftover
        if level + 1 == len(self._levels):
            self._levels.append(np.empty(0, dtype=np.float64))
            self._parity.append(0)
        self._levels[level + 1] = np.concatenate([self._levels[level + 1], promoted])
        self.rank_error_bound += 1 << level

    def merge(self, other: "QuantileSketch") -> None:
        """Fold another sketch of the same epsilon into this one."""
        if not isinstance(other, QuantileSketch):
            raise TypeError("can only merge another QuantileSketch")
        if other.epsilon != self.epsilon:
            raise ValueError("cannot merge sketches with different epsilon")
        other._flush_pending()
        self._flush_pending()
        while len(self._levels) < len(other._levels):
            self._levels.append(np.empty(0, dtype=np.float64))
            self._parity.append(0)
        for level, buf in enumerate(other._levels):
            if buf.size:
                self._levels[level] = np.concatenate([self._levels[level], buf])
        self.count += other.count
        self.rank_error_bound += other.rank_error_bound
        self._compact_overflowing()

    def _materialize(self) -> tuple[np.ndarray, np.ndarray]:
        self._flush_pending()
        values = []
        weights = []
        for level, buf in enumerate(self._levels):
            if buf.size:
                values.append(buf)
                weights.append(np.full(buf.size, 1 << level, dtype=np.int64))
        if not values:
            return np.empty(0), np.empty(0, dtype=np.int64)
        v = np.concatenate(values)
        w = np.concatenate(weights)
        order = np.argsort(v, kind="stable")
        return v[order], w[order]

    def value_at_rank(self, rank: int) -> float:
        """Value whose estimated 1-based rank is closest to ``rank`` from above."""
        if self.count == 0:
            raise ValueError("empty sketch")
        rank = min(max(1, rank), self.count)
        values, weights = self._materialize()
        cum = np.cumsum(weights)
        idx = int(np.searchsorted(cum, rank, side="left"))
        idx = min(idx, values.size - 1)
        return float(values[idx])

    def quantile(self, q: float) -> float:
        """Nearest-rank quantile: the value at 1-based rank ``ceil(q * n)``."""
        if not 0.0 <= q <= 1.0:
            raise ValueError("q must be in [0, 1]")
        return self.value_at_rank(math.ceil(q * self.count))
