"""Discretized information metrics over a sliding window of (S, A, S') triples.

All quantities are in bits. Continuous feature vectors are mapped to integer
symbols by a :class:`DiscretizationScheme`; a :class:`TripleHistogram` keeps
sparse joint and marginal count tables for the last ``W`` triples and updates
them incrementally, so the entropies are available in O(1) per cycle.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from collections import deque
from dataclasses import asdict, dataclass
from itertools import chain
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

DEFAULT_WINDOW = 1000
DEFAULT_N_MIN = 100

# bytes for one occupied cell in a packed sparse table: uint64 key + uint32 count
PACKED_CELL_BYTES = 12


class EmptyDistributionError(ValueError):
    """Entropy requested for a distribution with no samples."""


class NotReadyError(RuntimeError):
    """Fewer samples in the window than the configured minimum."""


class DiscretizationScheme:
    """Per-dimension bin edges mapping real vectors to composite symbols.

    Each dimension with ``m`` edges has ``m - 1`` interior bins plus two
    unbounded outer bins, so ``N_d = m + 1``. Intervals are left-closed and
    right-open, except that a value exactly on the top edge belongs to the
    last interior bin.
    """

    def __init__(self, edges: Sequence[Sequence[float]]):
        if len(edges) == 0:
            raise ValueError("scheme needs at least one dimension")
        self.edges: list[list[float]] = []
        for d, e in enumerate(edges):
            e = [float(v) for v in e]
            if len(e) < 2:
                raise ValueError(f"dimension {d}: need at least two edges")
            if not all(math.isfinite(v) for v in e):
                raise ValueError(f"dimension {d}: edges must be finite")
            if any(b <= a for a, b in zip(e, e[1:])):
                raise ValueError(f"dimension {d}: edges must be strictly increasing")
            self.edges.append(e)
        self.bin_counts = [len(e) + 1 for e in self.edges]
        self.n_symbols = math.prod(self.bin_counts)
        # row-major strides
        strides = []
        acc = 1
        for n in reversed(self.bin_counts):
            strides.append(acc)
            acc *= n
        self.strides = strides[::-1]

    @classmethod
    def uniform(cls, ranges: Iterable[tuple[float, float, int]]) -> "DiscretizationScheme":
        """Build from ``(low, high, n_interior)`` per dimension."""
        edges = []
        for lo, hi, n in ranges:
            if n < 1 or not hi > lo:
                raise ValueError(f"bad range ({lo}, {hi}, {n})")
            edges.append(np.linspace(lo, hi, int(n) + 1).tolist())
        return cls(edges)

    @property
    def dim(self) -> int:
        return len(self.edges)

    def bin_index(self, d: int, x: float) -> int:
        e = self.edges[d]
        if x == e[-1]:
            return len(e) - 1
        return bisect_right(e, x)

    def unravel(self, symbol: int) -> tuple[int, ...]:
        if not 0 <= symbol < self.n_symbols:
            raise ValueError(f"symbol {symbol} out of range")
        out = []
        for s in self.strides:
            q, symbol = divmod(symbol, s)
            out.append(q)
        return tuple(out)

    def to_dict(self) -> dict:
        return {"edges": [list(e) for e in self.edges]}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "DiscretizationScheme":
        return cls(doc["edges"])

    def __eq__(self, other: object) -> bool:
        return isinstance(other, DiscretizationScheme) and self.edges == other.edges

    def __repr__(self) -> str:
        return f"DiscretizationScheme(bins={self.bin_counts})"


def discretize(features: Sequence[float], scheme: DiscretizationScheme) -> int:
    """Map a feature vector to its composite row-major symbol."""
    if len(features) != scheme.dim:
        raise ValueError(f"expected {scheme.dim} features, got {len(features)}")
    symbol = 0
    for d, x in enumerate(features):
        x = float(x)
        if not math.isfinite(x):
            raise ValueError(f"non-finite feature at dimension {d}: {x}")
        e = scheme.edges[d]
        i = len(e) - 1 if x == e[-1] else bisect_right(e, x)
        symbol += i * scheme.strides[d]
    return symbol


class SampleTriple(NamedTuple):
    s: int
    a: int
    s_next: int
    cycle_index: int = -1


def entropy(counts: Mapping[object, int] | Iterable[int], n: int) -> float:
    """Shannon entropy in bits of a count table holding ``n`` samples."""
    if n <= 0:
        raise EmptyDistributionError("entropy of an empty distribution")
    values = counts.values() if isinstance(counts, Mapping) else counts
    h = 0.0
    for c in values:
        if c > 0:
            p = c / n
            h -= p * math.log2(p)
    return h


class _CountTable:
    """Sparse counts plus a running sum of c*log2(c) for O(1) entropy."""

    __slots__ = ("counts", "clogc", "_table")

    def __init__(self, clogc_table: list[float]):
        self.counts: dict[int, int] = {}
        self.clogc = 0.0
        self._table = clogc_table

    def inc(self, key: int) -> None:
        c = self.counts.get(key, 0)
        self.counts[key] = c + 1
        t = self._table
        self.clogc += t[c + 1] - t[c]

    def dec(self, key: int) -> None:
        c = self.counts[key]
        if c == 1:
            del self.counts[key]
        else:
            self.counts[key] = c - 1
        t = self._table
        self.clogc += t[c - 1] - t[c]

    def entropy(self, n: int) -> float:
        # H = log2(n) - (1/n) * sum c log2 c
        h = math.log2(n) - self.clogc / n
        return h if h > 0.0 else 0.0


@dataclass(frozen=True)
class EntanglementMetrics:
    psi: float
    asymmetry: float
    memory: float
    h_s: float
    h_a: float
    h_s_next: float
    h_sa: float
    h_a_snext: float
    h_s_snext: float
    h_sas: float
    n: int

    @classmethod
    def from_entropies(cls, h_s, h_a, h_sn, h_sa, h_asn, h_ssn, h_sasn, n) -> "EntanglementMetrics":
        psi = h_sa + h_sn - h_sasn
        mi_a_sn = h_a + h_sn - h_asn
        mi_s_a = h_s + h_a - h_sa
        memory = h_s + h_sn - h_ssn
        return cls(
            psi=psi,
            asymmetry=mi_a_sn - mi_s_a,
            memory=memory,
            h_s=h_s,
            h_a=h_a,
            h_s_next=h_sn,
            h_sa=h_sa,
            h_a_snext=h_asn,
            h_s_snext=h_ssn,
            h_sas=h_sasn,
            n=n,
        )

    def as_dict(self) -> dict:
        return asdict(self)


TABLE_NAMES = ("sas", "sa", "as", "ss", "s", "a", "sn")


class TripleHistogram:
    """Sliding-window joint counts over (s, a, s') symbols.

    ``n_s`` is the symbol-space size shared by S and S', ``n_a`` the size of
    the action symbol space. Composite keys are packed into single integers.
    """

    def __init__(self, n_s: int, n_a: int, window: int = DEFAULT_WINDOW, n_min: int = DEFAULT_N_MIN):
        if window < 1:
            raise ValueError("window must be >= 1")
        if n_min < 1:
            raise ValueError("n_min must be >= 1")
        self.n_s = int(n_s)
        self.n_a = int(n_a)
        self.window = int(window)
        self.n_min = int(n_min)
        self.buffer: deque[SampleTriple] = deque()
        self._clogc = [0.0] + [c * math.log2(c) for c in range(1, self.window + 2)]
        self.tables = {name: _CountTable(self._clogc) for name in TABLE_NAMES}
        self._ordered = tuple(self.tables[name] for name in TABLE_NAMES)

    @property
    def n(self) -> int:
        return len(self.buffer)

    def keys(self, s: int, a: int, sn: int) -> tuple[int, int, int, int, int, int, int]:
        """Packed keys for (sas, sa, as, ss, s, a, sn)."""
        sa = s * self.n_a + a
        return (sa * self.n_s + sn, sa, a * self.n_s + sn, s * self.n_s + sn, s, a, sn)

    def push(self, t: SampleTriple) -> SampleTriple | None:
        """Insert a triple, evicting the oldest one when the window is full."""
        # table updates are inlined; this runs once per control cycle
        lg = self._clogc
        evicted = None
        if len(self.buffer) == self.window:
            evicted = self.buffer.popleft()
            for tab, k in zip(self._ordered, self.keys(evicted[0], evicted[1], evicted[2])):
                counts = tab.counts
                c = counts[k]
                if c == 1:
                    del counts[k]
                else:
                    counts[k] = c - 1
                tab.clogc += lg[c - 1] - lg[c]
        self.buffer.append(t)
        for tab, k in zip(self._ordered, self.keys(t[0], t[1], t[2])):
            counts = tab.counts
            c = counts.get(k, 0)
            counts[k] = c + 1
            tab.clogc += lg[c + 1] - lg[c]
        return evicted

    def counts(self, name: str) -> dict[int, int]:
        return self.tables[name].counts

    def occupied_cells(self) -> int:
        return sum(len(t.counts) for t in self.tables.values())

    def memory_bytes(self) -> int:
        """Footprint of the occupied cells in a packed sparse layout."""
        return self.occupied_cells() * PACKED_CELL_BYTES

    def to_dict(self) -> dict:
        return {
            "n_s": self.n_s,
            "n_a": self.n_a,
            "window": self.window,
            "n_min": self.n_min,
            "contents": [list(t) for t in self.buffer],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "TripleHistogram":
        h = cls(doc["n_s"], doc["n_a"], doc["window"], doc.get("n_min", DEFAULT_N_MIN))
        for row in doc["contents"]:
            h.push(SampleTriple(*row))
        return h


def compute_metrics(hist: TripleHistogram) -> EntanglementMetrics:
    """Metrics from the incrementally maintained tables."""
    n = len(hist.buffer)
    if n < hist.n_min:
        raise NotReadyError(f"{n} samples in window, need {hist.n_min}")
    t = hist.tables
    return EntanglementMetrics.from_entropies(
        t["s"].entropy(n),
        t["a"].entropy(n),
        t["sn"].entropy(n),
        t["sa"].entropy(n),
        t["as"].entropy(n),
        t["ss"].entropy(n),
        t["sas"].entropy(n),
        n,
    )


def batch_recompute_oracle(hist: TripleHistogram) -> EntanglementMetrics:
    """Rebuild every table from the raw ring buffer and recompute from scratch."""
    n = len(hist.buffer)
    if n < hist.n_min:
        raise NotReadyError(f"{n} samples in window, need {hist.n_min}")
    flat = np.fromiter(chain.from_iterable(hist.buffer), dtype=np.int64, count=4 * n)
    s, a, sn = flat.reshape(n, 4)[:, :3].T
    n_s, n_a = hist.n_s, hist.n_a

    def h(keys: np.ndarray) -> float:
        _, c = np.unique(keys, return_counts=True)
        p = c / n
        return float(-np.sum(p * np.log2(p)))

    return EntanglementMetrics.from_entropies(
        h(s),
        h(a),
        h(sn),
        h(s * n_a + a),
        h(a * n_s + sn),
        h(s * n_s + sn),
        h((s * n_a + a) * n_s + sn),
        n,
    )
