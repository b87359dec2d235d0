"""Analytic cost model and wall-clock comparison of routed vs dense attention.

Counts are multiply-accumulates (MACs) for one forward pass of the attention
core (projections excluded, they are identical for both):

* dense: scores and weighted sum ``heads * 2 * T^2 * d_k`` plus the
  aggregate term ``T^2 * C``;
* routed: coarse region scoring ``R^2 * C`` plus the same two fine terms
  with ``T`` keys replaced by the ``k * S`` gathered keys.

Gathering moves ``2 * T * k * C`` scalars (keys and values); it is reported
as data movement and kept out of the MAC total.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from fractions import Fraction
from itertools import product
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor
from .vbra import AttentionParams, VbraConfig, dense_attention, vbra_attention

DEFAULT_SWEEP = {
    "dims": [(8, 8, 8), (16, 16, 16)],
    "regions": [(2, 2, 2), (4, 4, 4)],
    "ks": [1, 2, 4],
}
TIMING_FIELDS = ("dense_ms", "routed_ms", "speedup")


@dataclass(frozen=True)
class AttentionCost:
    tokens: int
    region_tokens: int
    regions: int
    k: int
    channels: int
    heads: int

    def __post_init__(self):
        if self.tokens != self.region_tokens * self.regions:
            raise ValueError("tokens must equal regions * tokens per region")
        if not 1 <= self.k <= self.regions:
            raise ValueError(f"k={self.k} must lie in [1, {self.regions}]")
        if self.channels % self.heads:
            raise ValueError("heads must divide channels")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def keys_per_query(self) -> int:
        return self.k * self.region_tokens

    @property
    def dense_score(self) -> int:
        return self.heads * 2 * self.tokens ** 2 * self.head_dim

    @property
    def dense_aggregate(self) -> int:
        return self.tokens ** 2 * self.channels

    @property
    def dense_total(self) -> int:
        return self.dense_score + self.dense_aggregate

    @property
    def coarse(self) -> int:
        return self.regions ** 2 * self.channels

    @property
    def fine_score(self) -> int:
        return self.heads * 2 * self.tokens * self.keys_per_query * self.head_dim

    @property
    def fine_aggregate(self) -> int:
        return self.tokens * self.keys_per_query * self.channels

    @property
    def fine_total(self) -> int:
        return self.fine_score + self.fine_aggregate

    @property
    def routed_total(self) -> int:
        return self.coarse + self.fine_total

    @property
    def gather_moves(self) -> int:
        return 2 * self.tokens * self.k * self.channels

    @property
    def score_ratio(self) -> Fraction:
        """Fine over dense score term; equals ``k * S / T`` exactly."""
        return Fraction(self.fine_score, self.dense_score)

    @property
    def total_ratio(self) -> Fraction:
        return Fraction(self.routed_total, self.dense_total)


def attention_cost(dims, region, k: int, channels: int, heads: int) -> AttentionCost:
    dims, region = tuple(dims), tuple(region)
    if any(n % s for n, s in zip(dims, region)):
        raise ValueError(f"region {region} does not tile volume {dims}")
    s = int(np.prod(region))
    t = int(np.prod(dims))
    return AttentionCost(t, s, t // s, k, channels, heads)


@dataclass
class BenchRecord:
    dims: tuple
    region: tuple
    k: int
    heads: int
    channels: int
    tokens: int
    region_tokens: int
    regions: int
    dense_macs: int
    routed_macs: int
    coarse_macs: int
    fine_macs: int
    gather_moves: int
    score_ratio: str
    total_ratio: float
    dense_ms: float = float("nan")
    routed_ms: float = float("nan")
    speedup: float = float("nan")

    @classmethod
    def from_cost(cls, dims, region, c: AttentionCost) -> "BenchRecord":
        return cls(tuple(dims), tuple(region), c.k, c.heads, c.channels, c.tokens, c.region_tokens, c.regions,
                   c.dense_total, c.routed_total, c.coarse, c.fine_total, c.gather_moves,
                   str(c.score_ratio), float(c.total_ratio))


def _median_ms(fn, repeats: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


def time_attention(dims, region, k: int, channels: int = 16, heads: int = 2, repeats: int = 5,
                   seed: int = 0, dtype=np.float32) -> tuple[float, float]:
    """Median forward wall time (ms) of dense and routed attention on one random volume."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal(tuple(dims) + (channels,)), dtype=dtype)
    p = AttentionParams(*(Tensor(rng.standard_normal((channels, channels)) / np.sqrt(channels), dtype=dtype)
                          for _ in range(4)))
    cfg = VbraConfig(region, k, heads, channels)
    dense = _median_ms(lambda: dense_attention(x, p, heads), repeats)
    routed = _median_ms(lambda: vbra_attention(x, p, cfg), repeats)
    return dense, routed


def run_bench(dims_list: Iterable[Sequence[int]], regions: Iterable[Sequence[int]], ks: Iterable[int],
              channels: int = 16, heads: int = 2, repeats: int = 5, timing: bool = True,
              seed: int = 0) -> list[BenchRecord]:
    """Sweep every valid (dims, region, k) combination; invalid tilings and k > R are skipped."""
    records = []
    for dims, region, k in product(dims_list, regions, ks):
        dims, region = tuple(int(v) for v in dims), tuple(int(v) for v in region)
        if any(n % s for n, s in zip(dims, region)):
            continue
        if k > int(np.prod(dims)) // int(np.prod(region)):
            continue
        cost = attention_cost(dims, region, k, channels, heads)
        rec = BenchRecord.from_cost(dims, region, cost)
        if timing:
            rec.dense_ms, rec.routed_ms = time_attention(dims, region, k, channels, heads, repeats, seed)
            rec.speedup = rec.dense_ms / rec.routed_ms
        records.append(rec)
    return records


_COLUMNS = [("dims", 12), ("region", 10), ("k", 3), ("T", 6), ("S", 5), ("R", 5), ("dense MACs", 14),
            ("routed MACs", 14), ("score ratio", 12), ("dense ms", 10), ("routed ms", 10), ("speedup", 8)]


def _fmt_dims(d) -> str:
    return "x".join(str(v) for v in d)


def format_table(records: Sequence[BenchRecord]) -> str:
    head = "  ".join(f"{name:>{w}}" for name, w in _COLUMNS)
    lines = [head, "-" * len(head)]
    for r in records:
        cells = [_fmt_dims(r.dims), _fmt_dims(r.region), r.k, r.tokens, r.region_tokens, r.regions,
                 r.dense_macs, r.routed_macs, r.score_ratio, f"{r.dense_ms:.2f}", f"{r.routed_ms:.2f}",
                 f"{r.speedup:.2f}"]
        lines.append("  ".join(f"{str(c):>{w}}" for c, (_, w) in zip(cells, _COLUMNS)))
    return "\n".join(lines) + "\n"


def format_records(records: Sequence[BenchRecord], timing: bool = True) -> str:
    """CSV rows; with ``timing=False`` the wall-clock columns are dropped (fully deterministic)."""
    fields = [f for f in asdict(records[0]) if timing or f not in TIMING_FIELDS] if records else []
    lines = [",".join(fields)]
    for r in records:
        d = asdict(r)
        lines.append(",".join(_fmt_dims(d[f]) if isinstance(d[f], tuple) else
                              repr(d[f]) if isinstance(d[f], float) else str(d[f]) for f in fields))
    return "\n".join(lines) + "\n"
