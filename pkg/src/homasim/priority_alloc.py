"""Unscheduled/scheduled priority split and unscheduled size cutoffs.

Levels are numbered ``0 .. total_levels - 1`` with the highest number being
the most urgent. Unscheduled traffic gets the top ``unsched_levels`` levels
and scheduled traffic the rest. Within the unscheduled band, cutoffs are
chosen so every level carries the same share of unscheduled bytes, with
shorter messages on higher levels.
"""

from __future__ import annotations

import bisect
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence


class DistributionError(ValueError):
    pass


@dataclass(frozen=True)
class SizeDistribution:
    """Discrete message-size distribution given as a step CDF.

    ``sizes`` are strictly increasing byte counts and ``cumulative`` the
    fraction of messages with size <= ``sizes[i]``; the last value is 1.
    """

    sizes: tuple[int, ...]
    cumulative: tuple[float, ...]
    name: str = ""

    def __post_init__(self):
        if not self.sizes:
            raise DistributionError("empty distribution")
        if len(self.sizes) != len(self.cumulative):
            raise DistributionError("sizes and cumulative fractions differ in length")
        if self.sizes[0] < 1:
            raise DistributionError("message sizes must be >= 1 byte")
        for a, b in zip(self.sizes, self.sizes[1:]):
            if b <= a:
                raise DistributionError(f"sizes not strictly increasing at {b}")
        for a, b in zip(self.cumulative, self.cumulative[1:]):
            if b < a:
                raise DistributionError("cumulative fractions decrease")
        if self.cumulative[0] < 0 or not math.isclose(self.cumulative[-1], 1.0, abs_tol=1e-9):
            raise DistributionError("cumulative fractions must end at 1.0")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, float]], name: str = "") -> SizeDistribution:
        pairs = list(pairs)
        return cls(tuple(int(s) for s, _ in pairs), tuple(float(f) for _, f in pairs), name)

    @classmethod
    def from_weights(cls, weights: dict[int, float], name: str = "") -> SizeDistribution:
        """Build from ``size -> count`` (or probability mass)."""
        if not weights:
            raise DistributionError("empty distribution")
        total = float(sum(weights.values()))
        sizes = sorted(s for s, w in weights.items() if w > 0)
        cum, acc = [], 0.0
        for s in sizes:
            acc += weights[s]
            cum.append(acc / total)
        cum[-1] = 1.0
        return cls(tuple(sizes), tuple(cum), name)

    @classmethod
    def single(cls, size: int) -> SizeDistribution:
        return cls((int(size),), (1.0,), f"fixed-{size}")

    @property
    def probabilities(self) -> list[float]:
        prev = 0.0
        out = []
        for c in self.cumulative:
            out.append(c - prev)
            prev = c
        return out

    def mean(self) -> float:
        return sum(s * p for s, p in zip(self.sizes, self.probabilities))

    def message_cdf(self, size: int) -> float:
        """Fraction of messages no larger than ``size``."""
        i = bisect.bisect_right(self.sizes, size)
        return self.cumulative[i - 1] if i else 0.0

    def byte_cdf(self, size: int) -> float:
        """Fraction of all bytes carried by messages no larger than ``size``."""
        total = partial = 0.0
        for s, p in zip(self.sizes, self.probabilities):
            total += s * p
            if s <= size:
                partial += s * p
        return partial / total

    def quantile(self, u: float) -> int:
        """Smallest size whose cumulative fraction reaches ``u`` (inverse transform)."""
        i = bisect.bisect_left(self.cumulative, u)
        return self.sizes[min(i, len(self.sizes) - 1)]

    def unscheduled_fraction(self, unsched_limit: int) -> float:
        sched = total = 0.0
        for s, p in zip(self.sizes, self.probabilities):
            total += s * p
            sched += min(s, unsched_limit) * p
        return sched / total


def load_cdf(path: str | Path) -> SizeDistribution:
    """Read ``size<TAB>cumulative_fraction`` lines; ``#`` starts a comment."""
    path = Path(path)
    pairs = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DistributionError(f"{path}:{lineno}: expected 'size<TAB>fraction'")
        try:
            pairs.append((int(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise DistributionError(f"{path}:{lineno}: {exc}") from None
    try:
        return SizeDistribution.from_pairs(pairs, name=path.stem)
    except DistributionError as exc:
        raise DistributionError(f"{path}: {exc}") from None


def write_cdf(dist: SizeDistribution, path: str | Path, header: Sequence[str] = ()) -> None:
    lines = [f"# {h}" for h in header]
    lines += [f"{s}\t{c:.9f}" for s, c in zip(dist.sizes, dist.cumulative)]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class PriorityAllocation:
    total_levels: int
    unsched_levels: int
    cutoffs: tuple[int, ...]
    unsched_limit: int
    unsched_fraction: float = 1.0
    version: int = 0

    @property
    def sched_levels(self) -> int:
        return self.total_levels - self.unsched_levels

    @property
    def highest(self) -> int:
        return self.total_levels - 1

    @property
    def lowest_unsched(self) -> int:
        return self.total_levels - self.unsched_levels

    def sched_level(self, rank_from_bottom: int) -> int:
        """Scheduled level ``L_i``; levels beyond the scheduled band clamp to the top one."""
        top = max(self.sched_levels - 1, 0)
        return min(rank_from_bottom, top)


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def allocate(dist: SizeDistribution, unsched_limit: int, total_levels: int = 8,
             unsched_levels: int | None = None, cutoffs: Sequence[int] | None = None
             ) -> PriorityAllocation:
    """Split ``total_levels`` between unscheduled and scheduled traffic.

    ``unsched_levels`` and ``cutoffs`` override the computed values.
    """
    if total_levels < 2:
        raise ValueError("total_levels must be >= 2")
    if unsched_limit < 0:
        raise ValueError("unsched_limit must be >= 0")
    probs = dist.probabilities
    total_bytes = sum(s * p for s, p in zip(dist.sizes, probs))
    unsched_mass = [min(s, unsched_limit) * p for s, p in zip(dist.sizes, probs)]
    unsched_total = sum(unsched_mass)
    frac = unsched_total / total_bytes
    has_scheduled = dist.sizes[-1] > unsched_limit

    if unsched_levels is None:
        if has_scheduled:
            n_u = min(max(_round_half_up(frac * total_levels), 1), total_levels - 1)
        else:
            n_u = total_levels
    else:
        if not 1 <= unsched_levels <= total_levels:
            raise ValueError("unsched_levels must be within 1..total_levels")
        n_u = unsched_levels

    if cutoffs is not None:
        cuts = tuple(sorted(set(int(c) for c in cutoffs)))
    else:
        cuts = _equal_byte_cutoffs(dist.sizes, unsched_mass, unsched_total, n_u)
    return PriorityAllocation(total_levels, n_u, cuts, unsched_limit, frac)


def _equal_byte_cutoffs(sizes: Sequence[int], mass: Sequence[float], total: float,
                        levels: int) -> tuple[int, ...]:
    if levels <= 1 or total <= 0:
        return ()
    cuts: list[int] = []
    acc = 0.0
    j = 1
    eps = 1e-12 * total
    for s, m in zip(sizes, mass):
        acc += m
        # An atom that reaches a quantile belongs wholly to the higher level.
        while j < levels and acc + eps >= total * j / levels:
            if not cuts or cuts[-1] != s:
                cuts.append(s)
            j += 1
        if j >= levels:
            break
    # The largest size never needs a cutoff above it.
    if cuts and cuts[-1] >= sizes[-1]:
        cuts.pop()
    return tuple(cuts)


def unsched_priority_for(size: int, alloc: PriorityAllocation) -> int:
    """Level used for the unscheduled bytes of a message of ``size`` bytes.

    Sizes equal to a cutoff go to the higher-priority side.
    """
    band = bisect.bisect_left(alloc.cutoffs, size)
    return max(alloc.highest - band, alloc.lowest_unsched)


@dataclass
class OnlineSizeEstimator:
    """Per-receiver histogram of incoming message sizes.

    ``maybe_recompute`` refreshes the allocation at most once per
    ``interval_ns``; until the first observation the static allocation is used.
    """

    static: PriorityAllocation
    interval_ns: int = 10_000_000
    counts: Counter = field(default_factory=Counter)
    current: PriorityAllocation | None = None
    _last: int = -1
    _version: int = 0

    def observe(self, size: int) -> None:
        self.counts[size] += 1

    @property
    def allocation(self) -> PriorityAllocation:
        return self.current or self.static

    def distribution(self) -> SizeDistribution | None:
        if not self.counts:
            return None
        return SizeDistribution.from_weights(dict(self.counts), name="observed")

    def maybe_recompute(self, now: int) -> bool:
        if not self.counts:
            return False
        if self._last >= 0 and now - self._last < self.interval_ns:
            return False
        self._last = now
        s = self.static
        dist = self.distribution()
        alloc = allocate(dist, s.unsched_limit, s.total_levels)
        self._version += 1
        self.current = PriorityAllocation(alloc.total_levels, alloc.unsched_levels, alloc.cutoffs,
                                          alloc.unsched_limit, alloc.unsched_fraction,
                                          self._version)
        return True
