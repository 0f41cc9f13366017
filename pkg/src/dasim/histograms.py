"""Demographic cell schemas, histograms, aggregation, and synthetic
enumeration data.

A histogram is a flat non-negative integer count vector over the cross
product of schema axes.  The production-scale schema is voting age (2)
x Hispanic origin (2) x race (63) x housing type (8) = 2016 cells; the
desk-scale default shrinks race to 6 major categories and housing to 2,
which keeps every code path intact at 48 cells.  Published statistics
are integer linear combinations of cells, collected in an aggregation
matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import geo
from .errors import ParameterError, SchemaError


@dataclass(frozen=True)
class CellSchema:
    """Ordered demographic axes, each a (name, cardinality) pair."""

    axes: tuple[tuple[str, int], ...]

    def __post_init__(self) -> None:
        if not self.axes:
            raise SchemaError("schema needs at least one axis")
        names = [n for n, _ in self.axes]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate axis names in {names}")
        for name, card in self.axes:
            if card < 2:
                raise SchemaError(f"axis {name!r} must have at least 2 categories")

    @property
    def size(self) -> int:
        out = 1
        for _, card in self.axes:
            out *= card
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(card for _, card in self.axes)

    def axis_index(self, name: str) -> int:
        for i, (n, _) in enumerate(self.axes):
            if n == name:
                return i
        raise SchemaError(f"no axis named {name!r}")

    def cell_index(self, values: Sequence[int]) -> int:
        """Flat index of one category combination."""
        if len(values) != len(self.axes):
            raise SchemaError("one category value per axis required")
        return int(np.ravel_multi_index(tuple(values), self.shape))


DESK_SCHEMA = CellSchema(
    (("voting_age", 2), ("hispanic", 2), ("race", 6), ("housing", 2))
)
FULL_SCHEMA = CellSchema(
    (("voting_age", 2), ("hispanic", 2), ("race", 63), ("housing", 8))
)

# Category labels for the 6-way race axis.  At full scale the race axis
# is the 63 non-empty subsets of these six base groups, indexed by
# bitmask - 1 (so index 0 = white alone, index 2 = white+black, ...).
RACE_BASE = ("white", "black", "aian", "asian", "nhpi", "other")


@dataclass(frozen=True)
class Histogram:
    """Non-negative integer counts over the cells of one geography."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.counts)
        if arr.ndim != 1:
            raise SchemaError("histogram counts must be one-dimensional")
        if not np.issubdtype(arr.dtype, np.integer):
            raise SchemaError("histogram counts must be integers")
        if (arr < 0).any():
            raise SchemaError("histogram counts must be non-negative")
        object.__setattr__(self, "counts", arr.astype(np.int64))

    def __len__(self) -> int:
        return self.counts.size

    def __add__(self, other: "Histogram") -> "Histogram":
        return Histogram(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class AggregationMatrix:
    """Published statistics as small-integer rows over schema cells."""

    labels: tuple[str, ...]
    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix)
        if m.ndim != 2 or m.shape[0] != len(self.labels):
            raise SchemaError("one matrix row per statistic label required")
        if len(set(self.labels)) != len(self.labels):
            raise SchemaError("statistic labels must be unique")
        if not np.issubdtype(m.dtype, np.integer):
            raise SchemaError("aggregation entries must be integers")
        if (m == 0).all(axis=1).any():
            raise SchemaError("every statistic must touch at least one cell")
        object.__setattr__(self, "matrix", m.astype(np.int64))

    def row(self, label: str) -> np.ndarray:
        try:
            return self.matrix[self.labels.index(label)]
        except ValueError:
            raise SchemaError(f"no statistic named {label!r}") from None


def default_statistics(schema: CellSchema) -> AggregationMatrix:
    """Total, voting-age, Hispanic, and per-race-category statistics.

    With a 63-way race axis the race statistics are the six alone
    categories plus a pooled two_or_more; otherwise one statistic per
    race category, named from RACE_BASE when the cardinality matches.
    """
    shape = schema.shape
    size = schema.size
    labels: list[str] = []
    rows: list[np.ndarray] = []

    def axis_rows(axis_name: str, wanted: Mapping[str, Sequence[int]]) -> None:
        ai = schema.axis_index(axis_name)
        grid = np.indices(shape)[ai].reshape(size)
        for label, values in wanted.items():
            labels.append(label)
            rows.append(np.isin(grid, values).astype(np.int64))

    labels.append("total")
    rows.append(np.ones(size, dtype=np.int64))
    axis_rows("voting_age", {"voting_age": [1]})
    axis_rows("hispanic", {"hispanic": [1]})

    race_card = dict(schema.axes).get("race")
    if race_card == 63:
        alone = {RACE_BASE[i] + "_alone": [(1 << i) - 1] for i in range(6)}
        multi = [m - 1 for m in range(1, 64) if bin(m).count("1") >= 2]
        axis_rows("race", {**alone, "two_or_more": multi})
    elif race_card is not None:
        names = RACE_BASE if race_card == len(RACE_BASE) else tuple(
            f"race_{i}" for i in range(race_card)
        )
        axis_rows("race", {names[v]: [v] for v in range(race_card)})
    return AggregationMatrix(tuple(labels), np.array(rows, dtype=np.int64))


def aggregate(hist: Union[Histogram, np.ndarray], agg: AggregationMatrix) -> np.ndarray:
    """Statistic values of one histogram, aligned to ``agg.labels``."""
    counts = hist.counts if isinstance(hist, Histogram) else np.asarray(hist)
    if counts.shape[0] != agg.matrix.shape[1]:
        raise SchemaError(
            f"histogram has {counts.shape[0]} cells, aggregation expects {agg.matrix.shape[1]}"
        )
    return agg.matrix @ counts


class HistogramDataset:
    """Per-block histograms plus derived aggregates on both spines.

    Parents are sums of their children by construction, so hierarchy
    consistency is automatic for any dataset represented this way.
    """

    def __init__(self, spine: geo.Spine, schema: CellSchema,
                 block_counts: Mapping[str, np.ndarray], require_int: bool = True):
        self.spine = spine
        self.schema = schema
        missing = set(spine.blocks) - set(block_counts)
        extra = set(block_counts) - set(spine.blocks)
        if missing or extra:
            raise SchemaError(
                f"block counts must cover the spine exactly "
                f"({len(missing)} missing, {len(extra)} unknown)"
            )
        size = schema.size
        self._block_counts: dict[str, np.ndarray] = {}
        for raw in spine.blocks:
            arr = np.asarray(block_counts[raw])
            if arr.shape != (size,):
                raise SchemaError(f"histogram for {raw} has shape {arr.shape}, want ({size},)")
            if require_int:
                Histogram(arr)  # validates dtype and sign
                self._block_counts[raw] = arr.astype(np.int64)
            else:
                if not np.isfinite(arr).all():
                    raise SchemaError(f"histogram for {raw} has non-finite entries")
                self._block_counts[raw] = arr.astype(float)
        self._dtype = np.int64 if require_int else float
        self._node_cache: dict[str, np.ndarray] = {}

    def block_histogram(self, raw: str) -> np.ndarray:
        return self._block_counts[raw]

    def node_histogram(self, node_id: str) -> np.ndarray:
        """Histogram of an optimized-spine node (sum of its blocks)."""
        if node_id not in self._node_cache:
            blocks = self.spine.nmf_blocks(node_id)
            out = np.zeros(self.schema.size, dtype=self._dtype)
            for b in blocks:
                out += self._block_counts[b]
            self._node_cache[node_id] = out
        return self._node_cache[node_id]

    def target_histogram(self, target: geo.GeoId) -> np.ndarray:
        """Histogram of any standard-census target (sum of whole blocks)."""
        out = np.zeros(self.schema.size, dtype=self._dtype)
        for b in sorted(self.spine.blocks_of_target(target)):
            out += self._block_counts[b]
        return out

    def statistics(self, target: geo.GeoId, agg: AggregationMatrix) -> np.ndarray:
        return aggregate(self.target_histogram(target), agg)

    @property
    def total_population(self) -> int:
        return int(self.node_histogram(geo.NATION_ID).sum())


class CefDataset(HistogramDataset):
    """Ground-truth enumeration histograms for a simulated world."""


@dataclass(frozen=True)
class GenerationProfile:
    """Knobs for the synthetic enumeration generator.

    Block populations are rounded lognormals, skewed like real block
    counts (median near 23 with a long right tail), with a point mass
    of unpopulated blocks.  Demographic mixes vary block to block so
    that per-block shares span a wide range.
    """

    median_block_pop: float = 23.0
    log_sigma: float = 1.25
    zero_pop_prob: float = 0.05
    adult_beta: tuple[float, float] = (15.0, 5.0)
    hispanic_beta: tuple[float, float] = (2.0, 8.0)
    race_concentration: float = 2.0
    group_quarters_share: float = 0.03

    def __post_init__(self) -> None:
        if self.median_block_pop <= 0 or self.log_sigma <= 0:
            raise ParameterError("median_block_pop and log_sigma must be positive")
        if not (0.0 <= self.zero_pop_prob < 1.0):
            raise ParameterError("zero_pop_prob must be in [0, 1)")
        for a, b in (self.adult_beta, self.hispanic_beta):
            if a <= 0 or b <= 0:
                raise ParameterError("beta parameters must be positive")
        if self.race_concentration <= 0:
            raise ParameterError("race_concentration must be positive")
        if not (0.0 <= self.group_quarters_share < 1.0):
            raise ParameterError("group_quarters_share must be in [0, 1)")


def _race_base_shares(card: int) -> np.ndarray:
    if card == 6:
        return np.array([0.60, 0.12, 0.01, 0.05, 0.002, 0.218])
    if card == 63:
        # alone categories carry most of the mass; combinations split a
        # small remainder, thinning with the number of groups combined
        six = _race_base_shares(6)
        out = np.zeros(63)
        for mask in range(1, 64):
            bits = [i for i in range(6) if mask >> i & 1]
            if len(bits) == 1:
                out[mask - 1] = six[bits[0]] * 0.95
            else:
                out[mask - 1] = 0.05 / (len(bits) ** 2)
        return out / out.sum()
    return np.full(card, 1.0 / card)


def block_seed(seed: int, raw_geocode: str) -> tuple[int, int]:
    """Stable per-geography stream key, mixable into default_rng."""
    return (int(seed), int(raw_geocode))


def generate_synthetic_cef(
    spine: geo.Spine,
    seed: int,
    profile: Optional[GenerationProfile] = None,
    schema: CellSchema = DESK_SCHEMA,
) -> CefDataset:
    """Draw a deterministic synthetic enumeration for ``spine``.

    Each block gets its own RNG stream keyed by (seed, geocode), so
    a block's truth does not depend on spine iteration order.
    """
    profile = profile or GenerationProfile()
    shape = schema.shape
    mu = float(np.log(profile.median_block_pop))
    counts: dict[str, np.ndarray] = {}
    for raw in spine.blocks:
        rng = np.random.default_rng(block_seed(seed, raw))
        if rng.random() < profile.zero_pop_prob:
            counts[raw] = np.zeros(schema.size, dtype=np.int64)
            continue
        pop = max(1, int(round(float(rng.lognormal(mu, profile.log_sigma)))))
        probs = np.ones(shape)
        for ai, (name, card) in enumerate(schema.axes):
            if name == "voting_age":
                p = rng.beta(*profile.adult_beta)
                axis_p = np.array([1.0 - p, p])
            elif name == "hispanic":
                p = rng.beta(*profile.hispanic_beta)
                axis_p = np.array([1.0 - p, p])
            elif name == "race":
                base = _race_base_shares(card)
                axis_p = rng.dirichlet(base * profile.race_concentration * card)
            elif name == "housing":
                gq = profile.group_quarters_share
                axis_p = np.full(card, gq / (card - 1))
                axis_p[0] = 1.0 - gq
            else:
                axis_p = rng.dirichlet(np.ones(card))
            view = [1] * len(shape)
            view[ai] = card
            probs = probs * axis_p.reshape(view)
        counts[raw] = rng.multinomial(pop, probs.reshape(-1)).astype(np.int64)
    return CefDataset(spine, schema, counts)
