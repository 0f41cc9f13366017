"""Geographic spines, block geocode parsing, and off-spine composition.

Two spines matter here.  The standard census spine is
nation > state > county > tract > block group > block, with voting
districts and places as off-spine unions of whole blocks.  The noisy
measurement file is published on its own optimized spine: sub-state
units are split into AI/AN and non-AI/AN portions, tracts are replaced
by tract-equivalents, and block groups are replaced by optimized block
groups that regroup blocks without regard to the standard block-group
digit.

A block geocode is a fixed-width 31-digit string.  One-based positions:

    1      AI/AN flag (0 or 1)
    2-3    state FIPS
    4-5    spine optimization code ("10" = on spine, county or below)
    6-8    county FIPS
    9-12   tract FIPS-equivalent
    13-15  optimized block-group FIPS-equivalent
    16-17  state FIPS (GEOID part)
    18-20  county FIPS (GEOID part)
    21-26  tract FIPS (GEOID part)
    27     block-group digit, repeats the first digit of the block FIPS
    28-31  block FIPS

The 15-digit census GEOID concatenates positions 16-26 with 28-31; the
redundant position 27 is dropped.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import EmptyTarget, InconsistentGeocode, MalformedGeocode, ParameterError

GEOCODE_LENGTH = 31
NATION_ID = "US"

# Prefix lengths that identify optimized-spine node ids.
_NMF_PREFIX = {"county": 8, "tract": 12, "opt_blockgroup": 15}


class GeoLevel(enum.Enum):
    BLOCK = "block"
    OPT_BLOCKGROUP = "optimized_blockgroup"
    BLOCKGROUP = "blockgroup"
    TRACT = "tract"
    COUNTY = "county"
    STATE = "state"
    VTD = "vtd"
    PLACE = "place"
    NATION = "nation"

    @property
    def on_spine(self) -> bool:
        """True if every unit of this level is a node of the optimized spine."""
        return self in _ON_SPINE

    @classmethod
    def from_name(cls, name: str) -> "GeoLevel":
        for lv in cls:
            if lv.value == name:
                return lv
        raise ParameterError(f"unknown geographic level {name!r}")


_ON_SPINE = {
    GeoLevel.BLOCK,
    GeoLevel.OPT_BLOCKGROUP,
    GeoLevel.TRACT,
    GeoLevel.COUNTY,
    GeoLevel.STATE,
    GeoLevel.NATION,
}

# GEOID widths for standard census identifiers.  VTD is state+county+6,
# place is state+5.  Nation uses the literal "US".
GEOID_WIDTH = {
    GeoLevel.BLOCK: 15,
    GeoLevel.BLOCKGROUP: 12,
    GeoLevel.TRACT: 11,
    GeoLevel.COUNTY: 5,
    GeoLevel.STATE: 2,
    GeoLevel.VTD: 11,
    GeoLevel.PLACE: 7,
    GeoLevel.NATION: 2,
}

# Optimized-spine levels ordered root first; composition descends this.
NMF_LEVEL_ORDER = (
    GeoLevel.NATION,
    GeoLevel.STATE,
    GeoLevel.COUNTY,
    GeoLevel.TRACT,
    GeoLevel.OPT_BLOCKGROUP,
    GeoLevel.BLOCK,
)


@dataclass(frozen=True)
class GeoCode:
    """Parsed fields of a 31-digit block geocode, all kept as strings."""

    aian_flag: str
    state_fips: str
    spine_opt_code: str
    county_fips: str
    tract_equiv: str
    opt_blockgroup_equiv: str
    geoid_state: str
    geoid_county: str
    geoid_tract: str
    bg_digit: str
    block_fips: str

    @property
    def raw(self) -> str:
        """Reassemble the original 31-digit string."""
        return (
            self.aian_flag
            + self.state_fips
            + self.spine_opt_code
            + self.county_fips
            + self.tract_equiv
            + self.opt_blockgroup_equiv
            + self.geoid_state
            + self.geoid_county
            + self.geoid_tract
            + self.bg_digit
            + self.block_fips
        )

    @property
    def geoid(self) -> str:
        """15-digit census block GEOID (drops the redundant digit 27)."""
        return self.geoid_state + self.geoid_county + self.geoid_tract + self.block_fips


@dataclass(frozen=True)
class GeoId:
    """A standard census identifier: level plus fixed-width code."""

    level: GeoLevel
    code: str

    def __post_init__(self) -> None:
        if self.level is GeoLevel.OPT_BLOCKGROUP:
            raise ParameterError("optimized block groups carry spine node ids, not GEOIDs")
        width = GEOID_WIDTH[self.level]
        if self.level is GeoLevel.NATION:
            if self.code != NATION_ID:
                raise ParameterError(f"nation GeoId code must be {NATION_ID!r}")
            return
        if len(self.code) != width or not self.code.isdigit():
            raise ParameterError(
                f"{self.level.value} GeoId must be {width} digits, got {self.code!r}"
            )


def parse_geocode(raw: str) -> GeoCode:
    """Split a 31-digit geocode into its fixed-width fields.

    Raises MalformedGeocode unless ``raw`` is exactly 31 decimal digits,
    and InconsistentGeocode if digit 27 does not repeat the first digit
    of the block FIPS.
    """
    if not isinstance(raw, str) or len(raw) != GEOCODE_LENGTH or not raw.isdigit():
        raise MalformedGeocode(
            f"geocode must be a {GEOCODE_LENGTH}-digit decimal string, got {raw!r}"
        )
    code = GeoCode(
        aian_flag=raw[0],
        state_fips=raw[1:3],
        spine_opt_code=raw[3:5],
        county_fips=raw[5:8],
        tract_equiv=raw[8:12],
        opt_blockgroup_equiv=raw[12:15],
        geoid_state=raw[15:17],
        geoid_county=raw[17:20],
        geoid_tract=raw[20:26],
        bg_digit=raw[26],
        block_fips=raw[27:31],
    )
    if code.aian_flag not in ("0", "1"):
        raise InconsistentGeocode(f"AI/AN flag must be 0 or 1, got {code.aian_flag!r}")
    if code.bg_digit != code.block_fips[0]:
        raise InconsistentGeocode(
            f"digit 27 ({code.bg_digit}) must repeat the first block-FIPS digit "
            f"({code.block_fips[0]}) in {raw}"
        )
    return code


def to_geoid(raw_or_code) -> GeoId:
    """Standard 15-digit block GEOID for a geocode (string or parsed)."""
    code = raw_or_code if isinstance(raw_or_code, GeoCode) else parse_geocode(raw_or_code)
    return GeoId(GeoLevel.BLOCK, code.geoid)


def node_level(node_id: str) -> GeoLevel:
    """Level of an optimized-spine node id (geocode prefix scheme)."""
    if node_id == NATION_ID:
        return GeoLevel.NATION
    n = len(node_id)
    if n == 2:
        return GeoLevel.STATE
    if n == _NMF_PREFIX["county"]:
        return GeoLevel.COUNTY
    if n == _NMF_PREFIX["tract"]:
        return GeoLevel.TRACT
    if n == _NMF_PREFIX["opt_blockgroup"]:
        return GeoLevel.OPT_BLOCKGROUP
    if n == GEOCODE_LENGTH:
        return GeoLevel.BLOCK
    raise ParameterError(f"not an optimized-spine node id: {node_id!r}")


@dataclass(frozen=True)
class Composition:
    """Disjoint optimized-spine parts whose union is a target geography."""

    target: GeoId
    parts: tuple[str, ...]


@dataclass(frozen=True)
class _BlockRecord:
    geocode: GeoCode
    vtd: Optional[str]
    place: Optional[str]


class Spine:
    """Immutable index of blocks on both the standard and optimized spines.

    Built from block geocodes plus optional VTD/place assignments; every
    grouping on either spine is derived from the geocode digits, so the
    parser and the pipeline share one code path.
    """

    def __init__(self, records: Iterable[tuple[str, Optional[str], Optional[str]]]):
        self._blocks: dict[str, _BlockRecord] = {}
        for raw, vtd, place in records:
            code = parse_geocode(raw)
            if raw in self._blocks:
                raise InconsistentGeocode(f"duplicate block geocode {raw}")
            if vtd is not None:
                GeoId(GeoLevel.VTD, vtd)
            if place is not None:
                GeoId(GeoLevel.PLACE, place)
            self._blocks[raw] = _BlockRecord(code, vtd, place)
        if not self._blocks:
            raise EmptyTarget("a spine needs at least one block")

        nmf_blocks: dict[str, set[str]] = {NATION_ID: set()}
        children: dict[str, set[str]] = {NATION_ID: set()}
        std_units: dict[GeoLevel, dict[str, set[str]]] = {
            lv: {} for lv in GeoLevel if lv is not GeoLevel.OPT_BLOCKGROUP
        }
        for raw in sorted(self._blocks):
            rec = self._blocks[raw]
            c = rec.geocode
            state = c.state_fips
            county = raw[: _NMF_PREFIX["county"]]
            tract = raw[: _NMF_PREFIX["tract"]]
            obg = raw[: _NMF_PREFIX["opt_blockgroup"]]
            chain = (NATION_ID, state, county, tract, obg, raw)
            for parent, child in zip(chain, chain[1:]):
                children.setdefault(parent, set()).add(child)
                children.setdefault(child, set())
            for node in chain:
                nmf_blocks.setdefault(node, set()).add(raw)

            geoid = c.geoid
            std = {
                GeoLevel.NATION: NATION_ID,
                GeoLevel.STATE: c.geoid_state,
                GeoLevel.COUNTY: geoid[:5],
                GeoLevel.TRACT: geoid[:11],
                GeoLevel.BLOCKGROUP: geoid[:11] + c.bg_digit,
                GeoLevel.BLOCK: geoid,
            }
            for lv, code_ in std.items():
                std_units[lv].setdefault(code_, set()).add(raw)
            if rec.vtd is not None:
                std_units[GeoLevel.VTD].setdefault(rec.vtd, set()).add(raw)
            if rec.place is not None:
                std_units[GeoLevel.PLACE].setdefault(rec.place, set()).add(raw)

        self._nmf_blocks = {k: frozenset(v) for k, v in nmf_blocks.items()}
        self._children = {k: tuple(sorted(v)) for k, v in children.items()}
        self._std_units = {
            lv: {code_: frozenset(v) for code_, v in by_code.items()}
            for lv, by_code in std_units.items()
        }
        self._nodes_by_level: dict[GeoLevel, tuple[str, ...]] = {}
        for node in self._nmf_blocks:
            self._nodes_by_level.setdefault(node_level(node), ())
        for lv in NMF_LEVEL_ORDER:
            self._nodes_by_level[lv] = tuple(
                sorted(n for n in self._nmf_blocks if node_level(n) is lv)
            )

    # ------------------------------------------------------------------
    # block accessors

    @property
    def blocks(self) -> tuple[str, ...]:
        """All block geocodes, sorted."""
        return self._nodes_by_level[GeoLevel.BLOCK]

    def geocode(self, raw: str) -> GeoCode:
        return self._blocks[raw].geocode

    def block_geoid(self, raw: str) -> str:
        return self._blocks[raw].geocode.geoid

    def membership(self, raw: str) -> dict[str, str]:
        """Every enclosing unit of a block on both spines."""
        rec = self._blocks[raw]
        c = rec.geocode
        geoid = c.geoid
        out = {
            "nmf_state": c.state_fips,
            "nmf_county": raw[:8],
            "nmf_tract": raw[:12],
            "opt_blockgroup": raw[:15],
            "state": c.geoid_state,
            "county": geoid[:5],
            "tract": geoid[:11],
            "blockgroup": geoid[:11] + c.bg_digit,
            "block": geoid,
        }
        if rec.vtd is not None:
            out["vtd"] = rec.vtd
        if rec.place is not None:
            out["place"] = rec.place
        return out

    # ------------------------------------------------------------------
    # optimized-spine accessors

    def nodes_at(self, level: GeoLevel) -> tuple[str, ...]:
        """Sorted optimized-spine node ids at one level."""
        if level not in self._nodes_by_level:
            raise ParameterError(f"{level.value} is not an optimized-spine level")
        return self._nodes_by_level[level]

    def children(self, node_id: str) -> tuple[str, ...]:
        return self._children[node_id]

    def nmf_blocks(self, node_id: str) -> frozenset[str]:
        """Block geocodes under an optimized-spine node."""
        return self._nmf_blocks[node_id]

    def has_node(self, node_id: str) -> bool:
        return node_id in self._nmf_blocks

    # ------------------------------------------------------------------
    # standard-spine accessors

    def units_at(self, level: GeoLevel) -> dict[str, frozenset[str]]:
        """Map of GEOID -> block geocodes for a standard level."""
        if level is GeoLevel.OPT_BLOCKGROUP:
            raise ParameterError("optimized block groups are spine nodes, not GEOID units")
        return dict(self._std_units[level])

    def blocks_of_target(self, target: GeoId) -> frozenset[str]:
        """Block set of a standard-census target; EmptyTarget if unknown."""
        units = self._std_units[target.level]
        if target.code not in units:
            raise EmptyTarget(
                f"unknown {target.level.value} {target.code!r} (not on this spine)"
            )
        blocks = units[target.code]
        if not blocks:
            raise EmptyTarget(f"{target.level.value} {target.code!r} contains no blocks")
        return blocks


def compose_target(spine: Spine, target: GeoId) -> Composition:
    """Cover a target geography with disjoint optimized-spine units.

    Greedy hierarchical fill: descend the optimized spine root-down and
    take every node whose block set lies fully inside the still-uncovered
    part of the target; whatever remains is covered block by block.
    Summation-only by construction — no unit is ever subtracted — so the
    parts stay disjoint and their noisy measurements stay independent.
    """
    blocks = spine.blocks_of_target(target)
    uncovered = set(blocks)
    parts: list[str] = []
    for level in NMF_LEVEL_ORDER[:-1]:
        if not uncovered:
            break
        for node in spine.nodes_at(level):
            nb = spine.nmf_blocks(node)
            if nb <= uncovered:
                parts.append(node)
                uncovered -= nb
    parts.extend(sorted(uncovered))
    return Composition(target=target, parts=tuple(parts))


# ----------------------------------------------------------------------
# synthetic spine generation


@dataclass(frozen=True)
class SpineSpec:
    """Shape parameters for a synthetic test spine.

    Standard block groups are encoded in the block-FIPS leading digit;
    optimized block groups regroup a shuffled block order, so the two
    spines genuinely disagree.  A fraction of tracts is split into AI/AN
    and non-AI/AN fragments on the optimized spine.  VTDs partition each
    county's blocks across tract boundaries; places cover part of each
    state.
    """

    states: int = 1
    counties_per_state: int = 2
    tracts_per_county: int = 2
    blockgroups_per_tract: int = 2
    blocks_per_blockgroup: int = 3
    obg_size: int = 3
    aian_tract_prob: float = 0.3
    aian_block_frac: float = 0.4
    vtds_per_county: int = 2
    places_per_state: int = 1

    def __post_init__(self) -> None:
        if not (1 <= self.states <= 99):
            raise ParameterError("states must be in 1..99")
        if not (1 <= self.counties_per_state <= 499):
            raise ParameterError("counties_per_state must be in 1..499")
        if not (1 <= self.tracts_per_county <= 9999):
            raise ParameterError("tracts_per_county must be in 1..9999")
        if not (1 <= self.blockgroups_per_tract <= 9):
            raise ParameterError("blockgroups_per_tract must be in 1..9")
        if not (1 <= self.blocks_per_blockgroup <= 999):
            raise ParameterError("blocks_per_blockgroup must be in 1..999")
        if self.obg_size < 1:
            raise ParameterError("obg_size must be positive")
        if not (0.0 <= self.aian_tract_prob <= 1.0):
            raise ParameterError("aian_tract_prob must be in [0, 1]")
        if not (0.0 < self.aian_block_frac < 1.0) and self.aian_tract_prob > 0:
            raise ParameterError("aian_block_frac must be in (0, 1)")
        if self.vtds_per_county < 1:
            raise ParameterError("vtds_per_county must be positive")
        if self.places_per_state < 0:
            raise ParameterError("places_per_state must be non-negative")


def make_synthetic_spine(spec: SpineSpec, seed: int) -> Spine:
    """Deterministically generate a spine matching ``spec``."""
    rng = np.random.default_rng((int(seed), 0x5B1E))
    records: list[tuple[str, Optional[str], Optional[str]]] = []

    for si in range(spec.states):
        state = f"{si + 1:02d}"
        state_blocks: list[str] = []
        for ci in range(spec.counties_per_state):
            county = f"{2 * ci + 1:03d}"
            county_blocks: list[str] = []
            # one tract-equivalent counter per (aian side, state, county)
            eq_counter = {"0": 0, "1": 0}
            for ti in range(spec.tracts_per_county):
                geoid_tract = f"{(ti + 1) * 100:06d}"
                # standard block FIPS codes, grouped by leading digit
                block_codes = [
                    f"{bg + 1}{bi + 1:03d}"
                    for bg in range(spec.blockgroups_per_tract)
                    for bi in range(spec.blocks_per_blockgroup)
                ]
                n = len(block_codes)
                aian_mask = np.zeros(n, dtype=bool)
                if rng.random() < spec.aian_tract_prob and n >= 2:
                    k = max(1, round(spec.aian_block_frac * n))
                    k = min(k, n - 1)
                    aian_mask[rng.choice(n, size=k, replace=False)] = True
                for side in ("0", "1"):
                    idx = [i for i in range(n) if aian_mask[i] == (side == "1")]
                    if not idx:
                        continue
                    eq_counter[side] += 1
                    tract_eq = f"{eq_counter[side]:04d}"
                    # optimized block groups chop a shuffled order
                    order = rng.permutation(len(idx))
                    for oi, start in enumerate(range(0, len(idx), spec.obg_size)):
                        obg = f"{101 + oi:03d}"
                        for j in order[start : start + spec.obg_size]:
                            bf = block_codes[idx[j]]
                            raw = (
                                side + state + "10" + county + tract_eq + obg
                                + state + county + geoid_tract + bf[0] + bf
                            )
                            county_blocks.append(raw)
            # VTDs partition the county's blocks across tract boundaries
            county_blocks.sort()
            perm = rng.permutation(len(county_blocks))
            vtd_of = {}
            for vi, chunk in enumerate(np.array_split(perm, spec.vtds_per_county)):
                vtd = state + county + f"{vi + 1:06d}"
                for j in chunk:
                    vtd_of[county_blocks[j]] = vtd
            for raw in county_blocks:
                records.append((raw, vtd_of[raw], None))
            state_blocks.extend(county_blocks)
        # places cover consecutive chunks of a shuffled state block list,
        # leaving a remainder in no place at all
        if spec.places_per_state > 0 and len(state_blocks) > 1:
            perm = rng.permutation(len(state_blocks))
            chunk = max(1, len(state_blocks) // (spec.places_per_state + 1))
            pos = 0
            for pi in range(spec.places_per_state):
                place = state + f"{60000 + pi:05d}"
                for j in perm[pos : pos + chunk]:
                    raw, vtd, _ = records[-len(state_blocks) + j]
                    records[-len(state_blocks) + j] = (raw, vtd, place)
                pos += chunk
    return Spine(records)
