import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dasim.errors import SchemaError
from dasim.geo import GeoId, GeoLevel, SpineSpec, make_synthetic_spine
from dasim.histograms import (
    DESK_SCHEMA,
    FULL_SCHEMA,
    AggregationMatrix,
    CefDataset,
    CellSchema,
    GenerationProfile,
    Histogram,
    aggregate,
    default_statistics,
    generate_synthetic_cef,
)


def test_schema_sizes():
    assert DESK_SCHEMA.size == 48
    assert FULL_SCHEMA.size == 2 * 2 * 63 * 8 == 2016


def test_schema_validation():
    with pytest.raises(SchemaError):
        CellSchema((("a", 2), ("a", 3)))
    with pytest.raises(SchemaError):
        CellSchema((("a", 1),))
    with pytest.raises(SchemaError):
        CellSchema(())


def test_cell_index_round_trip():
    idx = DESK_SCHEMA.cell_index((1, 0, 3, 1))
    assert np.unravel_index(idx, DESK_SCHEMA.shape) == (1, 0, 3, 1)


def test_histogram_validation():
    with pytest.raises(SchemaError):
        Histogram(np.array([1, -1]))
    with pytest.raises(SchemaError):
        Histogram(np.array([1.5, 2.0]))
    h = Histogram(np.arange(4)) + Histogram(np.ones(4, dtype=int))
    assert h.total == 10


def test_aggregate_simple_total():
    schema = CellSchema((("voting_age", 2), ("hispanic", 2)))
    agg = default_statistics(schema)
    h = Histogram(np.array([1, 2, 3, 4]))
    vals = dict(zip(agg.labels, aggregate(h, agg)))
    assert vals["total"] == 10
    # voting_age axis is the first, adults are indices 2,3 of the flat vector
    assert vals["voting_age"] == 7
    assert vals["hispanic"] == 2 + 4


def test_default_statistics_desk():
    agg = default_statistics(DESK_SCHEMA)
    assert agg.labels[:3] == ("total", "voting_age", "hispanic")
    assert "white" in agg.labels and "nhpi" in agg.labels
    assert agg.matrix.shape == (9, 48)
    # race rows partition the total row
    race_rows = agg.matrix[3:]
    assert (race_rows.sum(axis=0) == 1).all()


def test_default_statistics_full_scale():
    agg = default_statistics(FULL_SCHEMA)
    assert "white_alone" in agg.labels and "two_or_more" in agg.labels
    row = agg.row("white_alone")
    grid = np.indices(FULL_SCHEMA.shape)[FULL_SCHEMA.axis_index("race")].reshape(-1)
    assert (row == (grid == 0).astype(int)).all()
    # alone + two_or_more partition the race axis
    race_rows = agg.matrix[3:]
    assert (race_rows.sum(axis=0) == 1).all()


def test_aggregation_matrix_validation():
    with pytest.raises(SchemaError):
        AggregationMatrix(("a", "a"), np.ones((2, 4), dtype=int))
    with pytest.raises(SchemaError):
        AggregationMatrix(("a", "b"), np.array([[1, 1], [0, 0]]))


@given(
    arrays(np.int64, 48, elements=st.integers(0, 1000)),
    arrays(np.int64, 48, elements=st.integers(0, 1000)),
)
@settings(max_examples=50)
def test_aggregate_linear(c1, c2):
    agg = default_statistics(DESK_SCHEMA)
    assert (
        aggregate(Histogram(c1 + c2), agg)
        == aggregate(Histogram(c1), agg) + aggregate(Histogram(c2), agg)
    ).all()


@pytest.fixture(scope="module")
def small_world():
    spine = make_synthetic_spine(SpineSpec(), seed=5)
    cef = generate_synthetic_cef(spine, seed=5)
    return spine, cef


def test_cef_parent_sums(small_world):
    spine, cef = small_world
    for level in (GeoLevel.NATION, GeoLevel.STATE, GeoLevel.COUNTY, GeoLevel.TRACT, GeoLevel.OPT_BLOCKGROUP):
        for node in spine.nodes_at(level):
            kids = spine.children(node)
            total = sum(cef.node_histogram(k) for k in kids)
            assert (cef.node_histogram(node) == total).all()


def test_cef_target_histogram_is_block_sum(small_world):
    spine, cef = small_world
    vtd = sorted(spine.units_at(GeoLevel.VTD))[0]
    target = GeoId(GeoLevel.VTD, vtd)
    manual = sum(cef.block_histogram(b) for b in spine.blocks_of_target(target))
    assert (cef.target_histogram(target) == manual).all()


def test_cef_deterministic(small_world):
    spine, cef = small_world
    again = generate_synthetic_cef(spine, seed=5)
    for raw in spine.blocks:
        assert (cef.block_histogram(raw) == again.block_histogram(raw)).all()
    other = generate_synthetic_cef(spine, seed=6)
    assert any(
        (cef.block_histogram(raw) != other.block_histogram(raw)).any()
        for raw in spine.blocks
    )


def test_cef_rejects_wrong_blocks(small_world):
    spine, cef = small_world
    counts = {raw: cef.block_histogram(raw) for raw in spine.blocks}
    counts.pop(spine.blocks[0])
    with pytest.raises(SchemaError):
        CefDataset(spine, DESK_SCHEMA, counts)


def test_block_population_median_matches_published_skew():
    # ~10k blocks; the published distribution has median block size 23
    spec = SpineSpec(counties_per_state=2, tracts_per_county=25,
                     blockgroups_per_tract=9, blocks_per_blockgroup=23)
    spine = make_synthetic_spine(spec, seed=1)
    assert len(spine.blocks) == 2 * 25 * 9 * 23
    cef = generate_synthetic_cef(spine, seed=1)
    pops = np.array([cef.block_histogram(b).sum() for b in spine.blocks])
    assert 15 <= np.median(pops) <= 35
    # long right tail and a zero-population point mass
    assert pops.max() > 200
    assert (pops == 0).mean() > 0.01
