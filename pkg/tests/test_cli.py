"""Config parsing, artifact round trips, and the command-line verbs."""

import csv
import json

import numpy as np
import pytest

from dasim import geo
from dasim.artifacts import (
    read_geocodes_csv,
    read_histogram_csv,
    read_nmf_csv,
    read_schema_json,
    verify_manifest,
    write_geocodes_csv,
    write_histogram_csv,
    write_nmf_csv,
    write_schema_json,
)
from dasim.cli import main
from dasim.config import RunConfig
from dasim.errors import ConfigError
from dasim.histograms import DESK_SCHEMA
from dasim.noise import make_noisy_measurements
from dasim.pipeline import build_world, error_report, run_replicate

TINY_CONFIG = {
    "config_version": 1,
    "seed": 5,
    "replicates": 2,
    "spine": {
        "states": 1,
        "counties_per_state": 1,
        "tracts_per_county": 2,
        "blockgroups_per_tract": 1,
        "blocks_per_blockgroup": 2,
        "obg_size": 2,
        "aian_tract_prob": 0.0,
    },
    "report": {"levels": ["tract"], "statistics": ["total", "hispanic"]},
}

EXAMPLE_RAW = "0531000100011065300195010011010"


# ----------------------------------------------------------------------
# config


def test_config_defaults_round_trip():
    cfg = RunConfig()
    again = RunConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert cfg.config_hash() == again.config_hash()


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"config_version": 1, "sede": 3})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"config_version": 1, "spine": {"statez": 1}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"config_version": 1, "budget": {"galaxy": 4.0}})


def test_config_requires_the_right_version():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"config_version": 2})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({})


def test_config_rejects_bad_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.from_file(p)


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"config_version": 1, "replicates": 0})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"config_version": 1, "swap": {"base_rate": 2.0}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"config_version": 1, "query_groups": ["detail", "bogus"]})


def test_config_parses_sections():
    cfg = RunConfig.from_dict(
        {
            "config_version": 1,
            "seed": 9,
            "budget": {"block": 25.0, "tract": {"detail": 9.0, "total": 1.0, "marginal": 4.0}},
            "postprocess": {"invariants": [["county", "total"]], "integerize": False},
            "swap": {"pairing_scope": "tract"},
        }
    )
    assert cfg.seed == 9
    assert cfg.budget.variance(geo.GeoLevel.BLOCK, "detail") == 25.0
    assert cfg.budget.variance(geo.GeoLevel.TRACT, "total") == 1.0
    assert cfg.postprocess.invariants == ((geo.GeoLevel.COUNTY, "total"),)
    assert cfg.postprocess.integerize is False
    assert cfg.swap.pairing_scope is geo.GeoLevel.TRACT
    # non-uniform budgets survive a round trip
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_overrides_replace_only_what_they_say():
    cfg = RunConfig.from_dict(TINY_CONFIG)
    out = cfg.with_overrides(seed=99)
    assert out.seed == 99 and out.replicates == cfg.replicates
    assert cfg.with_overrides() == cfg


# ----------------------------------------------------------------------
# artifacts


@pytest.fixture(scope="module")
def small_world():
    cfg = RunConfig.from_dict(TINY_CONFIG)
    return build_world(cfg)


def test_geocode_csv_round_trip(tmp_path, small_world):
    write_geocodes_csv(small_world.spine, tmp_path / "g.csv")
    back = read_geocodes_csv(tmp_path / "g.csv")
    assert back.blocks == small_world.spine.blocks
    for raw in back.blocks:
        assert back.membership(raw) == small_world.spine.membership(raw)


def test_histogram_csv_round_trip(tmp_path, small_world):
    write_histogram_csv(small_world.cef, tmp_path / "h.csv")
    counts = read_histogram_csv(tmp_path / "h.csv", small_world.spine, DESK_SCHEMA)
    for raw in small_world.spine.blocks:
        np.testing.assert_array_equal(counts[raw], small_world.cef.block_histogram(raw))


def test_nmf_csv_round_trip(tmp_path, small_world):
    nms = make_noisy_measurements(small_world.cef, small_world.query, seed=3)
    write_nmf_csv(nms, tmp_path / "n.csv")
    back = read_nmf_csv(tmp_path / "n.csv", small_world.query, seed=3)
    assert set(back) == set(nms)
    assert back.seed == 3
    for node in nms:
        np.testing.assert_array_equal(back[node].values, nms[node].values)
        np.testing.assert_array_equal(back[node].variances, nms[node].variances)


def test_schema_json_round_trip(tmp_path):
    write_schema_json(DESK_SCHEMA, tmp_path / "s.json")
    assert read_schema_json(tmp_path / "s.json") == DESK_SCHEMA


# ----------------------------------------------------------------------
# crosswalk verb


def test_crosswalk_worked_example(tmp_path):
    src = tmp_path / "codes.txt"
    src.write_text(EXAMPLE_RAW + "\n")
    assert main(["crosswalk", str(src), "--out", str(tmp_path)]) == 0
    with open(tmp_path / "crosswalk.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    row = rows[0]
    assert row["block"] == "530019501001010"
    assert row["state"] == "53"
    assert row["county"] == "53001"
    assert row["tract"] == "53001950100"
    assert row["blockgroup"] == "530019501001"
    assert row["nmf_tract"] == EXAMPLE_RAW[:12]
    assert row["opt_blockgroup"] == EXAMPLE_RAW[:15]
    assert not (tmp_path / "rejects.csv").exists()


def test_crosswalk_rejects_bad_rows_with_exit_one(tmp_path):
    src = tmp_path / "codes.csv"
    src.write_text(f"geocode\n{EXAMPLE_RAW}\nnope\n")
    assert main(["crosswalk", str(src), "--out", str(tmp_path)]) == 1
    with open(tmp_path / "rejects.csv", newline="") as fh:
        rejects = list(csv.DictReader(fh))
    assert len(rejects) == 1
    assert rejects[0]["geocode"] == "nope"
    with open(tmp_path / "crosswalk.csv", newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 1


def test_crosswalk_missing_input_is_an_io_error(tmp_path):
    assert main(["crosswalk", str(tmp_path / "ghost.csv"), "--out", str(tmp_path)]) == 2


# ----------------------------------------------------------------------
# simulate and report verbs


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg_path = out / "in.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    code = main(["simulate", "--config", str(cfg_path), "--out", str(out / "art")])
    assert code == 0
    return out / "art"


def test_simulate_writes_a_verifiable_manifest(run_dir):
    assert verify_manifest(run_dir) == []
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["config_sha256"] == RunConfig.from_dict(TINY_CONFIG).config_hash()
    for name in ("cef.csv", "geocodes.csv", "schema.json", "config.json"):
        assert name in manifest["files"]
    assert "nmf_r001_b.csv" in manifest["files"]


def test_manifest_catches_tampering(run_dir, tmp_path):
    import shutil

    copy = tmp_path / "copy"
    shutil.copytree(run_dir, copy)
    p = copy / "cef.csv"
    p.write_text(p.read_text().replace(",", ",", 1) + "x")
    assert verify_manifest(copy) == ["cef.csv"]


def test_simulate_is_deterministic(run_dir, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    out2 = tmp_path / "again"
    assert main(["simulate", "--config", str(cfg_path), "--out", str(out2)]) == 0
    m1 = json.loads((run_dir / "manifest.json").read_text())
    m2 = json.loads((out2 / "manifest.json").read_text())
    assert m1 == m2


def test_report_recomputes_identically_from_artifacts(run_dir):
    assert main(["report", "--out", str(run_dir)]) == 0
    with open(run_dir / "error_report.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    # 1 level x 2 statistics x 3 methods
    assert len(rows) == 6

    # independent recomputation straight from in-memory objects
    cfg = RunConfig.from_dict(TINY_CONFIG)
    world = build_world(cfg)
    reps = [run_replicate(world, r) for r in range(cfg.replicates)]
    fresh, _ = error_report(
        world.spine, world.query, world.agg, reps,
        cfg.report_levels, cfg.report_statistics,
    )
    assert len(fresh) == len(rows)
    for got, want in zip(rows, fresh):
        assert got["level"] == want["level"]
        assert got["method"] == want["method"]
        assert float(got["estimate"]) == pytest.approx(want["estimate"], abs=1e-12)
        assert float(got["rmse"]) == pytest.approx(want["rmse"], abs=1e-12)

    payload = json.loads((run_dir / "error_report.json").read_text())
    assert len(payload) == len(rows)
    assert payload[0]["method"] == rows[0]["method"]


def test_report_honors_filters(run_dir):
    assert main([
        "report", "--out", str(run_dir), "--level", "tract", "--statistic", "total",
    ]) == 0
    with open(run_dir / "error_report.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    assert {r["statistic"] for r in rows} == {"total"}


def test_report_rejects_unknown_statistic(run_dir):
    assert main([
        "report", "--out", str(run_dir), "--statistic", "wizardry",
    ]) == 1


def test_report_on_missing_directory_is_an_io_error(tmp_path):
    assert main(["report", "--out", str(tmp_path / "nowhere")]) == 2


def test_simulate_rejects_bad_config(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"config_version": 1, "bogus": True}))
    assert main(["simulate", "--config", str(p), "--out", str(tmp_path / "o")]) == 1


def test_quartiles_table_shape(run_dir):
    main(["report", "--out", str(run_dir)])
    with open(run_dir / "quartiles.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6  # 1 level x 2 statistics x 3 methods
    for row in rows:
        assert float(row["q25"]) <= float(row["q50"]) <= float(row["q75"])
