"""File formats: every artifact a run writes, and how to read it back.

All artifacts are plain CSV or JSON, deterministic byte for byte given
the same inputs (no timestamps, stable orderings, fixed float
formatting), so identical runs produce identical files and the manifest
checksums actually mean something.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import geo
from .errors import SchemaError
from .histograms import CefDataset, CellSchema, HistogramDataset
from .noise import NoisyMeasurementSet, NoisyMeasurements, QueryMatrix

PathLike = Union[str, Path]


def sha256_file(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(x: float) -> str:
    """Canonical float formatting: no trailing noise, round-trip safe."""
    return repr(float(x))


# ----------------------------------------------------------------------
# spine


def write_geocodes_csv(spine: geo.Spine, path: PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["geocode", "vtd", "place"])
        for raw in spine.blocks:
            member = spine.membership(raw)
            w.writerow([raw, member.get("vtd", ""), member.get("place", "")])


def read_geocodes_csv(path: PathLike) -> geo.Spine:
    records = []
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        if r.fieldnames is None or "geocode" not in r.fieldnames:
            raise SchemaError(f"{path}: expected a geocode column")
        for row in r:
            records.append(
                (row["geocode"], row.get("vtd") or None, row.get("place") or None)
            )
    return geo.Spine(records)


# ----------------------------------------------------------------------
# histograms (enumeration, post-processed, swapped)


def write_histogram_csv(ds: HistogramDataset, path: PathLike) -> None:
    size = ds.schema.size
    width = len(str(size - 1))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["geocode"] + [f"cell_{i:0{width}d}" for i in range(size)])
        for raw in ds.spine.blocks:
            h = ds.block_histogram(raw)
            if h.dtype == np.int64:
                w.writerow([raw] + [str(int(v)) for v in h])
            else:
                w.writerow([raw] + [_fmt(v) for v in h])


def read_histogram_csv(
    path: PathLike,
    spine: geo.Spine,
    schema: CellSchema,
    require_int: bool = True,
) -> dict[str, np.ndarray]:
    size = schema.size
    counts: dict[str, np.ndarray] = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or header[0] != "geocode" or len(header) != size + 1:
            raise SchemaError(f"{path}: header does not match a {size}-cell schema")
        for row in r:
            raw = row[0]
            if require_int:
                counts[raw] = np.array([int(v) for v in row[1:]], dtype=np.int64)
            else:
                counts[raw] = np.array([float(v) for v in row[1:]])
    missing = set(spine.blocks) - set(counts)
    if missing:
        raise SchemaError(f"{path}: {len(missing)} spine blocks missing")
    return counts


def read_cef_csv(path: PathLike, spine: geo.Spine, schema: CellSchema) -> CefDataset:
    return CefDataset(spine, schema, read_histogram_csv(path, spine, schema))


# ----------------------------------------------------------------------
# noisy measurements


def write_nmf_csv(nms: NoisyMeasurements, path: PathLike) -> None:
    q = nms.query
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "row_index", "row_id", "value", "variance"])
        for node_id in sorted(nms):
            ms = nms[node_id]
            for i, (v, s2) in enumerate(zip(ms.values, ms.variances)):
                w.writerow([node_id, str(i), q.row_ids[i], str(int(v)), _fmt(s2)])


def read_nmf_csv(
    path: PathLike, q: QueryMatrix, seed: Optional[int]
) -> NoisyMeasurements:
    n_rows = len(q.row_ids)
    values: dict[str, list] = {}
    variances: dict[str, list] = {}
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        for row in r:
            values.setdefault(row["node_id"], []).append(int(row["value"]))
            variances.setdefault(row["node_id"], []).append(float(row["variance"]))
    per_node = {}
    for node_id, vals in values.items():
        if len(vals) != n_rows:
            raise SchemaError(
                f"{path}: node {node_id} has {len(vals)} rows, query needs {n_rows}"
            )
        per_node[node_id] = NoisyMeasurementSet(
            node_id,
            np.array(vals, dtype=np.int64),
            np.array(variances[node_id]),
        )
    return NoisyMeasurements(per_node, q, seed)


# ----------------------------------------------------------------------
# households


def write_households_csv(households: Sequence, path: PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["block", "cells", "adults"])
        for hh in households:
            w.writerow([hh.block, "|".join(str(c) for c in hh.cells), str(hh.adults)])


# ----------------------------------------------------------------------
# crosswalk

CROSSWALK_COLUMNS = (
    "geocode",
    "state",
    "county",
    "tract",
    "blockgroup",
    "block",
    "vtd",
    "place",
    "nmf_state",
    "nmf_county",
    "nmf_tract",
    "opt_blockgroup",
)


def write_crosswalk_csv(rows: Sequence[Mapping[str, str]], path: PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CROSSWALK_COLUMNS)
        for row in rows:
            w.writerow([row.get(col, "") for col in CROSSWALK_COLUMNS])


def write_rejects_csv(rows: Sequence[Mapping[str, str]], path: PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["line", "geocode", "reason"])
        for row in rows:
            w.writerow([row["line"], row["geocode"], row["reason"]])


# ----------------------------------------------------------------------
# error report

REPORT_COLUMNS = (
    "level",
    "statistic",
    "bin",
    "method",
    "estimate",
    "variance",
    "ci_lo",
    "ci_hi",
    "raw_mse",
    "rmse",
    "n",
)


def write_error_report_csv(rows: Sequence[Mapping], path: PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for row in rows:
            out = []
            for col in REPORT_COLUMNS:
                v = row.get(col)
                if v is None:
                    out.append("")
                elif isinstance(v, float):
                    out.append(_fmt(v))
                else:
                    out.append(str(v))
            w.writerow(out)


def write_error_report_json(rows: Sequence[Mapping], path: PathLike) -> None:
    payload = [{col: row.get(col) for col in REPORT_COLUMNS} for row in rows]
    Path(path).write_text(json.dumps(payload, indent=2, allow_nan=False) + "\n")


QUARTILE_COLUMNS = ("level", "statistic", "method", "q25", "q50", "q75", "n")


def write_quartiles_csv(rows: Sequence[Mapping], path: PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(QUARTILE_COLUMNS)
        for row in rows:
            w.writerow(
                [
                    row["level"],
                    row["statistic"],
                    row["method"],
                    _fmt(row["q25"]),
                    _fmt(row["q50"]),
                    _fmt(row["q75"]),
                    str(row["n"]),
                ]
            )


# ----------------------------------------------------------------------
# schema and manifest


def write_schema_json(schema: CellSchema, path: PathLike) -> None:
    payload = {"axes": [[name, card] for name, card in schema.axes]}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def read_schema_json(path: PathLike) -> CellSchema:
    data = json.loads(Path(path).read_text())
    return CellSchema(tuple((str(n), int(c)) for n, c in data["axes"]))


def write_manifest(out_dir: PathLike, config_hash: str, file_names: Sequence[str]) -> None:
    out = Path(out_dir)
    manifest = {
        "format": "dasim-run",
        "config_sha256": config_hash,
        "files": {name: sha256_file(out / name) for name in sorted(file_names)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def read_manifest(out_dir: PathLike) -> dict:
    return json.loads((Path(out_dir) / "manifest.json").read_text())


def verify_manifest(out_dir: PathLike) -> list[str]:
    """Names of files whose checksum no longer matches the manifest."""
    out = Path(out_dir)
    manifest = read_manifest(out_dir)
    bad = []
    for name, digest in manifest["files"].items():
        p = out / name
        if not p.exists() or sha256_file(p) != digest:
            bad.append(name)
    return bad
