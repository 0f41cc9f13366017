"""Command-line interface.

Verbs:
  crosswalk  translate 31-digit block geocodes to standard identifiers
  simulate   build a synthetic world and run the full pipeline
  report     compute error estimates from a simulate output directory
  verify     run the built-in verification suite

Exit codes: 0 success, 1 rejected or invalid data, 2 file problems,
3 infeasible constraints during post-processing.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import geo
from .artifacts import (
    read_geocodes_csv,
    read_histogram_csv,
    read_nmf_csv,
    read_schema_json,
    write_crosswalk_csv,
    write_error_report_csv,
    write_error_report_json,
    write_geocodes_csv,
    write_histogram_csv,
    write_households_csv,
    write_manifest,
    write_nmf_csv,
    write_quartiles_csv,
    write_rejects_csv,
    write_schema_json,
)
from .config import RunConfig
from .errors import DasimError, InfeasibleConstraints, ParameterError
from .histograms import HistogramDataset, default_statistics
from .noise import QueryMatrix
from .pipeline import Replicate, build_world, error_report, replicate_seeds, run_replicate

from . import __version__


# ----------------------------------------------------------------------
# crosswalk


def _crosswalk_row(raw: str, vtd: str = "", place: str = "") -> dict[str, str]:
    code = geo.parse_geocode(raw)
    geoid = code.geoid
    return {
        "geocode": raw,
        "state": code.geoid_state,
        "county": geoid[:5],
        "tract": geoid[:11],
        "blockgroup": geoid[:11] + code.bg_digit,
        "block": geoid,
        "vtd": vtd,
        "place": place,
        "nmf_state": code.state_fips,
        "nmf_county": raw[:8],
        "nmf_tract": raw[:12],
        "opt_blockgroup": raw[:15],
    }


def _read_geocode_input(path: Path) -> list[tuple[int, str, str, str]]:
    """(line number, geocode, vtd, place) tuples from CSV or bare lines."""
    text = path.read_text()
    lines = text.splitlines()
    if not lines:
        return []
    if "geocode" in lines[0]:
        out = []
        reader = csv.DictReader(lines)
        for i, row in enumerate(reader, start=2):
            out.append(
                (i, (row.get("geocode") or "").strip(),
                 (row.get("vtd") or "").strip(), (row.get("place") or "").strip())
            )
        return out
    return [
        (i, line.strip(), "", "")
        for i, line in enumerate(lines, start=1)
        if line.strip()
    ]


def cmd_crosswalk(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = _read_geocode_input(Path(args.input))
    rows, rejects = [], []
    for line, raw, vtd, place in records:
        try:
            rows.append(_crosswalk_row(raw, vtd, place))
        except DasimError as exc:
            rejects.append({"line": str(line), "geocode": raw, "reason": str(exc)})
    write_crosswalk_csv(rows, out_dir / "crosswalk.csv")
    print(f"crosswalk.csv: {len(rows)} rows")
    if rejects:
        write_rejects_csv(rejects, out_dir / "rejects.csv")
        print(f"rejects.csv: {len(rejects)} rows rejected", file=sys.stderr)
        return 1
    return 0


# ----------------------------------------------------------------------
# simulate


def _rep_names(r: int) -> dict[str, str]:
    tag = f"r{r:03d}"
    return {
        "nmf_a": f"nmf_{tag}_a.csv",
        "nmf_b": f"nmf_{tag}_b.csv",
        "post_a": f"topdown_{tag}_a.csv",
        "post_b": f"topdown_{tag}_b.csv",
        "swap": f"swap_{tag}.csv",
        "households": f"households_{tag}.csv",
    }


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    cfg = cfg.with_overrides(seed=args.seed, replicates=args.replicates)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    world = build_world(cfg)
    total = sum(
        int(world.cef.block_histogram(b).sum()) for b in world.spine.blocks
    )
    print(
        f"world: {len(world.spine.blocks)} blocks, {total} persons, "
        f"seed {cfg.seed}, {cfg.replicates} replicate(s)"
    )

    (out_dir / "config.json").write_text(cfg.canonical_json())
    write_schema_json(world.cef.schema, out_dir / "schema.json")
    write_geocodes_csv(world.spine, out_dir / "geocodes.csv")
    write_histogram_csv(world.cef, out_dir / "cef.csv")
    files = ["config.json", "schema.json", "geocodes.csv", "cef.csv"]

    for r in range(cfg.replicates):
        rep = run_replicate(world, r)
        names = _rep_names(r)
        write_nmf_csv(rep.nms_a, out_dir / names["nmf_a"])
        write_nmf_csv(rep.nms_b, out_dir / names["nmf_b"])
        write_histogram_csv(rep.post_a, out_dir / names["post_a"])
        write_histogram_csv(rep.post_b, out_dir / names["post_b"])
        write_histogram_csv(rep.swapped, out_dir / names["swap"])
        write_households_csv(rep.households, out_dir / names["households"])
        files.extend(names.values())
        stats = rep.swap_stats
        print(
            f"replicate {r}: seeds ({rep.seed_a}, {rep.seed_b}), "
            f"swapped {stats.n_swapped}/{stats.n_households} households "
            f"({stats.n_unpaired} unpaired)"
        )

    write_manifest(out_dir, cfg.config_hash(), files)
    print(f"wrote {len(files) + 1} files to {out_dir}")
    return 0


# ----------------------------------------------------------------------
# report


def _load_replicates(out_dir: Path, cfg: RunConfig, spine, schema, q) -> list[Replicate]:
    reps = []
    require_int = cfg.postprocess.integerize
    for r in range(cfg.replicates):
        names = _rep_names(r)
        for name in names.values():
            if name != names["households"] and not (out_dir / name).exists():
                raise FileNotFoundError(out_dir / name)
        seed_a, seed_b = replicate_seeds(cfg.seed, r)
        nms_a = read_nmf_csv(out_dir / names["nmf_a"], q, seed_a)
        nms_b = read_nmf_csv(out_dir / names["nmf_b"], q, seed_b)
        post_a = HistogramDataset(
            spine, schema,
            read_histogram_csv(out_dir / names["post_a"], spine, schema, require_int),
            require_int=require_int,
        )
        post_b = HistogramDataset(
            spine, schema,
            read_histogram_csv(out_dir / names["post_b"], spine, schema, require_int),
            require_int=require_int,
        )
        swapped = HistogramDataset(
            spine, schema, read_histogram_csv(out_dir / names["swap"], spine, schema)
        )
        reps.append(
            Replicate(
                index=r, seed_a=seed_a, seed_b=seed_b,
                nms_a=nms_a, nms_b=nms_b,
                post_a=post_a, post_b=post_b, swapped=swapped,
            )
        )
    return reps


def cmd_report(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    cfg = RunConfig.from_file(out_dir / "config.json")
    spine = read_geocodes_csv(out_dir / "geocodes.csv")
    schema = read_schema_json(out_dir / "schema.json")
    q = QueryMatrix(schema, cfg.budget, cfg.query_groups)
    agg = default_statistics(schema)

    if args.level:
        levels = tuple(geo.GeoLevel.from_name(n) for n in args.level)
    else:
        levels = cfg.report_levels
    statistics = tuple(args.statistic) if args.statistic else cfg.report_statistics
    for s in statistics:
        if s not in agg.labels:
            raise ParameterError(
                f"unknown statistic {s!r}; available: {', '.join(agg.labels)}"
            )

    reps = _load_replicates(out_dir, cfg, spine, schema, q)
    rows, quartiles = error_report(spine, q, agg, reps, levels, statistics)
    write_error_report_csv(rows, out_dir / "error_report.csv")
    write_error_report_json(rows, out_dir / "error_report.json")
    write_quartiles_csv(quartiles, out_dir / "quartiles.csv")

    for row in rows:
        half = row["ci_hi"] - row["estimate"]
        print(
            f"{row['level']}/{row['statistic']} {row['method']:>8}: "
            f"bias {row['estimate']:+8.3f} +- {half:6.3f}   "
            f"rmse {row['rmse']:8.3f}   n={row['n']}"
        )
    print(f"wrote error_report.csv, error_report.json, quartiles.csv to {out_dir}")
    return 0


# ----------------------------------------------------------------------
# verify


def cmd_verify(args: argparse.Namespace) -> int:
    from . import acceptance

    if args.criteria:
        wanted = {int(c) for c in args.criteria.split(",")}
    else:
        wanted = None
    results = acceptance.run_all(wanted)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(r.line())
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 0 if not failed else 1


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dasim",
        description="Desk-scale simulator and error estimators "
        "for census disclosure-avoidance pipelines.",
    )
    parser.add_argument("--version", action="version", version=f"dasim {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("crosswalk", help="translate block geocodes to standard ids")
    p.add_argument("input", help="CSV with a geocode column, or one geocode per line")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_crosswalk)

    p = sub.add_parser("simulate", help="run the full synthetic pipeline")
    p.add_argument("--config", help="JSON config file (defaults apply without it)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--replicates", type=int, help="override the replicate count")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="estimate errors from simulate artifacts")
    p.add_argument("--out", required=True, help="directory simulate wrote to")
    p.add_argument("--level", action="append", help="standard level (repeatable)")
    p.add_argument("--statistic", action="append", help="statistic label (repeatable)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify", help="run the built-in verification suite")
    p.add_argument("--criteria", help="comma-separated subset, e.g. 1,5,9")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InfeasibleConstraints as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DasimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
