"""TopDown-style hierarchical post-processing of noisy measurements.

The production optimizer is proprietary and cluster-scale; this is a
faithful desk-scale analog with the same contract: starting from the
root of the optimized spine, each generation of children is fitted
jointly to its own noisy measurements by weighted least squares (weights
are inverse noise variances, zero-variance measurements become hard
equalities), subject to summing exactly per cell to the already-fixed
parent, configured invariant statistics held exactly to the enumeration
truth, and non-negativity.  A controlled largest-remainder rounding then
integerizes each generation while preserving parent sums, and a unit
reallocation pass restores invariant statistics exactly.

The estimators downstream only require this map to be a deterministic,
constraint-satisfying function of the noisy measurements, which it is:
ties in rounding are broken by index order, never at random.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import geo
from .errors import (
    CoverageError,
    InfeasibleConstraints,
    SchemaError,
    SeedError,
)
from .histograms import (
    AggregationMatrix,
    CefDataset,
    HistogramDataset,
    default_statistics,
)
from .noise import NoisyMeasurements, QueryMatrix, make_noisy_measurements

logger = logging.getLogger(__name__)

_LEVEL_INDEX = {lv: i for i, lv in enumerate(geo.NMF_LEVEL_ORDER)}


@dataclass(frozen=True)
class PostProcessConfig:
    """Constraints the post-processing must honor.

    Invariants are (level, statistic label) pairs held exactly to the
    enumeration value at that level and, by aggregation, at every level
    above it.  Invariant statistics must be 0/1 rows of the aggregation
    matrix.
    """

    invariants: tuple[tuple[geo.GeoLevel, str], ...] = ((geo.GeoLevel.STATE, "total"),)
    nonneg: bool = True
    integerize: bool = True


class PostProcessedDataset(HistogramDataset):
    """Full histograms for every spine geography after post-processing."""

    def __init__(self, spine, schema, block_counts, run_seed: Optional[int],
                 config: PostProcessConfig):
        super().__init__(spine, schema, block_counts, require_int=config.integerize)
        self.run_seed = run_seed
        self.config = config


# ----------------------------------------------------------------------
# constrained weighted least squares


def _kkt_solve(H: np.ndarray, A: np.ndarray, g: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve the equality-constrained quadratic: stationary point of
    1/2 x'Hx - g'x + lam'(Ax - b).  Falls back to least squares when the
    KKT matrix is singular (consistent redundant constraints)."""
    n = H.shape[0]
    m = A.shape[0]
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = H
    kkt[:n, n:] = A.T
    kkt[n:, :n] = A
    rhs = np.concatenate([g, b])
    try:
        sol = np.linalg.solve(kkt, rhs)
        if not np.isfinite(sol).all():
            raise np.linalg.LinAlgError
        resid = np.abs(kkt @ sol - rhs).max()
        if resid > 1e-6 * (1.0 + np.abs(rhs).max()):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    return sol[:n], sol[n:]


def _constrained_wls(
    H: np.ndarray,
    g: np.ndarray,
    A: np.ndarray,
    b: np.ndarray,
    nonneg: bool,
) -> np.ndarray:
    """Minimize 1/2 x'Hx - g'x subject to Ax = b and optionally x >= 0.

    Bounds are handled by a primal active-set loop: negative entries are
    pinned to zero, pins with negative multipliers are released one at a
    time.  Raises InfeasibleConstraints if the equalities cannot be met.
    """
    n = H.shape[0]
    scale = max(1.0, float(np.abs(b).max()) if b.size else 1.0)
    tol = 1e-8 * scale
    active = np.zeros(n, dtype=bool)
    x = np.zeros(n)
    lam = np.zeros(A.shape[0])
    for _ in range(200):
        free = np.nonzero(~active)[0]
        xf, lam = _kkt_solve(
            H[np.ix_(free, free)], A[:, free], g[free], b
        )
        x = np.zeros(n)
        x[free] = xf
        if not nonneg:
            break
        neg = free[xf < -tol]
        if neg.size:
            active[neg] = True
            continue
        if not active.any():
            break
        grad = H @ x - g + A.T @ lam
        mult = grad[active]
        worst = mult.min()
        if worst < -tol:
            idx = np.nonzero(active)[0][int(np.argmin(mult))]
            active[idx] = False
            continue
        break
    else:
        logger.warning("active-set iteration cap hit; keeping last iterate")
    if A.size and np.abs(A @ x - b).max() > 1e-5 * scale:
        raise InfeasibleConstraints(
            "equality constraints are mutually inconsistent at this node group"
        )
    if nonneg:
        x = np.clip(x, 0.0, None)
    return x


# ----------------------------------------------------------------------
# controlled rounding


def _largest_remainder(values: np.ndarray, target: int) -> np.ndarray:
    """Round non-negative values to integers summing exactly to target.

    The classic controlled rounding: floor everything, then hand out the
    missing units in order of largest fractional part, ties broken by
    index order.
    """
    v = np.clip(np.asarray(values, dtype=float), 0.0, None)
    base = np.floor(v + 1e-9).astype(np.int64)
    frac = v - base
    out = base.copy()
    need = int(target) - int(base.sum())
    n = v.size
    if need > 0:
        whole, rem = divmod(need, n)
        out += whole
        order = np.lexsort((np.arange(n), -frac))
        out[order[:rem]] += 1
    elif need < 0:
        order = np.lexsort((np.arange(n), frac))  # smallest fraction first
        take = -need
        while take > 0:
            progress = False
            for idx in order:
                if take == 0:
                    break
                if out[idx] > 0:
                    out[idx] -= 1
                    take -= 1
                    progress = True
            if not progress:
                raise InfeasibleConstraints(
                    f"cannot round to non-negative integers with target {target}"
                )
    return out


@dataclass(frozen=True)
class _Invariant:
    label: str
    support: np.ndarray  # bool mask over cells
    # one target per node in the group being processed
    targets: np.ndarray


def _check_nested(invariants: Sequence[_Invariant]) -> None:
    for i in range(len(invariants)):
        for j in range(i + 1, len(invariants)):
            a = invariants[i].support
            b = invariants[j].support
            inter = a & b
            if inter.any() and not (a <= b).all() and not (b <= a).all():
                raise InfeasibleConstraints(
                    "overlapping invariant supports must be nested or disjoint"
                )


def _repair_invariants(X: np.ndarray, invariants: Sequence[_Invariant], nonneg: bool) -> None:
    """Unit moves between siblings, inside one invariant's exclusive
    cells, until every invariant statistic is exact.  Moves happen at a
    single cell at a time, so per-cell parent sums are untouched."""
    if not invariants:
        return
    _check_nested(invariants)
    done = np.zeros(X.shape[1], dtype=bool)
    for inv in sorted(invariants, key=lambda e: (int(e.support.sum()), e.label)):
        free = np.nonzero(inv.support & ~done)[0]
        s = X[:, inv.support].sum(axis=1).astype(np.int64) - inv.targets
        if s.sum() != 0:
            raise InfeasibleConstraints(
                f"invariant {inv.label!r} targets do not sum to the parent value"
            )
        while (s > 0).any():
            i = int(np.nonzero(s > 0)[0][0])
            j = int(np.nonzero(s < 0)[0][0])
            cell = -1
            for c in free:
                if X[i, c] >= 1:
                    cell = c
                    break
            if cell < 0:
                if nonneg:
                    raise InfeasibleConstraints(
                        f"no movable mass to repair invariant {inv.label!r}"
                    )
                cell = int(free[np.argmax(X[i, free])])
            X[i, cell] -= 1
            X[j, cell] += 1
            s[i] -= 1
            s[j] += 1
        done |= inv.support


def _round_group(X: np.ndarray, parent: np.ndarray,
                 invariants: Sequence[_Invariant], nonneg: bool) -> np.ndarray:
    """Integerize children jointly: per-cell largest remainder against
    the parent's (already integer) cell values, then invariant repair."""
    k, C = X.shape
    out = np.empty((k, C), dtype=np.int64)
    for c in range(C):
        out[:, c] = _largest_remainder(X[:, c], int(parent[c]))
    _repair_invariants(out, invariants, nonneg)
    return out


def _round_root(x: np.ndarray, invariants: Sequence[_Invariant]) -> np.ndarray:
    """Integerize the root against its invariant partition.

    Cells are grouped by the smallest invariant support containing them
    (supports must be nested or disjoint); each group is rounded to its
    exclusive integer target, cells under no invariant round to the
    rounded continuous total.
    """
    C = x.size
    _check_nested(invariants)
    order = sorted(invariants, key=lambda e: (int(e.support.sum()), e.label))
    assigned = np.zeros(C, dtype=bool)
    groups: list[tuple[np.ndarray, int]] = []
    seen: list[tuple[np.ndarray, int]] = []  # (support, exclusive target)
    for inv in order:
        cells = np.nonzero(inv.support & ~assigned)[0]
        target = int(inv.targets[0])
        # exclusive targets of inner supports partition their mass, so
        # subtracting them never double-counts on deeper nesting chains
        for supp, t in seen:
            if (supp <= inv.support).all():
                target -= t
        if target < 0 or (cells.size == 0 and target != 0):
            raise InfeasibleConstraints(
                f"invariant {inv.label!r} leaves an unroundable exclusive target"
            )
        groups.append((cells, target))
        seen.append((inv.support.copy(), target))
        assigned[cells] = True
    rest = np.nonzero(~assigned)[0]
    if rest.size:
        groups.append((rest, int(round(float(x[rest].sum())))))
    out = np.zeros(C, dtype=np.int64)
    for cells, target in groups:
        if cells.size:
            out[cells] = _largest_remainder(x[cells], target)
    return out


# ----------------------------------------------------------------------
# the post-processing map


def _resolve_invariants(
    cfg: PostProcessConfig, agg: AggregationMatrix
) -> dict[geo.GeoLevel, list[tuple[str, np.ndarray]]]:
    """Rows to hold exact, per spine level (a level inherits every
    invariant declared at or below it)."""
    by_level: dict[geo.GeoLevel, list[tuple[str, np.ndarray]]] = {
        lv: [] for lv in geo.NMF_LEVEL_ORDER
    }
    for level, label in cfg.invariants:
        if level not in _LEVEL_INDEX:
            raise SchemaError(f"{level.value} is not an optimized-spine level")
        row = agg.row(label)
        if not np.isin(row, (0, 1)).all():
            raise SchemaError(f"invariant statistic {label!r} must be a 0/1 row")
        for lv in geo.NMF_LEVEL_ORDER[: _LEVEL_INDEX[level] + 1]:
            if label not in [lb for lb, _ in by_level[lv]]:
                by_level[lv].append((label, row.astype(bool)))
    return by_level


def topdown_postprocess(
    nms: NoisyMeasurements,
    cef: CefDataset,
    cfg: Optional[PostProcessConfig] = None,
    seed: Optional[int] = None,
    agg: Optional[AggregationMatrix] = None,
) -> PostProcessedDataset:
    """Map noisy measurements to a consistent synthetic population.

    ``seed`` is accepted for interface stability but the map is fully
    deterministic: rounding ties are resolved by index order.
    """
    cfg = cfg or PostProcessConfig()
    agg = agg or default_statistics(cef.schema)
    q = nms.query
    if q.schema.size != cef.schema.size:
        raise SchemaError("query matrix and enumeration schema disagree")
    spine = cef.spine
    inv_by_level = _resolve_invariants(cfg, agg)

    # per-level query split: weighted rows vs exact rows
    per_level: dict[geo.GeoLevel, dict] = {}
    qmat = q.matrix.astype(float)
    for lv in geo.NMF_LEVEL_ORDER:
        variances = q.variances_for(lv)
        wmask = variances > 0
        Qw = qmat[wmask]
        w = 1.0 / variances[wmask]
        QtW = Qw.T * w
        per_level[lv] = {
            "wmask": wmask,
            "emask": ~wmask,
            "Q0": qmat[~wmask],
            "H": 2.0 * (QtW @ Qw),
            "QtW": QtW,
        }

    def invariant_objects(level, nodes) -> list[_Invariant]:
        out = []
        for label, support in inv_by_level[level]:
            targets = np.array(
                [int(cef.node_histogram(n)[support].sum()) for n in nodes],
                dtype=np.int64,
            )
            out.append(_Invariant(label, support, targets))
        return out

    C = cef.schema.size
    solved: dict[str, np.ndarray] = {}

    needed = [geo.NATION_ID]
    for lv in geo.NMF_LEVEL_ORDER[1:]:
        needed.extend(spine.nodes_at(lv))
    missing = [n for n in needed if n not in nms]
    if missing:
        raise CoverageError(
            f"post-processing needs measurements at every spine node; "
            f"{len(missing)} missing, first {missing[0]}"
        )

    # root
    lvdat = per_level[geo.GeoLevel.NATION]
    ms = nms[geo.NATION_ID]
    mw = ms.values[lvdat["wmask"]].astype(float)
    m0 = ms.values[lvdat["emask"]].astype(float)
    invs = invariant_objects(geo.GeoLevel.NATION, [geo.NATION_ID])
    A_rows = [lvdat["Q0"]] + [inv.support.astype(float)[None, :] for inv in invs]
    b_rows = [m0] + [inv.targets.astype(float) for inv in invs]
    A = np.vstack(A_rows) if A_rows else np.zeros((0, C))
    b = np.concatenate(b_rows) if b_rows else np.zeros(0)
    x = _constrained_wls(lvdat["H"], 2.0 * (lvdat["QtW"] @ mw), A, b, cfg.nonneg)
    if cfg.integerize:
        root = _round_root(x, invs).astype(float)
    else:
        root = x
    solved[geo.NATION_ID] = root

    # descend one generation at a time
    for parent_level, child_level in zip(geo.NMF_LEVEL_ORDER, geo.NMF_LEVEL_ORDER[1:]):
        lvdat = per_level[child_level]
        for parent in spine.nodes_at(parent_level):
            kids = spine.children(parent)
            k = len(kids)
            pvec = solved[parent]
            if k == 1:
                solved[kids[0]] = pvec.copy()
                continue
            mw_list = [nms[kid].values[lvdat["wmask"]].astype(float) for kid in kids]
            m0_list = [nms[kid].values[lvdat["emask"]].astype(float) for kid in kids]
            invs = invariant_objects(child_level, kids)
            H = np.kron(np.eye(k), lvdat["H"])
            g = np.concatenate([2.0 * (lvdat["QtW"] @ mw) for mw in mw_list])
            blocks_A = [np.tile(np.eye(C), (1, k))]
            blocks_b = [pvec.astype(float)]
            if lvdat["Q0"].shape[0]:
                blocks_A.append(np.kron(np.eye(k), lvdat["Q0"]))
                blocks_b.append(np.concatenate(m0_list))
            for inv in invs:
                blocks_A.append(np.kron(np.eye(k), inv.support.astype(float)[None, :]))
                blocks_b.append(inv.targets.astype(float))
            A = np.vstack(blocks_A)
            b = np.concatenate(blocks_b)
            x = _constrained_wls(H, g, A, b, cfg.nonneg).reshape(k, C)
            if cfg.integerize:
                X = _round_group(x, pvec.astype(np.int64), invs, cfg.nonneg)
                for kid, row in zip(kids, X):
                    solved[kid] = row.astype(float)
            else:
                for kid, row in zip(kids, x):
                    solved[kid] = row

    block_counts = {
        raw: (solved[raw].astype(np.int64) if cfg.integerize else solved[raw])
        for raw in spine.blocks
    }
    out = PostProcessedDataset(spine, cef.schema, block_counts, nms.seed, cfg)
    _validate_postprocessed(out, cef, inv_by_level)
    return out


def _validate_postprocessed(
    ds: PostProcessedDataset,
    cef: CefDataset,
    inv_by_level: Mapping[geo.GeoLevel, list[tuple[str, np.ndarray]]],
) -> None:
    if not ds.config.integerize:
        return
    for lv in geo.NMF_LEVEL_ORDER:
        for label, support in inv_by_level[lv]:
            for node in ds.spine.nodes_at(lv):
                got = int(ds.node_histogram(node)[support].sum())
                want = int(cef.node_histogram(node)[support].sum())
                if got != want:
                    raise InfeasibleConstraints(
                        f"invariant {label!r} broken at {node}: {got} != {want}"
                    )


def run_twice(
    cef: CefDataset,
    q: QueryMatrix,
    cfg: Optional[PostProcessConfig] = None,
    seed1: int = 0,
    seed2: int = 1,
    agg: Optional[AggregationMatrix] = None,
) -> tuple[PostProcessedDataset, PostProcessedDataset]:
    """Two statistically independent end-to-end runs.

    Raises SeedError when the seeds coincide: identical seeds would
    reuse noise streams and silently break every independence-based
    estimator downstream.
    """
    if int(seed1) == int(seed2):
        raise SeedError(f"independent runs need distinct seeds, got {seed1} twice")
    out = []
    for s in (seed1, seed2):
        nms = make_noisy_measurements(cef, q, seed=s)
        out.append(topdown_postprocess(nms, cef, cfg, agg=agg))
    return out[0], out[1]
