"""Two-layer policy search, baseline schemes, and paired Monte-Carlo sweeps.

The outer layer walks the probing-duration grid (integer multiples of the
slot step); each grid point solves the probing design, refines the
eavesdropper angle window, and runs the transmission-phase search under the
inflated leakage cap.  The returned policy is the grid argmax of the
time-weighted sum rate.

Two reference schemes bracket the trade-off:

* ``baseline1`` fixes an even slot split and transmits without artificial
  noise (the beam-shape constraint is dropped: a zero AN covariance has no
  pattern to shape, and a zero shape amplitude would satisfy it vacuously);
* ``baseline2`` skips probing entirely and designs against the initial
  (coarse) angle uncertainty.

Sweeps pair the same channel drops across schemes and axis values, so curve
comparisons are paired comparisons.  A drop failing anywhere is excluded
everywhere ("pairwise exclusion") to keep the averages honest.  Every
(config, drop, scheme, duration) unit is independent -- nothing flows between
grid points -- so units can run in parallel and results can be cached on disk
keyed by the config fingerprint, the drop seed, the scheme, the duration, and
the search budget.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import (
    ChannelRealization,
    ScenarioConfig,
    config_fingerprint,
    sample_realization,
)
from .secure import (
    SecureContext,
    polyblock_optimize,
    rank_one_ratio,
    verify_robust_leakage,
)
from .sensing import SensingSolution, solve_sensing

__all__ = [
    "PROPOSED",
    "BASELINE1",
    "BASELINE2",
    "SCHEMES",
    "SENSING_TIME_AXIS",
    "LEAKAGE_CAP_AXIS",
    "SearchBudget",
    "GridPointRecord",
    "RunRecord",
    "SweepTable",
    "run_scheme_point",
    "two_layer_search",
    "resolve_design",
    "baseline1",
    "baseline2",
    "sweep",
    "record_to_dict",
    "record_from_dict",
    "table_to_dict",
]

PROPOSED = "proposed"
BASELINE1 = "baseline1"
BASELINE2 = "baseline2"
SCHEMES = (PROPOSED, BASELINE1, BASELINE2)

SENSING_TIME_AXIS = "sensing_time"
LEAKAGE_CAP_AXIS = "leakage_cap"

_CACHE_VERSION = "1"


@dataclass(frozen=True)
class SearchBudget:
    """Iteration/size limits handed to the transmission-phase search.

    The default certifies global optimality.  Sweeps use a trimmed profile
    (no certification, early stagnation stop): the incumbent stabilizes long
    before the certificate closes, and paired trend comparisons only need a
    consistent budget across schemes, not a proof per point.
    """

    max_iterations: int = 500
    max_vertices: int = 10_000
    certify: bool = True
    stagnation_window: Optional[int] = None

    def tag(self) -> str:
        s = 0 if self.stagnation_window is None else self.stagnation_window
        return f"i{self.max_iterations}v{self.max_vertices}c{int(self.certify)}s{s}"


#: budget used by the shipped sweeps; see SearchBudget docstring
SWEEP_BUDGET = SearchBudget(max_iterations=12, certify=False, stagnation_window=5)


@dataclass(frozen=True)
class GridPointRecord:
    """One probing-duration candidate inside the two-layer search."""

    sensing_time: float
    halfwidth: Optional[float]
    crlb_bound: Optional[float]
    sum_rate: Optional[float]
    wall_time: float
    error: Optional[str] = None


@dataclass(frozen=True, eq=False)
class RunRecord:
    """One scheme evaluated on one channel drop."""

    scheme: str
    seed: int
    sensing_time: float              # probing duration actually used (s)
    crlb_bound: Optional[float]      # certified angle-error bound; None
    #                                  when the scheme skips probing
    halfwidth: float                 # angle halfwidth used in phase two (rad)
    sum_rate: float                  # time-weighted bits/s/Hz
    user_rates: np.ndarray           # (K,) time-weighted per-user rates
    leakage_cap_bits: float          # per-user cap after slot-split inflation
    leakage_worst: np.ndarray        # (K,) worst certified-model leakage over
    #                                  the uncertainty grid (bits)
    leakage_exact_worst: np.ndarray  # (K,) same with exact steering
    leakage_ok: bool
    rank_ratios: np.ndarray          # (K,) eigenvalue ratio of returned covs
    witness_rank_ratios: np.ndarray  # (K,) same before rank-one repair
    wall_time: float                 # seconds of compute (not cache loading)
    converged: bool
    stop_reason: str
    iterations: int
    oracle_calls: int
    error: Optional[str] = None      # set on a "no feasible policy" result
    grid: Tuple[GridPointRecord, ...] = ()

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.error is None and self.sum_rate < 0:
            raise ValueError("sum_rate must be nonnegative")


@dataclass(frozen=True, eq=False)
class SweepTable:
    """Paired Monte-Carlo summary along one sweep axis."""

    axis: str
    values: Tuple[float, ...]
    n_drops: int                          # drops included after exclusion
    seeds: Tuple[int, ...]                # included drop seeds
    excluded_seeds: Tuple[int, ...]       # drops removed pairwise
    means: Dict[str, Tuple[float, ...]]   # scheme -> per-value mean sum rate
    stds: Dict[str, Tuple[float, ...]]    # scheme -> per-value sample stddev
    records: Tuple[RunRecord, ...]

    def __post_init__(self):
        for scheme, row in self.means.items():
            if len(row) != len(self.values):
                raise ValueError(f"means[{scheme!r}] length mismatch")


# ---------------------------------------------------------------------------
# serialization (cache files and CLI output share it)


def _to_jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, tuple):
        return [_to_jsonable(v) for v in value]
    if isinstance(value, GridPointRecord):
        return {k: _to_jsonable(v) for k, v in asdict(value).items()}
    return value


def record_to_dict(record: RunRecord) -> dict:
    out = {}
    for name in record.__dataclass_fields__:
        out[name] = _to_jsonable(getattr(record, name))
    return out


def record_from_dict(data: dict) -> RunRecord:
    data = dict(data)
    for name in ("user_rates", "leakage_worst", "leakage_exact_worst",
                 "rank_ratios", "witness_rank_ratios"):
        data[name] = np.asarray(data[name], dtype=float)
    data["grid"] = tuple(GridPointRecord(**g) for g in data.get("grid", ()))
    return RunRecord(**data)


def table_to_dict(table: SweepTable) -> dict:
    return {
        "axis": table.axis,
        "values": list(table.values),
        "n_drops": table.n_drops,
        "seeds": list(table.seeds),
        "excluded_seeds": list(table.excluded_seeds),
        "means": {k: list(v) for k, v in table.means.items()},
        "stds": {k: list(v) for k, v in table.stds.items()},
        "records": [record_to_dict(r) for r in table.records],
    }


# ---------------------------------------------------------------------------
# cache


def _realization_digest(realization: ChannelRealization) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(realization.user_channels).tobytes())
    h.update(repr((realization.eve_aod_nominal, realization.eve_distance_nominal,
                   realization.eve_gamma_nominal)).encode())
    return h.hexdigest()[:12]


def _cache_path(cache_dir: Path, config: ScenarioConfig, scheme: str,
                sensing_time: float, seed: int, budget: SearchBudget) -> Path:
    t_ns = int(round(sensing_time * 1e9))
    name = f"{config_fingerprint(config)}_{scheme}_{t_ns}_{seed}_{budget.tag()}.json"
    return cache_dir / name


def _cache_load(path: Path, budget: SearchBudget, digest: str) -> Optional[RunRecord]:
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError):
        return None
    if (payload.get("version") != _CACHE_VERSION
            or payload.get("budget") != asdict(budget)
            or payload.get("digest") != digest):
        return None
    return record_from_dict(payload["record"])


def _cache_store(path: Path, record: RunRecord, budget: SearchBudget,
                 digest: str) -> None:
    payload = {"version": _CACHE_VERSION, "budget": asdict(budget),
               "digest": digest, "record": record_to_dict(record)}
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# single-point evaluation


def _shared_sensing(config: ScenarioConfig,
                    realization: ChannelRealization) -> Callable[[], SensingSolution]:
    """Lazy single probing solve; its bound rescales to any duration."""
    cache: List[SensingSolution] = []

    def provider() -> SensingSolution:
        if not cache:
            cache.append(solve_sensing(config, realization, config.time_step))
        return cache[0]

    return provider


def run_scheme_point(config: ScenarioConfig, realization: ChannelRealization,
                     scheme: str, budget: SearchBudget = SearchBudget(),
                     sensing_time: Optional[float] = None,
                     sensing_provider: Optional[Callable[[], SensingSolution]] = None,
                     cache_dir: Optional[os.PathLike] = None) -> RunRecord:
    """Evaluate one scheme at one probing duration on one drop.

    For ``proposed`` the duration is required; ``baseline1`` forces the even
    split without artificial noise; ``baseline2`` forces zero probing time and
    the initial angle uncertainty.  With ``cache_dir`` set, a matching stored
    record (same config fingerprint, drop, scheme, duration, and budget) is
    returned without recomputation; the stored wall time is the original
    compute time.
    """
    if scheme == PROPOSED:
        if sensing_time is None:
            raise ValueError("proposed scheme needs an explicit sensing_time")
    elif scheme == BASELINE1:
        sensing_time = 0.5 * config.total_slot
    elif scheme == BASELINE2:
        sensing_time = 0.0
    else:
        raise ValueError(f"unknown scheme {scheme!r}")

    digest = _realization_digest(realization)
    path = None
    if cache_dir is not None:
        path = _cache_path(Path(cache_dir), config, scheme, sensing_time,
                           realization.rng_seed, budget)
        hit = _cache_load(path, budget, digest)
        if hit is not None:
            return hit

    if scheme == BASELINE2:
        halfwidth, crlb = config.aod_bound_initial, None
    else:
        if sensing_provider is None:
            sensing_provider = _shared_sensing(config, realization)
        refined = sensing_provider().at_time(sensing_time, config)
        halfwidth, crlb = refined.refined_halfwidth, refined.crlb_bound

    t0 = time.perf_counter()
    context = SecureContext(config, realization, halfwidth=halfwidth,
                            sensing_time=sensing_time,
                            use_an=(scheme != BASELINE1))
    solution = polyblock_optimize(context,
                                  max_iterations=budget.max_iterations,
                                  max_vertices=budget.max_vertices,
                                  certify=budget.certify,
                                  stagnation_window=budget.stagnation_window)
    report = verify_robust_leakage(solution, realization, config)
    weight = 1.0 - sensing_time / config.total_slot
    record = RunRecord(
        scheme=scheme,
        seed=realization.rng_seed,
        sensing_time=sensing_time,
        crlb_bound=crlb,
        halfwidth=halfwidth,
        sum_rate=solution.sum_rate,
        user_rates=weight * np.log2(np.maximum(solution.sinr_targets, 1.0)),
        leakage_cap_bits=solution.cap_bits,
        leakage_worst=report.taylor_worst,
        leakage_exact_worst=report.exact_worst,
        leakage_ok=report.compliant,
        rank_ratios=np.array([rank_one_ratio(W) for W in solution.signal_covs]),
        witness_rank_ratios=solution.witness_rank_ratios,
        wall_time=time.perf_counter() - t0,
        converged=solution.converged,
        stop_reason=solution.stop_reason,
        iterations=solution.iterations,
        oracle_calls=solution.oracle_calls,
    )
    if path is not None:
        _cache_store(path, record, budget, digest)
    return record


# ---------------------------------------------------------------------------
# schemes


def two_layer_search(config: ScenarioConfig, realization: ChannelRealization,
                     budget: SearchBudget = SearchBudget(),
                     cache_dir: Optional[os.PathLike] = None) -> RunRecord:
    """Search the probing-duration grid and return the best policy found.

    Every multiple of the slot step short of the full slot is a candidate;
    grid points that fail (probing design or transmission search raising)
    are logged in the returned record's ``grid`` and skipped.  If every
    point fails the returned record carries ``error="no_feasible_policy"``
    and the zero-transmission rate.  Ties on the rate break toward the
    shorter probing duration.
    """
    provider = _shared_sensing(config, realization)
    grid: List[GridPointRecord] = []
    candidates: List[RunRecord] = []
    for t_s in config.time_grid():
        t0 = time.perf_counter()
        try:
            rec = run_scheme_point(config, realization, PROPOSED, budget,
                                   sensing_time=float(t_s),
                                   sensing_provider=provider,
                                   cache_dir=cache_dir)
        except Exception as exc:  # per-point isolation is the contract
            grid.append(GridPointRecord(float(t_s), None, None, None,
                                        time.perf_counter() - t0,
                                        f"{type(exc).__name__}: {exc}"))
            continue
        candidates.append(rec)
        grid.append(GridPointRecord(float(t_s), rec.halfwidth, rec.crlb_bound,
                                    rec.sum_rate, rec.wall_time))
    total_time = sum(g.wall_time for g in grid)
    if not candidates:
        k = config.n_users
        zeros = np.zeros(k)
        return RunRecord(scheme=PROPOSED, seed=realization.rng_seed,
                         sensing_time=0.0, crlb_bound=None,
                         halfwidth=config.aod_bound_initial, sum_rate=0.0,
                         user_rates=zeros, leakage_cap_bits=config.leakage_cap,
                         leakage_worst=zeros, leakage_exact_worst=zeros,
                         leakage_ok=True, rank_ratios=zeros,
                         witness_rank_ratios=zeros, wall_time=total_time,
                         converged=False, stop_reason="no_feasible_policy",
                         iterations=0, oracle_calls=0,
                         error="no_feasible_policy", grid=tuple(grid))
    best = max(candidates, key=lambda r: (r.sum_rate, -r.sensing_time))
    return replace(best, wall_time=total_time, grid=tuple(grid))


def resolve_design(config: ScenarioConfig, realization: ChannelRealization,
                   record: RunRecord, budget: SearchBudget = SearchBudget()):
    """Re-derive the transmit design behind a record.

    Records keep only scalar summaries; the covariances are reproduced by
    re-running the (deterministic) transmission-phase search at the record's
    scheme, duration, and halfwidth under the same budget.
    """
    if record.error is not None:
        raise ValueError("record carries no design (search failed)")
    context = SecureContext(config, realization, halfwidth=record.halfwidth,
                            sensing_time=record.sensing_time,
                            use_an=(record.scheme != BASELINE1))
    return polyblock_optimize(context,
                              max_iterations=budget.max_iterations,
                              max_vertices=budget.max_vertices,
                              certify=budget.certify,
                              stagnation_window=budget.stagnation_window)


def baseline1(config: ScenarioConfig, realization: ChannelRealization,
              budget: SearchBudget = SearchBudget(),
              cache_dir: Optional[os.PathLike] = None) -> RunRecord:
    """Even slot split, no artificial noise in the transmission phase."""
    return run_scheme_point(config, realization, BASELINE1, budget,
                            cache_dir=cache_dir)


def baseline2(config: ScenarioConfig, realization: ChannelRealization,
              budget: SearchBudget = SearchBudget(),
              cache_dir: Optional[os.PathLike] = None) -> RunRecord:
    """No probing phase: transmit immediately under the coarse uncertainty."""
    return run_scheme_point(config, realization, BASELINE2, budget,
                            cache_dir=cache_dir)


# ---------------------------------------------------------------------------
# paired sweeps


def _sweep_drop(config: ScenarioConfig, axis: str, values: Sequence[float],
                seed: int, budget: SearchBudget,
                cache_dir: Optional[os.PathLike]) -> Dict[Tuple[str, int], RunRecord]:
    """All records for one drop: keys are (scheme, value_index).

    On the probing-duration axis the baselines do not depend on the axis
    value, so each is computed once and shared across the row.
    """
    realization = sample_realization(config, seed)
    out: Dict[Tuple[str, int], RunRecord] = {}
    if axis == SENSING_TIME_AXIS:
        provider = _shared_sensing(config, realization)
        for vi, value in enumerate(values):
            out[(PROPOSED, vi)] = run_scheme_point(
                config, realization, PROPOSED, budget, sensing_time=value,
                sensing_provider=provider, cache_dir=cache_dir)
        b1 = baseline1(config, realization, budget, cache_dir)
        b2 = baseline2(config, realization, budget, cache_dir)
        for vi in range(len(values)):
            out[(BASELINE1, vi)] = b1
            out[(BASELINE2, vi)] = b2
    else:
        for vi, value in enumerate(values):
            cfg_v = config.with_overrides(leakage_cap=float(value))
            real_v = sample_realization(cfg_v, seed)
            out[(PROPOSED, vi)] = two_layer_search(cfg_v, real_v, budget, cache_dir)
            out[(BASELINE1, vi)] = baseline1(cfg_v, real_v, budget, cache_dir)
            out[(BASELINE2, vi)] = baseline2(cfg_v, real_v, budget, cache_dir)
    for record in out.values():
        if record.error is not None:
            raise RuntimeError(f"drop {seed}: {record.error}")
    return out


def _resolve_workers(n_workers: Optional[int]) -> int:
    if n_workers is None:
        n_workers = int(os.environ.get("SECURE_ISAC_WORKERS", "1"))
    if n_workers < 1:
        raise ValueError("worker count must be >= 1")
    return n_workers


def sweep(config: ScenarioConfig, axis: str, values: Sequence[float],
          n_drops: int, base_seed: int = 0,
          budget: SearchBudget = SWEEP_BUDGET,
          cache_dir: Optional[os.PathLike] = None,
          n_workers: Optional[int] = None) -> SweepTable:
    """Mean/stddev sum-rate curves along one axis, paired across schemes.

    ``sensing_time`` values fix the probing duration directly (the inner
    argmax is bypassed to trace the whole curve); ``leakage_cap`` values
    override the per-user cap and run the full two-layer search.  Drops are
    seeded ``base_seed .. base_seed+n_drops-1``; a drop whose evaluation
    fails anywhere is excluded from every cell.  Workers (processes) split
    drops; the result is identical for any worker count.
    """
    if axis not in (SENSING_TIME_AXIS, LEAKAGE_CAP_AXIS):
        raise ValueError(f"unknown sweep axis {axis!r}")
    values = tuple(float(v) for v in values)
    if not values:
        raise ValueError("values must be nonempty")
    if axis == LEAKAGE_CAP_AXIS and min(values) <= 0:
        raise ValueError("leakage caps must be positive")
    if n_drops < 1:
        raise ValueError("n_drops must be >= 1")

    seeds = [base_seed + i for i in range(n_drops)]
    n_workers = _resolve_workers(n_workers)
    results: Dict[int, Dict[Tuple[str, int], RunRecord]] = {}
    failures: Dict[int, str] = {}

    def handle(seed: int, outcome, error: Optional[str]) -> None:
        if error is not None:
            failures[seed] = error
        else:
            results[seed] = outcome

    if n_workers == 1:
        for seed in seeds:
            try:
                handle(seed, _sweep_drop(config, axis, values, seed, budget,
                                         cache_dir), None)
            except Exception as exc:
                handle(seed, None, f"{type(exc).__name__}: {exc}")
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            futures = {seed: pool.submit(_sweep_drop, config, axis, values,
                                         seed, budget, cache_dir)
                       for seed in seeds}
            for seed, future in futures.items():
                try:
                    handle(seed, future.result(), None)
                except Exception as exc:
                    handle(seed, None, f"{type(exc).__name__}: {exc}")

    included = [s for s in seeds if s in results]
    means: Dict[str, Tuple[float, ...]] = {}
    stds: Dict[str, Tuple[float, ...]] = {}
    for scheme in SCHEMES:
        m_row, s_row = [], []
        for vi in range(len(values)):
            rates = np.array([results[s][(scheme, vi)].sum_rate for s in included])
            m_row.append(float(rates.mean()) if included else float("nan"))
            s_row.append(float(rates.std(ddof=1)) if len(rates) > 1 else 0.0)
        means[scheme] = tuple(m_row)
        stds[scheme] = tuple(s_row)

    records: List[RunRecord] = []
    for seed in included:
        seen_ids: set = set()
        for key in sorted(results[seed]):
            rec = results[seed][key]
            if id(rec) not in seen_ids:  # baselines shared across the row
                seen_ids.add(id(rec))
                records.append(rec)

    return SweepTable(axis=axis, values=values, n_drops=len(included),
                      seeds=tuple(included),
                      excluded_seeds=tuple(sorted(failures)),
                      means=means, stds=stds, records=tuple(records))
