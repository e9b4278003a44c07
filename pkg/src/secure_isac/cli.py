"""Command-line front end: config files, runs, sweeps, and result audits.

Config files are JSON whose keys are exactly the ``ScenarioConfig`` field
names plus the run controls ``n_drops``, ``base_seed``, ``out_dir``,
``grid_n`` and ``cache_dir``.  Unknown keys are rejected; omitted keys fall
back to the defaults with a logged notice.  The two angle fields
(``aod_bound_initial``, ``sector_halfwidth``) are given in degrees in files
and converted to radians at this boundary.

Subcommands::

    run           two-layer search plus both baselines on one channel drop;
                  writes a structured result file with the transmit designs
    sweep         paired Monte-Carlo curve along one axis; writes a CSV
                  summary (axis_value, scheme, mean_rate, std_rate, n) and a
                  structured file with every per-drop record
    verify        re-checks power, beam-shape and leakage constraints of a
                  stored run file straight from the stored matrices
    oracle-check  small-instance ground-truth suite (brute-force grid vs
                  global search, bisection contract, error-bound and
                  derivative oracles)

Exit codes: 0 success, 1 infeasible result or failed checks, 2 usage or
config errors.  The environment variable ``SECURE_ISAC_WORKERS`` caps worker
processes for sweeps.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .conic import hermitian_real_embedding
from .model import (
    ScenarioConfig,
    sample_realization,
    sector_grid,
    steering_vector,
    target_response,
)
from .secure import SecureContext, leakage_grid, polyblock_optimize, project_vertex
from .sensing import crlb_theta
from . import orchestrator as orch

__all__ = [
    "main",
    "load_config_file",
    "config_to_file_dict",
    "encode_matrix",
    "decode_matrix",
    "exhaustive_rate_search",
]

log = logging.getLogger("secure_isac")

ANGLE_FIELDS = ("aod_bound_initial", "sector_halfwidth")
RUN_CONTROL_DEFAULTS = {
    "n_drops": 20,
    "base_seed": 0,
    "out_dir": "results",
    "grid_n": 101,
    "cache_dir": None,
}


class CliError(Exception):
    """Fatal usage/config problem; message goes to stderr, exit code 2."""


# ---------------------------------------------------------------------------
# config files


def load_config_file(path: Optional[str]) -> Tuple[ScenarioConfig, dict]:
    """Parse a JSON config into (ScenarioConfig, run controls).

    ``path=None`` yields all defaults.  Angles arrive in degrees and leave in
    radians.  Unknown keys raise; missing keys are logged once.
    """
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise CliError(f"config {path} must be a JSON object")

    known = {f.name for f in fields(ScenarioConfig)}
    scenario_kw: dict = {}
    controls = dict(RUN_CONTROL_DEFAULTS)
    for key, value in raw.items():
        if key in known:
            scenario_kw[key] = (math.radians(value) if key in ANGLE_FIELDS
                                else value)
        elif key in RUN_CONTROL_DEFAULTS:
            controls[key] = value
        else:
            raise CliError(f"config key {key!r} is not recognized")
    missing = sorted(known - set(scenario_kw))
    if path is not None and missing:
        log.info("config: defaults used for %s", ", ".join(missing))
    try:
        config = ScenarioConfig(**scenario_kw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from exc
    return config, controls


def config_to_file_dict(config: ScenarioConfig) -> dict:
    """Inverse of the config parse (radians back to degrees)."""
    out = {}
    for f in fields(config):
        value = getattr(config, f.name)
        if f.name in ANGLE_FIELDS:
            value = math.degrees(value)
        out[f.name] = value
    return out


# ---------------------------------------------------------------------------
# matrix (de)serialization: row-major, re/im interleaved, shape explicit


def encode_matrix(M: np.ndarray) -> dict:
    M = np.asarray(M, dtype=complex)
    flat = np.empty(2 * M.size)
    flat[0::2] = M.real.ravel()
    flat[1::2] = M.imag.ravel()
    return {"shape": list(M.shape), "data": flat.tolist()}


def decode_matrix(obj: dict) -> np.ndarray:
    flat = np.asarray(obj["data"], dtype=float)
    M = flat[0::2] + 1j * flat[1::2]
    return M.reshape(obj["shape"])


def _assert_finite(obj, where: str = "") -> None:
    """Reject NaN/Inf anywhere in a JSON-ready tree before it reaches disk."""
    if isinstance(obj, dict):
        for k, v in obj.items():
            _assert_finite(v, f"{where}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _assert_finite(v, f"{where}[{i}]")
    elif isinstance(obj, float) and not math.isfinite(obj):
        raise CliError(f"non-finite value at {where or 'root'}")


def _write_json(path: Path, payload: dict) -> None:
    _assert_finite(payload)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1))
    log.info("wrote %s", path)


# ---------------------------------------------------------------------------
# run


def _budget(name: str) -> orch.SearchBudget:
    if name == "certified":
        return orch.SearchBudget()
    return orch.SWEEP_BUDGET


def _design_payload(solution) -> dict:
    return {
        "W": [encode_matrix(W) for W in solution.signal_covs],
        "Z": encode_matrix(solution.an_cov),
        "pattern_scale": solution.pattern_scale,
        "sinr_targets": list(solution.sinr_targets),
    }


def cmd_run(args: argparse.Namespace) -> int:
    config, controls = load_config_file(args.config)
    seed = controls["base_seed"] if args.seed is None else args.seed
    cache = args.cache_dir or controls["cache_dir"]
    budget = _budget(args.budget)
    realization = sample_realization(config, seed)

    records = {
        orch.PROPOSED: orch.two_layer_search(config, realization, budget, cache),
        orch.BASELINE1: orch.baseline1(config, realization, budget, cache),
        orch.BASELINE2: orch.baseline2(config, realization, budget, cache),
    }
    payload = {
        "config": config_to_file_dict(config),
        "seed": seed,
        "realization": {
            "eve_aod_deg": math.degrees(realization.eve_aod_nominal),
            "eve_distance": realization.eve_distance_nominal,
            "eve_gamma": [realization.eve_gamma_nominal.real,
                          realization.eve_gamma_nominal.imag],
        },
        "schemes": {},
    }
    print(f"{'scheme':<10} {'T_s[ms]':>8} {'psi[deg]':>9} {'rate':>8} "
          f"{'leak_ok':>8} {'time[s]':>8}")
    for scheme, rec in records.items():
        entry: dict = {"record": orch.record_to_dict(rec)}
        if rec.error is None:
            solution = orch.resolve_design(config, realization, rec, budget)
            entry["design"] = _design_payload(solution)
        payload["schemes"][scheme] = entry
        print(f"{scheme:<10} {rec.sensing_time * 1e3:>8.2f} "
              f"{math.degrees(rec.halfwidth):>9.3f} {rec.sum_rate:>8.3f} "
              f"{str(rec.leakage_ok):>8} {rec.wall_time:>8.1f}")

    out_dir = Path(args.out or controls["out_dir"])
    _write_json(out_dir / f"run_seed{seed}.json", payload)
    return 1 if records[orch.PROPOSED].error is not None else 0


# ---------------------------------------------------------------------------
# sweep


_AXIS_BY_FLAG = {"sensing-time": orch.SENSING_TIME_AXIS,
                 "leakage": orch.LEAKAGE_CAP_AXIS}


def _parse_values(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise CliError(f"--values must be a comma-separated float list: {exc}")


def cmd_sweep(args: argparse.Namespace) -> int:
    config, controls = load_config_file(args.config)
    axis = _AXIS_BY_FLAG[args.axis]
    values = _parse_values(args.values)
    if not values:
        raise CliError("--values is empty")
    n_drops = args.drops if args.drops is not None else controls["n_drops"]
    cache = args.cache_dir or controls["cache_dir"]
    table = orch.sweep(config, axis, values, n_drops,
                       base_seed=controls["base_seed"],
                       budget=_budget(args.budget), cache_dir=cache)
    if table.n_drops == 0:
        print("all drops failed:", dict.fromkeys(table.excluded_seeds),
              file=sys.stderr)
        return 1

    out_dir = Path(args.out or controls["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"sweep_{axis}.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis_value", "scheme", "mean_rate", "std_rate", "n"])
        for vi, value in enumerate(table.values):
            for scheme in orch.SCHEMES:
                writer.writerow([value, scheme, table.means[scheme][vi],
                                 table.stds[scheme][vi], table.n_drops])
    log.info("wrote %s", csv_path)
    _write_json(out_dir / f"sweep_{axis}.json",
                {"config": config_to_file_dict(config),
                 "base_seed": controls["base_seed"],
                 **orch.table_to_dict(table)})

    for scheme in orch.SCHEMES:
        row = "  ".join(f"{m:7.3f}" for m in table.means[scheme])
        print(f"{scheme:<10} {row}")
    if table.excluded_seeds:
        print(f"excluded drops: {list(table.excluded_seeds)}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# verify


def _verify_scheme(scheme: str, entry: dict, config: ScenarioConfig,
                   eve_aod: float, eve_distance: float,
                   grid_n: int) -> List[str]:
    """Re-check one stored design; returns human-readable violations."""
    try:
        record = entry["record"]
        design = entry["design"]
        Ws = [decode_matrix(w) for w in design["W"]]
        Z = decode_matrix(design["Z"])
        scale = float(design["pattern_scale"])
        halfwidth = float(record["halfwidth"])
        cap_bits = float(record["leakage_cap_bits"])
    except KeyError as exc:
        raise CliError(f"{scheme}: result file is missing {exc}") from exc

    problems: List[str] = []
    tol = 1e-6

    power = sum(np.trace(W).real for W in Ws) + np.trace(Z).real
    if power > config.power_budget + tol:
        problems.append(f"power {power:.6g} exceeds budget {config.power_budget:.6g}")
    for i, W in enumerate(Ws + [Z]):
        name = f"W{i}" if i < len(Ws) else "Z"
        lam_min = float(np.linalg.eigvalsh((W + W.conj().T) / 2)[0])
        if lam_min < -tol:
            problems.append(f"{name} not PSD (min eigenvalue {lam_min:.3g})")

    if scheme != orch.BASELINE1:
        grid = sector_grid(config)
        mask = (np.abs(grid - eve_aod) <= halfwidth).astype(float)
        deviation = 0.0
        for ang, m in zip(grid, mask):
            a = steering_vector(ang, config.n_antennas, config.antenna_spacing)
            deviation += abs(m * scale - (a.conj() @ Z @ a).real)
        if deviation > config.pattern_tol_ii + tol:
            problems.append(f"beam-shape deviation {deviation:.6g} exceeds "
                            f"{config.pattern_tol_ii:.6g}")

    taylor_worst, _ = leakage_grid(np.stack(Ws), Z, halfwidth, eve_aod,
                                   eve_distance, config, grid_n)
    for i, worst in enumerate(taylor_worst):
        if worst > cap_bits + tol:
            problems.append(f"user {i} leakage {worst:.6g} bits exceeds cap "
                            f"{cap_bits:.6g}")
    return problems


def cmd_verify(args: argparse.Namespace) -> int:
    try:
        payload = json.loads(Path(args.results).read_text())
    except OSError as exc:
        raise CliError(f"cannot read results {args.results}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"results {args.results} is not valid JSON: {exc}") from exc

    file_cfg = {k: v for k, v in payload.get("config", {}).items()}
    for key in ANGLE_FIELDS:
        if key in file_cfg:
            file_cfg[key] = math.radians(file_cfg[key])
    try:
        config = ScenarioConfig(**file_cfg)
    except (TypeError, ValueError) as exc:
        raise CliError(f"results carry an invalid config: {exc}") from exc
    try:
        eve_aod = math.radians(payload["realization"]["eve_aod_deg"])
        eve_distance = float(payload["realization"]["eve_distance"])
        schemes = payload["schemes"]
    except KeyError as exc:
        raise CliError(f"results file is missing {exc}") from exc

    failed = False
    for scheme, entry in schemes.items():
        if "design" not in entry:
            print(f"{scheme}: no design stored (search failed)", flush=True)
            continue
        problems = _verify_scheme(scheme, entry, config, eve_aod, eve_distance,
                                  args.grid_n)
        if problems:
            failed = True
            for p in problems:
                print(f"{scheme}: VIOLATION: {p}")
        else:
            print(f"{scheme}: power/beam-shape/leakage checks pass")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# oracle-check


def exhaustive_rate_search(context: SecureContext, step: float = 1e-2) -> float:
    """Brute-force reference optimum over a per-user rate lattice (two users).

    Feasibility of a target pair is monotone (componentwise), so the lattice
    maximum equals the maximum along the feasibility frontier, found with one
    descending column pointer: at most n1+n2 oracle calls, yet exactly the
    exhaustive-enumeration answer for the same lattice.
    """
    if context.n_users != 2:
        raise ValueError("the brute-force reference is written for two users")
    counts = [int(np.floor(np.log2(u) / step)) for u in context.utopia]

    def feasible(i: int, j: int) -> bool:
        targets = np.array([2.0 ** (i * step), 2.0 ** (j * step)])
        return context.oracle(targets).feasible

    best = 0.0
    j = counts[1]
    for i in range(counts[0] + 1):
        while j >= 0 and not feasible(i, j):
            j -= 1
        if j < 0:
            break
        best = max(best, (i + j) * step)
    return best


ORACLE_CONFIG = ScenarioConfig(n_antennas=2, n_users=2, angle_grid_size=16)


def _oracle_small_context(seed: int) -> SecureContext:
    realization = sample_realization(ORACLE_CONFIG, seed)
    return SecureContext(ORACLE_CONFIG, realization, halfwidth=0.05,
                         sensing_time=0.5 * ORACLE_CONFIG.total_slot)


def cmd_oracle_check(args: argparse.Namespace) -> int:
    del args
    ok = True
    step = 1e-2
    eps = ORACLE_CONFIG.conv_tol_polyblock

    for seed in (0, 1):
        solution = polyblock_optimize(_oracle_small_context(seed))
        reference = exhaustive_rate_search(_oracle_small_context(seed), step)
        delta = abs(solution.inner_rate - reference)
        bound = eps + 2 * step
        ok &= delta <= bound
        print(f"grid-equivalence seed {seed}: |delta|={delta:.3e} "
              f"(bound {bound:.3e}) {'pass' if delta <= bound else 'FAIL'}")

    rng = np.random.default_rng(2024)
    context = _oracle_small_context(2)
    tol = ORACLE_CONFIG.conv_tol_bisect
    budget = int(np.ceil(np.log2(1.0 / tol))) + 1
    worst_calls, contract = 0, True
    for _ in range(10):
        vertex = 1.0 + rng.uniform(0.0, 1.0, 2) * (context.utopia - 1.0)
        before = context.oracle_calls
        pr = project_vertex(vertex, context)
        worst_calls = max(worst_calls, context.oracle_calls - before)
        contract &= context.oracle(np.maximum(pr.ratio * vertex, 1.0)).feasible
        if pr.ratio + tol < 1.0:
            probe = np.maximum((pr.ratio + tol) * vertex, 1.0)
            contract &= not context.oracle(probe).feasible
    ok &= contract and worst_calls <= budget
    print(f"bisection contract: calls<= {worst_calls} (budget {budget}), "
          f"bracket certified: {'pass' if contract else 'FAIL'}")

    cfg = ORACLE_CONFIG
    R = np.eye(cfg.n_antennas) * cfg.power_budget / cfg.n_antennas
    theta, gamma_mag, t_s = 0.2, 1e-4, 1e-4
    H, dH = target_response(theta, cfg.n_antennas, cfg.antenna_spacing)
    echo = np.trace(H @ R @ H).real
    cross = np.trace(H @ R @ dH)
    curve = np.trace(dH @ R @ dH).real
    by_hand = cfg.noise_sense / (2 * gamma_mag ** 2 * t_s
                                 * (curve - abs(cross) ** 2 / echo))
    lib = crlb_theta(cfg, R, theta, gamma_mag, t_s)
    rel = abs(lib - by_hand) / by_hand
    ok &= rel <= 1e-9
    print(f"error-bound oracle: rel diff {rel:.3e} "
          f"{'pass' if rel <= 1e-9 else 'FAIL'}")

    h = 1e-6
    worst = 0.0
    for theta in (-0.8, 0.0, 0.5):
        _, dH = target_response(theta, 4)
        Hp, _ = target_response(theta + h, 4)
        Hm, _ = target_response(theta - h, 4)
        fd = (Hp - Hm) / (2 * h)
        worst = max(worst, np.max(np.abs(fd - dH)) / np.max(np.abs(dH)))
    ok &= worst <= 1e-6
    print(f"derivative oracle: rel diff {worst:.3e} "
          f"{'pass' if worst <= 1e-6 else 'FAIL'}")

    psd_ok = True
    for i in range(20):
        A = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
        M = A @ A.conj().T - (i % 3) * np.eye(3)
        lam_c = np.linalg.eigvalsh(M).min()
        lam_r = np.linalg.eigvalsh(hermitian_real_embedding(M)).min()
        psd_ok &= (lam_c >= -1e-12) == (lam_r >= -1e-12)
    ok &= psd_ok
    print(f"embedding oracle: PSD equivalence {'pass' if psd_ok else 'FAIL'}")

    return 0 if ok else 1


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="secure-isac",
        description="Two-phase secure ISAC resource allocation: probing-phase "
                    "covariance design plus globally optimal secure "
                    "beamforming, with Monte-Carlo sweep tooling.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", metavar="PATH", default=None,
                       help="JSON config; omitted keys use the documented "
                            "defaults (angles in degrees)")
        p.add_argument("--out", metavar="DIR", default=None,
                       help="output directory (default: config out_dir, "
                            "'results')")
        p.add_argument("--cache-dir", metavar="DIR", default=None,
                       help="reuse stored per-point results from this "
                            "directory (default: no cache)")
        p.add_argument("--budget", choices=("fast", "certified"),
                       default="fast",
                       help="search budget: 'fast' stops on incumbent "
                            "stagnation, 'certified' closes the global bound "
                            "(default: fast)")

    p_run = sub.add_parser("run", help="one drop, all three schemes")
    common(p_run)
    p_run.add_argument("--seed", type=int, default=None,
                       help="drop seed (default: config base_seed, 0)")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="paired Monte-Carlo curve")
    common(p_sweep)
    p_sweep.add_argument("--axis", choices=tuple(_AXIS_BY_FLAG), required=True,
                         help="sweep axis: probing duration (seconds) or "
                              "per-user leakage cap (bits)")
    p_sweep.add_argument("--values", required=True, metavar="CSV",
                         help="comma-separated axis values, e.g. "
                              "1e-4,2e-4,3e-4")
    p_sweep.add_argument("--drops", type=int, default=None,
                         help="paired channel drops (default: config "
                              "n_drops, 20)")
    p_sweep.set_defaults(func=cmd_sweep)

    p_verify = sub.add_parser("verify",
                              help="re-check constraints of a stored run")
    p_verify.add_argument("--results", required=True, metavar="PATH",
                          help="run_seed*.json produced by the run command")
    p_verify.add_argument("--grid-n", type=int, default=101,
                          help="uncertainty-grid resolution per axis "
                               "(default: 101)")
    p_verify.set_defaults(func=cmd_verify)

    p_oracle = sub.add_parser("oracle-check",
                              help="small-instance ground-truth suite")
    p_oracle.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
