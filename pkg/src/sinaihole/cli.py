"""Command-line entry points: map-check, survival, response, family, compare.

Exit codes: 0 all checks passed, 1 a check failed, 2 configuration error.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import math
import sys
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

from . import io
from .billiard_map import run_map_suites
from .config import ExperimentConfig, load_config
from .errors import ConfigError, Extinction, HorizonViolation, MassExtinct, OverlapError
from .families import (FamilyParams, Mode, evolve_family, mixing_diagnostic,
                       regularity_report, vertical_line_family)
from .geometry import Table, build_table, verify_table
from .open_system import escape_rate, make_hole, simulate, survival_constant
from .response import compare, finite_difference_derivative, response_series

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    command: str
    seed: int
    started: str
    finished: str = ""
    outputs: list = field(default_factory=list)
    exit_code: int = 0


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _table(cfg: ExperimentConfig) -> Table:
    """Build the table and insist on a finite horizon."""
    try:
        table = build_table(cfg.table_specs(), cfg.ref_angles())
    except ValueError as exc:
        raise ConfigError(f"invalid table: {exc}") from None
    rep = verify_table(table)
    rep.raise_if_infinite()
    return table


def _family_params(cfg: ExperimentConfig) -> FamilyParams:
    f = cfg.family
    return FamilyParams(delta_star=f.delta_star, k0=f.k0, k_max_strip=f.k_max_strip,
                        mass_floor=f.mass_floor, max_pairs=f.max_pairs, seed=cfg.mc.seed)


# ---------------------------------------------------------------------------
# subcommands; each returns an exit code and appends written files to ``out``


def cmd_map_check(cfg: ExperimentConfig, out_dir: Path, written: list) -> int:
    table = build_table(cfg.table_specs(), cfg.ref_angles())
    horizon = verify_table(table)
    h = cfg.config_hash()
    written.append(io.write_json(out_dir / "horizon.json", horizon.to_dict(), h))
    horizon.raise_if_infinite()
    results = run_map_suites(table, seed=cfg.mc.seed)
    ok = all(r.passed for r in results)
    written.append(io.write_json(out_dir / "map_check.json",
                                 {"passed": ok, "suites": [r.to_dict() for r in results]}, h))
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.value:.3g} (tol {r.tolerance:g}, n={r.n})")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_survival(cfg: ExperimentConfig, out_dir: Path, written: list) -> int:
    table = _table(cfg)
    h = cfg.config_hash()
    obs = cfg.observable_objects()
    holes = [make_hole(table, cfg.hole.r_star, t) for t in cfg.hole.t_list]
    traces = simulate(table, holes, cfg.mc.n_steps, obs, cfg.mc.n_particles, cfg.mc.seed)
    summary = []
    for tr in traces:
        header, rows = tr.rows()
        written.append(io.write_csv(out_dir / f"survival_t{tr.t:g}.csv", header, rows, h))
        entry = {"t": tr.t, "final_p": float(tr.p[-1]), "grazing_killed": tr.grazing_killed}
        try:
            er = escape_rate(tr)
            entry.update(escape_rate=er.rate, escape_rate_stderr=er.stderr,
                         escape_rate_ci=list(er.ci), survival_constant=survival_constant(tr))
        except Extinction as exc:
            entry["error"] = f"Extinction: {exc}"
        except ValueError as exc:
            entry["error"] = str(exc)
        summary.append(entry)
        print(f"t={tr.t:g}: p_n={tr.p[-1]:.6g} escape_rate={entry.get('escape_rate', float('nan')):.6g}"
              + (f" [{entry['error']}]" if "error" in entry else ""))
    written.append(io.write_json(out_dir / "survival.json", {"traces": summary}, h))
    return EXIT_OK


def cmd_response(cfg: ExperimentConfig, out_dir: Path, written: list) -> int:
    table = _table(cfg)
    h = cfg.config_hash()
    t_list = sorted((t for t in cfg.hole.t_list if t > 0), reverse=True)
    if len(t_list) < 2:
        raise ConfigError("response needs at least two positive hole sizes in hole.t_list")
    code = EXIT_OK
    for obs in cfg.observable_objects():
        rep = response_series(table, cfg.hole.r_star, obs, cfg.series.tail_tol,
                              cfg.series.K_max, cfg.quadrature.n_phi_nodes,
                              n_r_nodes=cfg.quadrature.n_r_nodes)
        finite_difference_derivative(table, cfg.hole.r_star, obs, t_list, cfg.mc.n_particles,
                                     cfg.mc.n_steps, cfg.mc.seed, report=rep)
        compare(rep)
        stem = f"response_{obs.name}".replace("(", "_").replace(")", "").replace(",", "_")
        written.append(io.write_json(out_dir / f"{stem}.json", rep, h))
        rows = [(t.k, t.mu0_part, t.line_part, t.term, ps, t.quad_error_estimate)
                for t, ps in zip(rep.terms, rep.partial_sums)]
        written.append(io.write_csv(out_dir / f"{stem}_terms.csv",
                                    ["k", "mu0_part", "line_part", "term", "partial_sum", "quad_error"],
                                    rows, h))
        print(f"{obs.name}: series={rep.series_value:.6g} (K={rep.K}, tail={rep.tail_bound:.2g}) "
              f"fd={rep.richardson_value:.6g} +- {rep.richardson_stderr:.2g} "
              f"combined={rep.combined_error:.3g} -> {rep.verdict}")
        if rep.verdict != "PASS":
            code = EXIT_FAIL
    return code


def cmd_family(cfg: ExperimentConfig, out_dir: Path, written: list) -> int:
    table = _table(cfg)
    h = cfg.config_hash()
    params = _family_params(cfg)
    objs = cfg.observable_objects()
    obs = next((o for o in objs if not o.is_constant), objs[0])
    fc = cfg.family
    code = EXIT_OK
    mixing = []
    for t in fc.t_values:
        hole = make_hole(table, cfg.hole.r_star, t)
        mode = Mode.LEAKY if t > 0 else Mode.CLOSED
        for r in fc.r_values:
            fam = vertical_line_family(table, r, params)
            rows = []
            for n in range(fc.n_generations + 1):
                if n:
                    try:
                        fam = evolve_family(fam, table, hole, mode, params)
                    except MassExtinct as exc:
                        print(f"t={t:g} r={r:g}: MassExtinct at n={n}: {exc}")
                        break
                reg = regularity_report(fam)
                rows.append((n, reg.Z, reg.varpi, reg.max_phi2, reg.max_density_ratio,
                             reg.n_pairs, fam.total_mass))
            written.append(io.write_csv(out_dir / f"family_t{t:g}_r{r:g}.csv",
                                        ["n", "Z", "varpi", "max_phi2", "max_density_ratio",
                                         "n_pairs", "total_mass"], rows, h))
        a = vertical_line_family(table, fc.r_values[0], params)
        b = a if fc.r_values[0] == fc.r_values[1] else vertical_line_family(table, fc.r_values[1], params)
        ds = mixing_diagnostic(a, b, table, hole, fc.mixing_steps, obs)
        ok = not (math.isfinite(ds.gamma) and ds.gamma >= 1.0)
        mixing.append({"t": t, "observable": obs.name, "r_values": list(fc.r_values), "ok": ok,
                       **ds.to_dict()})
        print(f"t={t:g}: gamma_emp={ds.gamma:.4g} R2={ds.r2:.4g} n_fit={ds.n_fit} max d_n={max(ds.d):.3g}")
        if not ok:
            code = EXIT_FAIL
    written.append(io.write_json(out_dir / "mixing.json", {"series": mixing}, h))
    return code


COMMANDS = {
    "map-check": cmd_map_check,
    "survival": cmd_survival,
    "response": cmd_response,
    "family": cmd_family,
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sinaihole",
                                description="Open Sinai billiard experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML experiment config (defaults if omitted)")
        s.add_argument("--seed", type=int, help="override mc.seed")
        s.add_argument("--out", default="out", help="output directory (default: out)")
        s.add_argument("--threads", type=int, help="numba worker threads")
    c = sub.add_parser("compare", help="compare two result files with matching config hash")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--tol", type=float, default=0.0, help="allowed absolute difference")
    sub.add_parser("show-config", help="print the default config as YAML")
    return p


def _compare(args) -> int:
    try:
        d = io.compare_files(args.a, args.b)
    except io.HashMismatch as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"max abs difference: {d:.17g}")
    return EXIT_OK if d <= args.tol else EXIT_FAIL


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "compare":
        return _compare(args)
    if args.command == "show-config":
        import yaml
        print(yaml.safe_dump(ExperimentConfig().model_dump(mode="json"), sort_keys=False), end="")
        return EXIT_OK
    if args.threads:
        import numba
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    try:
        cfg = load_config(args.config).with_seed(args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    man = RunManifest(config_hash=cfg.config_hash(), code_version=code_version(),
                      command=args.command, seed=cfg.mc.seed, started=_now())
    written = []
    try:
        code = COMMANDS[args.command](cfg, out_dir, written)
    except (ConfigError, OverlapError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except HorizonViolation as exc:
        print(f"HorizonViolation: {exc}", file=sys.stderr)
        code = EXIT_FAIL
    man.finished = _now()
    man.outputs = [str(p) for p in written]
    man.exit_code = code
    io.write_json(out_dir / f"manifest_{args.command}.json", asdict(man), man.config_hash)
    return code


if __name__ == "__main__":
    sys.exit(main())
