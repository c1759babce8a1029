"""Command-line surface: simulate, scan, permute, compare, bench, report.

Every subcommand is deterministic given its arguments; all randomness flows
through explicit seeds.  Exit codes: 0 success, 1 engine disagreement
(compare), 2 configuration error.  PRUNEDIRECT_THREADS sets the worker count
for permutation and replicate fan-out.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
from pathlib import Path

import numpy as np

from . import report as report_mod
from .genome import GenomePosition, read_map
from .permtest import default_n_jobs, run_permutation_test, threshold_at
from .regmodel import fit
from .search import ScanResult, exhaustive_scan, run_prunedirect
from .simpop import (
    make_additive_qtl,
    parse_cross_type,
    read_population,
    simulate_population,
    standardize_phenotypes,
    write_population,
)

FORMAT_VERSION = 1


class ConfigError(Exception):
    pass


def _write_json(payload: dict, path: str | Path) -> None:
    payload = {"format_version": FORMAT_VERSION, **payload}
    report_mod.atomic_write_text(path, json.dumps(payload, indent=2) + "\n")


def _parse_qtl(text: str | None) -> list[GenomePosition]:
    if not text:
        return []
    out = []
    for token in text.split(","):
        chrom_s, sep, off_s = token.partition(":")
        if not sep:
            raise ConfigError(f"QTL token {token!r} is not chrom:pos")
        out.append(GenomePosition(int(chrom_s), float(off_s)))
    return out


def _positions_payload(result: ScanResult) -> list[dict]:
    return [{"chromosome": p.chromosome, "offset": p.offset} for p in result.best_positions]


def _scan_payload(result: ScanResult) -> dict:
    return {
        "d": result.d,
        "mode": result.mode,
        "epsilon": result.epsilon,
        "positions": _positions_payload(result),
        "rss": result.best_rss,
        "logvar": result.best_logvar,
        "evaluations": {"raw": result.evaluations_raw, "dedup": result.evaluations},
        "pruned_boxes": result.pruned_boxes,
        "prune_tests": result.prune_tests,
        "aggregate_epsilon": result.aggregate_epsilon,
        "terminated": result.terminated,
    }


def cmd_simulate(args) -> int:
    gmap = read_map(args.map, args.step)
    cross = parse_cross_type(args.cross)
    positions = _parse_qtl(args.qtl)
    if args.h2 > 0 and not positions:
        raise ConfigError("--h2 > 0 needs at least one --qtl position")
    qtl = make_additive_qtl(positions, args.h2, cross)
    pop = simulate_population(gmap, cross, args.n, qtl, args.seed)
    if args.standardize:
        pop = standardize_phenotypes(pop)
    write_population(pop, args.out)
    print(f"wrote {args.n} {cross} individuals over {gmap.n_points} lattice points to {args.out}")
    return 0


def cmd_scan(args) -> int:
    pop = read_population(args.infile)
    if args.exhaustive:
        result = exhaustive_scan(pop, args.d, step=args.step)
    else:
        result = run_prunedirect(
            pop,
            args.d,
            epsilon=args.epsilon,
            step=args.step,
            prune_enabled=not args.no_prune,
            collect_quantile_dump=args.dump_quantiles is not None,
        )
    _write_json(_scan_payload(result), args.out)
    if args.dump_quantiles is not None:
        dump = result.quantile_dump or {}
        _write_json({"quantile_table": dump}, args.dump_quantiles)
    pos = ", ".join(str(p) for p in result.best_positions)
    print(
        f"best [{pos}] rss={result.best_rss:.6g} evaluations={result.evaluations} "
        f"(raw {result.evaluations_raw}) prune_tests={result.prune_tests} "
        f"aggregate_epsilon={result.aggregate_epsilon:.3g} terminated={result.terminated}"
    )
    return 0


def cmd_permute(args) -> int:
    pop = read_population(args.infile)
    candidate = json.loads(Path(args.candidate).read_text())
    try:
        candidate_rss = float(candidate["rss"])
        candidate_d = int(candidate["d"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"candidate file {args.candidate} lacks scan fields: {exc}")
    if candidate_d != args.d:
        raise ConfigError(f"candidate was a d={candidate_d} scan but --d is {args.d}")
    levels = [float(t) for t in args.levels.split(",")] if args.levels else []
    if levels and not args.full_search:
        raise ConfigError("--levels needs --full-search (shortcut runs cannot produce thresholds)")
    rep = run_permutation_test(
        pop,
        args.d,
        candidate_rss,
        args.n_perms,
        args.seed,
        epsilon=args.epsilon,
        full_search=args.full_search,
        n_jobs=default_n_jobs(),
    )
    payload = {
        "candidate_rss": rep.candidate_rss,
        "d": rep.d,
        "n_perms": rep.n_perms,
        "n_exceeding": rep.n_exceeding,
        "p_value": rep.p_value,
        "mode": rep.mode,
        "base_seed": rep.base_seed,
        "evaluations": list(rep.evaluations),
        "exceeded": list(rep.exceeded),
        "prune_tests": rep.prune_tests,
        "aggregate_epsilon": args.epsilon * rep.prune_tests,
    }
    if rep.optima_rss is not None:
        payload["optima_rss"] = list(rep.optima_rss)
        payload["thresholds"] = {str(lv): threshold_at(rep, lv) for lv in levels}
    _write_json(payload, args.out)
    print(f"p-value {rep.p_value:.4g} ({rep.n_exceeding}/{rep.n_perms} exceeding)")
    return 0


def cmd_compare(args) -> int:
    pop = read_population(args.infile)
    exh = exhaustive_scan(pop, args.d, step=args.step)
    pruned = run_prunedirect(pop, args.d, epsilon=args.epsilon, step=args.step)
    agreement = (
        exh.best_positions == pruned.best_positions and exh.best_rss == pruned.best_rss
    )
    ratio = exh.evaluations / max(pruned.evaluations, 1)
    payload = {
        "agreement": agreement,
        "speedup_evaluations": ratio,
        "exhaustive": _scan_payload(exh),
        "prunedirect": _scan_payload(pruned),
    }
    _write_json(payload, args.out)
    print(
        f"agreement={agreement} evaluations exhaustive={exh.evaluations} "
        f"prunedirect={pruned.evaluations} speedup={ratio:.2f}x"
    )
    return 0 if agreement else 1


def _stats_row(counts: list[int]) -> dict:
    return {
        "min": min(counts),
        "median": statistics.median(counts),
        "avg": statistics.fmean(counts),
        "max": max(counts),
    }


def cmd_bench(args) -> int:
    gmap = read_map(args.map, args.step)
    cross = parse_cross_type(args.cross)
    positions = _parse_qtl(args.qtl)
    if args.h2 > 0 and not positions:
        raise ConfigError("--h2 > 0 needs at least one --qtl position")
    qtl = make_additive_qtl(positions, args.h2, cross)
    exh_counts: list[int] = []
    pd_counts: list[int] = []
    for i in range(args.replicates):
        pop = simulate_population(gmap, cross, args.n, qtl, args.seed + i)
        exh = exhaustive_scan(pop, args.d)
        pruned = run_prunedirect(pop, args.d, epsilon=args.epsilon)
        exh_evals = exh.evaluations
        pd_evals = pruned.evaluations
        if args.n_perms:
            rep = run_permutation_test(
                pop, args.d, pruned.best_rss, args.n_perms, args.seed + 10_000 + i,
                epsilon=args.epsilon, n_jobs=default_n_jobs(),
            )
            pd_evals += sum(rep.evaluations)
            exh_evals += args.n_perms * exh.evaluations
        exh_counts.append(exh_evals)
        pd_counts.append(pd_evals)
    rows = [
        {"method": "exhaustive", **_stats_row(exh_counts)},
        {"method": "prunedirect", **_stats_row(pd_counts)},
    ]
    payload = {
        "replicates": args.replicates,
        "d": args.d,
        "h2": args.h2,
        "n": args.n,
        "n_perms": args.n_perms,
        "rows": rows,
    }
    _write_json(payload, args.out)
    header = f"{'method':<12}{'min':>12}{'median':>12}{'avg':>14}{'max':>12}"
    print(header)
    for r in rows:
        print(f"{r['method']:<12}{r['min']:>12}{r['median']:>12g}{r['avg']:>14.1f}{r['max']:>12}")
    return 0


def cmd_report(args) -> int:
    pop = read_population(args.infile)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    scan_result = None
    scan_payload = None
    if args.scan:
        scan_payload = json.loads(Path(args.scan).read_text())
        positions = tuple(
            GenomePosition(p["chromosome"], p["offset"]) for p in scan_payload["positions"]
        )
        refit = fit(pop, list(positions))
        if refit.rss != scan_payload["rss"]:
            raise ConfigError(
                f"scan result does not match this population: stored rss {scan_payload['rss']!r}, "
                f"refit {refit.rss!r}"
            )

    profile = report_mod.objective_profile(pop)
    report_mod.write_profile_csv(profile, out_dir / "profile.csv")
    if not args.no_figures:
        report_mod.render_profile_figure(profile, out_dir / "profile.png", None)

    perm_payload = None
    if args.perm:
        perm_payload = json.loads(Path(args.perm).read_text())
        if "optima_rss" in perm_payload:
            from .permtest import FULL_SEARCH, PermutationReport

            rep = PermutationReport(
                candidate_rss=perm_payload["candidate_rss"],
                n_perms=perm_payload["n_perms"],
                n_exceeding=perm_payload["n_exceeding"],
                p_value=perm_payload["p_value"],
                evaluations=tuple(perm_payload["evaluations"]),
                exceeded=tuple(perm_payload["exceeded"]),
                optima_rss=tuple(perm_payload["optima_rss"]),
                mode=FULL_SEARCH,
                d=perm_payload["d"],
                base_seed=perm_payload["base_seed"],
                prune_tests=perm_payload["prune_tests"],
            )
            hist = report_mod.permutation_histogram(rep)
            report_mod.write_histogram_csv(hist, out_dir / "permutation_hist.csv")
            if not args.no_figures:
                report_mod.render_histogram_figure(
                    hist, out_dir / "permutation_hist.png", rep.candidate_rss
                )

    summary = []
    gmap = pop.gmap
    summary.append(
        f"population: n={pop.n} {pop.cross_type}, {len(gmap.chromosomes)} chromosomes, "
        f"{gmap.n_points} lattice points at {gmap.lattice_step:g} cM"
    )
    if scan_payload is not None:
        pos = ", ".join(f"{p['chromosome']}:{p['offset']:g}" for p in scan_payload["positions"])
        summary.append(f"scan: d={scan_payload['d']} best at [{pos}]")
        summary.append(f"  rss={scan_payload['rss']:.6g} logvar={scan_payload['logvar']:.6g}")
        ev = scan_payload["evaluations"]
        summary.append(
            f"  evaluations={ev['dedup']} (raw {ev['raw']}), prune_tests={scan_payload['prune_tests']}, "
            f"aggregate_epsilon={scan_payload['aggregate_epsilon']:.3g}, terminated={scan_payload['terminated']}"
        )
    if perm_payload is not None:
        summary.append(
            f"permutations: {perm_payload['n_perms']} ({perm_payload['mode']}), "
            f"exceeding={perm_payload['n_exceeding']}, p={perm_payload['p_value']:.4g}"
        )
        for level, thr in sorted(perm_payload.get("thresholds", {}).items()):
            summary.append(f"  threshold[{level}] = {thr:.6g}")
    report_mod.atomic_write_text(out_dir / "summary.txt", "\n".join(summary) + "\n")
    print("\n".join(summary))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prunedirect",
        description="Multi-QTL scans: pruned-DIRECT search, exhaustive oracle, permutation testing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a cross population with known QTL")
    p.add_argument("--map", required=True, help="map file: chrom_id<TAB>length_cM per line")
    p.add_argument("--cross", required=True, help="bc (backcross) or f2 (intercross)")
    p.add_argument("--n", type=int, required=True, help="number of individuals")
    p.add_argument("--h2", type=float, default=0.0, help="broad-sense heritability")
    p.add_argument("--qtl", default="", help="QTL positions chr:pos[,chr:pos...]")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--step", type=float, default=1.0, help="lattice step in cM")
    p.add_argument("--standardize", action="store_true", help="scale phenotypes to zero mean, unit variance")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("scan", help="run a QTL scan")
    p.add_argument("--in", dest="infile", required=True, help="population TSV")
    p.add_argument("--d", type=int, required=True, help="number of loci in the model")
    p.add_argument("--step", type=float, default=None, help="scan lattice step (default: population lattice)")
    p.add_argument("--epsilon", type=float, default=1e-9, help="per-test residual pruning probability")
    p.add_argument("--exhaustive", action="store_true", help="run the exhaustive oracle instead")
    p.add_argument("--no-prune", action="store_true", help="classic DIRECT to exhaustion, no pruning")
    p.add_argument("--dump-quantiles", default=None, help="write the quantile table JSON here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("permute", help="permutation significance test against a scan candidate")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--candidate", required=True, help="scan result JSON of the candidate")
    p.add_argument("--n-perms", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epsilon", type=float, default=1e-9)
    p.add_argument("--full-search", action="store_true", help="locate each permuted optimum (enables thresholds)")
    p.add_argument("--levels", default="", help="threshold levels, e.g. 0.95,0.99 (needs --full-search)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_permute)

    p = sub.add_parser("compare", help="certify prunedirect against the exhaustive oracle")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=1e-9)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bench", help="evaluation-count table over simulated replicates")
    p.add_argument("--map", required=True)
    p.add_argument("--cross", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--h2", type=float, default=0.0)
    p.add_argument("--qtl", default="")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--replicates", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=1e-9)
    p.add_argument("--n-perms", type=int, default=0, help="add permutation evaluations per replicate")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="summary, profile/histogram CSVs and figures")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--scan", default=None, help="scan result JSON")
    p.add_argument("--perm", default=None, help="permutation result JSON")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
