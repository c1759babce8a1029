"""Empirical significance via permutation testing.

Each permutation shuffles the phenotypes and re-scans.  The shortcut mode
replaces the permuted run's own optimum by the fixed candidate value when
pruning, and stops at the first evaluation matching the candidate: the
exceed/not-exceed decision is all a p-value needs, and it is identical to the
one a full search would reach.  Thresholds require the full per-permutation
optima, so they are only available from full-search runs.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .search import PERMUTATION, SEARCH, run_prunedirect
from .simpop import Population, permute_phenotypes

SHORTCUT = "shortcut"
FULL_SEARCH = "full"


@dataclass(frozen=True)
class PermutationReport:
    candidate_rss: float
    n_perms: int
    n_exceeding: int
    p_value: float
    evaluations: tuple[int, ...]
    exceeded: tuple[bool, ...]
    optima_rss: tuple[float, ...] | None
    mode: str
    d: int
    base_seed: int
    prune_tests: int


def _one_permutation(args) -> tuple[int, bool, int, float, int]:
    pop, d, candidate_rss, seed, epsilon, full_search, prune_enabled = args
    permuted = permute_phenotypes(pop, seed)
    if full_search:
        res = run_prunedirect(permuted, d, epsilon=epsilon, mode=SEARCH, prune_enabled=prune_enabled)
    else:
        res = run_prunedirect(
            permuted, d, epsilon=epsilon, mode=PERMUTATION, reference=candidate_rss,
            prune_enabled=prune_enabled,
        )
    # Ties count as exceeding (conservative).
    exceeded = res.best_rss <= candidate_rss
    return seed, exceeded, res.evaluations, res.best_rss, res.prune_tests


def run_permutation_test(
    pop: Population,
    d: int,
    candidate_rss: float,
    n_perms: int,
    base_seed: int,
    *,
    epsilon: float = 1e-9,
    full_search: bool = False,
    prune_enabled: bool = True,
    n_jobs: int = 1,
) -> PermutationReport:
    """Scan ``n_perms`` phenotype permutations against a candidate RSS.

    Permutation i uses seed ``base_seed + i`` so any single permutation can be
    re-run in isolation.  The p-value uses the (count+1)/(N+1) convention.
    Results are a deterministic reduction over the jobs, independent of
    execution order; ``n_jobs > 1`` fans out over processes.
    """
    if n_perms < 1:
        raise ValueError(f"need at least one permutation, got {n_perms}")
    if not math.isfinite(candidate_rss):
        raise ValueError(f"candidate RSS must be finite, got {candidate_rss}")
    jobs = [
        (pop, d, candidate_rss, base_seed + i, epsilon, full_search, prune_enabled)
        for i in range(n_perms)
    ]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            raw = list(pool.map(_one_permutation, jobs))
    else:
        raw = [_one_permutation(j) for j in jobs]
    raw.sort(key=lambda r: r[0])  # by seed: order-independent reduction

    exceeded = tuple(r[1] for r in raw)
    evaluations = tuple(r[2] for r in raw)
    optima = tuple(r[3] for r in raw) if full_search else None
    n_exceeding = sum(exceeded)
    return PermutationReport(
        candidate_rss=candidate_rss,
        n_perms=n_perms,
        n_exceeding=n_exceeding,
        p_value=(n_exceeding + 1) / (n_perms + 1),
        evaluations=evaluations,
        exceeded=exceeded,
        optima_rss=optima,
        mode=FULL_SEARCH if full_search else SHORTCUT,
        d=d,
        base_seed=base_seed,
        prune_tests=sum(r[4] for r in raw),
    )


def threshold_at(report: PermutationReport, level: float) -> float:
    """Empirical level-quantile (nearest rank) of the permuted optimum RSS.

    Only full-search reports carry the optima; candidate-shortcut runs answer
    exceed/not-exceed without locating optima and cannot produce thresholds.
    """
    if report.optima_rss is None:
        raise ValueError(
            "thresholds need per-permutation optima: rerun the permutation test with full_search=True"
        )
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"level must be in [0, 1], got {level}")
    ordered = sorted(report.optima_rss)
    rank = min(max(math.ceil(level * len(ordered)), 1), len(ordered))
    return ordered[rank - 1]


def default_n_jobs() -> int:
    """Worker count from the PRUNEDIRECT_THREADS environment variable."""
    value = os.environ.get("PRUNEDIRECT_THREADS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        raise ValueError(f"PRUNEDIRECT_THREADS must be an integer, got {value!r}") from None
