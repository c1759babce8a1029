"""Pruned-DIRECT multi-QTL mapping: simulator, objective, pruning bound,
search engines and permutation testing."""

from .genome import (
    UNLINKED,
    Chromosome,
    GeneticMap,
    GenomePosition,
    Unlinked,
    flip_prob,
    read_map,
    same_class_prob,
    write_map,
)
from .lipbound import (
    BoundParams,
    QuantileTable,
    RecombCounts,
    binomial_row,
    chi2_guard,
    chi2_mean_logvar,
    conditional_rss_cdf,
    logvar_infinite_expectation,
    logvar_quantile,
    make_bound_params,
    marginal_rss_cdf,
)
from .permtest import PermutationReport, run_permutation_test, threshold_at
from .regmodel import Evaluator, FitResult, fit, logvar_transform, total_ss
from .search import (
    ExhaustiveBudgetError,
    ScanContext,
    ScanResult,
    SearchBox,
    exhaustive_count,
    exhaustive_scan,
    init_ccboxes,
    prune,
    run_prunedirect,
    select_hull,
    split,
)
from .simpop import (
    BACKCROSS,
    INTERCROSS,
    Population,
    QtlSpec,
    additive_effect_table,
    heritability_to_effects,
    make_additive_qtl,
    permute_phenotypes,
    read_population,
    simulate_population,
    standardize_phenotypes,
    write_population,
)

__version__ = "0.1.0"
