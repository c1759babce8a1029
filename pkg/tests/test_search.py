import math
from itertools import combinations_with_replacement

import numpy as np
import pytest

from prunedirect.genome import Chromosome, GeneticMap, GenomePosition
from prunedirect.search import (
    PERMUTATION,
    ExhaustiveBudgetError,
    ScanContext,
    SearchBox,
    _build_table,
    _trisect,
    exhaustive_count,
    exhaustive_scan,
    init_ccboxes,
    prune,
    run_prunedirect,
    select_hull,
    split,
)
from prunedirect.simpop import (
    BACKCROSS,
    QtlSpec,
    make_additive_qtl,
    permute_phenotypes,
    simulate_population,
)


def make_pop(chrom_lengths=(100.0, 100.0), n=200, h2=0.3, qtl_offsets=((0, 40.0),), seed=1):
    gmap = GeneticMap([Chromosome(i, L) for i, L in enumerate(chrom_lengths)], 1.0)
    positions = [GenomePosition(c, o) for c, o in qtl_offsets]
    qtl = make_additive_qtl(positions, h2, BACKCROSS)
    return simulate_population(gmap, BACKCROSS, n, qtl, seed=seed)


def box_at(radius_key: int, value: float, order: int = 0) -> SearchBox:
    # 1-D stand-in with the requested (even) radius key: a centered box of
    # span = key has 2 * max(c - lo, hi - c) = key.
    assert radius_key % 2 == 0
    span = radius_key
    box = SearchBox((0,), (0,), (span,), (span // 2,), value, order)
    assert box.radius_key == radius_key
    return box


# ---------------------------------------------------------------------------
# cc-box initialisation
# ---------------------------------------------------------------------------


def test_ccbox_counts_five_choose_two():
    pop = make_pop(chrom_lengths=(10.0,) * 5, n=40, h2=0.0, qtl_offsets=(), seed=2)
    scan = ScanContext(pop)
    boxes = init_ccboxes(scan, 2)
    assert len(boxes) == 15  # C(5,2) + 5 multisets


def test_ccbox_single_chromosome_d1():
    pop = make_pop(chrom_lengths=(50.0,), n=40, h2=0.0, qtl_offsets=(), seed=2)
    boxes = init_ccboxes(ScanContext(pop), 1)
    assert len(boxes) == 1
    assert boxes[0].lo == (0,) and boxes[0].hi == (50,)


def test_ccbox_three_chromosomes_d3():
    pop = make_pop(chrom_lengths=(10.0,) * 3, n=40, h2=0.0, qtl_offsets=(), seed=2)
    boxes = init_ccboxes(ScanContext(pop), 3)
    assert len(boxes) == 10  # C(3+3-1, 3)


# ---------------------------------------------------------------------------
# hull selection
# ---------------------------------------------------------------------------


def brute_force_selected(points):
    """Dominance oracle: selected iff some K >= 0 makes the box's lower bound
    v - K r weakly smallest."""
    selected = []
    for i, (r_i, v_i) in enumerate(points):
        lo, hi = 0.0, math.inf
        feasible = True
        for j, (r_j, v_j) in enumerate(points):
            if j == i:
                continue
            if r_j == r_i:
                if v_i > v_j:
                    feasible = False
                    break
            elif r_j < r_i:
                hi = hi  # no-op: smaller radius constrains K from below
                lo = max(lo, (v_i - v_j) / (r_i - r_j))
            else:
                hi = min(hi, (v_j - v_i) / (r_j - r_i))
        if feasible and lo <= hi:
            selected.append(i)
    return selected


def test_hull_equal_radius_selects_single_minimum():
    boxes = [box_at(10, v, order=i) for i, v in enumerate([3.0, 1.5, 2.0, 1.5])]
    hull = select_hull(boxes)
    assert len(hull) == 1
    assert hull[0].value == 1.5 and hull[0].order == 1  # earliest wins the tie


def test_hull_small_low_and_large_high_both_selected():
    small = box_at(4, 1.0, order=0)
    large = box_at(20, 2.0, order=1)
    assert set(id(b) for b in select_hull([small, large])) == {id(small), id(large)}


def test_hull_dominated_box_never_selected():
    dominated = box_at(4, 5.0, order=0)  # smaller radius AND larger value
    better = box_at(20, 3.0, order=1)
    hull = select_hull([dominated, better])
    assert [id(b) for b in hull] == [id(better)]


def test_hull_collinear_points_all_kept():
    boxes = [box_at(4, 3.0, 0), box_at(8, 4.0, 1), box_at(12, 5.0, 2)]
    hull = select_hull(boxes)
    assert [b.radius_key for b in hull] == [4, 8, 12]


def test_hull_matches_brute_force_dominance():
    rng = np.random.default_rng(17)
    for trial in range(200):
        n_boxes = rng.integers(2, 12)
        keys = rng.choice(np.arange(1, 15) * 2, size=n_boxes)
        values = np.round(rng.normal(3.0, 1.0, size=n_boxes), 3)
        boxes = [box_at(int(k), float(v), order=i) for i, (k, v) in enumerate(zip(keys, values))]
        hull = {id(b) for b in select_hull(boxes)}
        # Oracle works on per-class minima (the implementation's candidates).
        best = {}
        for b in boxes:
            cur = best.get(b.radius_key)
            if cur is None or (b.value, b.order) < (cur.value, cur.order):
                best[b.radius_key] = b
        candidates = [best[k] for k in sorted(best)]
        pts = [(b.radius_key, b.value) for b in candidates]
        oracle = {id(candidates[i]) for i in brute_force_selected(pts)}
        assert hull == oracle, f"trial {trial}: hull != dominance oracle"


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def test_trisect_exact_thirds_91_points():
    segs, mid = _trisect(0, 90, 45)
    assert segs == [(0, 30), (31, 59), (60, 90)]
    assert mid == 1


def test_split_0_90_centers():
    pop = make_pop(chrom_lengths=(90.0,), n=50, h2=0.0, qtl_offsets=(), seed=3)
    scan = ScanContext(pop)
    parent = init_ccboxes(scan, 1)[0]
    before = scan.evaluations
    children = split(scan, parent, order_start=10)
    assert scan.evaluations - before == 2  # middle child inherits
    centers = sorted(c.center[0] for c in children)
    assert centers == [15, 45, 75]
    mid = next(c for c in children if c.center == parent.center)
    assert mid.value == parent.value


def test_split_picks_widest_dimension():
    pop = make_pop(chrom_lengths=(60.0, 60.0), n=50, h2=0.0, qtl_offsets=(), seed=3)
    scan = ScanContext(pop)
    box = SearchBox((0, 1), (0, 10), (60, 30), (30, 20), 1.0, 0)
    children = split(scan, box, order_start=1)
    for c in children:
        assert (c.lo[1], c.hi[1]) == (10, 30)  # dim 1 untouched
    assert sum(c.n_lattice_points for c in children) == box.n_lattice_points


def test_split_two_point_box():
    pop = make_pop(chrom_lengths=(10.0,), n=50, h2=0.0, qtl_offsets=(), seed=3)
    scan = ScanContext(pop)
    box = SearchBox((0,), (4,), (5,), (4,), 1.0, 0)
    children = split(scan, box, order_start=1)
    assert len(children) == 2
    assert {c.lo[0] for c in children} == {4, 5}
    mid = next(c for c in children if c.center == box.center)
    assert mid.value == box.value


def test_repeated_splitting_visits_every_lattice_point():
    # Without pruning, full refinement evaluates exactly the lattice.
    for length in (7.0, 30.0, 90.0, 100.0):
        pop = make_pop(chrom_lengths=(length,), n=30, h2=0.0, qtl_offsets=(), seed=4)
        res = run_prunedirect(pop, 1, prune_enabled=False)
        n_points = pop.gmap.n_points
        assert res.evaluations == n_points
        assert res.evaluations_raw == n_points
        assert res.terminated == "resolution"


def test_no_prune_d2_visits_exhaustive_set():
    pop = make_pop(chrom_lengths=(12.0, 9.0), n=40, h2=0.0, qtl_offsets=(), seed=5)
    res = run_prunedirect(pop, 2, prune_enabled=False)
    assert res.evaluations == exhaustive_count(pop.gmap.n_points, 2)


def test_volume_conservation_through_split_and_prune():
    pop = make_pop(chrom_lengths=(50.0, 30.0), n=100, h2=0.4, qtl_offsets=((0, 20.0),), seed=6)
    scan = ScanContext(pop)
    boxes = init_ccboxes(scan, 2)
    total = sum(b.n_lattice_points for b in boxes)
    table = _build_table(scan, scan.best_rss, scan.best_fit, 1e-9)
    pruned_volume = 0
    live = list(boxes)
    order = len(boxes)
    for _ in range(40):
        splittable = [b for b in live if b.splittable]
        if not splittable:
            break
        hull = select_hull(splittable)
        for box in hull:
            live.remove(box)
            kids = split(scan, box, order)
            order += len(kids)
            survivors, _ = prune(kids, table)
            pruned_volume += sum(k.n_lattice_points for k in kids) - sum(
                s.n_lattice_points for s in survivors
            )
            live.extend(survivors)
    assert sum(b.n_lattice_points for b in live) + pruned_volume == total


# ---------------------------------------------------------------------------
# pruning unit behaviour
# ---------------------------------------------------------------------------


def test_prune_keeps_incumbent_level_box():
    pop = make_pop(seed=7)
    scan = ScanContext(pop)
    init_ccboxes(scan, 1)
    table = _build_table(scan, scan.best_rss, scan.best_fit, 1e-9)
    incumbent_logvar = table.base_logvar
    keeper = SearchBox((0,), (10,), (10,), (10,), incumbent_logvar, 0)
    survivors, tests = prune([keeper], table)
    assert survivors == [keeper]
    assert tests == 1


def test_prune_discards_only_above_quantile():
    pop = make_pop(seed=8)
    scan = ScanContext(pop)
    init_ccboxes(scan, 1)
    table = _build_table(scan, scan.best_rss, scan.best_fit, 1e-9)
    q = table.quantile(0)
    good = SearchBox((0,), (10,), (10,), (10,), q, 0)
    bad = SearchBox((0,), (12,), (12,), (12,), q + 0.01, 1)
    survivors, tests = prune([good, bad], table)
    assert survivors == [good]
    assert not bad.alive
    assert tests == 2


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------


def test_prunedirect_matches_exhaustive_d1():
    for seed in range(8):
        pop = make_pop(h2=0.5, seed=seed)
        exh = exhaustive_scan(pop, 1)
        res = run_prunedirect(pop, 1)
        assert res.best_positions == exh.best_positions
        assert res.best_rss == exh.best_rss


def test_prunedirect_matches_exhaustive_d2_interaction():
    effects = np.zeros((2, 2))
    effects[1, 1] = 1.0
    env_sd = math.sqrt((3 / 16) * 0.7 / 0.3)
    gmap = GeneticMap([Chromosome(0, 100.0), Chromosome(1, 100.0)], 1.0)
    qtl = QtlSpec((GenomePosition(0, 40.0), GenomePosition(1, 70.0)), effects, env_sd)
    for seed in range(3):
        pop = simulate_population(gmap, BACKCROSS, 200, qtl, seed=seed)
        exh = exhaustive_scan(pop, 2)
        res = run_prunedirect(pop, 2)
        assert res.best_positions == exh.best_positions
        assert res.best_rss == exh.best_rss
        assert res.evaluations < exh.evaluations


def test_incumbent_consistent_with_refit():
    pop = make_pop(h2=0.4, seed=9)
    res = run_prunedirect(pop, 1)
    from prunedirect.regmodel import fit

    assert fit(pop, list(res.best_positions)).rss == res.best_rss


def test_permutation_mode_unbeatable_candidate_exits_after_init():
    # Small enough chromosomes: the initial boxes prune straight away.
    pop = make_pop(chrom_lengths=(60.0, 60.0), h2=0.0, qtl_offsets=(), seed=10)
    res = run_prunedirect(pop, 1, mode=PERMUTATION, reference=1e-9)
    assert res.evaluations == 2  # just the two cc-box centroids
    assert res.terminated == "pruned_all"
    assert not res.exceeded


def test_permutation_mode_unbeatable_candidate_never_searches():
    # 100 cM chromosomes: an initial radius-50 box survives one split round
    # (all informative individuals recombining across 50 cM has probability
    # above epsilon at n=200), but the run still collapses immediately after.
    pop = make_pop(h2=0.0, qtl_offsets=(), seed=10)
    res = run_prunedirect(pop, 1, mode=PERMUTATION, reference=1e-9)
    assert res.terminated == "pruned_all"
    assert res.evaluations <= 3 * 2  # init + one split per cc-box
    assert not res.exceeded


def test_permutation_mode_beatable_candidate_exits_early():
    pop = make_pop(h2=0.0, qtl_offsets=(), seed=11)
    from prunedirect.regmodel import total_ss

    _, sst = total_ss(pop.phenotypes)
    res = run_prunedirect(pop, 1, mode=PERMUTATION, reference=sst)
    assert res.exceeded
    assert res.terminated == "candidate_beaten"
    assert res.evaluations <= 2


def test_permutation_mode_requires_reference():
    pop = make_pop(seed=12)
    with pytest.raises(ValueError):
        run_prunedirect(pop, 1, mode=PERMUTATION)


def test_incumbent_monotone_over_run():
    # The incumbent can only improve; final best is the memo minimum.
    pop = make_pop(h2=0.2, seed=13)
    res = run_prunedirect(pop, 1)
    scan = ScanContext(pop)
    ev = scan.ev
    best = min(ev.fit_columns((i,)).rss for i in range(pop.gmap.n_points))
    assert res.best_rss == best


# ---------------------------------------------------------------------------
# exhaustive oracle
# ---------------------------------------------------------------------------


def test_exhaustive_counts():
    pop = make_pop(chrom_lengths=(100.0,), n=40, h2=0.0, qtl_offsets=(), seed=14)
    res = exhaustive_scan(pop, 1)
    assert res.evaluations == 101
    res2 = exhaustive_scan(pop, 2)
    assert res2.evaluations == math.comb(101, 2) + 101  # 5151 sorted pairs


def test_exhaustive_budget_refusal():
    pop = make_pop(chrom_lengths=(100.0, 100.0), n=40, h2=0.0, qtl_offsets=(), seed=15)
    with pytest.raises(ExhaustiveBudgetError) as err:
        exhaustive_scan(pop, 3, max_evaluations=10_000)
    assert err.value.estimate == exhaustive_count(202, 3)


def test_exhaustive_tie_break_lexicographic():
    pop = make_pop(chrom_lengths=(5.0,), n=20, h2=0.0, qtl_offsets=(), seed=16)
    # Duplicate a column so two tuples tie exactly: the first (lex) wins.
    g = pop.genotypes.copy()
    g[:, 4] = g[:, 1]
    from prunedirect.simpop import Population

    pop2 = Population(pop.cross_type, g, pop.phenotypes, pop.gmap)
    res = exhaustive_scan(pop2, 1)
    offsets = [p.offset for p in res.best_positions]
    ev_rss = [exhaustive_scan(pop2, 1).best_rss]
    if offsets[0] == 4.0:
        raise AssertionError("tie should resolve to the earlier duplicate column")


def test_scan_rejects_constant_phenotypes():
    pop = make_pop(chrom_lengths=(10.0,), n=20, h2=0.0, qtl_offsets=(), seed=17)
    flat = pop.with_phenotypes(np.ones(pop.n))
    with pytest.raises(ValueError):
        exhaustive_scan(flat, 1)
    with pytest.raises(ValueError):
        run_prunedirect(flat, 1)


def test_step_subsampling():
    pop = make_pop(chrom_lengths=(100.0,), h2=0.4, seed=18)
    res = exhaustive_scan(pop, 1, step=2.0)
    assert res.evaluations == 51
    res_pd = run_prunedirect(pop, 1, step=2.0)
    assert res_pd.best_positions == res.best_positions
    assert res_pd.best_rss == res.best_rss
