"""Simulated backcross / F2-intercross populations with known QTL.

Gametes are Markov walks along each chromosome under the Haldane model (no
interference): the class at offset 0 is uniform and flips between adjacent
lattice points with probability ``flip_prob(step)``.  Phenotypes are the
full-interaction effect-table mean at the QTL genotypes plus Gaussian noise.
Everything is a pure function of (inputs, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .genome import GeneticMap, GenomePosition, Chromosome, flip_prob

BACKCROSS = "backcross"
INTERCROSS = "intercross"

_CLI_CROSS = {"bc": BACKCROSS, "f2": INTERCROSS, BACKCROSS: BACKCROSS, INTERCROSS: INTERCROSS}


def n_genotype_classes(cross_type: str) -> int:
    """Per-locus class count: 2 for a backcross, 3 for an intercross."""
    if cross_type == BACKCROSS:
        return 2
    if cross_type == INTERCROSS:
        return 3
    raise ValueError(f"unknown cross type {cross_type!r}")


def parse_cross_type(token: str) -> str:
    try:
        return _CLI_CROSS[token]
    except KeyError:
        raise ValueError(f"unknown cross type {token!r} (expected bc or f2)") from None


@dataclass(frozen=True)
class QtlSpec:
    """QTL positions, the full-interaction class-mean table and noise level.

    ``effects`` has shape ``(k,) * d`` with k the per-locus class count; entry
    ``effects[g1, ..., gd]`` is the phenotype mean of that genotype class.
    """

    positions: tuple[GenomePosition, ...]
    effects: np.ndarray
    env_sd: float

    def __post_init__(self):
        object.__setattr__(self, "positions", tuple(self.positions))
        object.__setattr__(self, "effects", np.asarray(self.effects, dtype=float))
        if len(set(self.positions)) != len(self.positions):
            raise ValueError("QTL positions must be distinct")
        if self.env_sd < 0 or not math.isfinite(self.env_sd):
            raise ValueError(f"env_sd must be finite and non-negative, got {self.env_sd}")
        d = len(self.positions)
        if d and self.effects.ndim != d:
            raise ValueError(f"effect table must have one axis per QTL ({d}), got shape {self.effects.shape}")


@dataclass(frozen=True)
class Population:
    """Per-individual allele-origin genotypes on the map lattice plus one
    phenotype vector."""

    cross_type: str
    genotypes: np.ndarray  # (n, map.n_points) small ints
    phenotypes: np.ndarray  # (n,)
    gmap: GeneticMap

    def __post_init__(self):
        object.__setattr__(self, "genotypes", np.ascontiguousarray(self.genotypes, dtype=np.int8))
        object.__setattr__(self, "phenotypes", np.ascontiguousarray(self.phenotypes, dtype=float))
        k = n_genotype_classes(self.cross_type)
        if self.genotypes.ndim != 2 or self.genotypes.shape[1] != self.gmap.n_points:
            raise ValueError(
                f"genotype matrix shape {self.genotypes.shape} does not match lattice size {self.gmap.n_points}"
            )
        if self.phenotypes.shape != (self.genotypes.shape[0],):
            raise ValueError("phenotype vector length must equal the number of individuals")
        if not np.all(np.isfinite(self.phenotypes)):
            raise ValueError("phenotypes must be finite")
        if self.genotypes.size and (self.genotypes.min() < 0 or self.genotypes.max() >= k):
            raise ValueError(f"genotype labels outside the {self.cross_type} alphabet 0..{k - 1}")

    @property
    def n(self) -> int:
        return self.genotypes.shape[0]

    @property
    def n_classes_per_locus(self) -> int:
        return n_genotype_classes(self.cross_type)

    def with_phenotypes(self, phenotypes: np.ndarray) -> "Population":
        return replace(self, phenotypes=np.asarray(phenotypes, dtype=float))

    def with_step(self, lattice_step: float) -> "Population":
        """Coarser view of the same population: keeps every genotype column
        that falls on the new lattice.  The new step must be an integer
        multiple of the current one."""
        old = self.gmap.lattice_step
        factor = lattice_step / old
        if abs(factor - round(factor)) > 1e-9 or round(factor) < 1:
            raise ValueError(f"new step {lattice_step} must be an integer multiple of {old}")
        new_map = self.gmap.with_step(lattice_step)
        cols = [self.gmap.lattice_index(p) for p in new_map.lattice_points()]
        return Population(self.cross_type, self.genotypes[:, cols], self.phenotypes, new_map)


def _simulate_gametes(gmap: GeneticMap, n_gametes: int, rng: np.random.Generator) -> np.ndarray:
    """(n_gametes, n_points) matrix of 0/1 allele origins, Haldane Markov walk."""
    p_flip = flip_prob(gmap.lattice_step)
    blocks = []
    for chrom in gmap.chromosomes:
        m = gmap.points_on(chrom.id)
        start = rng.integers(0, 2, size=(n_gametes, 1), dtype=np.int8)
        flips = (rng.random((n_gametes, m - 1)) < p_flip).astype(np.int8)
        # class_j = start XOR (flip_1 + ... + flip_j) mod 2
        classes = (start + np.concatenate([np.zeros((n_gametes, 1), np.int8), np.cumsum(flips, axis=1)], axis=1)) % 2
        blocks.append(classes.astype(np.int8))
    return np.concatenate(blocks, axis=1)


def simulate_population(
    gmap: GeneticMap,
    cross_type: str,
    n: int,
    qtl: QtlSpec,
    seed: int,
) -> Population:
    """Simulate a population of ``n`` individuals with the given QTL.

    Deterministic given the seed; RNG draw order is gametes (chromosome-major)
    then environmental noise.
    """
    if n < 2:
        raise ValueError(f"need n >= 2 individuals, got {n}")
    k = n_genotype_classes(cross_type)
    d = len(qtl.positions)
    if d and qtl.effects.shape != (k,) * d:
        raise ValueError(f"effect table shape {qtl.effects.shape} does not match {(k,) * d}")
    cols = [gmap.lattice_index(p) for p in qtl.positions]  # raises if off-lattice

    rng = np.random.default_rng(seed)
    if cross_type == BACKCROSS:
        genotypes = _simulate_gametes(gmap, n, rng)
    else:
        gametes = _simulate_gametes(gmap, 2 * n, rng)
        genotypes = gametes[:n] + gametes[n:]

    if d:
        idx = tuple(genotypes[:, c].astype(np.intp) for c in cols)
        means = qtl.effects[idx]
    else:
        means = np.zeros(n)
    phenotypes = means + rng.normal(0.0, qtl.env_sd, size=n)
    return Population(cross_type, genotypes, phenotypes, gmap)


def genetic_variance_per_locus(cross_type: str, a: float) -> float:
    """Genetic variance of one additive locus with effect step ``a``.

    Backcross (balanced 1:1 classes at means {0, a}): a^2/4.  Intercross
    (1:2:1 classes at {0, a, 2a}): a^2/2.
    """
    if cross_type == BACKCROSS:
        return a * a / 4.0
    if cross_type == INTERCROSS:
        return a * a / 2.0
    raise ValueError(f"unknown cross type {cross_type!r}")


def heritability_to_effects(h2: float, cross_type: str, d: int) -> tuple[float, float]:
    """Effect step ``a`` (fixed at 1 per locus) and ``env_sd`` realising a
    target broad-sense heritability.

    Genetic variance is split equally across the ``d`` loci; with a_j = 1 the
    total is d times the per-locus variance, and env_sd solves
    g / (g + sd^2) = h2.  h2 = 0 returns a = 0 with unit noise.
    """
    if not (0 <= h2 < 1):
        raise ValueError(f"heritability must be in [0, 1), got {h2}")
    if d < 0:
        raise ValueError("d must be non-negative")
    if h2 == 0 or d == 0:
        return 0.0, 1.0
    a = 1.0
    g_total = d * genetic_variance_per_locus(cross_type, a)
    env_sd = math.sqrt(g_total * (1.0 - h2) / h2)
    return a, env_sd


def additive_effect_table(cross_type: str, d: int, a: float) -> np.ndarray:
    """Full-interaction table whose entries happen to be additive:
    mean(g_1..g_d) = a * sum(g_j)."""
    k = n_genotype_classes(cross_type)
    if d == 0:
        return np.zeros(())
    grids = np.indices((k,) * d)
    return a * grids.sum(axis=0).astype(float)


def make_additive_qtl(positions: list[GenomePosition], h2: float, cross_type: str) -> QtlSpec:
    """Convenience: additive QTL at the given positions hitting heritability h2."""
    d = len(positions)
    a, env_sd = heritability_to_effects(h2, cross_type, d)
    return QtlSpec(tuple(positions), additive_effect_table(cross_type, d, a), env_sd)


def permute_phenotypes(pop: Population, seed: int) -> Population:
    """Uniform random permutation of the phenotype vector; genotypes untouched."""
    rng = np.random.default_rng(seed)
    return pop.with_phenotypes(pop.phenotypes[rng.permutation(pop.n)])


def standardize_phenotypes(pop: Population) -> Population:
    """Center and scale phenotypes to zero mean, unit variance."""
    y = pop.phenotypes
    sd = float(np.std(y))
    if sd == 0:
        raise ValueError("cannot standardize a constant phenotype vector")
    return pop.with_phenotypes((y - float(np.mean(y))) / sd)


def write_population(pop: Population, path: str | Path) -> None:
    """TSV: metadata comments, a header of lattice positions, then one row per
    individual (phenotype first, class labels after)."""
    gmap = pop.gmap
    header = ["phenotype"] + [str(p) for p in gmap.lattice_points()]
    lines = [
        "# format_version=1",
        f"# cross={pop.cross_type}",
        f"# step={gmap.lattice_step:g}",
        "\t".join(header),
    ]
    for i in range(pop.n):
        row = [repr(float(pop.phenotypes[i]))] + [str(int(g)) for g in pop.genotypes[i]]
        lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_population(path: str | Path) -> Population:
    """Inverse of :func:`write_population`; reconstructs the map from the header."""
    meta: dict[str, str] = {}
    header: list[str] | None = None
    rows: list[list[str]] = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            token = line[1:].strip()
            if "=" in token:
                key, _, value = token.partition("=")
                meta[key.strip()] = value.strip()
            continue
        if header is None:
            header = line.split("\t")
        else:
            rows.append(line.split("\t"))
    if header is None or header[0] != "phenotype":
        raise ValueError(f"{path}: missing 'phenotype' header row")
    cross_type = parse_cross_type(meta.get("cross", BACKCROSS))
    step = float(meta.get("step", "1"))

    offsets_by_chrom: dict[int, list[float]] = {}
    for token in header[1:]:
        chrom_s, _, off_s = token.partition(":")
        offsets_by_chrom.setdefault(int(chrom_s), []).append(float(off_s))
    chroms = []
    for chrom_id, offsets in offsets_by_chrom.items():
        expected = [i * step for i in range(len(offsets))]
        if not np.allclose(offsets, expected, atol=1e-6):
            raise ValueError(f"{path}: chromosome {chrom_id} columns are not a step-{step} lattice")
        chroms.append(Chromosome(chrom_id, offsets[-1] if offsets[-1] > 0 else step))
    gmap = GeneticMap(chroms, step)

    phenotypes = np.array([float(r[0]) for r in rows])
    genotypes = np.array([[int(v) for v in r[1:]] for r in rows], dtype=np.int8)
    return Population(cross_type, genotypes, phenotypes, gmap)
