"""Genetic maps, the Haldane recombination model, and the discrete search lattice.

Distances are centimorgan (cM) throughout.  Loci on different chromosomes
segregate independently; their distance is the explicit ``UNLINKED`` sentinel,
never a large float.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Union


class Unlinked:
    """Sentinel for the distance between loci on different chromosomes."""

    _instance = None

    def __new__(cls) -> "Unlinked":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "UNLINKED"


UNLINKED = Unlinked()

Distance = Union[float, Unlinked]

# Relative slack when checking that an offset is a lattice multiple.
_LATTICE_TOL = 1e-9


def same_class_prob(x: Distance) -> float:
    """Probability that the allele-origin class at distance ``x`` matches the
    class at the reference point.

    Haldane model, no interference: ``0.5 + 0.5 * exp(-2x/100)``.  At x=0 the
    classes coincide (probability 1); unlinked loci segregate independently
    (probability 0.5).
    """
    if x is UNLINKED:
        return 0.5
    if not isinstance(x, (int, float)) or not math.isfinite(x) or x < 0:
        raise ValueError(f"distance must be a finite non-negative cM value or UNLINKED, got {x!r}")
    return 0.5 + 0.5 * math.exp(-2.0 * x / 100.0)


def flip_prob(x: Distance) -> float:
    """Complement of :func:`same_class_prob`: probability the class differs."""
    return 1.0 - same_class_prob(x)


@dataclass(frozen=True)
class Chromosome:
    id: int
    length: float  # cM


@dataclass(frozen=True, order=True)
class GenomePosition:
    chromosome: int
    offset: float  # cM, an integer multiple of the map's lattice step

    def __str__(self) -> str:
        return f"{self.chromosome}:{self.offset:g}"


class GeneticMap:
    """Ordered chromosomes plus the lattice of candidate positions.

    The lattice places a point every ``lattice_step`` cM from 0 to the last
    multiple of the step within each chromosome, chromosome-major.  Immutable
    after construction; safe for concurrent shared reads.
    """

    def __init__(self, chromosomes: Iterable[Chromosome], lattice_step: float = 1.0):
        self.chromosomes: tuple[Chromosome, ...] = tuple(chromosomes)
        self.lattice_step = float(lattice_step)
        if not self.chromosomes:
            raise ValueError("map needs at least one chromosome")
        if not (self.lattice_step > 0 and math.isfinite(self.lattice_step)):
            raise ValueError(f"lattice step must be positive and finite, got {lattice_step}")
        ids = [c.id for c in self.chromosomes]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate chromosome ids: {ids}")
        for c in self.chromosomes:
            if not (math.isfinite(c.length) and c.length > 0):
                raise ValueError(f"chromosome {c.id} has non-positive length {c.length}")
            if c.length < self.lattice_step:
                raise ValueError(
                    f"chromosome {c.id} shorter ({c.length} cM) than the lattice step "
                    f"({self.lattice_step} cM)"
                )
        self._by_id = {c.id: c for c in self.chromosomes}
        # Points per chromosome: floor(length/step) + 1 (fencepost).
        self._points_per_chrom = {
            c.id: int(math.floor(c.length / self.lattice_step + _LATTICE_TOL)) + 1
            for c in self.chromosomes
        }
        self._chrom_col_start: dict[int, int] = {}
        start = 0
        for c in self.chromosomes:
            self._chrom_col_start[c.id] = start
            start += self._points_per_chrom[c.id]
        self._n_points = start

    @property
    def n_points(self) -> int:
        """Total lattice size across all chromosomes."""
        return self._n_points

    def chromosome(self, chrom_id: int) -> Chromosome:
        try:
            return self._by_id[chrom_id]
        except KeyError:
            raise KeyError(f"chromosome {chrom_id} not in map") from None

    def points_on(self, chrom_id: int) -> int:
        self.chromosome(chrom_id)
        return self._points_per_chrom[chrom_id]

    def lattice_points(self) -> list[GenomePosition]:
        """All lattice positions, chromosome-major, offsets increasing."""
        out = []
        for c in self.chromosomes:
            for i in range(self._points_per_chrom[c.id]):
                out.append(GenomePosition(c.id, i * self.lattice_step))
        return out

    def lattice_index(self, pos: GenomePosition) -> int:
        """Global column index of a lattice position (chromosome-major)."""
        return self._chrom_col_start[pos.chromosome] + self.offset_index(pos)

    def position_at(self, index: int) -> GenomePosition:
        """Inverse of :meth:`lattice_index`."""
        if not 0 <= index < self._n_points:
            raise IndexError(f"lattice index {index} out of range")
        for c in self.chromosomes:
            start = self._chrom_col_start[c.id]
            if index < start + self._points_per_chrom[c.id]:
                return GenomePosition(c.id, (index - start) * self.lattice_step)
        raise AssertionError("unreachable")

    def column_start(self, chrom_id: int) -> int:
        self.chromosome(chrom_id)
        return self._chrom_col_start[chrom_id]

    def offset_index(self, pos: GenomePosition) -> int:
        """Lattice index of ``pos`` within its own chromosome; validates the
        position lies on this map's lattice."""
        chrom = self.chromosome(pos.chromosome)
        if not (0 <= pos.offset <= chrom.length):
            raise ValueError(f"offset {pos.offset} outside chromosome {chrom.id} (length {chrom.length})")
        ratio = pos.offset / self.lattice_step
        idx = round(ratio)
        if abs(ratio - idx) > _LATTICE_TOL * max(1.0, abs(ratio)):
            raise ValueError(
                f"offset {pos.offset} is not a multiple of the lattice step {self.lattice_step}"
            )
        if idx >= self._points_per_chrom[chrom.id]:
            raise ValueError(f"offset {pos.offset} beyond the last lattice point of chromosome {chrom.id}")
        return idx

    def genetic_distance(self, a: GenomePosition, b: GenomePosition) -> Distance:
        """|offset difference| on a shared chromosome, else ``UNLINKED``."""
        self.offset_index(a)
        self.offset_index(b)
        if a.chromosome != b.chromosome:
            return UNLINKED
        return abs(a.offset - b.offset)

    def with_step(self, lattice_step: float) -> "GeneticMap":
        """Same chromosomes on a different lattice."""
        return GeneticMap(self.chromosomes, lattice_step)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, GeneticMap)
            and self.chromosomes == other.chromosomes
            and self.lattice_step == other.lattice_step
        )

    def __repr__(self) -> str:
        return f"GeneticMap({len(self.chromosomes)} chromosomes, step={self.lattice_step} cM)"


def read_map(path: str | Path, lattice_step: float = 1.0) -> GeneticMap:
    """Read a map file: one ``chrom_id<TAB>length_cM`` line per chromosome.

    Blank lines and ``#`` comments are skipped.
    """
    chroms = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'chrom_id<TAB>length_cM', got {line!r}")
        chroms.append(Chromosome(id=int(parts[0]), length=float(parts[1])))
    return GeneticMap(chroms, lattice_step)


def write_map(gmap: GeneticMap, path: str | Path) -> None:
    lines = [f"{c.id}\t{c.length:g}" for c in gmap.chromosomes]
    Path(path).write_text("\n".join(lines) + "\n")
