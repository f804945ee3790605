"""Synthetic STR populations: allele-frequency panels and genotype sampling.

Alleles are opaque integer repeat counts.  Two alleles of a genotype are
independent draws from the locus frequencies (Hardy-Weinberg), and loci are
independent of one another (no linkage).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

FREQ_TOLERANCE = 1e-9

CODIS_LIKE_NAMES = (
    "CSF1PO", "D3S1358", "D5S818", "D7S820", "D8S1179",
    "D13S317", "D16S539", "D18S51", "D21S11", "FGA",
    "TH01", "TPOX", "vWA", "D2S1338", "D19S433",
)


class PanelParseError(ValueError):
    """A panel file row could not be parsed."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(message if row is None else f"row {row}: {message}")


class PanelValidationError(ValueError):
    """A parsed panel violates a frequency-panel invariant."""

    def __init__(self, message: str, locus: str | None = None):
        self.locus = locus
        super().__init__(message)


@dataclass(frozen=True)
class Locus:
    name: str
    alleles: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "alleles", tuple(int(a) for a in self.alleles))
        if len(set(self.alleles)) != len(self.alleles):
            raise PanelValidationError(f"duplicate allele at locus {self.name}", self.name)
        if len(self.alleles) < 2:
            raise PanelValidationError(f"locus {self.name} needs at least 2 alleles", self.name)


@dataclass(frozen=True)
class PanelGrid:
    """Dense per-locus layout of every position a peak can occupy.

    Positions are the panel alleles plus their back-stutter positions
    (allele - 1), sorted, padded to a common width.
    """

    labels: np.ndarray          # (L, P) int64, padding = PAD
    valid: np.ndarray           # (L, P) bool
    freq: np.ndarray            # (L, P) allele frequency, 0 off-panel
    is_allele: np.ndarray       # (L, P) bool, panel allele positions
    stutter_to: np.ndarray      # (L, P) index of label-1, or -1
    index: tuple[Mapping[int, int], ...]

    PAD = -(1 << 40)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True, eq=False)
class FrequencyPanel:
    loci: tuple[Locus, ...]
    freq: Mapping[tuple[str, int], float]

    def __post_init__(self):
        object.__setattr__(self, "loci", tuple(self.loci))
        object.__setattr__(self, "freq", MappingProxyType(dict(self.freq)))
        names = [locus.name for locus in self.loci]
        if len(set(names)) != len(names):
            raise PanelValidationError("duplicate locus name")
        if not self.loci:
            raise PanelValidationError("panel has no loci")
        for locus in self.loci:
            total = 0.0
            for allele in locus.alleles:
                p = self.freq.get((locus.name, allele))
                if p is None:
                    raise PanelValidationError(
                        f"missing frequency for {locus.name}:{allele}", locus.name)
                if not (math.isfinite(p) and 0.0 < p <= 1.0):
                    raise PanelValidationError(
                        f"frequency {p!r} for {locus.name}:{allele} outside (0, 1]", locus.name)
                total += p
            if abs(total - 1.0) > FREQ_TOLERANCE:
                raise PanelValidationError(
                    f"frequencies at locus {locus.name} sum to {total:.12g}, not 1", locus.name)
        known = {(locus.name, a) for locus in self.loci for a in locus.alleles}
        extra = set(self.freq) - known
        if extra:
            raise PanelValidationError(f"frequencies for unknown alleles: {sorted(extra)[:3]}")

    @property
    def locus_names(self) -> tuple[str, ...]:
        return tuple(locus.name for locus in self.loci)

    def locus(self, name: str) -> Locus:
        for locus in self.loci:
            if locus.name == name:
                return locus
        raise KeyError(name)

    def frequencies(self, name: str) -> np.ndarray:
        locus = self.locus(name)
        return np.array([self.freq[(name, a)] for a in locus.alleles])

    @cached_property
    def grid(self) -> PanelGrid:
        per_locus = []
        for locus in self.loci:
            labels = sorted(set(locus.alleles) | {a - 1 for a in locus.alleles})
            per_locus.append(labels)
        width = max(len(x) for x in per_locus)
        L = len(self.loci)
        labels = np.full((L, width), PanelGrid.PAD, dtype=np.int64)
        valid = np.zeros((L, width), dtype=bool)
        freq = np.zeros((L, width))
        is_allele = np.zeros((L, width), dtype=bool)
        stutter_to = np.full((L, width), -1, dtype=np.int64)
        index = []
        for i, (locus, row) in enumerate(zip(self.loci, per_locus)):
            pos = {lab: j for j, lab in enumerate(row)}
            index.append(MappingProxyType(pos))
            labels[i, : len(row)] = row
            valid[i, : len(row)] = True
            for a in locus.alleles:
                freq[i, pos[a]] = self.freq[(locus.name, a)]
                is_allele[i, pos[a]] = True
            for lab, j in pos.items():
                stutter_to[i, j] = pos.get(lab - 1, -1)
        for arr in (labels, valid, freq, is_allele, stutter_to):
            arr.flags.writeable = False
        return PanelGrid(labels, valid, freq, is_allele, stutter_to, tuple(index))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["locus", "allele", "frequency"])
        for locus in self.loci:
            for a in locus.alleles:
                writer.writerow([locus.name, a, repr(self.freq[(locus.name, a)])])
        return buf.getvalue()


@dataclass(frozen=True)
class GenotypeProfile:
    """One person's genotype: locus name -> sorted allele pair."""

    genotype: Mapping[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        pairs = {}
        for name, pair in self.genotype.items():
            a, b = pair
            pairs[name] = (int(a), int(b)) if int(a) <= int(b) else (int(b), int(a))
        object.__setattr__(self, "genotype", MappingProxyType(dict(sorted(pairs.items()))))

    def __hash__(self):
        return hash(tuple(self.genotype.items()))

    def __eq__(self, other):
        if not isinstance(other, GenotypeProfile):
            return NotImplemented
        return dict(self.genotype) == dict(other.genotype)

    def __getitem__(self, name: str) -> tuple[int, int]:
        return self.genotype[name]

    def alleles(self, name: str) -> set[int]:
        return set(self.genotype[name])

    def check(self, panel: FrequencyPanel) -> None:
        if set(self.genotype) != set(panel.locus_names):
            raise ValueError("profile loci do not match the panel")
        for locus in panel.loci:
            for a in self.genotype[locus.name]:
                if a not in locus.alleles:
                    raise ValueError(f"allele {a} not in panel at {locus.name}")

    def to_json(self) -> dict[str, list[int]]:
        return {k: list(v) for k, v in self.genotype.items()}

    @classmethod
    def from_json(cls, data: Mapping[str, Iterable[int]]) -> "GenotypeProfile":
        return cls({k: tuple(v) for k, v in data.items()})


def _parse_frequency(text: str, row: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise PanelParseError(f"frequency {text!r} is not a decimal number", row) from None
    if not math.isfinite(value):
        raise PanelParseError(f"frequency {text!r} is not finite", row)
    if value < 0:
        raise PanelParseError(f"negative frequency {text!r}", row)
    if value > 1:
        raise PanelParseError(f"frequency {text!r} exceeds 1", row)
    return value


def parse_panel(text: str) -> FrequencyPanel:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise PanelParseError("empty panel file", 1) from None
    if [h.strip() for h in header] != ["locus", "allele", "frequency"]:
        raise PanelParseError(f"expected header locus,allele,frequency, got {header}", 1)
    order: list[str] = []
    alleles: dict[str, list[int]] = {}
    freq: dict[tuple[str, int], float] = {}
    for row_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise PanelParseError(f"expected 3 fields, got {len(row)}", row_no)
        name, allele_text, freq_text = (c.strip() for c in row)
        if not name:
            raise PanelParseError("empty locus name", row_no)
        try:
            allele = int(allele_text)
        except ValueError:
            raise PanelParseError(f"allele {allele_text!r} is not an integer", row_no) from None
        value = _parse_frequency(freq_text, row_no)
        if name not in alleles:
            order.append(name)
            alleles[name] = []
        elif order[-1] != name:
            raise PanelParseError(f"rows for locus {name} are not grouped", row_no)
        if allele in alleles[name]:
            raise PanelValidationError(f"duplicate allele {allele} at locus {name} (row {row_no})", name)
        alleles[name].append(allele)
        freq[(name, allele)] = value
    loci = tuple(Locus(name, tuple(alleles[name])) for name in order)
    return FrequencyPanel(loci, freq)


def load_panel(source: str | Path) -> FrequencyPanel:
    """Read a ``locus,allele,frequency`` CSV.  ``"default"`` loads the shipped panel."""
    if str(source) == "default":
        return default_panel()
    return parse_panel(Path(source).read_text(encoding="utf-8"))


def default_panel_text() -> str:
    return resources.files("dnaprivacy").joinpath("data/default_panel.csv").read_text(encoding="utf-8")


@lru_cache(maxsize=1)
def default_panel() -> FrequencyPanel:
    return parse_panel(default_panel_text())


def sample_genotype(panel: FrequencyPanel, rng: np.random.Generator) -> GenotypeProfile:
    genotype = {}
    for locus in panel.loci:
        p = panel.frequencies(locus.name)
        i, j = rng.choice(len(locus.alleles), size=2, p=p)
        genotype[locus.name] = (locus.alleles[i], locus.alleles[j])
    return GenotypeProfile(genotype)


def random_panel(
    num_loci: int,
    alleles_per_locus: int,
    rng: np.random.Generator,
    concentration: float = 1.0,
    first_allele: int = 8,
    names: Iterable[str] | None = None,
) -> FrequencyPanel:
    """Panel with symmetric-Dirichlet allele frequencies and consecutive labels."""
    if num_loci < 1:
        raise ValueError("num_loci must be >= 1")
    if alleles_per_locus < 2:
        raise ValueError("alleles_per_locus must be >= 2")
    if not concentration > 0:
        raise ValueError("concentration must be positive")
    names = list(names) if names is not None else [f"L{i + 1:02d}" for i in range(num_loci)]
    if len(names) != num_loci:
        raise ValueError("need one name per locus")
    loci = []
    freq = {}
    labels = tuple(range(first_allele, first_allele + alleles_per_locus))
    for name in names:
        p = rng.dirichlet(np.full(alleles_per_locus, concentration))
        # Dirichlet draws can underflow to exactly 0 at tiny concentrations.
        p = np.maximum(p, 1e-12)
        p = p / p.sum()
        loci.append(Locus(name, labels))
        for a, q in zip(labels, p):
            freq[(name, a)] = float(q)
    return FrequencyPanel(tuple(loci), freq)


@lru_cache(maxsize=8192)
def dosage_grid(panel: FrequencyPanel, profile: GenotypeProfile) -> np.ndarray:
    """Allele copy counts of ``profile`` laid out on ``panel.grid`` (read-only)."""
    grid = panel.grid
    out = np.zeros(grid.shape)
    for i, locus in enumerate(panel.loci):
        a, b = profile.genotype[locus.name]
        out[i, grid.index[i][a]] += 1.0
        out[i, grid.index[i][b]] += 1.0
    out.flags.writeable = False
    return out


@lru_cache(maxsize=8192)
def component_grids(panel: FrequencyPanel, profile: GenotypeProfile) -> tuple[np.ndarray, np.ndarray]:
    """Per-allele-component dosage and squared-dosage sums on the grid.

    A heterozygote contributes two unit components, a homozygote one
    component of dosage 2; the second array therefore holds 1+1 or 4.
    """
    d = dosage_grid(panel, profile)
    sq = d * d
    sq.flags.writeable = False
    return d, sq
