"""The test procedure's physical side: specimens, rt-PCR detection, residues.

Peak-height model used by :func:`simulate_residue` (and mirrored exactly by
the likelihood kernel in :mod:`dnaprivacy.likelihood`):

* every (contributor, allele) component draws one Gamma height with mean
  ``dosage * mass * mean_peak_height`` and coefficient of variation
  ``peak_height_cv``;
* every parent position with total expected height ``A`` draws one
  back-stutter height at ``allele - 1`` with mean ``stutter_ratio * A``;
* each locus receives ``Poisson(dropin_rate)`` drop-in peaks at panel alleles
  chosen by population frequency, heights Gamma with mean
  ``1.5 * analytical_threshold``;
* heights landing on the same position are summed, then everything below
  ``analytical_threshold`` is discarded (drop-out).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from .genotype import FrequencyPanel, GenotypeProfile, component_grids

if TYPE_CHECKING:
    from .countermeasures import TestProcedure

DROPIN_MEAN_FACTOR = 1.5


class ProtocolAbort(Exception):
    """Raised when a protocol step refuses to produce a test result."""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


# ---------------------------------------------------------------- templates

@dataclass(frozen=True)
class LadderTemplate:
    """Synthetic DNA with one copy of every panel allele at every locus.

    Simulated as one independent component per (locus, allele), i.e. one
    artificial contribution per allele.
    """

    is_dna = True


@dataclass(frozen=True)
class ControlTarget:
    """Spiked process-control reagent.  Produces no STR peaks and resists DNase."""

    is_dna = False


def is_dna(template) -> bool:
    return bool(getattr(template, "is_dna", True))


def is_human(template) -> bool:
    return isinstance(template, GenotypeProfile)


def template_grids(panel: FrequencyPanel, template) -> tuple[np.ndarray, np.ndarray] | None:
    """(dosage, squared-dosage) grids of a template, or None if it has no peaks."""
    if isinstance(template, GenotypeProfile):
        return component_grids(panel, template)
    if isinstance(template, LadderTemplate):
        d = panel.grid.is_allele.astype(float)
        return d, d
    if isinstance(template, ControlTarget):
        return None
    raise TypeError(f"unknown template type {type(template).__name__}")


# ---------------------------------------------------------------- specimen

@dataclass(frozen=True)
class Specimen:
    contributions: tuple[tuple[object, float], ...] = ()
    viral_rna_copies: int = 0

    def __post_init__(self):
        contribs = tuple((t, float(m)) for t, m in self.contributions)
        object.__setattr__(self, "contributions", contribs)
        for _, m in contribs:
            if not math.isfinite(m) or m < 0:
                raise ValueError(f"template mass must be finite and non-negative, got {m}")
        if contribs and not any(m > 0 for _, m in contribs):
            raise ValueError("a non-empty specimen needs at least one positive mass")
        copies = self.viral_rna_copies
        if int(copies) != copies or copies < 0:
            raise ValueError(f"viral_rna_copies must be a non-negative integer, got {copies}")
        object.__setattr__(self, "viral_rna_copies", int(copies))

    @classmethod
    def of(cls, profile: GenotypeProfile | None = None, mass: float = 1.0, viral_rna_copies: int = 0) -> "Specimen":
        contribs = () if profile is None else ((profile, mass),)
        return cls(contribs, viral_rna_copies)

    @property
    def human_mass(self) -> float:
        return sum(m for t, m in self.contributions if is_human(t))

    @property
    def dna_mass(self) -> float:
        return sum(m for t, m in self.contributions if is_dna(t))

    def mass_by_template(self) -> dict[object, float]:
        out: dict[object, float] = {}
        for t, m in self.contributions:
            out[t] = out.get(t, 0.0) + m
        return out

    def with_contributions(self, extra: Iterable[tuple[object, float]]) -> "Specimen":
        return Specimen(self.contributions + tuple(extra), self.viral_rna_copies)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def mix(parts: Sequence[tuple[Specimen, float]]) -> Specimen:
    """The mixing operator: combine specimens scaled by proportion."""
    if not parts:
        raise ValueError("mix needs at least one part")
    contribs: list[tuple[object, float]] = []
    copies = 0
    for specimen, proportion in parts:
        if not proportion > 0:
            raise ValueError(f"proportions must be positive, got {proportion}")
        contribs.extend((t, m * proportion) for t, m in specimen.contributions)
        copies += round_half_up(specimen.viral_rna_copies * proportion)
    return Specimen(tuple(contribs), copies)


# ---------------------------------------------------------------- rt-PCR

@dataclass(frozen=True)
class AssayParams:
    max_cycles: int = 40
    detection_copies: float = 1e10
    amplification_efficiency: float = 1.9
    limit_of_detection: int = 10

    def __post_init__(self):
        if self.max_cycles < 1:
            raise ValueError("max_cycles must be >= 1")
        if not self.detection_copies > 0:
            raise ValueError("detection_copies must be positive")
        if not 1.0 < self.amplification_efficiency <= 2.0:
            raise ValueError("amplification_efficiency must lie in (1, 2]")
        if self.limit_of_detection < 0:
            raise ValueError("limit_of_detection must be non-negative")


@dataclass(frozen=True)
class TestResult:
    outcome: str
    ct_cycle: int | None = None

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.outcome not in ("positive", "negative"):
            raise ValueError(f"unknown outcome {self.outcome!r}")
        if (self.ct_cycle is None) != (self.outcome == "negative"):
            raise ValueError("ct_cycle must be present exactly for positive results")

    @property
    def positive(self) -> bool:
        return self.outcome == "positive"


NEGATIVE = TestResult("negative")


def pcr_detect(specimen: Specimen, params: AssayParams) -> TestResult:
    """Deterministic amplification: copies after n cycles = start * efficiency**n."""
    start = specimen.viral_rna_copies
    if start <= 0 or start < params.limit_of_detection:
        return NEGATIVE
    e = params.amplification_efficiency
    if start >= params.detection_copies:
        return TestResult("positive", 0)
    n = max(0, math.ceil(math.log(params.detection_copies / start) / math.log(e)))
    # guard the log estimate against float rounding in either direction
    while n > 0 and start * e ** (n - 1) >= params.detection_copies:
        n -= 1
    while start * e ** n < params.detection_copies:
        n += 1
    if n > params.max_cycles:
        return NEGATIVE
    return TestResult("positive", n)


# ---------------------------------------------------------------- residue

@dataclass(frozen=True)
class EpgParams:
    mean_peak_height: float = 1000.0
    peak_height_cv: float = 0.3
    stutter_ratio: float = 0.08
    dropin_rate: float = 0.05
    analytical_threshold: float = 50.0

    def __post_init__(self):
        for name in ("mean_peak_height", "peak_height_cv", "stutter_ratio",
                     "dropin_rate", "analytical_threshold"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.stutter_ratio >= 1:
            raise ValueError("stutter_ratio must be < 1")

    @property
    def dropin_mean(self) -> float:
        return DROPIN_MEAN_FACTOR * self.analytical_threshold


@dataclass(frozen=True)
class Residue:
    peaks: Mapping[str, tuple[tuple[int, float], ...]]
    viral_material_present: bool = False
    control_target_detected: bool | None = None
    verification_color: str | None = None
    _dense: tuple = field(default=(), compare=False, repr=False, hash=False)

    def __post_init__(self):
        clean = {}
        for name in sorted(self.peaks):
            lst = sorted((int(a), float(h)) for a, h in self.peaks[name])
            labels = [a for a, _ in lst]
            if len(set(labels)) != len(labels):
                raise ValueError(f"two peaks at the same allele at locus {name}")
            clean[name] = tuple(lst)
        object.__setattr__(self, "peaks", MappingProxyType(clean))
        if self.verification_color not in (None, "Blue", "Red"):
            raise ValueError(f"bad verification colour {self.verification_color!r}")

    def __hash__(self):
        return hash((tuple(self.peaks.items()), self.viral_material_present,
                     self.control_target_detected, self.verification_color))

    def locus_peaks(self, name: str) -> tuple[tuple[int, float], ...]:
        return self.peaks.get(name, ())

    @property
    def n_peaks(self) -> int:
        return sum(len(v) for v in self.peaks.values())

    def dense(self, panel: FrequencyPanel) -> tuple[np.ndarray, np.ndarray]:
        """(heights, off_grid) on the panel grid; off_grid counts foreign peaks per locus."""
        if self._dense and self._dense[0] is panel:
            return self._dense[1], self._dense[2]
        grid = panel.grid
        heights = np.zeros(grid.shape)
        off = np.zeros(grid.shape[0], dtype=np.int64)
        known = set(panel.locus_names)
        for name in self.peaks:
            if name not in known:
                raise ValueError(f"residue locus {name} not in panel")
        for i, locus in enumerate(panel.loci):
            idx = grid.index[i]
            for a, h in self.peaks.get(locus.name, ()):
                j = idx.get(a)
                if j is None:
                    off[i] += 1
                else:
                    heights[i, j] = h
        heights.flags.writeable = False
        off.flags.writeable = False
        object.__setattr__(self, "_dense", (panel, heights, off))
        return heights, off

    def to_json_dict(self) -> dict:
        return {
            "loci": {name: [[a, round(h, 3)] for a, h in peaks] for name, peaks in self.peaks.items()},
            "viral_material_present": self.viral_material_present,
            "control_target_detected": self.control_target_detected,
            "verification_color": self.verification_color,
        }

    def to_json(self) -> str:
        """Canonical JSON: loci sorted, peaks sorted, heights with 3 decimals."""
        parts = []
        for name, peaks in self.peaks.items():
            body = ",".join(f"[{a},{h:.3f}]" for a, h in peaks)
            parts.append(f"{json.dumps(name)}:[{body}]")
        return (
            "{"
            f"\"loci\":{{{','.join(parts)}}},"
            f"\"viral_material_present\":{json.dumps(self.viral_material_present)},"
            f"\"control_target_detected\":{json.dumps(self.control_target_detected)},"
            f"\"verification_color\":{json.dumps(self.verification_color)}"
            "}"
        )

    @classmethod
    def from_json(cls, text: str) -> "Residue":
        data = json.loads(text)
        return cls(
            {k: tuple((int(a), float(h)) for a, h in v) for k, v in data["loci"].items()},
            data["viral_material_present"],
            data["control_target_detected"],
            data["verification_color"],
        )


def _gamma(rng: np.random.Generator, mean: np.ndarray, cv: float) -> np.ndarray:
    if cv == 0:
        return np.array(mean, dtype=float)
    shape = 1.0 / (cv * cv)
    return rng.gamma(shape, np.asarray(mean) * cv * cv)


def expected_allele_grid(specimen: Specimen, panel: FrequencyPanel, epg: EpgParams):
    """Expected allele-peak sums (A) and per-component squared sums on the grid."""
    A = np.zeros(panel.grid.shape)
    Q = np.zeros(panel.grid.shape)
    for template, mass in specimen.contributions:
        if mass <= 0:
            continue
        grids = template_grids(panel, template)
        if grids is None:
            continue
        d, sq = grids
        scale = mass * epg.mean_peak_height
        A += scale * d
        Q += scale * scale * sq
    return A, Q


def simulate_residue(
    specimen: Specimen,
    epg: EpgParams,
    rng: np.random.Generator,
    panel: FrequencyPanel,
    *,
    control_target_detected: bool | None = None,
    verification_color: str | None = None,
) -> Residue:
    grid = panel.grid
    L, P = grid.shape
    cv = epg.peak_height_cv
    heights = np.zeros((L, P))
    parent = np.zeros((L, P))
    for template, mass in specimen.contributions:
        if mass <= 0:
            continue
        grids = template_grids(panel, template)
        if grids is None:
            continue
        mean = grids[0] * (mass * epg.mean_peak_height)
        on = mean > 0
        heights[on] += _gamma(rng, mean[on], cv)
        parent += mean

    if epg.stutter_ratio > 0:
        src = np.nonzero(parent > 0)
        if src[0].size:
            tgt = grid.stutter_to[src]
            draws = _gamma(rng, epg.stutter_ratio * parent[src], cv)
            ok = tgt >= 0
            np.add.at(heights, (src[0][ok], tgt[ok]), draws[ok])

    if epg.dropin_rate > 0:
        counts = rng.poisson(epg.dropin_rate, size=L)
        for i in np.nonzero(counts)[0]:
            p = grid.freq[i]
            cols = rng.choice(P, size=int(counts[i]), p=p / p.sum())
            draws = _gamma(rng, np.full(int(counts[i]), epg.dropin_mean), cv)
            np.add.at(heights[i], cols, draws)

    keep = (heights >= epg.analytical_threshold) & (heights > 0) & grid.valid
    peaks = {}
    for i, locus in enumerate(panel.loci):
        cols = np.nonzero(keep[i])[0]
        peaks[locus.name] = tuple((int(grid.labels[i, j]), float(heights[i, j])) for j in cols)
    return Residue(
        peaks,
        viral_material_present=specimen.viral_rna_copies > 0,
        control_target_detected=control_target_detected,
        verification_color=verification_color,
    )


def run_test(procedure: "TestProcedure", specimen: Specimen, rng: np.random.Generator) -> tuple[TestResult, Residue]:
    """Apply the procedure's privacy step, run rt-PCR, and return the residue."""
    applied = procedure.t0.apply(specimen, procedure.panel, rng)
    return finish_test(procedure, applied.specimen, rng, verification_color=applied.color)


def finish_test(
    procedure: "TestProcedure",
    post_t0: Specimen,
    rng: np.random.Generator,
    *,
    verification_color: str | None = None,
    control_spiked: bool = False,
) -> tuple[TestResult, Residue]:
    result = pcr_detect(post_t0, procedure.assay)
    control = None
    if control_spiked or any(isinstance(t, ControlTarget) for t, _ in post_t0.contributions):
        control = any(isinstance(t, ControlTarget) and m > 0 for t, m in post_t0.contributions)
    residue = simulate_residue(
        post_t0, procedure.epg, rng, procedure.panel,
        control_target_detected=control, verification_color=verification_color,
    )
    return result, residue
