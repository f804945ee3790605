"""Privacy steps run in front of the patient before the specimen leaves.

Each T0 variant is a small frozen dataclass exposing

* ``apply(specimen, panel, rng)`` - what the kit physically does, and
* ``expected(specimen, panel)`` - the deterministic post-step specimen an
  attacker who knows the kit would hypothesise (``None`` when the step is
  randomised and therefore unknown to the attacker).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .assay import (
    AssayParams,
    ControlTarget,
    EpgParams,
    LadderTemplate,
    Residue,
    Specimen,
    TestResult,
    finish_test,
    is_dna,
    is_human,
)
from .genotype import FrequencyPanel, GenotypeProfile, default_panel, sample_genotype
from .streams import child

BLUE = "Blue"
RED = "Red"


@dataclass(frozen=True)
class Applied:
    specimen: Specimen
    color: str | None = None


# ---------------------------------------------------------------- operations

def apply_dilution(specimen: Specimen, panel_profiles: Sequence[GenotypeProfile],
                   per_profile_mass: float | None = None) -> Specimen:
    """Add a fixed panel of ``k`` profiles.

    ``per_profile_mass=None`` uses the specimen's own human mass, giving an
    equal-contributor mixture.
    """
    if len(panel_profiles) == 0:
        raise ValueError("dilution panel must contain at least one profile")
    mass = specimen.human_mass if per_profile_mass is None else float(per_profile_mass)
    if not mass > 0:
        raise ValueError("dilution mass must be positive (specimen has no human DNA to match)")
    return specimen.with_contributions((p, mass) for p in panel_profiles)


@dataclass(frozen=True)
class CountDistribution:
    values: tuple[int, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(int(v) for v in self.values))
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        if not self.values or len(self.values) != len(self.probs):
            raise ValueError("count distribution needs matching non-empty values/probs")
        if any(v < 0 for v in self.values) or any(p < 0 for p in self.probs):
            raise ValueError("counts and probabilities must be non-negative")
        if abs(sum(self.probs) - 1.0) > 1e-9:
            raise ValueError("count probabilities must sum to 1")

    @classmethod
    def fixed(cls, n: int) -> "CountDistribution":
        return cls((n,), (1.0,))

    @classmethod
    def uniform(cls, low: int, high: int) -> "CountDistribution":
        vals = tuple(range(low, high + 1))
        return cls(vals, tuple(1.0 / len(vals) for _ in vals))

    @property
    def max(self) -> int:
        return max(v for v, p in zip(self.values, self.probs) if p > 0)

    def sample(self, rng: np.random.Generator) -> int:
        if len(self.values) == 1:
            return self.values[0]
        return int(self.values[rng.choice(len(self.values), p=np.array(self.probs))])


@dataclass(frozen=True)
class MassDistribution:
    """``fixed`` (a), ``uniform`` (a, b) or ``gamma`` (mean a, cv b)."""

    kind: str = "fixed"
    a: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform", "gamma"):
            raise ValueError(f"unknown mass distribution {self.kind!r}")
        if not self.a > 0 or self.b < 0:
            raise ValueError("mass distribution parameters must be positive")
        if self.kind == "uniform" and self.b < self.a:
            raise ValueError("uniform mass distribution needs b >= a")

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "fixed":
            return self.a
        if self.kind == "uniform":
            return float(rng.uniform(self.a, self.b))
        if self.b == 0:
            return self.a
        k = 1.0 / (self.b * self.b)
        return float(rng.gamma(k, self.a / k))


def apply_randomizing(specimen: Specimen, pool: Sequence[GenotypeProfile], count_dist: CountDistribution,
                      mass_dist: MassDistribution, rng: np.random.Generator) -> Specimen:
    if len(pool) < count_dist.max:
        raise ValueError(f"pool of {len(pool)} profiles cannot supply {count_dist.max} contributors")
    n = count_dist.sample(rng)
    if n == 0:
        return specimen
    chosen = rng.choice(len(pool), size=n, replace=False)
    return specimen.with_contributions((pool[int(i)], mass_dist.sample(rng)) for i in chosen)


def apply_allelic_ladder(specimen: Specimen, panel: FrequencyPanel, ladder_mass_per_allele: float) -> Specimen:
    if ladder_mass_per_allele < 0:
        raise ValueError("ladder mass must be non-negative")
    if ladder_mass_per_allele == 0:
        return specimen
    return specimen.with_contributions([(LadderTemplate(), ladder_mass_per_allele)])


def apply_dnase(specimen: Specimen, efficiency: float, rng: np.random.Generator | None = None,
                color_threshold: float = 0.0) -> tuple[Specimen, str]:
    """Attenuate every DNA template to ``mass * (1 - efficiency)``; RNA untouched.

    Templates whose mass reaches zero are removed.  The indicator turns red
    iff the surviving DNA mass is at most ``color_threshold``.
    """
    if not 0.0 <= efficiency <= 1.0:
        raise ValueError("DNase efficiency must be in [0, 1]")
    survive = 1.0 - efficiency
    contribs = []
    for t, m in specimen.contributions:
        if is_dna(t):
            m = m * survive
        if m > 0:
            contribs.append((t, m))
    out = Specimen(tuple(contribs), specimen.viral_rna_copies)
    color = RED if out.dna_mass <= color_threshold else BLUE
    return out, color


# ---------------------------------------------------------------- T0 variants

@dataclass(frozen=True)
class Identity:
    kind = "identity"

    def apply(self, specimen, panel, rng) -> Applied:
        return Applied(specimen)

    def expected(self, specimen, panel) -> Specimen | None:
        return specimen

    def to_json(self) -> dict:
        return {"kind": self.kind}


@dataclass(frozen=True)
class Dilution:
    panel_profiles: tuple[GenotypeProfile, ...]
    per_profile_mass: float | None = None
    kind = "dilution"

    def __post_init__(self):
        object.__setattr__(self, "panel_profiles", tuple(self.panel_profiles))
        if not self.panel_profiles:
            raise ValueError("dilution panel must be non-empty")

    def apply(self, specimen, panel, rng) -> Applied:
        return Applied(apply_dilution(specimen, self.panel_profiles, self.per_profile_mass))

    def expected(self, specimen, panel) -> Specimen | None:
        return apply_dilution(specimen, self.panel_profiles, self.per_profile_mass)

    def to_json(self) -> dict:
        return {"kind": self.kind, "profiles": [p.to_json() for p in self.panel_profiles],
                "per_profile_mass": self.per_profile_mass}


@dataclass(frozen=True)
class Randomizing:
    pool: tuple[GenotypeProfile, ...]
    count_distribution: CountDistribution
    mass_distribution: MassDistribution = field(default_factory=MassDistribution)
    kind = "randomizing"

    def __post_init__(self):
        object.__setattr__(self, "pool", tuple(self.pool))
        if len(self.pool) < self.count_distribution.max:
            raise ValueError("randomizing pool smaller than the largest contributor count")

    def apply(self, specimen, panel, rng) -> Applied:
        return Applied(apply_randomizing(specimen, self.pool, self.count_distribution,
                                         self.mass_distribution, child(rng, "randomize")))

    def expected(self, specimen, panel) -> Specimen | None:
        return None

    def to_json(self) -> dict:
        return {"kind": self.kind, "pool": [p.to_json() for p in self.pool],
                "count": {"values": list(self.count_distribution.values),
                          "probs": list(self.count_distribution.probs)},
                "mass": {"kind": self.mass_distribution.kind, "a": self.mass_distribution.a,
                         "b": self.mass_distribution.b}}


@dataclass(frozen=True)
class AllelicLadder:
    ladder_mass_per_allele: float
    kind = "ladder"

    def apply(self, specimen, panel, rng) -> Applied:
        return Applied(apply_allelic_ladder(specimen, panel, self.ladder_mass_per_allele))

    def expected(self, specimen, panel) -> Specimen | None:
        return apply_allelic_ladder(specimen, panel, self.ladder_mass_per_allele)

    def to_json(self) -> dict:
        return {"kind": self.kind, "ladder_mass_per_allele": self.ladder_mass_per_allele}


@dataclass(frozen=True)
class Destruction:
    dnase_efficiency: float = 1.0
    color_threshold: float = 0.0
    kind = "dnase"

    def __post_init__(self):
        if not 0.0 <= self.dnase_efficiency <= 1.0:
            raise ValueError("dnase_efficiency must be in [0, 1]")

    def apply(self, specimen, panel, rng) -> Applied:
        out, color = apply_dnase(specimen, self.dnase_efficiency, rng, self.color_threshold)
        return Applied(out, color)

    def expected(self, specimen, panel) -> Specimen | None:
        return apply_dnase(specimen, self.dnase_efficiency, None, self.color_threshold)[0]

    def to_json(self) -> dict:
        return {"kind": self.kind, "efficiency": self.dnase_efficiency,
                "color_threshold": self.color_threshold}


T0 = Identity | Dilution | Randomizing | AllelicLadder | Destruction


@dataclass(frozen=True)
class TestProcedure:
    t0: T0 = field(default_factory=Identity)
    assay: AssayParams = field(default_factory=AssayParams)
    epg: EpgParams = field(default_factory=EpgParams)
    panel: FrequencyPanel = field(default_factory=default_panel)

    __test__ = False

    def with_t0(self, t0) -> "TestProcedure":
        return replace(self, t0=t0)


def make_dilution_panel(population: FrequencyPanel, k: int, rng: np.random.Generator) -> tuple[GenotypeProfile, ...]:
    return tuple(sample_genotype(population, child(rng, "dilution", i)) for i in range(k))


def make_pool(population: FrequencyPanel, size: int, rng: np.random.Generator) -> tuple[GenotypeProfile, ...]:
    return tuple(sample_genotype(population, child(rng, "pool", i)) for i in range(size))


# ---------------------------------------------------------------- kits & protocols

KIT_BEHAVIORS = ("kills_virus_too", "fake_color_no_dnase")


@dataclass(frozen=True)
class KitModel:
    honest: bool = True
    behavior: str | None = None
    destroys_control: bool = False

    def __post_init__(self):
        if self.honest and self.behavior is not None:
            raise ValueError("an honest kit has no malicious behaviour")
        if not self.honest and self.behavior not in KIT_BEHAVIORS:
            raise ValueError(f"dishonest kit needs behavior in {KIT_BEHAVIORS}, got {self.behavior!r}")
        if self.destroys_control and self.behavior != "kills_virus_too":
            raise ValueError("only a kills_virus_too kit can destroy the control")


@dataclass(frozen=True)
class ProtocolOutcome:
    aborted: bool
    abort_reason: str | None = None
    result: TestResult | None = None
    residue: Residue | None = None
    tampered_sample_tested: bool = False

    def __post_init__(self):
        if self.aborted == (self.result is not None):
            raise ValueError("result must be present exactly when the protocol did not abort")
        if self.aborted and self.abort_reason not in ("verification_failed", "control_failed"):
            raise ValueError(f"bad abort reason {self.abort_reason!r}")


def _kit_t0(kit: KitModel, tampered: bool, procedure: TestProcedure, specimen: Specimen,
            rng: np.random.Generator) -> Applied:
    if tampered and kit.behavior == "fake_color_no_dnase":
        # colour reagent emulates the change, no DNase is present
        return Applied(specimen, RED)
    applied = procedure.t0.apply(specimen, procedure.panel, rng)
    if tampered and kit.behavior == "kills_virus_too":
        contribs = tuple((t, m) for t, m in applied.specimen.contributions
                         if not (kit.destroys_control and isinstance(t, ControlTarget)))
        return Applied(Specimen(contribs, 0), applied.color)
    return applied


def _finish_with_control(procedure, applied, rng, control_spiked) -> ProtocolOutcome:
    result, residue = finish_test(procedure, applied.specimen, rng,
                                  verification_color=applied.color, control_spiked=control_spiked)
    if control_spiked and not result.positive and not residue.control_target_detected:
        return ProtocolOutcome(True, "control_failed", residue=residue)
    return ProtocolOutcome(False, None, result, residue)


def cut_and_choose(n_samples: int, kit: KitModel, patient_rng: np.random.Generator,
                   procedure: TestProcedure, specimen: Specimen, *,
                   verify_all_but_one: bool = False,
                   control_target_mass: float | None = None) -> ProtocolOutcome:
    """Split the specimen into ``n_samples`` treated aliquots and audit some.

    A fake-colour kit tampers with exactly one aliquot (placed uniformly by
    the lab); the patient audits one aliquot, or all but one with
    ``verify_all_but_one``.  A kit that also kills the virus passes the audit
    because DNase really is present.  The lab tests the tampered aliquot
    whenever it escaped the audit, otherwise the first untested one.
    """
    if n_samples < 2:
        raise ValueError("cut-and-choose needs at least 2 samples")
    lab_rng = child(patient_rng, "lab")
    pat_rng = child(patient_rng, "patient")
    test_rng = child(patient_rng, "test")
    if control_target_mass is not None:
        if not control_target_mass > 0:
            raise ValueError("control_target_mass must be positive")
        specimen = specimen.with_contributions([(ControlTarget(), control_target_mass)])

    if kit.honest:
        tampered = set()
    elif kit.behavior == "fake_color_no_dnase":
        tampered = {int(lab_rng.integers(n_samples))}
    else:
        tampered = set(range(n_samples))

    n_verify = n_samples - 1 if verify_all_but_one else 1
    audited = {int(i) for i in pat_rng.choice(n_samples, size=n_verify, replace=False)}
    if kit.behavior == "fake_color_no_dnase" and audited & tampered:
        return ProtocolOutcome(True, "verification_failed")

    untested = [i for i in range(n_samples) if i not in audited]
    bad = [i for i in untested if i in tampered]
    chosen = bad[0] if bad else untested[0]
    applied = _kit_t0(kit, chosen in tampered, procedure, specimen, test_rng)
    outcome = _finish_with_control(procedure, applied, test_rng, control_target_mass is not None)
    return replace(outcome, tampered_sample_tested=chosen in tampered)


@dataclass(frozen=True)
class ControlledRun:
    result: TestResult
    residue: Residue
    valid: bool


def process_control(procedure: TestProcedure, specimen: Specimen, control_target_mass: float,
                    rng: np.random.Generator, kit: KitModel | None = None) -> ControlledRun:
    """Spike a protected control target before T0 and check it reaches the residue.

    A negative result without the control is flagged invalid.
    """
    if not control_target_mass > 0:
        raise ValueError("control_target_mass must be positive")
    kit = kit or KitModel()
    spiked = specimen.with_contributions([(ControlTarget(), control_target_mass)])
    applied = _kit_t0(kit, not kit.honest, procedure, spiked, rng)
    result, residue = finish_test(procedure, applied.specimen, rng,
                                  verification_color=applied.color, control_spiked=True)
    valid = result.positive or bool(residue.control_target_detected)
    return ControlledRun(result, residue, valid)


def human_contributors(specimen: Specimen) -> list[tuple[GenotypeProfile, float]]:
    return [(t, m) for t, m in specimen.contributions if is_human(t)]
