"""The chosen-DNA indistinguishability game and its statistics.

One round: the adversary names two profiles, the challenger flips ``b``,
builds ``DNA_b + virus`` and ``DNA_b`` alone, runs the test procedure on both
and hands the adversary both (result, residue) pairs.  The adversary's
advantage is ``2 |Pr[b' = b] - 1/2|``.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from statistics import NormalDist
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.stats import binom

from .assay import Residue, Specimen, TestResult, run_test
from .attackers import (
    AttackerContext,
    attack_full_unknown,
    attack_isolate_known_mixture,
    homer_statistic,
    presence_score,
)
from .countermeasures import (
    Dilution,
    Identity,
    KitModel,
    Randomizing,
    TestProcedure,
    cut_and_choose,
)
from .genotype import FrequencyPanel, GenotypeProfile, sample_genotype
from .likelihood import residue_loglik, specimen_moments
from .streams import child, stream

PROFILE_CHOICES = ("adversarial_max_distance", "random_pair", "fixed")
VERDICTS = ("secure_at_threshold", "insecure", "inconclusive")


class ConfigError(ValueError):
    """Game configuration is inconsistent (e.g. attacker cannot run on this T0)."""


# ---------------------------------------------------------------- statistics

def wilson_interval(successes: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    if n <= 0:
        return 0.0, 1.0
    z = NormalDist().inv_cdf(0.5 + confidence / 2)
    p = successes / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo, hi = max(0.0, centre - half), min(1.0, centre + half)
    # guard rounding at the boundaries
    return min(lo, p), max(hi, p)


@dataclass(frozen=True)
class AdvantageEstimate:
    trials: int
    correct_guesses: int
    p_hat: float
    adv_hat: float
    ci_low: float
    ci_high: float
    adv_ci_low: float
    adv_ci_high: float
    aborted: int = 0
    confidence: float = 0.95

    @classmethod
    def from_counts(cls, correct: int, trials: int, aborted: int = 0,
                    confidence: float = 0.95) -> "AdvantageEstimate":
        if trials <= 0:
            return cls(0, 0, 0.5, 0.0, 0.0, 1.0, 0.0, 1.0, aborted, confidence)
        p = correct / trials
        lo, hi = wilson_interval(correct, trials, confidence)
        # integer form keeps adv exactly equal for k and n - k correct guesses
        adv = abs(2 * correct - trials) / trials
        adv_hi = 2 * max(abs(lo - 0.5), abs(hi - 0.5))
        adv_lo = 0.0 if lo <= 0.5 <= hi else 2 * min(abs(lo - 0.5), abs(hi - 0.5))
        return cls(trials, correct, p, adv, lo, hi, adv_lo, adv_hi, aborted, confidence)

    def to_json(self) -> dict:
        return {
            "trials": self.trials, "correct_guesses": self.correct_guesses, "aborted": self.aborted,
            "p_hat": self.p_hat, "adv_hat": self.adv_hat, "ci_low": self.ci_low, "ci_high": self.ci_high,
            "adv_ci_low": self.adv_ci_low, "adv_ci_high": self.adv_ci_high, "confidence": self.confidence,
        }


def check_security(estimate: AdvantageEstimate, threshold: float = 1e-3) -> str:
    """Three-way verdict: certified below the threshold, certified above, or neither."""
    if estimate.adv_ci_high < threshold:
        return "secure_at_threshold"
    if estimate.adv_ci_low >= threshold:
        return "insecure"
    return "inconclusive"


def null_adv_band(trials: int, level: float = 0.99) -> float:
    """Largest adv_hat a fair coin reaches inside its central binomial ``level`` band."""
    lo = binom.ppf((1 - level) / 2, trials, 0.5)
    hi = binom.isf((1 - level) / 2, trials, 0.5)
    return 2 * max(abs(lo / trials - 0.5), abs(hi / trials - 0.5))


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class AttackerSpec:
    name: str
    params: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class GameConfig:
    procedure: TestProcedure
    attacker: AttackerSpec
    trials: int = 1000
    profile_choice: str = "adversarial_max_distance"
    viral_copies_when_positive: int = 1000
    root_seed: int = 0
    victim_mass: float = 1.0
    branches: str = "both"
    profiles: tuple[GenotypeProfile, GenotypeProfile] | None = None
    kit: KitModel | None = None
    n_samples: int = 2
    adversary_search: int = 1000

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.viral_copies_when_positive < self.procedure.assay.limit_of_detection:
            raise ConfigError("viral_copies_when_positive is below the limit of detection")
        if self.profile_choice not in PROFILE_CHOICES:
            raise ConfigError(f"profile_choice must be one of {PROFILE_CHOICES}")
        if (self.profile_choice == "fixed") != (self.profiles is not None):
            raise ConfigError("profiles must be given exactly when profile_choice is 'fixed'")
        if self.branches not in ("both", "positive", "negative"):
            raise ConfigError("branches must be both, positive or negative")


@dataclass(frozen=True)
class Transcript:
    positive: tuple[TestResult, Residue] | None
    negative: tuple[TestResult, Residue] | None

    def branches(self) -> list[tuple[str, TestResult, Residue]]:
        out = []
        if self.positive is not None:
            out.append(("positive", *self.positive))
        if self.negative is not None:
            out.append(("negative", *self.negative))
        return out


@dataclass(frozen=True)
class Round:
    b: int
    transcript: Transcript | None
    aborted: bool = False
    abort_reason: str | None = None


def challenge_specimens(config: GameConfig, dna: GenotypeProfile) -> dict[str, Specimen]:
    return {
        "positive": Specimen.of(dna, config.victim_mass, config.viral_copies_when_positive),
        "negative": Specimen.of(dna, config.victim_mass, 0),
    }


def challenger_round(config: GameConfig, dna0: GenotypeProfile, dna1: GenotypeProfile,
                     rng: np.random.Generator) -> Round:
    b = int(child(rng, "b").integers(2))
    dna = (dna0, dna1)[b]
    specimens = challenge_specimens(config, dna)
    wanted = ("positive", "negative") if config.branches == "both" else (config.branches,)
    got: dict[str, tuple[TestResult, Residue]] = {}
    for branch in wanted:
        r = child(rng, "branch", branch)
        if config.kit is None:
            got[branch] = run_test(config.procedure, specimens[branch], r)
        else:
            outcome = cut_and_choose(config.n_samples, config.kit, r, config.procedure, specimens[branch])
            if outcome.aborted:
                return Round(b, None, True, outcome.abort_reason)
            got[branch] = (outcome.result, outcome.residue)
    return Round(b, Transcript(got.get("positive"), got.get("negative")))


# ---------------------------------------------------------------- residue features

def residue_features(residue: Residue, panel: FrequencyPanel) -> np.ndarray:
    """Allele-presence indicators per grid position, then per-locus height quartiles and max."""
    heights, _ = residue.dense(panel)
    valid = panel.grid.valid
    presence = (heights > 0)[valid].astype(float)
    quant = np.zeros((heights.shape[0], 4))
    for i in range(heights.shape[0]):
        h = heights[i][heights[i] > 0]
        if h.size:
            quant[i] = np.quantile(np.log1p(h), [0.25, 0.5, 0.75, 1.0])
    return np.concatenate([presence, quant.ravel()])


@dataclass(frozen=True)
class ChemEquivResult:
    equivalent: bool
    statistic: float
    p_value: float
    alpha: float

    @property
    def verdict(self) -> str:
        return "equivalent" if self.equivalent else "distinguishable"


def _mean_diff_stat(X: np.ndarray, groups: np.ndarray, n_a: int) -> np.ndarray:
    """Sum of squared standardised mean differences; ``groups`` is (B, n) index rows."""
    a = X[groups[:, :n_a]].mean(axis=1)
    b = X[groups[:, n_a:]].mean(axis=1)
    return ((a - b) ** 2).sum(axis=-1)


def chem_equiv(residues_a: Sequence[Residue], residues_b: Sequence[Residue], panel: FrequencyPanel,
               rng: np.random.Generator, alpha: float = 0.01, permutations: int = 199) -> ChemEquivResult:
    """Permutation test of identical residue distributions at level ``alpha``."""
    if not residues_a or not residues_b:
        raise ValueError("both residue samples must be non-empty")
    X = np.stack([residue_features(r, panel) for r in list(residues_a) + list(residues_b)])
    sd = X.std(axis=0)
    keep = sd > 1e-12
    X = (X[:, keep] - X[:, keep].mean(axis=0)) / sd[keep]
    n, n_a = X.shape[0], len(residues_a)
    if X.shape[1] == 0:
        return ChemEquivResult(True, 0.0, 1.0, alpha)
    observed = float(_mean_diff_stat(X, np.arange(n)[None, :], n_a)[0])
    perms = np.stack([rng.permutation(n) for _ in range(permutations)])
    null = _mean_diff_stat(X, perms, n_a)
    p = (1 + int(np.sum(null >= observed - 1e-12))) / (permutations + 1)
    return ChemEquivResult(p > alpha, observed, p, alpha)


# ---------------------------------------------------------------- game attackers

@dataclass(frozen=True)
class GameView:
    dna0: GenotypeProfile
    dna1: GenotypeProfile
    transcript: Transcript
    config: GameConfig


class GameAttacker:
    name = "base"

    def __init__(self, config: GameConfig, **params):
        self.config = config
        self.params = params

    def prepare(self, pair: tuple[GenotypeProfile, GenotypeProfile] | None, rng: np.random.Generator) -> None:
        pass

    def score(self, view: GameView, rng: np.random.Generator) -> float:
        """Evidence for b = 1 over b = 0; zero means no preference."""
        raise NotImplementedError

    def guess(self, view: GameView, rng: np.random.Generator) -> int:
        s = self.score(view, child(rng, "score"))
        if s > 0:
            return 1
        if s < 0:
            return 0
        return int(child(rng, "tie").integers(2))


class CoinFlip(GameAttacker):
    name = "coin"

    def score(self, view, rng):
        return 0.0


class ConfirmAttacker(GameAttacker):
    """Likelihood ratio of the two fully specified post-T0 specimens."""

    name = "confirm"

    def __init__(self, config, **params):
        super().__init__(config, **params)
        if isinstance(config.procedure.t0, Randomizing):
            raise ConfigError("confirm attacker needs a known mixture; a randomizing T0 has none")
        epg = config.procedure.epg
        if "assumed_stutter_ratio" in params:
            # degraded-knowledge mode: the attacker models stutter wrongly
            epg = replace(epg, stutter_ratio=float(params["assumed_stutter_ratio"]))
        self.epg = epg
        self._cache: dict = {}

    def _moments(self, dna: GenotypeProfile, branch: str):
        key = (dna, branch)
        if key not in self._cache:
            proc = self.config.procedure
            spec = challenge_specimens(self.config, dna)[branch]
            post = proc.t0.expected(spec, proc.panel)
            self._cache[key] = specimen_moments(post, proc.panel, self.epg)
        return self._cache[key]

    def score(self, view, rng):
        panel = self.config.procedure.panel
        total = 0.0
        for branch, _, residue in view.transcript.branches():
            l0 = float(residue_loglik(residue, *self._moments(view.dna0, branch), panel, self.epg))
            l1 = float(residue_loglik(residue, *self._moments(view.dna1, branch), panel, self.epg))
            if l0 == l1:
                continue
            if math.isinf(l0) and math.isinf(l1):
                continue
            total += l1 - l0
        return total


class PresenceOnly(GameAttacker):
    """Counts which candidate's alleles show up as peaks, ignoring heights."""

    name = "presence-only"

    def score(self, view, rng):
        total = 0
        for _, _, residue in view.transcript.branches():
            total += presence_score(residue, view.dna1) - presence_score(residue, view.dna0)
        return float(total)


class HomerAttacker(GameAttacker):
    name = "homer"

    def score(self, view, rng):
        proc = self.config.procedure
        total = 0.0
        for _, _, residue in view.transcript.branches():
            total += homer_statistic(residue, view.dna1, proc.panel, proc.epg)
            total -= homer_statistic(residue, view.dna0, proc.panel, proc.epg)
        return total


class CompareAttacker(GameAttacker):
    """Runs the test on both candidates itself and compares residue features.

    Nearest centroid over ``n_ref`` self-made residues per candidate and branch.
    """

    name = "compare"

    def __init__(self, config, **params):
        super().__init__(config, **params)
        self.n_ref = int(params.get("n_ref", 10))
        self._refs: dict = {}

    def _centroids(self, pair, rng):
        key = tuple(pair)
        if key in self._refs:
            return self._refs[key]
        proc = self.config.procedure
        out = {}
        for b, dna in enumerate(pair):
            for branch, spec in challenge_specimens(self.config, dna).items():
                feats = [residue_features(run_test(proc, spec, child(rng, "ref", b, branch, i))[1], proc.panel)
                         for i in range(self.n_ref)]
                out[(b, branch)] = np.mean(feats, axis=0)
        return out

    def prepare(self, pair, rng):
        if pair is not None:
            self._refs[tuple(pair)] = self._centroids(pair, rng)

    def score(self, view, rng):
        cents = self._centroids((view.dna0, view.dna1), rng)
        proc = self.config.procedure
        total = 0.0
        for branch, _, residue in view.transcript.branches():
            f = residue_features(residue, proc.panel)
            d0 = float(np.sum((f - cents[(0, branch)]) ** 2))
            d1 = float(np.sum((f - cents[(1, branch)]) ** 2))
            total += d0 - d1
        return total


def _known_mixture(config: GameConfig, who: str) -> tuple[tuple[GenotypeProfile, ...], float]:
    t0 = config.procedure.t0
    if isinstance(t0, Identity):
        return (), config.victim_mass
    if isinstance(t0, Dilution):
        mass = config.victim_mass if t0.per_profile_mass is None else t0.per_profile_mass
        return t0.panel_profiles, mass
    raise ConfigError(f"{who} attacker supports identity and dilution T0, not {t0.kind}")


def _matches(a: GenotypeProfile, b: GenotypeProfile) -> int:
    return sum(a[n] == b[n] for n in b.genotype)


class DeconvolveKnown(GameAttacker):
    """Isolates the unknown contributor given the known dilution panel."""

    name = "deconvolve-known"

    def __init__(self, config, **params):
        super().__init__(config, **params)
        self.mixture, self.mass = _known_mixture(config, self.name)

    def score(self, view, rng):
        proc = self.config.procedure
        ctx = AttackerContext("C", proc.panel, proc.epg, known_mixture=self.mixture,
                              victim_mass=self.config.victim_mass, mixture_mass=self.mass)
        total = 0
        for _, _, residue in view.transcript.branches():
            est = attack_isolate_known_mixture(ctx, residue).profile
            total += _matches(est, view.dna1) - _matches(est, view.dna0)
        return float(total)


class FullUnknown(GameAttacker):
    name = "full-unknown"

    def score(self, view, rng):
        proc = self.config.procedure
        ctx = AttackerContext("D", proc.panel, proc.epg)
        total = 0
        for branch, _, residue in view.transcript.branches():
            res = attack_full_unknown(ctx, residue, child(rng, branch),
                                      max_contributors=int(self.params.get("max_contributors", 8)),
                                      samples=int(self.params.get("samples", 200)))
            if not res.candidates:
                continue
            total += max(_matches(c, view.dna1) for c in res.candidates)
            total -= max(_matches(c, view.dna0) for c in res.candidates)
        return float(total)


class Negated(GameAttacker):
    """Flips every guess of the wrapped attacker, using the same randomness."""

    def __init__(self, inner: GameAttacker):
        self.inner = inner
        self.config = inner.config
        self.name = f"not-{inner.name}"

    def prepare(self, pair, rng):
        self.inner.prepare(pair, rng)

    def guess(self, view, rng):
        return 1 - self.inner.guess(view, rng)


ATTACKERS: dict[str, type[GameAttacker]] = {
    cls.name: cls
    for cls in (CoinFlip, ConfirmAttacker, PresenceOnly, HomerAttacker, CompareAttacker, DeconvolveKnown, FullUnknown)
}
ATTACKER_NAMES = ("confirm", "homer", "deconvolve-known", "full-unknown", "presence-only", "compare", "coin")


def build_attacker(config: GameConfig) -> GameAttacker:
    spec = config.attacker
    name = spec.name
    params = dict(spec.params)
    negate = bool(params.pop("negate", False))
    if name.startswith("not-"):
        name, negate = name[4:], not negate
    if name not in ATTACKERS:
        raise ConfigError(f"unknown attacker {spec.name!r}; choose from {sorted(ATTACKERS)}")
    attacker = ATTACKERS[name](config, **params)
    return Negated(attacker) if negate else attacker


# ---------------------------------------------------------------- adversary choice

def disjoint_loci(a: GenotypeProfile, b: GenotypeProfile) -> int:
    return sum(not (set(a[n]) & set(b[n])) for n in a.genotype)


def adversarial_pair(panel: FrequencyPanel, rng: np.random.Generator, candidates: int = 1000):
    """Best of ``candidates`` random pairs by number of allele-disjoint loci (first wins ties)."""
    best, best_score = None, -1
    for i in range(candidates):
        r = child(rng, "pair", i)
        a, b = sample_genotype(panel, child(r, 0)), sample_genotype(panel, child(r, 1))
        score = disjoint_loci(a, b)
        if score > best_score:
            best, best_score = (a, b), score
    return best


# ---------------------------------------------------------------- the game

@dataclass(frozen=True)
class TrialRecord:
    trial: int
    b: int
    guess: int | None
    aborted: bool
    abort_reason: str | None

    @property
    def correct(self) -> bool:
        return self.guess is not None and self.guess == self.b


@dataclass(frozen=True)
class GameResult:
    estimate: AdvantageEstimate
    records: tuple[TrialRecord, ...]
    pair: tuple[GenotypeProfile, GenotypeProfile] | None
    wall_clock_s: float


def _trial_pair(config: GameConfig, fixed_pair, i: int):
    if fixed_pair is not None:
        return fixed_pair
    r = stream(config.root_seed, "trial", i, "adversary")
    return sample_genotype(config.procedure.panel, child(r, 0)), sample_genotype(config.procedure.panel, child(r, 1))


def play(config: GameConfig, threads: int = 1) -> GameResult:
    """Run every trial; per-trial streams make the tallies independent of ``threads``."""
    started = time.perf_counter()
    panel = config.procedure.panel
    if config.profile_choice == "fixed":
        fixed = tuple(config.profiles)
    elif config.profile_choice == "adversarial_max_distance":
        fixed = adversarial_pair(panel, stream(config.root_seed, "adversary"), config.adversary_search)
    else:
        fixed = None
    attacker = build_attacker(config)
    attacker.prepare(fixed, stream(config.root_seed, "attacker-prepare"))

    def one(i: int) -> TrialRecord:
        dna0, dna1 = _trial_pair(config, fixed, i)
        rnd = challenger_round(config, dna0, dna1, stream(config.root_seed, "trial", i, "challenger"))
        if rnd.aborted:
            return TrialRecord(i, rnd.b, None, True, rnd.abort_reason)
        view = GameView(dna0, dna1, rnd.transcript, config)
        g = attacker.guess(view, stream(config.root_seed, "trial", i, "attacker"))
        return TrialRecord(i, rnd.b, int(g), False, None)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(one, range(config.trials)))
    else:
        records = [one(i) for i in range(config.trials)]
    done = [r for r in records if not r.aborted]
    correct = sum(r.correct for r in done)
    est = AdvantageEstimate.from_counts(correct, len(done), len(records) - len(done))
    assert 0.0 <= est.adv_hat <= 1.0
    return GameResult(est, tuple(records), fixed, time.perf_counter() - started)


def run_game(config: GameConfig, threads: int = 1) -> AdvantageEstimate:
    return play(config, threads).estimate


# ---------------------------------------------------------------- distribution checks

def _residue_family(procedure: TestProcedure, dna: GenotypeProfile, n: int, rng: np.random.Generator,
                    branch: str, victim_mass: float, viral_copies: int) -> list[Residue]:
    copies = viral_copies if branch == "positive" else 0
    spec = Specimen.of(dna, victim_mass, copies)
    return [run_test(procedure, spec, child(rng, i))[1] for i in range(n)]


@dataclass(frozen=True)
class DistributionReport:
    equivalent: bool
    statistic: float
    p_value: float
    trials: int
    other: GenotypeProfile

    @property
    def passed(self) -> bool:
        return self.equivalent


def residue_distribution_check(procedure: TestProcedure, dna: GenotypeProfile, trials: int,
                               rng: np.random.Generator, other: GenotypeProfile | None = None, *,
                               branch: str = "positive", victim_mass: float = 1.0,
                               viral_copies: int = 1000, alpha: float = 0.01) -> DistributionReport:
    """Compare residues of ``dna`` and of an independent ``other`` under fresh randomisation."""
    if not isinstance(procedure.t0, Randomizing):
        raise ConfigError("residue_distribution_check needs a randomizing T0")
    if other is None:
        other = sample_genotype(procedure.panel, child(rng, "other"))
    fam_a = _residue_family(procedure, dna, trials, child(rng, "a"), branch, victim_mass, viral_copies)
    fam_b = _residue_family(procedure, other, trials, child(rng, "b"), branch, victim_mass, viral_copies)
    res = chem_equiv(fam_a, fam_b, procedure.panel, child(rng, "perm"), alpha=alpha)
    return DistributionReport(res.equivalent, res.statistic, res.p_value, trials, other)


@dataclass(frozen=True)
class ImpossibilityReport:
    equivalence: ChemEquivResult
    attacker_estimate: AdvantageEstimate
    null_band: float

    @property
    def distinguishable(self) -> bool:
        return not self.equivalence.equivalent


def impossibility_demo(procedure: TestProcedure, dna0: GenotypeProfile, dna1: GenotypeProfile, trials: int,
                       root_seed: int = 0, *, family_size: int = 50, n_ref: int = 10,
                       threads: int = 1) -> ImpossibilityReport:
    """Test residue equivalence, then let a self-testing attacker play the game.

    If the residue families differ, an adversary who runs the test on both
    candidates and compares wins; the measured advantage shows it.
    """
    rng = stream(root_seed, "impossibility")
    fam0 = _residue_family(procedure, dna0, family_size, child(rng, "f0"), "positive", 1.0, 1000)
    fam1 = _residue_family(procedure, dna1, family_size, child(rng, "f1"), "positive", 1.0, 1000)
    eq = chem_equiv(fam0, fam1, procedure.panel, child(rng, "perm"))
    config = GameConfig(procedure, AttackerSpec("compare", {"n_ref": n_ref}), trials=trials,
                        profile_choice="fixed", profiles=(dna0, dna1), root_seed=root_seed)
    est = run_game(config, threads)
    return ImpossibilityReport(eq, est, null_adv_band(est.trials, 0.99))


def coin_flip_bounds(trials: int, level: float = 0.99) -> tuple[int, int]:
    lo = int(binom.ppf((1 - level) / 2, trials, 0.5))
    hi = int(binom.isf((1 - level) / 2, trials, 0.5))
    return lo, hi
