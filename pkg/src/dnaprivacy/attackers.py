"""Attacker strategies for the four knowledge scenarios.

=========  ==============  ==============  ===============
scenario   victim known    mixture known   goal
=========  ==============  ==============  ===============
A          yes             yes             confirm victim
B          yes             no              confirm victim
C          no              yes             learn victim
D          no              no              learn victim
=========  ==============  ==============  ===============
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .assay import EpgParams, Residue, Specimen, expected_allele_grid
from .genotype import FrequencyPanel, GenotypeProfile, sample_genotype
from .likelihood import add_stutter, residue_loglik
from .streams import child

SCENARIOS = ("A", "B", "C", "D")

# counts whose marginal trails the best by this many nats are not expanded
PRUNE_NATS = 30.0


@dataclass(frozen=True)
class AttackerContext:
    scenario: str
    population: FrequencyPanel
    epg_params: EpgParams = field(default_factory=EpgParams)
    known_victim: GenotypeProfile | None = None
    known_mixture: tuple[GenotypeProfile, ...] | None = None
    victim_mass: float = 1.0
    mixture_mass: float = 1.0
    mc_samples: int = 100

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if self.known_mixture is not None:
            object.__setattr__(self, "known_mixture", tuple(self.known_mixture))
        if (self.known_victim is not None) != (self.scenario in ("A", "B")):
            raise ValueError(f"scenario {self.scenario}: known_victim must be given iff scenario is A or B")
        if (self.known_mixture is not None) != (self.scenario in ("A", "C")):
            raise ValueError(f"scenario {self.scenario}: known_mixture must be given iff scenario is A or C")

    def mixture_specimen(self) -> Specimen:
        return Specimen(tuple((p, self.mixture_mass) for p in self.known_mixture or ()))


def _require(ctx: AttackerContext, scenario: str) -> None:
    if ctx.scenario != scenario:
        raise ValueError(f"attacker needs a scenario {scenario} context, got {ctx.scenario}")


# ---------------------------------------------------------------- moments helpers

def _profile_batch_moments(
    profiles_alleles: np.ndarray, panel: FrequencyPanel, mass_scale: float
) -> tuple[np.ndarray, np.ndarray]:
    """Allele-only moments for a batch of one-contributor hypotheses.

    ``profiles_alleles`` holds grid column indices, shape (B, L, 2).
    """
    B, L, _ = profiles_alleles.shape
    P = panel.grid.shape[1]
    D = np.zeros((B, L, P))
    bi = np.repeat(np.arange(B), L * 2)
    li = np.tile(np.repeat(np.arange(L), 2), B)
    np.add.at(D, (bi, li, profiles_alleles.reshape(-1)), 1.0)
    return mass_scale * D, mass_scale * mass_scale * D * D


def _grid_columns(panel: FrequencyPanel, profile: GenotypeProfile) -> np.ndarray:
    grid = panel.grid
    return np.array([[grid.index[i][a] for a in profile[locus.name]] for i, locus in enumerate(panel.loci)])


# ---------------------------------------------------------------- scenario A

def confirm_log_lr(ctx: AttackerContext, residue: Residue, rng: np.random.Generator,
                   swap: bool = False) -> float:
    """log L(m + x) - log mean_u L(m + u) with u drawn from the population."""
    panel, epg = ctx.population, ctx.epg_params
    base = ctx.mixture_specimen()
    A0, Q0 = expected_allele_grid(base, panel, epg)
    scale = ctx.victim_mass * epg.mean_peak_height

    x_cols = _grid_columns(panel, ctx.known_victim)[None]
    Ax, Qx = _profile_batch_moments(x_cols, panel, scale)
    S1x, S2x = add_stutter(A0 + Ax, Q0 + Qx, panel, epg.stutter_ratio)
    lx = float(residue_loglik(residue, S1x, S2x, panel, epg)[0])

    urng = child(rng, "confirm-u")
    us = [sample_genotype(panel, child(urng, i)) for i in range(ctx.mc_samples)]
    u_cols = np.stack([_grid_columns(panel, u) for u in us])
    Au, Qu = _profile_batch_moments(u_cols, panel, scale)
    S1u, S2u = add_stutter(A0 + Au, Q0 + Qu, panel, epg.stutter_ratio)
    lu_all = residue_loglik(residue, S1u, S2u, panel, epg)
    lu = float(logsumexp(lu_all) - math.log(len(us)))
    a, b = (lu, lx) if swap else (lx, lu)
    if a == b:
        return 0.0
    return a - b


def attack_confirm_known(ctx: AttackerContext, residue: Residue, rng: np.random.Generator) -> tuple[str, float]:
    _require(ctx, "A")
    log_lr = confirm_log_lr(ctx, residue, rng)
    return ("present" if log_lr > 0 else "absent"), log_lr


# ---------------------------------------------------------------- scenario B

def _height_score(heights: np.ndarray, epg: EpgParams) -> np.ndarray:
    scale = max(epg.analytical_threshold, 1.0)
    return np.log1p(heights / scale)


def homer_statistic(residue: Residue, victim: GenotypeProfile, panel: FrequencyPanel, epg: EpgParams) -> float:
    """Sum over loci of (victim-allele signal) minus (population-expected signal).

    Signal of an allele is ``log1p(height / threshold)``, zero when absent.
    For a profile drawn independently of the residue the expectation is zero.
    """
    heights, _ = residue.dense(panel)
    f = _height_score(heights, epg)
    grid = panel.grid
    total = 0.0
    for i, locus in enumerate(panel.loci):
        a, b = victim[locus.name]
        s = 0.5 * (f[i, grid.index[i][a]] + f[i, grid.index[i][b]])
        e = float(np.dot(grid.freq[i], f[i]))
        total += s - e
    return float(total)


@dataclass(frozen=True)
class HomerCalibration:
    threshold: float
    target_fpr: float
    null_size: int


def calibrate_homer(null_statistics: Sequence[float], fpr: float = 0.05) -> HomerCalibration:
    """Threshold at the upper ``fpr`` quantile of statistics under the null."""
    stats = np.sort(np.asarray(null_statistics, float))
    if stats.size == 0:
        raise ValueError("calibration needs null statistics")
    threshold = float(np.quantile(stats, 1.0 - fpr, method="higher"))
    return HomerCalibration(threshold, fpr, int(stats.size))


def homer_null_statistics(
    panel: FrequencyPanel,
    make_residue: Callable[[GenotypeProfile, np.random.Generator], Residue],
    epg: EpgParams,
    n: int,
    rng: np.random.Generator,
) -> list[float]:
    """Statistics of unrelated victims against residues of random people."""
    out = []
    for i in range(n):
        r = child(rng, "homer-null", i)
        source = sample_genotype(panel, child(r, "source"))
        victim = sample_genotype(panel, child(r, "victim"))
        out.append(homer_statistic(make_residue(source, child(r, "residue")), victim, panel, epg))
    return out


def attack_membership_unknown_mixture(ctx: AttackerContext, residue: Residue,
                                      calibration: HomerCalibration) -> tuple[str, float]:
    _require(ctx, "B")
    stat = homer_statistic(residue, ctx.known_victim, ctx.population, ctx.epg_params)
    return ("present" if stat > calibration.threshold else "absent"), stat


# ---------------------------------------------------------------- scenario C

@dataclass(frozen=True)
class IsolationResult:
    profile: GenotypeProfile
    posterior: Mapping[str, float]
    ranked: Mapping[str, tuple[tuple[tuple[int, int], float], ...]]

    def accuracy(self, truth: GenotypeProfile) -> float:
        names = list(self.profile.genotype)
        return sum(self.profile[n] == truth[n] for n in names) / len(names)


def _candidate_pairs(panel: FrequencyPanel):
    """Every unordered allele pair per locus, padded to a common count."""
    grid = panel.grid
    per_locus = [list(combinations_with_replacement(locus.alleles, 2)) for locus in panel.loci]
    C = max(len(x) for x in per_locus)
    L = len(panel.loci)
    cols = np.zeros((C, L, 2), dtype=np.int64)
    logprior = np.full((C, L), -np.inf)
    for i, (locus, pairs) in enumerate(zip(panel.loci, per_locus)):
        for c, (a, b) in enumerate(pairs):
            cols[c, i] = (grid.index[i][a], grid.index[i][b])
            pa, pb = panel.freq[(locus.name, a)], panel.freq[(locus.name, b)]
            logprior[c, i] = math.log(pa * pb * (1 if a == b else 2))
        cols[len(pairs):, i] = cols[0, i]
    return per_locus, cols, logprior


def attack_isolate_known_mixture(ctx: AttackerContext, residue: Residue) -> IsolationResult:
    """Per-locus MAP victim genotype with the known mixture held fixed.

    Every unordered panel-allele pair is scored, which covers both the
    peak-derived candidates and alleles that dropped out.
    """
    _require(ctx, "C")
    panel, epg = ctx.population, ctx.epg_params
    A0, Q0 = expected_allele_grid(ctx.mixture_specimen(), panel, epg)
    per_locus, cols, logprior = _candidate_pairs(panel)
    Ac, Qc = _profile_batch_moments(cols, panel, ctx.victim_mass * epg.mean_peak_height)
    S1, S2 = add_stutter(A0 + Ac, Q0 + Qc, panel, epg.stutter_ratio)
    ll = residue_loglik(residue, S1, S2, panel, epg, per_locus=True)  # (C, L)
    logpost = ll + logprior
    best = {}
    post = {}
    ranked = {}
    for i, locus in enumerate(panel.loci):
        pairs = per_locus[i]
        lp = logpost[: len(pairs), i]
        norm = logsumexp(lp)
        if not np.isfinite(norm):
            w = np.exp(logprior[: len(pairs), i])
        else:
            w = np.exp(lp - norm)
        order = sorted(range(len(pairs)), key=lambda c: (-w[c], pairs[c]))
        ranked[locus.name] = tuple((pairs[c], float(w[c])) for c in order)
        best[locus.name] = pairs[order[0]]
        post[locus.name] = float(w[order[0]])
    return IsolationResult(GenotypeProfile(best), post, ranked)


# ---------------------------------------------------------------- number of contributors

@dataclass(frozen=True)
class NocPosterior:
    probs: Mapping[int, float]

    def __post_init__(self):
        total = sum(self.probs.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"posterior sums to {total}")

    @property
    def argmax(self) -> int:
        return max(sorted(self.probs), key=lambda k: self.probs[k])


@dataclass
class _NocSearch:
    counts: list[int]
    log_marginal: dict[int, float]
    mass: float
    samples: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def estimate_total_mass(residue: Residue, panel: FrequencyPanel, epg: EpgParams) -> float:
    """Total template mass implied by summed peak heights (2 alleles per contributor)."""
    heights, _ = residue.dense(panel)
    per_locus = heights.sum(axis=1)
    denom = 2.0 * epg.mean_peak_height * (1.0 + epg.stutter_ratio)
    if denom <= 0:
        return 0.0
    return float(per_locus.mean() / denom)


def _proposal(panel: FrequencyPanel, heights: np.ndarray, i: int, mix: float = 0.05) -> np.ndarray:
    grid = panel.grid
    p = grid.freq[i]
    h = np.where(grid.is_allele[i], heights[i], 0.0)
    if h.sum() <= 0:
        return p / p.sum()
    q = (1 - mix) * h / h.sum() + mix * p / p.sum()
    return q / q.sum()


def _noc_search(residue: Residue, panel: FrequencyPanel, epg: EpgParams, max_contributors: int,
                rng: np.random.Generator, samples: int, keep_samples: bool = False,
                prune_nats: float | None = PRUNE_NATS) -> _NocSearch:
    """Importance-sampled log marginal likelihood for each contributor count.

    Contributors share the estimated total mass equally.  Loci are
    independent, so each locus gets its own importance sample and the
    marginal is the product of per-locus averages.  Once a count's marginal
    falls more than ``prune_nats`` below the best so far while still
    decreasing, larger counts are not evaluated and get zero posterior.
    """
    heights, _ = residue.dense(panel)
    mass = estimate_total_mass(residue, panel, epg)
    counts = list(range(1, max_contributors + 1))
    search = _NocSearch(counts, {}, mass)
    if mass <= 0:
        return search
    grid = panel.grid
    L, P = grid.shape
    q = np.stack([_proposal(panel, heights, i) for i in range(L)])  # (L, P)
    with np.errstate(divide="ignore"):
        log_q = np.log(q)
        log_p = np.log(grid.freq)
    for k in counts:
        draws = np.empty((samples, L, 2 * k), dtype=np.int64)
        for i, locus in enumerate(panel.loci):
            r = child(rng, "noc", k, locus.name)
            draws[:, i, :] = r.choice(P, size=(samples, 2 * k), p=q[i])
        logw = (log_p[np.arange(L)[None, :, None], draws] - log_q[np.arange(L)[None, :, None], draws]).sum(-1)
        scale = (mass / k) * epg.mean_peak_height
        D = np.zeros((samples, L, P))
        Dsq = np.zeros((samples, L, P))
        si = np.repeat(np.arange(samples), L * 2 * k)
        li = np.tile(np.repeat(np.arange(L), 2 * k), samples)
        np.add.at(D, (si, li, draws.reshape(-1)), 1.0)
        pairs = draws.reshape(samples, L, k, 2)
        homo = pairs[..., 0] == pairs[..., 1]
        # heterozygous: two unit components; homozygous: one component of dosage 2
        contrib = np.where(homo, 4.0, 1.0)
        for col in (0, 1):
            w = np.where(homo & (col == 1), 0.0, contrib)
            np.add.at(Dsq, (np.repeat(np.arange(samples), L * k), np.tile(np.repeat(np.arange(L), k), samples),
                            pairs[..., col].reshape(-1)), w.reshape(-1))
        S1, S2 = add_stutter(scale * D, scale * scale * Dsq, panel, epg.stutter_ratio)
        ll = residue_loglik(residue, S1, S2, panel, epg, per_locus=True)  # (S, L)
        lw = logw + ll
        per_locus = logsumexp(lw, axis=0) - math.log(samples)
        search.log_marginal[k] = float(per_locus.sum())
        if keep_samples:
            search.samples[k] = (pairs, lw)
        if prune_nats is not None and k > 1:
            best = max(search.log_marginal.values())
            here, before = search.log_marginal[k], search.log_marginal[k - 1]
            if here < best - prune_nats and here < before:
                break
    return search


def infer_noc(residue: Residue, population: FrequencyPanel, max_contributors: int = 8,
              epg: EpgParams | None = None, rng: np.random.Generator | None = None,
              samples: int = 200) -> NocPosterior:
    """Posterior over contributor counts with a uniform prior on 1..max."""
    if max_contributors < 1:
        raise ValueError("max_contributors must be >= 1")
    epg = epg or EpgParams()
    rng = rng if rng is not None else np.random.default_rng(0)
    search = _noc_search(residue, population, epg, max_contributors, rng, samples)
    return _posterior(search)


def _posterior(search: _NocSearch) -> NocPosterior:
    counts = search.counts
    if not search.log_marginal:
        return NocPosterior({k: 1.0 / len(counts) for k in counts})
    lm = np.array([search.log_marginal.get(k, -np.inf) for k in counts])
    if not np.any(np.isfinite(lm)):
        return NocPosterior({k: 1.0 / len(counts) for k in counts})
    p = np.exp(lm - logsumexp(lm))
    p = p / p.sum()
    return NocPosterior({k: float(v) for k, v in zip(counts, p)})


# ---------------------------------------------------------------- scenario D

@dataclass(frozen=True)
class FullUnknownResult:
    noc: NocPosterior
    candidates: tuple[GenotypeProfile, ...]
    selection: int | None
    rankings: tuple[Mapping[str, tuple[tuple[tuple[int, int], float], ...]], ...] = ()

    @property
    def selected(self) -> GenotypeProfile | None:
        return None if self.selection is None else self.candidates[self.selection]


def deconvolve(residue: Residue, panel: FrequencyPanel, epg: EpgParams, k: int, search: _NocSearch):
    """Per-contributor genotype rankings from the importance samples for ``k``.

    Contributors share one mass, so each sample's genotypes are put in
    lexicographic order before tallying; slot ``i`` is the i-th smallest.
    """
    pairs, lw = search.samples[k]
    grid = panel.grid
    S, L = lw.shape
    rankings = [dict() for _ in range(k)]
    for i, locus in enumerate(panel.loci):
        labels = grid.labels[i]
        w = lw[:, i]
        top = np.max(w)
        if not np.isfinite(top):
            weights = np.full(S, 1.0 / S)
        else:
            weights = np.exp(w - top)
            weights /= weights.sum()
        tallies = [dict() for _ in range(k)]
        for s in range(S):
            if weights[s] == 0:
                continue
            geno = sorted(tuple(sorted((int(labels[a]), int(labels[b])))) for a, b in pairs[s, i])
            for slot, g in enumerate(geno):
                tallies[slot][g] = tallies[slot].get(g, 0.0) + float(weights[s])
        for slot in range(k):
            ranked = sorted(tallies[slot].items(), key=lambda kv: (-kv[1], kv[0]))
            rankings[slot][locus.name] = tuple(ranked)
    candidates = tuple(GenotypeProfile({name: r[name][0][0] for name in r}) for r in rankings)
    return candidates, tuple(rankings)


def attack_full_unknown(ctx: AttackerContext, residue: Residue, rng: np.random.Generator,
                        max_contributors: int = 8, samples: int = 200) -> FullUnknownResult:
    _require(ctx, "D")
    panel, epg = ctx.population, ctx.epg_params
    search = _noc_search(residue, panel, epg, max_contributors, child(rng, "noc-search"),
                         samples, keep_samples=True)
    noc = _posterior(search)
    if not search.samples or residue.n_peaks == 0:
        return FullUnknownResult(noc, (), None)
    k = noc.argmax
    candidates, rankings = deconvolve(residue, panel, epg, k, search)
    selection = int(child(rng, "select").integers(len(candidates)))
    return FullUnknownResult(noc, candidates, selection, rankings)


# ---------------------------------------------------------------- baselines

def presence_score(residue: Residue, profile: GenotypeProfile) -> int:
    """Number of the profile's distinct alleles that appear as peaks."""
    total = 0
    for name, pair in profile.genotype.items():
        present = {a for a, _ in residue.locus_peaks(name)}
        total += len(set(pair) & present)
    return total


def match_matrix(candidates: Sequence[GenotypeProfile], truth: Sequence[GenotypeProfile]) -> np.ndarray:
    out = np.zeros((len(candidates), len(truth)))
    for i, c in enumerate(candidates):
        for j, t in enumerate(truth):
            out[i, j] = sum(c[n] == t[n] for n in t.genotype)
    return out


def victim_selected(result: FullUnknownResult, contributors: Sequence[GenotypeProfile], victim: int = 0) -> bool:
    """Whether the selected candidate is the one best matched to ``contributors[victim]``.

    Candidates and true contributors are paired by maximum total locus matches.
    """
    if result.selection is None:
        return False
    M = match_matrix(result.candidates, contributors)
    rows, cols = linear_sum_assignment(-M)
    paired = {int(c): int(r) for r, c in zip(rows, cols)}
    return paired.get(victim) == result.selection
