import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dnaprivacy.assay import ControlTarget, LadderTemplate, Specimen, run_test, simulate_residue
from dnaprivacy.countermeasures import (
    BLUE,
    RED,
    AllelicLadder,
    CountDistribution,
    Destruction,
    Dilution,
    Identity,
    KitModel,
    MassDistribution,
    ProtocolOutcome,
    Randomizing,
    TestProcedure,
    apply_allelic_ladder,
    apply_dilution,
    apply_dnase,
    apply_randomizing,
    cut_and_choose,
    human_contributors,
    make_dilution_panel,
    make_pool,
    process_control,
)
from dnaprivacy.genotype import GenotypeProfile, sample_genotype
from dnaprivacy.streams import child, stream


@pytest.fixture(scope="module")
def victim(panel):
    return sample_genotype(panel, stream(100, "victim"))


# ---------------------------------------------------------------- dilution

def test_dilution_empty_panel_rejected(victim):
    with pytest.raises(ValueError):
        apply_dilution(Specimen.of(victim), [])
    with pytest.raises(ValueError):
        Dilution(())


def test_dilution_k20_multiplies_human_mass(panel, victim):
    helpers = make_dilution_panel(panel, 20, stream(1))
    out = apply_dilution(Specimen.of(victim, 2.0, 33), helpers)
    assert out.human_mass == pytest.approx(21 * 2.0)
    assert out.viral_rna_copies == 33


def test_dilution_k1_keeps_private_alleles(panel, victim, epg):
    helper = make_dilution_panel(panel, 1, stream(2))[0]
    s = apply_dilution(Specimen.of(victim), [helper])
    private = [(n, a) for n in panel.locus_names for a in victim.alleles(n) - helper.alleles(n)]
    assert private
    rng = stream(2, "sim")
    seen = []
    for i in range(200):
        r = simulate_residue(s, epg, child(rng, i), panel)
        seen.append(np.mean([a in dict(r.locus_peaks(n)) for n, a in private]))
    assert np.mean(seen) >= 0.99


def test_dilution_adds_same_multiset_every_trial(panel, victim):
    proc = TestProcedure(t0=Dilution(make_dilution_panel(panel, 5, stream(3))), panel=panel)
    sets = {tuple(sorted(map(hash, (t for t, _ in proc.t0.apply(Specimen.of(victim), panel, stream(3, i))
                                    .specimen.contributions)))) for i in range(20)}
    assert len(sets) == 1


# ---------------------------------------------------------------- randomizing

def test_randomizing_zero_count_unchanged(panel, victim):
    s = Specimen.of(victim, 1.0, 5)
    assert apply_randomizing(s, make_pool(panel, 3, stream(4)), CountDistribution.fixed(0),
                             MassDistribution(), stream(4, "r")) == s


def test_randomizing_pool_too_small(panel, victim):
    with pytest.raises(ValueError):
        apply_randomizing(Specimen.of(victim), make_pool(panel, 3, stream(4)), CountDistribution.fixed(4),
                          MassDistribution(), stream(0))
    with pytest.raises(ValueError):
        Randomizing(make_pool(panel, 3, stream(4)), CountDistribution.uniform(2, 6))


def test_randomizing_count_histogram_uniform(panel, victim):
    pool = make_pool(panel, 10, stream(5))
    dist = CountDistribution.uniform(2, 6)
    rng = stream(5, "counts")
    base = Specimen.of(victim)
    counts = Counter(len(apply_randomizing(base, pool, dist, MassDistribution(), child(rng, i)).contributions) - 1
                     for i in range(10_000))
    freqs = np.array([counts[k] for k in range(2, 7)]) / 10_000
    assert np.all(np.abs(freqs - 0.2) <= 0.02)
    # chi-square goodness of fit at 0.01
    assert stats.chisquare([counts[k] for k in range(2, 7)]).pvalue > 0.01


def test_randomizing_fresh_sets_differ(panel, victim):
    pool = make_pool(panel, 100, stream(6))
    dist = CountDistribution.fixed(4)
    rng = stream(6, "fresh")
    base = Specimen.of(victim)
    same = 0
    trials = 2000
    for i in range(trials):
        a = apply_randomizing(base, pool, dist, MassDistribution(), child(rng, i, "a"))
        b = apply_randomizing(base, pool, dist, MassDistribution(), child(rng, i, "b"))
        same += {hash(t) for t, _ in a.contributions} == {hash(t) for t, _ in b.contributions}
    # collisions have probability 1 / C(100, 4), about 2.5e-7
    assert same / trials <= 1 / math.comb(100, 4) + 3 / trials


def test_mass_distribution_kinds():
    rng = stream(7)
    assert MassDistribution("fixed", 2.0).sample(rng) == 2.0
    u = [MassDistribution("uniform", 1.0, 3.0).sample(child(rng, i)) for i in range(1000)]
    assert 1.0 <= min(u) and max(u) <= 3.0
    g = [MassDistribution("gamma", 2.0, 0.5).sample(child(rng, "g", i)) for i in range(20_000)]
    assert abs(np.mean(g) / 2.0 - 1) < 0.02
    with pytest.raises(ValueError):
        MassDistribution("beta")


# ---------------------------------------------------------------- ladder

def test_ladder_zero_mass_unchanged(panel, victim):
    s = Specimen.of(victim)
    assert apply_allelic_ladder(s, panel, 0.0) == s


def test_ladder_covers_every_allele(panel, epg):
    s = apply_allelic_ladder(Specimen(), panel, 1.0)
    assert any(isinstance(t, LadderTemplate) for t, _ in s.contributions)
    r = simulate_residue(s, epg, stream(8), panel)
    for locus in panel.loci:
        assert set(locus.alleles) <= {a for a, _ in r.locus_peaks(locus.name)}


# ---------------------------------------------------------------- DNase

def test_dnase_full_efficiency(victim):
    out, color = apply_dnase(Specimen.of(victim, 5.0, 77), 1.0)
    assert out.human_mass == 0 and color == RED and out.viral_rna_copies == 77


def test_dnase_zero_efficiency(victim):
    s = Specimen.of(victim, 5.0, 77)
    out, color = apply_dnase(s, 0.0)
    assert out == s and color == BLUE


def test_dnase_partial_red_and_tail(panel, victim, epg):
    out, color = apply_dnase(Specimen.of(victim, 1000.0), 0.999, color_threshold=50)
    assert out.human_mass == pytest.approx(1.0) and color == RED
    # surviving mass 1 -> heterozygous peaks of mean 1000 RFU: visible almost surely
    small, color = apply_dnase(Specimen.of(victim, 1000.0), 1 - 1e-5, color_threshold=50)
    expected = small.human_mass * epg.mean_peak_height  # 10 RFU per allele copy
    shape = 1 / epg.peak_height_cv**2
    name = panel.locus_names[0]
    a, b = victim[name]
    dose = 2 if a == b else 1
    tail = stats.gamma.sf(epg.analytical_threshold, shape, scale=dose * expected / shape)
    rng = stream(9)
    seen = np.mean([a in dict(simulate_residue(small, epg.__class__(dropin_rate=0.0, stutter_ratio=0.0),
                                               child(rng, i), panel).locus_peaks(name)) for i in range(2000)])
    assert abs(seen - tail) <= 0.02


@settings(max_examples=100)
@given(eff=st.floats(0, 1), mass=st.floats(0.001, 100), thr=st.floats(0, 50))
def test_dnase_red_implies_below_threshold(eff, mass, thr):
    x = GenotypeProfile({"A": (10, 12)})
    out, color = apply_dnase(Specimen.of(x, mass, 3), eff, color_threshold=thr)
    if color == RED:
        assert out.human_mass <= thr
    assert out.viral_rna_copies == 3


def test_dnase_spares_control_target(victim):
    s = Specimen(((victim, 1.0), (ControlTarget(), 0.5)), 0)
    out, _ = apply_dnase(s, 1.0)
    assert out.contributions == ((ControlTarget(), 0.5),)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), copies=st.integers(0, 10**6), which=st.integers(0, 4))
def test_every_t0_conserves_virus(panel, seed, copies, which):
    t0 = [Identity(), Dilution(make_dilution_panel(panel, 2, stream(0))),
          Randomizing(make_pool(panel, 10, stream(0)), CountDistribution.uniform(0, 3)),
          AllelicLadder(1.0), Destruction(0.7)][which]
    x = sample_genotype(panel, stream(seed))
    out = t0.apply(Specimen.of(x, 1.0, copies), panel, stream(seed, "t0")).specimen
    assert out.viral_rna_copies == copies


# ---------------------------------------------------------------- kits, cut-and-choose, control

def test_kit_model_invariants():
    with pytest.raises(ValueError):
        KitModel(honest=True, behavior="kills_virus_too")
    with pytest.raises(ValueError):
        KitModel(honest=False)
    with pytest.raises(ValueError):
        KitModel(honest=False, behavior="fake_color_no_dnase", destroys_control=True)


def test_protocol_outcome_invariant():
    with pytest.raises(ValueError):
        ProtocolOutcome(False)
    with pytest.raises(ValueError):
        ProtocolOutcome(True, "bogus")


def test_cut_and_choose_needs_two(panel, victim):
    with pytest.raises(ValueError):
        cut_and_choose(1, KitModel(), stream(0), TestProcedure(panel=panel), Specimen.of(victim))


def _dnase(panel):
    return TestProcedure(t0=Destruction(1.0), panel=panel)


def test_honest_kit_never_aborts_and_matches_plain_test(panel, victim):
    proc = _dnase(panel)
    for i in range(300):
        o = cut_and_choose(2, KitModel(), stream(10, i), proc, Specimen.of(victim, 1.0, 100 * (i % 2)))
        assert not o.aborted
        assert o.result.positive == (i % 2 == 1)


def _abort_rate(panel, victim, n, trials, **kw):
    proc = _dnase(panel)
    kit = KitModel(honest=False, behavior="fake_color_no_dnase")
    return np.mean([cut_and_choose(n, kit, stream(11, n, i), proc, Specimen.of(victim, 1.0, 100), **kw).aborted
                    for i in range(trials)])


def test_fake_colour_n2_half(panel, victim):
    assert abs(_abort_rate(panel, victim, 2, 10_000) - 0.5) <= 0.02


def test_fake_colour_n4_quarter(panel, victim):
    assert abs(_abort_rate(panel, victim, 4, 10_000) - 0.25) <= 0.02


def test_fake_colour_verify_all_but_one(panel, victim):
    assert abs(_abort_rate(panel, victim, 4, 4000, verify_all_but_one=True) - 0.75) <= 0.03


def test_fake_colour_undetected_sample_leaks_dna(panel, victim):
    kit = KitModel(honest=False, behavior="fake_color_no_dnase")
    for i in range(100):
        o = cut_and_choose(2, kit, stream(12, i), _dnase(panel), Specimen.of(victim, 1.0, 100))
        if not o.aborted:
            assert o.tampered_sample_tested and o.residue.n_peaks > 20
            assert o.residue.verification_color == RED


def test_kill_virus_kit_forces_negative(panel, victim):
    kit = KitModel(honest=False, behavior="kills_virus_too")
    for i in range(200):
        o = cut_and_choose(2, kit, stream(13, i), _dnase(panel), Specimen.of(victim, 1.0, 10_000))
        assert not o.aborted and not o.result.positive


def test_process_control_honest_and_destroyed(panel, victim):
    proc = _dnase(panel)
    run = process_control(proc, Specimen.of(victim, 1.0, 0), 1.0, stream(14))
    assert run.residue.control_target_detected and run.valid and not run.result.positive
    kit = KitModel(honest=False, behavior="kills_virus_too", destroys_control=True)
    flagged = [process_control(proc, Specimen.of(victim, 1.0, 1000), 1.0, stream(14, i), kit) for i in range(1000)]
    assert all(not r.result.positive and not r.residue.control_target_detected and not r.valid for r in flagged)
    with pytest.raises(ValueError):
        process_control(proc, Specimen.of(victim), 0.0, stream(0))


def test_cut_and_choose_control_failure_aborts(panel, victim):
    kit = KitModel(honest=False, behavior="kills_virus_too", destroys_control=True)
    o = cut_and_choose(2, kit, stream(15), _dnase(panel), Specimen.of(victim, 1.0, 1000), control_target_mass=1.0)
    assert o.aborted and o.abort_reason == "control_failed"
    o = cut_and_choose(2, KitModel(), stream(15), _dnase(panel), Specimen.of(victim, 1.0, 0), control_target_mass=1.0)
    assert not o.aborted and o.residue.control_target_detected


def test_human_contributors_excludes_synthetic(victim):
    s = Specimen(((victim, 1.0), (LadderTemplate(), 1.0), (ControlTarget(), 1.0)))
    assert human_contributors(s) == [(victim, 1.0)]
