import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dnaprivacy.assay import EpgParams, Residue, Specimen, simulate_residue
from dnaprivacy.attackers import (
    AttackerContext,
    attack_confirm_known,
    attack_full_unknown,
    attack_isolate_known_mixture,
    attack_membership_unknown_mixture,
    calibrate_homer,
    confirm_log_lr,
    homer_null_statistics,
    homer_statistic,
    infer_noc,
    victim_selected,
)
from dnaprivacy.countermeasures import Destruction, Dilution, make_dilution_panel
from dnaprivacy.genotype import FrequencyPanel, GenotypeProfile, Locus, sample_genotype
from dnaprivacy.streams import child, stream


def people(panel, seed, n):
    return [sample_genotype(panel, stream(seed, "person", i)) for i in range(n)]


def residue_of(profiles, panel, epg, rng, mass=1.0):
    return simulate_residue(Specimen(tuple((p, mass) for p in profiles)), epg, rng, panel)


# ---------------------------------------------------------------- context invariants

@pytest.mark.parametrize("scenario,victim,mixture,ok", [
    ("A", True, True, True), ("A", False, True, False), ("A", True, False, False),
    ("B", True, False, True), ("B", True, True, False), ("B", False, False, False),
    ("C", False, True, True), ("C", True, True, False), ("C", False, False, False),
    ("D", False, False, True), ("D", True, False, False), ("D", False, True, False),
])
def test_context_knowledge_matches_scenario(panel, scenario, victim, mixture, ok):
    x = sample_genotype(panel, stream(0))
    kwargs = dict(known_victim=x if victim else None, known_mixture=(x,) if mixture else None)
    if ok:
        AttackerContext(scenario, panel, **kwargs)
    else:
        with pytest.raises(ValueError):
            AttackerContext(scenario, panel, **kwargs)


def test_attacker_rejects_wrong_scenario(panel):
    x = sample_genotype(panel, stream(0))
    ctx = AttackerContext("B", panel, known_victim=x)
    with pytest.raises(ValueError):
        attack_confirm_known(ctx, Residue({}), stream(1))


# ---------------------------------------------------------------- confirm (known victim and mixture)

@pytest.mark.slow
def test_confirm_detects_presence_and_absence(panel, epg):
    n = 1000
    present = absent = 0
    for i in range(n):
        rng = stream(31, "confirm", i)
        x, m1, m2 = (sample_genotype(panel, child(rng, "who", j)) for j in range(3))
        ctx = AttackerContext("A", panel, epg, known_victim=x, known_mixture=(m1, m2))
        with_x = residue_of([m1, m2, x], panel, epg, child(rng, "with"))
        without = residue_of([m1, m2], panel, epg, child(rng, "without"))
        present += attack_confirm_known(ctx, with_x, child(rng, "a1"))[0] == "present"
        absent += attack_confirm_known(ctx, without, child(rng, "a2"))[0] == "absent"
    assert present / n >= 0.95
    assert absent / n >= 0.95


def test_confirm_victim_already_in_mixture(panel, epg):
    # the specimen then carries a double dose of x, which the m + x hypothesis describes exactly
    n = 200
    hits = 0
    for i in range(n):
        rng = stream(32, i)
        x, m1 = (sample_genotype(panel, child(rng, "who", j)) for j in range(2))
        ctx = AttackerContext("A", panel, epg, known_victim=x, known_mixture=(m1, x))
        r = residue_of([m1, x, x], panel, epg, child(rng, "r"))
        hits += attack_confirm_known(ctx, r, child(rng, "a"))[0] == "present"
    assert hits / n >= 0.95


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), present=st.booleans())
def test_confirm_log_lr_swap_is_negation(panel, epg, seed, present):
    x, m1 = people(panel, seed, 2)
    ctx = AttackerContext("A", panel, epg, known_victim=x, known_mixture=(m1,))
    r = residue_of([m1, x] if present else [m1], panel, epg, stream(seed, "r"))
    a = confirm_log_lr(ctx, r, stream(seed, "a"))
    b = confirm_log_lr(ctx, r, stream(seed, "a"), swap=True)
    assert a == -b


def test_confirm_is_deterministic_in_rng(panel, epg):
    x, m1 = people(panel, 33, 2)
    ctx = AttackerContext("A", panel, epg, known_victim=x, known_mixture=(m1,))
    r = residue_of([m1, x], panel, epg, stream(33, "r"))
    assert attack_confirm_known(ctx, r, stream(1)) == attack_confirm_known(ctx, r, stream(1))


# ---------------------------------------------------------------- membership (known victim only)

def _single_source(panel, epg):
    return lambda source, rng: residue_of([source], panel, epg, rng)


@pytest.fixture(scope="module")
def homer_calibration(panel, epg):
    null = homer_null_statistics(panel, _single_source(panel, epg), epg, 2000, stream(40, "calib"))
    return calibrate_homer(null, 0.05)


def test_homer_detects_single_source(panel, epg, homer_calibration):
    n = 1000
    hits = 0
    for i in range(n):
        rng = stream(41, i)
        x = sample_genotype(panel, child(rng, "x"))
        ctx = AttackerContext("B", panel, epg, known_victim=x)
        r = residue_of([x], panel, epg, child(rng, "r"))
        hits += attack_membership_unknown_mixture(ctx, r, homer_calibration)[0] == "present"
    assert hits / n >= 0.99


def test_homer_false_positive_rate_on_holdout(panel, epg, homer_calibration):
    null = homer_null_statistics(panel, _single_source(panel, epg), epg, 1000, stream(42, "holdout"))
    fpr = float(np.mean(np.asarray(null) > homer_calibration.threshold))
    assert abs(fpr - 0.05) <= 0.02


def test_homer_null_mean_is_zero(panel, epg):
    null = np.asarray(homer_null_statistics(panel, _single_source(panel, epg), epg, 2000, stream(43)))
    se = null.std(ddof=1) / math.sqrt(null.size)
    assert abs(null.mean()) < 4 * se


def test_homer_powerless_after_destruction(panel, epg):
    t0 = Destruction(1.0)
    stats_in, stats_out = [], []
    for i in range(1000):
        rng = stream(44, i)
        x, y = (sample_genotype(panel, child(rng, j)) for j in "xy")
        for source, out in ((x, stats_in), (y, stats_out)):
            applied = t0.apply(Specimen.of(source), panel, child(rng, "t0"))
            r = simulate_residue(applied.specimen, epg, child(rng, "r"), panel)
            out.append(homer_statistic(r, x, panel, epg))
    assert stats.ks_2samp(stats_in, stats_out).pvalue > 0.01


def test_calibration_needs_data():
    with pytest.raises(ValueError):
        calibrate_homer([])
    assert calibrate_homer([1.0, 2.0, 3.0, 4.0], 0.25).threshold == 4.0


# ---------------------------------------------------------------- isolation (known mixture)

def _isolation_accuracy(panel, epg, k, n, seed=50):
    total = 0.0
    for i in range(n):
        rng = stream(seed, i)
        x = sample_genotype(panel, child(rng, "x"))
        if k:
            helpers = make_dilution_panel(panel, k, child(rng, "panel"))
            specimen = Dilution(helpers).expected(Specimen.of(x), panel)
            ctx = AttackerContext("C", panel, epg, known_mixture=helpers)
        else:
            specimen = Specimen.of(x)
            ctx = AttackerContext("C", panel, epg, known_mixture=())
        r = simulate_residue(specimen, epg, child(rng, "r"), panel)
        total += attack_isolate_known_mixture(ctx, r).accuracy(x)
    return total / n


def test_isolation_without_dilution(panel, epg):
    assert _isolation_accuracy(panel, epg, 0, 1000) >= 0.99


@pytest.mark.slow
def test_isolation_accuracy_falls_with_dilution(panel, epg):
    acc = {k: _isolation_accuracy(panel, epg, k, 1000) for k in (0, 5, 10, 20)}
    assert acc[20] < acc[0]
    # allow sampling noise of about two standard errors between neighbours
    ks = sorted(acc)
    for a, b in zip(ks, ks[1:]):
        assert acc[b] <= acc[a] + 0.01


def test_isolation_victim_in_known_mixture(panel, epg):
    # the residue holds a double dose of x; the height-aware attacker recovers x
    n = 200
    total = 0.0
    for i in range(n):
        rng = stream(51, i)
        x = sample_genotype(panel, child(rng, "x"))
        ctx = AttackerContext("C", panel, epg, known_mixture=(x,))
        r = residue_of([x, x], panel, epg, child(rng, "r"))
        total += attack_isolate_known_mixture(ctx, r).accuracy(x)
    assert total / n >= 0.9


def test_isolation_posteriors_are_probabilities(panel, epg):
    x = sample_genotype(panel, stream(52))
    ctx = AttackerContext("C", panel, epg, known_mixture=())
    res = attack_isolate_known_mixture(ctx, residue_of([x], panel, epg, stream(53)))
    for name, ranked in res.ranked.items():
        assert sum(w for _, w in ranked) == pytest.approx(1.0)
        assert ranked[0][0] == res.profile[name]


# ---------------------------------------------------------------- contributor count

def test_noc_single_source(panel, epg):
    n = 1000
    ones = 0
    for i in range(n):
        rng = stream(60, i)
        x = sample_genotype(panel, child(rng, "x"))
        r = residue_of([x], panel, epg, child(rng, "r"))
        ones += infer_noc(r, panel, epg=epg, rng=child(rng, "noc"), samples=100).argmax == 1
    assert ones / n >= 0.90


@pytest.fixture(scope="module")
def spaced_panel():
    # alleles two repeats apart so stutter never lands on another allele
    loci = [Locus(f"L{i}", (10, 12, 14, 16, 18)) for i in range(5)]
    freq = {(locus.name, a): 0.2 for locus in loci for a in locus.alleles}
    return FrequencyPanel(tuple(loci), freq)


def test_noc_four_alleles_need_two_people(spaced_panel, epg):
    a = GenotypeProfile({f"L{i}": (10, 12) for i in range(5)})
    b = GenotypeProfile({f"L{i}": (14, 16) for i in range(5)})
    # one person shows four alleles at a locus only via two drop-ins near full height
    bound = stats.poisson.sf(1, epg.dropin_rate)
    for i in range(50):
        r = residue_of([a, b], spaced_panel, epg, stream(61, i))
        post = infer_noc(r, spaced_panel, epg=epg, rng=stream(62, i))
        assert post.probs[1] <= bound


def test_noc_empty_residue_is_prior(panel):
    post = infer_noc(Residue({}), panel, max_contributors=6)
    assert post.probs == {k: pytest.approx(1 / 6) for k in range(1, 7)}


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), size=st.integers(1, 3))
def test_noc_posterior_sums_to_one_and_ignores_locus_order(panel, epg, seed, size):
    who = people(panel, seed, size)
    r = residue_of(who, panel, epg, stream(seed, "r"))
    post = infer_noc(r, panel, epg=epg, rng=stream(seed, "noc"), samples=50)
    assert sum(post.probs.values()) == pytest.approx(1.0, abs=1e-9)
    flipped = FrequencyPanel(tuple(reversed(panel.loci)), dict(panel.freq))
    again = infer_noc(r, flipped, epg=epg, rng=stream(seed, "noc"), samples=50)
    for k in post.probs:
        assert again.probs[k] == pytest.approx(post.probs[k], abs=1e-9)


def test_noc_rejects_zero_max(panel):
    with pytest.raises(ValueError):
        infer_noc(Residue({}), panel, max_contributors=0)


# ---------------------------------------------------------------- full unknown

def test_full_unknown_single_source(panel, epg):
    n = 100
    total = 0.0
    for i in range(n):
        rng = stream(70, i)
        x = sample_genotype(panel, child(rng, "x"))
        ctx = AttackerContext("D", panel, epg)
        res = attack_full_unknown(ctx, residue_of([x], panel, epg, child(rng, "r")), child(rng, "a"))
        assert victim_selected(res, [x])
        total += sum(res.selected[n] == x[n] for n in panel.locus_names) / len(panel.loci)
    assert total / n >= 0.90


def test_full_unknown_after_destruction(panel, epg):
    # only drop-in can survive, so any candidate is noise
    n = 200
    correct = 0
    accuracy = 0.0
    for i in range(n):
        rng = stream(71, i)
        x = sample_genotype(panel, child(rng, "x"))
        applied = Destruction(1.0).apply(Specimen.of(x), panel, child(rng, "t0"))
        r = simulate_residue(applied.specimen, epg, child(rng, "r"), panel)
        res = attack_full_unknown(AttackerContext("D", panel, epg), r, child(rng, "a"))
        if r.n_peaks == 0:
            assert res.candidates == () and res.selection is None
            continue
        correct += res.selected == x
        accuracy += sum(res.selected[n] == x[n] for n in panel.locus_names) / len(panel.loci)
    assert correct == 0
    assert accuracy / n < 0.1


def test_full_unknown_candidate_count_matches_noc(panel, epg):
    who = people(panel, 75, 2)
    res = attack_full_unknown(AttackerContext("D", panel, epg),
                              residue_of(who, panel, epg, stream(76)), stream(77))
    assert len(res.candidates) == res.noc.argmax
    assert 0 <= res.selection < len(res.candidates)
