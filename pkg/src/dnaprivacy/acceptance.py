"""The acceptance suite behind ``repro``.

Each criterion returns a :class:`CriterionResult` whose ``measured`` dict is
pure JSON and depends only on the seed, so two runs with the same seed
produce byte-identical reports whatever the thread count.  Wall-clock
timings are kept apart from the report for the same reason.
"""

from __future__ import annotations

import hashlib
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import binom

from .assay import Specimen, run_test
from .attackers import AttackerContext, attack_full_unknown, attack_isolate_known_mixture, victim_selected
from .config import canonical_json, config_hash
from .countermeasures import (
    AllelicLadder,
    CountDistribution,
    Destruction,
    Dilution,
    Identity,
    KitModel,
    Randomizing,
    TestProcedure,
    cut_and_choose,
    make_dilution_panel,
    make_pool,
)
from .game import (
    AttackerSpec,
    ConfigError,
    GameConfig,
    adversarial_pair,
    chem_equiv,
    check_security,
    coin_flip_bounds,
    impossibility_demo,
    play,
    wilson_interval,
)
from .genotype import FrequencyPanel, default_panel, default_panel_text, load_panel, sample_genotype
from .streams import child, stream

DEFAULT_PANEL_SHA256 = "c79228f3828c89ed47a129b347a02d037784ed61a3fd150483d8c52fbf785132"

# runtime budgets in seconds, keyed like the criteria
BUDGETS = {"panel": 60, "1": 60, "2": 60, "3": 300, "4": 300, "5": 60, "6": 60, "7": 600, "8": 900, "9": 300,
           "10": 600}
CRITERIA = ("panel", "1", "2", "3", "4", "5", "6", "7", "8", "9", "10")


@dataclass(frozen=True)
class CriterionResult:
    key: str
    title: str
    passed: bool
    summary: str
    measured: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"key": self.key, "title": self.title, "passed": self.passed, "summary": self.summary,
                "measured": self.measured}

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  [{self.key:>5}] {self.title}: {self.summary}"


@dataclass(frozen=True)
class SuiteSettings:
    seed: int = 42
    threads: int = 1
    panel_path: str | None = None


def _map(fn: Callable[[int], object], n: int, threads: int) -> list:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, range(n)))
    return [fn(i) for i in range(n)]


def suite_procedures(panel: FrequencyPanel, seed: int) -> dict[str, TestProcedure]:
    """One procedure per privacy-step variant, with the desk default parameters."""
    base = TestProcedure(panel=panel)
    return {
        "identity": base,
        "dilution": base.with_t0(Dilution(make_dilution_panel(panel, 5, stream(seed, "suite-dilution")))),
        "randomizing": base.with_t0(Randomizing(make_pool(panel, 100, stream(seed, "suite-pool")),
                                                CountDistribution.uniform(4, 8))),
        "ladder": base.with_t0(AllelicLadder(1.0)),
        "dnase": base.with_t0(Destruction(1.0)),
    }


def _est(e) -> dict:
    return e.to_json()


# ---------------------------------------------------------------- criteria

def criterion_panel(s: SuiteSettings) -> CriterionResult:
    title = "shipped allele-frequency panel loads, validates and matches its checksum"
    try:
        if s.panel_path is None:
            text = default_panel_text()
            panel = load_panel("default")
        else:
            text = Path(s.panel_path).read_text()
            panel = load_panel(s.panel_path)
    except (OSError, ValueError) as exc:
        return CriterionResult("panel", title, False, f"load failed: {exc}", {"error": str(exc)})
    digest = hashlib.sha256(text.encode()).hexdigest()
    sums = {name: float(np.sum(panel.frequencies(name))) for name in panel.locus_names}
    ok_sums = all(abs(v - 1) <= 1e-9 for v in sums.values())
    ok_digest = digest == DEFAULT_PANEL_SHA256
    passed = ok_sums and ok_digest
    return CriterionResult("panel", title, passed,
                           f"{len(panel.loci)} loci, sums ok={ok_sums}, checksum ok={ok_digest}",
                           {"loci": len(panel.loci), "sha256": digest, "sums_ok": ok_sums})


def criterion_1(s: SuiteSettings, panel: FrequencyPanel) -> CriterionResult:
    title = "advantage bounds on every attacker/procedure pair; coin flip inside the 99% null band"
    procs = suite_procedures(panel, s.seed)
    coin = play(GameConfig(procs["identity"], AttackerSpec("coin"), trials=10_000,
                           root_seed=s.seed, adversary_search=200), s.threads).estimate
    lo, hi = coin_flip_bounds(coin.trials, 0.99)
    coin_ok = lo <= coin.correct_guesses <= hi
    grid = {}
    bounds_ok = True
    for att in ("confirm", "presence-only", "homer", "compare", "deconvolve-known", "full-unknown"):
        for name, proc in procs.items():
            trials = 20 if att == "full-unknown" else 100
            params = {"n_ref": 4} if att == "compare" else {}
            try:
                cfg = GameConfig(proc, AttackerSpec(att, params), trials=trials, root_seed=s.seed,
                                 adversary_search=200)
                e = play(cfg, s.threads).estimate
            except ConfigError:
                grid[f"{att}/{name}"] = "not applicable"
                continue
            ok = 0.0 <= e.adv_hat <= 1.0 and e.ci_low <= e.p_hat <= e.ci_high
            bounds_ok &= ok
            grid[f"{att}/{name}"] = e.adv_hat
    passed = coin_ok and bounds_ok
    return CriterionResult("1", title, passed,
                           f"coin correct={coin.correct_guesses}/{coin.trials} band=[{lo},{hi}], "
                           f"{sum(isinstance(v, float) for v in grid.values())} pairs in [0,1]={bounds_ok}",
                           {"coin": _est(coin), "band": [lo, hi], "pairs": grid})


def criterion_2(s: SuiteSettings, panel: FrequencyPanel) -> CriterionResult:
    title = "negated attacker gives p' = 1 - p exactly on identical seeds"
    procs = suite_procedures(panel, s.seed)
    cases = [("confirm", "dilution"), ("presence-only", "ladder"), ("homer", "randomizing"), ("coin", "identity")]
    rows = {}
    passed = True
    for att, proc in cases:
        cfg = dict(procedure=procs[proc], trials=1000, root_seed=s.seed, adversary_search=200)
        a = play(GameConfig(attacker=AttackerSpec(att), **cfg), s.threads).estimate
        b = play(GameConfig(attacker=AttackerSpec(att, {"negate": True}), **cfg), s.threads).estimate
        ok = a.correct_guesses + b.correct_guesses == a.trials == b.trials and a.adv_hat == b.adv_hat
        passed &= ok
        rows[f"{att}/{proc}"] = {"p": a.p_hat, "p_negated": b.p_hat, "exact": ok}
    return CriterionResult("2", title, passed, ", ".join(f"{k}: {v['p']:.4f}/{v['p_negated']:.4f}"
                                                          for k, v in rows.items()), rows)


def criterion_3(s: SuiteSettings, panel: FrequencyPanel) -> CriterionResult:
    title = "self-testing compare attacker wins on distinguishable clean residues"
    proc = TestProcedure(panel=panel)
    dna0, dna1 = adversarial_pair(panel, stream(s.seed, "adversary"))
    rep = impossibility_demo(proc, dna0, dna1, 10_000, s.seed, threads=s.threads)
    e = rep.attacker_estimate
    passed = rep.distinguishable and e.adv_hat >= 0.95 and e.adv_ci_low >= 0.9
    return CriterionResult("3", title, passed,
                           f"distinguishable={rep.distinguishable} adv={e.adv_hat:.4f} ci_low={e.adv_ci_low:.4f}",
                           {"chem_equiv_p": rep.equivalence.p_value, "estimate": _est(e)})


def criterion_4(s: SuiteSettings, panel: FrequencyPanel) -> CriterionResult:
    title = "full DNase leaves the confirm attacker at chance"
    proc = TestProcedure(t0=Destruction(1.0), panel=panel)
    e = play(GameConfig(proc, AttackerSpec("confirm"), trials=10_000, root_seed=s.seed), s.threads).estimate
    at_05 = check_security(e, 0.05)
    at_1e3 = check_security(e, 1e-3)
    passed = e.ci_low <= 0.5 <= e.ci_high and at_05 == "secure_at_threshold" and at_1e3 == "inconclusive"
    return CriterionResult("4", title, passed,
                           f"p={e.p_hat:.4f} ci=[{e.ci_low:.4f},{e.ci_high:.4f}] "
                           f"verdict@0.05={at_05} verdict@1e-3={at_1e3}",
                           {"estimate": _est(e), "verdict_0.05": at_05, "verdict_1e-3": at_1e3})


def criterion_5(s: SuiteSettings, panel: FrequencyPanel) -> CriterionResult:
    title = "sensitivity and specificity are exactly 100% under every privacy step"
    procs = suite_procedures(panel, s.seed)
    rows = {}
    for name, proc in procs.items():
        lod = proc.assay.limit_of_detection

        def one(i, proc=proc, name=name, lod=lod):
            r = stream(s.seed, "validity", name, i)
            dna = sample_genotype(panel, child(r, "dna"))
            copies = int(child(r, "copies").integers(lod, 10**6))
            pos, _ = run_test(proc, Specimen.of(dna, 1.0, copies), child(r, "pos"))
            neg, _ = run_test(proc, Specimen.of(dna, 1.0, 0), child(r, "neg"))
            return pos.positive, not neg.positive

        out = _map(one, 1000, s.threads)
        rows[name] = {"sensitivity": sum(p for p, _ in out) / 1000, "specificity": sum(n for _, n in out) / 1000}
    passed = all(v["sensitivity"] == 1.0 and v["specificity"] == 1.0 for v in rows.values())
    return CriterionResult("5", title, passed,
                           ", ".join(f"{k}: {v['sensitivity']}/{v['specificity']}" for k, v in rows.items()), rows)


def criterion_6(s: SuiteSettings, panel: FrequencyPanel) -> CriterionResult:
    title = "fake-colour kit caught with probability one half at n = 2"
    proc = TestProcedure(t0=Destruction(1.0), panel=panel)
    kit = KitModel(honest=False, behavior="fake_color_no_dnase")

    def one(i):
        r = stream(s.seed, "cut-and-choose", i)
        dna = sample_genotype(panel, child(r, "dna"))
        return cut_and_choose(2, kit, child(r, "protocol"), proc, Specimen.of(dna, 1.0, 1000)).aborted

    n = 10_000
    aborts = sum(_map(one, n, s.threads))
    rate = aborts / n
    lo, hi = wilson_interval(aborts, n)
    passed = 0.48 <= rate <= 0.52
    return CriterionResult("6", title, passed, f"abort rate={rate:.4f} ci=[{lo:.4f},{hi:.4f}]",
                           {"aborts": aborts, "trials": n, "rate": rate, "ci": [lo, hi]})


def criterion_7(s: SuiteSettings, panel: FrequencyPanel) -> CriterionResult:
    title = "full-unknown attacker picks the victim at rate 1/(|m|+1)"
    epg = TestProcedure(panel=panel).epg
    ctx = AttackerContext("D", panel, epg)
    rows = {}
    passed = True
    n = 2000
    for others in (1, 3):
        def one(i, others=others):
            r = stream(s.seed, "scenario-d", others, i)
            people = [sample_genotype(panel, child(r, "person", j)) for j in range(others + 1)]
            spec = Specimen(tuple((p, 1.0) for p in people))
            _, residue = run_test(TestProcedure(panel=panel), spec, child(r, "test"))
            res = attack_full_unknown(ctx, residue, child(r, "attack"))
            # contributors are exchangeable; a random victim slot keeps matching ties unbiased
            victim = int(child(r, "victim").integers(others + 1))
            return victim_selected(res, people, victim), res.noc.argmax == others + 1

        out = _map(one, n, s.threads)
        hits = sum(h for h, _ in out)
        target = 1 / (others + 1)
        lo, hi = int(binom.ppf(0.025, n, target)), int(binom.isf(0.025, n, target))
        ok = lo <= hits <= hi
        passed &= ok
        rows[str(others)] = {"hits": hits, "trials": n, "rate": hits / n, "target": target,
                             "accept": [lo, hi], "noc_correct": sum(c for _, c in out) / n}
    return CriterionResult("7", title, passed,
                           ", ".join(f"|m|={k}: {v['rate']:.4f} vs {v['target']:.4f} accept counts {v['accept']}"
                                     for k, v in rows.items()), rows)


def criterion_8(s: SuiteSettings, panel: FrequencyPanel) -> CriterionResult:
    title = "dilution lowers isolation accuracy yet leaves confirmation feasible"
    base = TestProcedure(panel=panel)
    ks = (0, 5, 20)
    n = 1000

    def one(i):
        r = stream(s.seed, "dilution-trend", i)
        victim = sample_genotype(panel, child(r, "victim"))
        helpers = make_dilution_panel(panel, max(ks), child(r, "panel"))
        accs = []
        for k in ks:
            mixture = helpers[:k]
            proc = base.with_t0(Dilution(mixture)) if k else base
            _, residue = run_test(proc, Specimen.of(victim, 1.0), child(r, "test", k))
            ctx = AttackerContext("C", panel, base.epg, known_mixture=mixture)
            accs.append(attack_isolate_known_mixture(ctx, residue).accuracy(victim))
        return accs

    acc = np.array(_map(one, n, s.threads))
    means = acc.mean(axis=0)
    diffs = np.diff(acc, axis=1)
    se = diffs.std(axis=0, ddof=1) / np.sqrt(n)
    strictly = bool(np.all(np.diff(means) < 0))
    proc20 = base.with_t0(Dilution(make_dilution_panel(panel, 20, stream(s.seed, "confirm-dilution"))))
    e = play(GameConfig(proc20, AttackerSpec("confirm"), trials=1000, root_seed=s.seed), s.threads).estimate
    passed = strictly and e.adv_hat >= 0.5
    return CriterionResult("8", title, passed,
                           "accuracy " + " > ".join(f"k={k}:{m:.4f}" for k, m in zip(ks, means))
                           + f", confirm adv at k=20={e.adv_hat:.4f}",
                           {"k": list(ks), "accuracy": [float(m) for m in means],
                            "paired_diff": [float(d) for d in diffs.mean(axis=0)],
                            "paired_se": [float(x) for x in se], "confirm_k20": _est(e)})


def criterion_9(s: SuiteSettings, panel: FrequencyPanel) -> CriterionResult:
    title = "equivalence test rejects a true null at most 2% of the time"
    proc = TestProcedure(panel=panel)
    reps, size = 500, 30

    def one(i):
        r = stream(s.seed, "chem-null", i)
        dna = sample_genotype(panel, child(r, "dna"))
        spec = Specimen.of(dna, 1.0, 1000)
        fa = [run_test(proc, spec, child(r, "a", j))[1] for j in range(size)]
        fb = [run_test(proc, spec, child(r, "b", j))[1] for j in range(size)]
        return not chem_equiv(fa, fb, panel, child(r, "perm")).equivalent

    false = sum(_map(one, reps, s.threads))
    rate = false / reps
    passed = rate <= 0.02
    return CriterionResult("9", title, passed, f"false-distinguishable rate={rate:.4f} over {reps}",
                           {"false_distinguishable": false, "repetitions": reps, "rate": rate})


def criterion_10(s: SuiteSettings, panel: FrequencyPanel) -> CriterionResult:
    title = "game results are identical across thread counts"
    proc = suite_procedures(panel, s.seed)["dilution"]
    cfg = GameConfig(proc, AttackerSpec("confirm"), trials=500, root_seed=s.seed)
    digests = []
    for threads in (1, 4):
        res = play(cfg, threads)
        body = canonical_json({"estimate": _est(res.estimate),
                               "records": [[r.trial, r.b, r.guess] for r in res.records]})
        digests.append(hashlib.sha256(body.encode()).hexdigest())
    passed = digests[0] == digests[1]
    return CriterionResult("10", title, passed, f"threads 1 vs 4 identical={passed}", {"sha256": digests[0]})


RUNNERS = {
    "1": criterion_1, "2": criterion_2, "3": criterion_3, "4": criterion_4, "5": criterion_5,
    "6": criterion_6, "7": criterion_7, "8": criterion_8, "9": criterion_9, "10": criterion_10,
}


@dataclass(frozen=True)
class SuiteReport:
    seed: int
    results: tuple[CriterionResult, ...]
    timings: dict

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_json(self) -> dict:
        body = {"seed": self.seed, "criteria": [r.to_json() for r in self.results]}
        return {"report": "acceptance", "seed": self.seed, "config_hash": config_hash(list(CRITERIA)),
                "passed": self.passed, "criteria": body["criteria"]}

    def matrix(self) -> str:
        lines = [r.line() for r in self.results]
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def run_suite(settings: SuiteSettings, only: set[str] | None = None,
              echo: Callable[[str], None] | None = None) -> SuiteReport:
    """Run the selected criteria in order; the panel check never blocks the rest."""
    panel = default_panel()
    results, timings = [], {}
    for key in CRITERIA:
        if only is not None and key not in only:
            continue
        started = time.perf_counter()
        res = criterion_panel(settings) if key == "panel" else RUNNERS[key](settings, panel)
        elapsed = time.perf_counter() - started
        timings[key] = {"seconds": round(elapsed, 3), "budget": BUDGETS[key], "within_budget": elapsed < BUDGETS[key]}
        results.append(res)
        if echo is not None:
            echo(f"{res.line()}  ({elapsed:.1f}s)")
    return SuiteReport(settings.seed, tuple(results), timings)
