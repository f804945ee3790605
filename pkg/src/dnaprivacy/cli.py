"""Command-line front end: ``panel``, ``game``, ``protocol`` and ``repro``.

Exit codes: 0 success, 1 configuration or input error, 2 acceptance failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path
from typing import Sequence

from . import acceptance
from .assay import Specimen
from .config import (
    build_game,
    build_protocol,
    canonical_json,
    config_hash,
    load_spec,
    resolve_panel,
)
from .countermeasures import cut_and_choose
from .game import ConfigError, check_security, play, wilson_interval
from .genotype import load_panel, random_panel, sample_genotype
from .streams import child, stream

FORMATS = ("json", "csv", "table")
SECURITY_THRESHOLDS = (1e-3, 0.05)

# attacker name -> (scenario, knowledge, goal), the columns of the comparison table
SCENARIO_ROWS = {
    "confirm": ("A", "victim + mixture", "confirm victim"),
    "homer": ("B", "victim only", "confirm victim"),
    "deconvolve-known": ("C", "mixture only", "learn victim"),
    "full-unknown": ("D", "nothing", "learn victim"),
    "presence-only": ("-", "victim, peaks only", "confirm victim"),
    "compare": ("-", "runs the test itself", "confirm victim"),
    "coin": ("-", "nothing", "guess"),
}


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


# ---------------------------------------------------------------- panel

def cmd_panel(args) -> int:
    if args.action == "generate":
        rng = stream(args.seed, "panel-generate")
        panel = random_panel(args.loci, args.alleles, rng, concentration=args.concentration,
                             first_allele=args.first_allele)
        text = panel.to_csv()
        target = args.output
        if target is None and args.out is not None:
            target = str(Path(args.out) / "panel.csv")
        if target is None:
            sys.stdout.write(text)
        else:
            Path(target).parent.mkdir(parents=True, exist_ok=True)
            Path(target).write_text(text)
            print(f"wrote {target}")
        return 0
    source = args.path or "default"
    try:
        panel = load_panel(source)
    except OSError as exc:
        print(f"error: cannot read {source}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {source}: {exc}", file=sys.stderr)
        return 1
    n_alleles = sum(len(l.alleles) for l in panel.loci)
    print(f"OK {source}: {len(panel.loci)} loci, {n_alleles} alleles")
    return 0


# ---------------------------------------------------------------- game

def game_report(name: str, point: dict, assign: dict, seed: int, threads: int) -> tuple[dict, list]:
    panel = resolve_panel(point)
    cfg = build_game(point, seed, panel)
    res = play(cfg, threads)
    est = res.estimate
    att = cfg.attacker.name
    base = att[4:] if att.startswith("not-") else att
    scenario, knowledge, goal = SCENARIO_ROWS[base]
    report = {
        "report": "game",
        "name": name,
        "seed": seed,
        "config_hash": config_hash(point),
        "config": point,
        "sweep_point": assign,
        "scenario": scenario,
        "knowledge": knowledge,
        "goal": goal,
        "t0": cfg.procedure.t0.kind,
        "attacker": att,
        "tallies": {"trials": est.trials, "correct": est.correct_guesses, "aborted": est.aborted},
        "estimate": est.to_json(),
        "verdicts": {f"{t:g}": check_security(est, t) for t in SECURITY_THRESHOLDS},
        "wall_clock_s": round(res.wall_clock_s, 3),
    }
    trials = [[r.trial, r.b, "" if r.guess is None else r.guess, int(r.correct), int(r.aborted),
               r.abort_reason or ""] for r in res.records]
    return report, trials


def _point_label(assign: dict) -> str:
    return ",".join(f"{k}={v}" for k, v in assign.items()) or "-"


TABLE_COLUMNS = ("point", "scenario", "knowledge", "goal", "t0", "attacker", "trials", "adv_hat", "adv 95% CI",
                 "verdict@0.05", "verdict@0.001")


def table_rows(reports: Sequence[dict]) -> list[list[str]]:
    rows = []
    for r in reports:
        e = r["estimate"]
        rows.append([_point_label(r["sweep_point"]), r["scenario"], r["knowledge"], r["goal"], r["t0"],
                     r["attacker"], str(e["trials"]), f"{e['adv_hat']:.4f}",
                     f"[{e['adv_ci_low']:.4f}, {e['adv_ci_high']:.4f}]",
                     r["verdicts"]["0.05"], r["verdicts"]["0.001"]])
    return rows


def render_table(reports: Sequence[dict], trend: str | None = None) -> str:
    """Fixed-width table; a pure function of the JSON reports."""
    rows = [list(TABLE_COLUMNS)] + table_rows(reports)
    widths = [max(len(row[i]) for row in rows) for i in range(len(TABLE_COLUMNS))]
    lines = []
    for n, row in enumerate(rows):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    if trend:
        lines.append(f"trend: {trend}")
    return "\n".join(lines) + "\n"


def render_csv(reports: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    w.writerows(table_rows(reports))
    return buf.getvalue()


def sweep_trend(reports: Sequence[dict]) -> str | None:
    """Flags whether advantage is non-increasing along a single sweep axis."""
    if len(reports) < 2 or len(reports[0]["sweep_point"]) != 1:
        return None
    advs = [r["estimate"]["adv_hat"] for r in reports]
    ok = all(b <= a for a, b in zip(advs, advs[1:]))
    return ("non-increasing" if ok else "NOT non-increasing") + " adv_hat: " + ", ".join(f"{a:.4f}" for a in advs)


def cmd_game(args) -> int:
    spec = load_spec(args.spec)
    seed = args.seed if args.seed is not None else int(spec.raw.get("seed", 0))
    out = Path(args.out or "reports")
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for i, (assign, point) in enumerate(spec.points()):
        point.setdefault("panel", "default")
        report, trials = game_report(spec.name, point, assign, seed, args.threads)
        reports.append(report)
        stem = spec.name if not assign else f"{spec.name}__{i:02d}"
        (out / f"{stem}.json").write_text(_dump(report))
        (out / f"{stem}.txt").write_text(render_table([report]))
        if args.dump_trials:
            with open(out / f"{stem}.trials.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["trial", "b", "guess", "correct", "aborted", "abort_reason"])
                w.writerows(trials)
    trend = sweep_trend(reports)
    if len(reports) > 1:
        summary = {"report": "sweep", "name": spec.name, "seed": seed, "config_hash": config_hash(spec.raw),
                   "axes": spec.sweep, "points": reports, "trend": trend}
        (out / f"{spec.name}__summary.json").write_text(_dump(summary))
        (out / f"{spec.name}__summary.txt").write_text(render_table(reports, trend))
    if args.format == "json":
        sys.stdout.write(_dump(reports[0] if len(reports) == 1 else {"points": reports, "trend": trend}))
    elif args.format == "csv":
        sys.stdout.write(render_csv(reports))
    else:
        sys.stdout.write(render_table(reports, trend))
    return 0


# ---------------------------------------------------------------- protocol

def protocol_report(raw: dict, seed: int) -> dict:
    panel = resolve_panel(raw)
    cfg = build_protocol(raw, seed, panel)
    verification = control = positives = negatives = tampered = 0
    for i in range(cfg.trials):
        r = stream(seed, "protocol", i)
        dna = sample_genotype(panel, child(r, "dna"))
        spec = Specimen.of(dna, cfg.victim_mass, cfg.viral_copies)
        o = cut_and_choose(cfg.n_samples, cfg.kit, child(r, "run"), cfg.procedure, spec,
                           verify_all_but_one=cfg.verify_all_but_one, control_target_mass=cfg.control_target_mass)
        tampered += o.tampered_sample_tested
        if o.abort_reason == "verification_failed":
            verification += 1
        elif o.abort_reason == "control_failed":
            control += 1
            negatives += 1
        elif o.result.positive:
            positives += 1
        else:
            negatives += 1
    n = cfg.trials

    def rate(k, m):
        lo, hi = wilson_interval(k, m)
        return {"count": k, "of": m, "rate": k / m if m else 0.0, "ci_low": lo, "ci_high": hi}

    return {
        "report": "protocol",
        "name": raw.get("name", ""),
        "seed": seed,
        "config_hash": config_hash(raw),
        "config": raw,
        "trials": n,
        "abort_rate": rate(verification, n),
        "invalid_negative_rate": rate(control, negatives),
        "positive_rate": rate(positives, n),
        "tampered_sample_tested_rate": rate(tampered, n),
    }


def render_protocol(rep: dict) -> str:
    lines = [f"protocol {rep['name']}  seed={rep['seed']}  trials={rep['trials']}"]
    for key in ("abort_rate", "invalid_negative_rate", "positive_rate", "tampered_sample_tested_rate"):
        v = rep[key]
        lines.append(f"  {key:<28} {v['rate']:.4f}  [{v['ci_low']:.4f}, {v['ci_high']:.4f}]  ({v['count']}/{v['of']})")
    return "\n".join(lines) + "\n"


def cmd_protocol(args) -> int:
    spec = load_spec(args.spec)
    seed = args.seed if args.seed is not None else int(spec.raw.get("seed", 0))
    rep = protocol_report(spec.raw, seed)
    out = Path(args.out or "reports")
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{spec.name}.json").write_text(_dump(rep))
    (out / f"{spec.name}.txt").write_text(render_protocol(rep))
    if args.format == "json":
        sys.stdout.write(_dump(rep))
    elif args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "rate", "ci_low", "ci_high", "count", "of"])
        for key in ("abort_rate", "invalid_negative_rate", "positive_rate", "tampered_sample_tested_rate"):
            v = rep[key]
            w.writerow([key, v["rate"], v["ci_low"], v["ci_high"], v["count"], v["of"]])
        sys.stdout.write(buf.getvalue())
    else:
        sys.stdout.write(render_protocol(rep))
    return 0


# ---------------------------------------------------------------- repro

def cmd_repro(args) -> int:
    seed = 42 if args.seed is None else args.seed
    only = None
    if args.only:
        only = {k.strip() for k in args.only.split(",") if k.strip()}
        unknown = only - set(acceptance.CRITERIA)
        if unknown:
            raise ConfigError(f"unknown criteria {sorted(unknown)}; choose from {acceptance.CRITERIA}")
    settings = acceptance.SuiteSettings(seed=seed, threads=args.threads, panel_path=args.panel)
    echo = print if args.format == "table" else None
    report = acceptance.run_suite(settings, only, echo=echo)
    out = Path(args.out or "reports")
    out.mkdir(parents=True, exist_ok=True)
    (out / "repro.json").write_text(_dump(report.to_json()))
    (out / "repro_timing.json").write_text(_dump(report.timings))
    if args.format == "json":
        sys.stdout.write(_dump(report.to_json()))
    elif args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["criterion", "passed", "summary"])
        for r in report.results:
            w.writerow([r.key, r.passed, r.summary])
        sys.stdout.write(buf.getvalue())
    else:
        print(f"overall: {'PASS' if report.passed else 'FAIL'}")
    return 0 if report.passed else 2


# ---------------------------------------------------------------- parser

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root seed for every random stream")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads (results do not change)")
    p.add_argument("--out", default=argparse.SUPPRESS, help="directory for report files")
    p.add_argument("--format", choices=FORMATS, default=argparse.SUPPRESS, help="stdout rendering")
    p.add_argument("--dump-trials", action="store_true", default=argparse.SUPPRESS,
                   help="also write a CSV row per game trial")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="dnaprivacy", parents=[common],
                                     description="Privacy games for virus tests that leave human DNA residue.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("panel", parents=[common], help="generate or validate allele-frequency panels")
    p.add_argument("action", choices=("generate", "validate"))
    p.add_argument("path", nargs="?", help="panel CSV to validate ('default' for the shipped one)")
    p.add_argument("--loci", type=int, default=15)
    p.add_argument("--alleles", type=int, default=8)
    p.add_argument("--concentration", type=float, default=1.0)
    p.add_argument("--first-allele", type=int, default=8)
    p.add_argument("--output", help="write the generated CSV here instead of stdout")
    p.set_defaults(func=cmd_panel)

    g = sub.add_parser("game", parents=[common], help="run the indistinguishability game from a JSON spec")
    g.add_argument("spec")
    g.set_defaults(func=cmd_game)

    pr = sub.add_parser("protocol", parents=[common], help="simulate cut-and-choose with a kit model")
    pr.add_argument("spec")
    pr.set_defaults(func=cmd_protocol)

    r = sub.add_parser("repro", parents=[common], help="run the acceptance suite")
    r.add_argument("--panel", help="panel CSV checked by the panel criterion (default: shipped panel)")
    r.add_argument("--only", help="comma-separated subset of criteria, e.g. panel,6")
    r.set_defaults(func=cmd_repro)
    return parser


DEFAULTS = {"seed": None, "threads": 1, "out": None, "format": "table", "dump_trials": False}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for k, v in DEFAULTS.items():
        if not hasattr(args, k):
            setattr(args, k, v)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 1
    if args.command == "panel" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
