"""JSON experiment specs: parsing, validation and sweep expansion.

The schema is documented in ``docs/config.md``.  Everything random that a
spec needs (dilution panels, randomizing pools) is drawn from streams keyed
on the run seed, so a spec plus ``--seed`` pins the whole experiment.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .assay import AssayParams, EpgParams
from .countermeasures import (
    AllelicLadder,
    CountDistribution,
    Destruction,
    Dilution,
    Identity,
    KitModel,
    MassDistribution,
    Randomizing,
    TestProcedure,
    make_dilution_panel,
    make_pool,
)
from .game import ATTACKERS, AttackerSpec, ConfigError, GameConfig
from .genotype import FrequencyPanel, GenotypeProfile, load_panel
from .streams import stream

T0_KINDS = ("identity", "dilution", "randomizing", "ladder", "dnase")
MAX_SWEEP_AXES = 2
_SAFE_NAME = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def _params(cls, raw: dict | None, what: str):
    raw = dict(raw or {})
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad {what} parameters: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


def _count_distribution(raw: Any) -> CountDistribution:
    if isinstance(raw, int):
        return CountDistribution.fixed(raw)
    if not isinstance(raw, dict):
        raise ConfigError("count must be an integer or an object")
    try:
        if "uniform" in raw:
            lo, hi = raw["uniform"]
            return CountDistribution.uniform(int(lo), int(hi))
        if "fixed" in raw:
            return CountDistribution.fixed(int(raw["fixed"]))
        return CountDistribution(tuple(raw["values"]), tuple(raw["probs"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad count distribution {raw!r}: {exc}") from exc


def build_t0(raw: dict, panel: FrequencyPanel, seed: int):
    kind = raw.get("kind", "identity")
    if kind not in T0_KINDS:
        raise ConfigError(f"t0.kind must be one of {T0_KINDS}, got {kind!r}")
    try:
        if kind == "identity":
            return Identity()
        if kind == "dilution":
            if "profiles" in raw:
                profiles = tuple(GenotypeProfile.from_json(p) for p in raw["profiles"])
            else:
                k = int(raw.get("k", 0))
                if k == 0:
                    return Identity()
                profiles = make_dilution_panel(panel, k, stream(seed, "dilution-panel"))
            return Dilution(profiles, raw.get("per_profile_mass"))
        if kind == "randomizing":
            size = int(raw.get("pool_size", 100))
            pool = make_pool(panel, size, stream(seed, "randomizing-pool", size))
            mass = raw.get("mass", {})
            return Randomizing(pool, _count_distribution(raw.get("count", {"uniform": [4, 8]})),
                               MassDistribution(mass.get("kind", "fixed"), float(mass.get("a", 1.0)),
                                                float(mass.get("b", 0.0))))
        if kind == "ladder":
            return AllelicLadder(float(raw.get("mass_per_allele", 1.0)))
        return Destruction(float(raw.get("efficiency", 1.0)), float(raw.get("color_threshold", 0.0)))
    except (TypeError, ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid t0 {raw!r}: {exc}") from exc


def build_procedure(raw: dict, panel: FrequencyPanel, seed: int) -> TestProcedure:
    if not isinstance(raw, dict):
        raise ConfigError("procedure must be an object")
    return TestProcedure(
        t0=build_t0(raw.get("t0", {}), panel, seed),
        assay=_params(AssayParams, raw.get("assay"), "assay"),
        epg=_params(EpgParams, raw.get("epg"), "epg"),
        panel=panel,
    )


def build_kit(raw: dict | None) -> KitModel | None:
    if raw is None:
        return None
    return _params(KitModel, raw, "kit")


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    raw: dict

    def __post_init__(self):
        if not isinstance(self.name, str) or not _SAFE_NAME.match(self.name):
            raise ConfigError(f"experiment name must be non-empty and filesystem-safe, got {self.name!r}")
        sweep = self.raw.get("sweep") or {}
        if not isinstance(sweep, dict):
            raise ConfigError("sweep must map parameter paths to value lists")
        if len(sweep) > MAX_SWEEP_AXES:
            raise ConfigError(f"at most {MAX_SWEEP_AXES} sweep axes are supported")
        for path, values in sweep.items():
            current = _lookup(self.raw, path)
            if not isinstance(current, (int, float)) or isinstance(current, bool):
                raise ConfigError(f"sweep axis {path!r} must name an existing numeric parameter")
            if not values or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
                raise ConfigError(f"sweep axis {path!r} needs a non-empty list of numbers")

    @property
    def sweep(self) -> dict[str, list]:
        return dict(self.raw.get("sweep") or {})

    def points(self) -> list[tuple[dict[str, Any], dict]]:
        """Every sweep point as (assignments, concrete raw spec without the sweep)."""
        base = {k: v for k, v in self.raw.items() if k != "sweep"}
        axes = list(self.sweep.items())
        if not axes:
            return [({}, copy.deepcopy(base))]
        out = []
        for combo in itertools.product(*(vals for _, vals in axes)):
            point = copy.deepcopy(base)
            assign = {}
            for (path, _), value in zip(axes, combo):
                _assign(point, path, value)
                assign[path] = value
            out.append((assign, point))
        return out


def _lookup(raw: dict, path: str):
    node: Any = raw
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"sweep axis {path!r} does not name an existing parameter")
        node = node[part]
    return node


def _assign(raw: dict, path: str, value) -> None:
    parts = path.split(".")
    node = raw
    for part in parts[:-1]:
        node = node[part]
    node[parts[-1]] = value


def load_spec(source: str | Path | dict) -> ExperimentSpec:
    if isinstance(source, dict):
        raw = source
    else:
        try:
            raw = json.loads(Path(source).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read spec {source}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"spec {source} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("spec must be a JSON object")
    return ExperimentSpec(raw.get("name", ""), raw)


def resolve_panel(raw: dict, base_dir: Path | None = None) -> FrequencyPanel:
    source = raw.get("panel", "default")
    if source != "default" and base_dir is not None and not Path(source).is_absolute():
        source = str(base_dir / source)
    try:
        return load_panel(source)
    except OSError as exc:
        raise ConfigError(f"cannot read panel {source}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"invalid panel {source}: {exc}") from exc


def build_game(raw: dict, seed: int, panel: FrequencyPanel) -> GameConfig:
    procedure = build_procedure(raw.get("procedure", {}), panel, seed)
    att = raw.get("attacker", {})
    if isinstance(att, str):
        att = {"name": att}
    name = att.get("name", "")
    base = name[4:] if name.startswith("not-") else name
    if base not in ATTACKERS:
        raise ConfigError(f"unknown attacker {name!r}; choose from {sorted(ATTACKERS)}")
    game = raw.get("game", {})
    profiles = None
    if "profiles" in game:
        profiles = tuple(GenotypeProfile.from_json(p) for p in game["profiles"])
    try:
        return GameConfig(
            procedure=procedure,
            attacker=AttackerSpec(name, dict(att.get("params", {}))),
            trials=int(game.get("trials", 1000)),
            profile_choice=game.get("profile_choice", "fixed" if profiles else "adversarial_max_distance"),
            viral_copies_when_positive=int(game.get("viral_copies_when_positive", 1000)),
            root_seed=seed,
            victim_mass=float(game.get("victim_mass", 1.0)),
            branches=game.get("branches", "both"),
            profiles=profiles,
            kit=build_kit(game.get("kit")),
            n_samples=int(game.get("n_samples", 2)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid game section: {exc}") from exc


@dataclass(frozen=True)
class ProtocolConfig:
    procedure: TestProcedure
    kit: KitModel
    n_samples: int = 2
    trials: int = 1000
    verify_all_but_one: bool = False
    control_target_mass: float | None = None
    viral_copies: int = 0
    victim_mass: float = 1.0


def build_protocol(raw: dict, seed: int, panel: FrequencyPanel) -> ProtocolConfig:
    procedure = build_procedure(raw.get("procedure", {"t0": {"kind": "dnase"}}), panel, seed)
    prot = raw.get("protocol", {})
    kit = build_kit(prot.get("kit", {})) or KitModel()
    try:
        cfg = ProtocolConfig(
            procedure, kit,
            n_samples=int(prot.get("n_samples", 2)),
            trials=int(prot.get("trials", 1000)),
            verify_all_but_one=bool(prot.get("verify_all_but_one", False)),
            control_target_mass=prot.get("control_target_mass"),
            viral_copies=int(prot.get("viral_copies", 0)),
            victim_mass=float(prot.get("victim_mass", 1.0)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid protocol section: {exc}") from exc
    if cfg.n_samples < 2:
        raise ConfigError("protocol n_samples must be at least 2")
    if cfg.trials < 1:
        raise ConfigError("protocol trials must be >= 1")
    return cfg
