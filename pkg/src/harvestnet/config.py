"""Run configuration: one JSON document whose sections mirror the library types.

Example::

    {
      "synth": {"seed": 3, "drift_per_round": 0.3},
      "sim": {"policy": "harvest_conf", "n_cache": 20, "train": {"epochs": 200}},
      "out": "runs/example"
    }

Either ``synth`` (generate in memory) or ``dataset`` (``{"path", "manifest"}``)
names the data; with neither, the default synthetic benchmark is used.
Unknown keys anywhere are rejected with their dotted path.
"""
from __future__ import annotations

import json
from dataclasses import MISSING, dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .costs import CostRates, FleetScenario, ScenarioError, parse_scenario
from .data import ConfigError, SynthConfig
from .perception import TrainHP
from .simulate import Scenario, SimConfig

_NESTED = {"train": TrainHP, "pretrain": TrainHP}


def _check_value(path: str, default, value):
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {path!r} must be true or false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {path!r} must be an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {path!r} must be a number, got {value!r}")
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key {path!r} must be a string, got {value!r}")
    if isinstance(value, list):
        return tuple(value)
    return value


def build(cls, doc, section: str, **overrides):
    """Instantiate dataclass ``cls`` from mapping ``doc``, rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    known = {f.name: f for f in fields(cls)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown config key {section + '.' + key!r}")
    kwargs = dict(overrides)
    for key, value in doc.items():
        path = f"{section}.{key}"
        f = known[key]
        if key in _NESTED and cls is SimConfig:
            kwargs[key] = None if value is None else build(_NESTED[key], value, path)
            continue
        default = f.default if f.default is not MISSING else None
        kwargs[key] = _check_value(path, default, value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config section {section!r}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    sim: SimConfig = SimConfig()
    synth: Optional[SynthConfig] = None
    dataset_path: Optional[Path] = None
    manifest_path: Optional[Path] = None
    fleet: Optional[tuple[FleetScenario, CostRates]] = None
    out: Optional[Path] = None
    sim_keys: frozenset = frozenset()

    def sim_for(self, scenario: Scenario) -> SimConfig:
        """``sim`` with the stream shape taken from the scenario unless set explicitly."""
        shape = {}
        if "n_rounds" not in self.sim_keys:
            shape["n_rounds"] = scenario.manifest.n_rounds
        if "steps_per_round" not in self.sim_keys and scenario.manifest.rounds:
            shape["steps_per_round"] = len(scenario.manifest.rounds[0])
        try:
            return replace(self.sim, **shape)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def synth_or_default(self) -> SynthConfig:
        return self.synth if self.synth is not None else SynthConfig(
            n_rounds=self.sim.n_rounds, steps_per_round=self.sim.steps_per_round, seed=self.sim.seed)

    def scenario(self) -> Scenario:
        if self.dataset_path is not None:
            return Scenario.from_files(self.dataset_path, self.manifest_path)
        return Scenario.from_synth(self.synth_or_default())

    def compare_base(self):
        """What ``compare_policies`` should regenerate per seed."""
        if self.dataset_path is not None:
            return self.scenario()
        return self.synth_or_default()


_TOP = {"synth", "dataset", "sim", "costs", "out"}


def parse_config(doc, base_dir: Path | None = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for key in doc:
        if key not in _TOP:
            raise ConfigError(f"unknown config key {key!r}")
    if "synth" in doc and "dataset" in doc:
        raise ConfigError("config may name 'synth' or 'dataset', not both")
    base_dir = base_dir or Path(".")
    synth = build(SynthConfig, doc["synth"], "synth") if "synth" in doc else None
    dpath = mpath = None
    if "dataset" in doc:
        ds = doc["dataset"]
        if not isinstance(ds, dict):
            raise ConfigError("config section 'dataset' must be an object")
        for key in ds:
            if key not in ("path", "manifest"):
                raise ConfigError(f"unknown config key {'dataset.' + key!r}")
        for key in ("path", "manifest"):
            if not isinstance(ds.get(key), str):
                raise ConfigError(f"config key {'dataset.' + key!r} must be a path string")
        dpath, mpath = base_dir / ds["path"], base_dir / ds["manifest"]
    sim_doc = doc.get("sim", {})
    overrides = {}
    if synth is not None and isinstance(sim_doc, dict):
        # the stream shape follows the generator unless set explicitly
        overrides = {k: getattr(synth, k) for k in ("n_rounds", "steps_per_round", "seed") if k not in sim_doc}
    sim = build(SimConfig, sim_doc, "sim", **overrides)
    fleet = None
    if "costs" in doc:
        try:
            fleet = parse_scenario(doc["costs"])
        except ScenarioError as exc:
            raise ConfigError(f"invalid config section 'costs': {exc}") from exc
    out = doc.get("out")
    if out is not None and not isinstance(out, str):
        raise ConfigError("config key 'out' must be a path string")
    return RunConfig(sim, synth, dpath, mpath, fleet, base_dir / out if out else None,
                     frozenset(sim_doc) if isinstance(sim_doc, dict) else frozenset())


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(doc, path.parent)
