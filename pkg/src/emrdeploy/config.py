"""Single versioned JSON document configuring a whole trial."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from datetime import timedelta
from typing import Any, Mapping

from .clock import parse_duration, utc
from .emr.world import DriftConfig, WorldConfig
from .model.forest import ForestParams
from .serve.cron import parse_cron
from .serve.engine import EventTrigger, TriggerConfig

CONFIG_FORMAT = "emrdeploy.config"
CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


def _duration_text(td: timedelta) -> str:
    secs = int(td.total_seconds())
    for unit, size in (("d", 86400), ("h", 3600), ("m", 60)):
        if secs % size == 0:
            return f"{secs // size}{unit}"
    return f"{secs}s"


@dataclass(frozen=True)
class TaskConfig:
    panel_code: str = "CBC"
    component_code: str = "HGB"
    per_year: int = 2000
    cohort_seed: int = 1
    train_seed: int = 2
    forest: ForestParams = ForestParams()

    @property
    def model_id(self) -> str:
        return f"{self.panel_code.lower()}-{self.component_code.lower()}"


@dataclass(frozen=True)
class SimConfig:
    duration: timedelta = timedelta(days=30)
    order_rates: Mapping[str, float] = field(default_factory=lambda: {"CBC": 80.0})  # orders per day
    seed: int = 3
    label_cron: str = "0 */6 * * *"
    maturation: timedelta = timedelta(hours=6)
    drift_at: timedelta | None = None  # offset from simulation start

    def __post_init__(self) -> None:
        parse_cron(self.label_cron)
        if self.duration <= timedelta(0):
            raise ConfigError("duration must be positive")
        if any(r < 0 for r in self.order_rates.values()):
            raise ConfigError("order rates must be non-negative")


@dataclass(frozen=True)
class MonitorConfig:
    bootstrap_b: int = 1000
    bootstrap_seed: int = 4
    drift_k: float = 4.0
    drift_window: timedelta = timedelta(days=15)


@dataclass(frozen=True)
class TrialConfig:
    world: WorldConfig = field(default_factory=lambda: WorldConfig(seed=7))
    task: TaskConfig = TaskConfig()
    trigger: TriggerConfig = TriggerConfig(EventTrigger("CBC"))
    sim: SimConfig = SimConfig()
    monitor: MonitorConfig = MonitorConfig()
    # Drift magnitudes take effect only when sim.drift_at is set.
    drift_covariate_shift: float = 0.5
    drift_concept_shift: float = 0.5
    drift_prevalence_shift: Mapping[str, float] = field(default_factory=dict)

    def with_seed(self, seed: int) -> TrialConfig:
        """Derive every seed from one master seed."""
        return replace(self, world=replace(self.world, seed=seed),
                       task=replace(self.task, cohort_seed=seed + 1, train_seed=seed + 2),
                       trigger=replace(self.trigger, rng_seed=seed + 5),
                       sim=replace(self.sim, seed=seed + 3),
                       monitor=replace(self.monitor, bootstrap_seed=seed + 4))

    def resolved_world(self) -> WorldConfig:
        """World config with drift placed ``sim.drift_at`` after the start of the simulation."""
        if self.sim.drift_at is None:
            return replace(self.world, drift=None)
        start = utc(self.world.start_year + self.world.n_years) + self.sim.drift_at
        drift = DriftConfig(start, self.drift_covariate_shift, dict(self.drift_prevalence_shift),
                            self.drift_concept_shift)
        return replace(self.world, drift=drift)

    def to_dict(self) -> dict[str, Any]:
        world = self.world.to_dict()
        world.pop("drift", None)
        return {
            "format": CONFIG_FORMAT, "version": CONFIG_VERSION,
            "world": world,
            "task": {**{k: v for k, v in asdict(self.task).items() if k != "forest"},
                     "forest": self.task.forest.to_dict()},
            "trigger": self.trigger.to_dict(),
            "sim": {"duration": _duration_text(self.sim.duration), "order_rates": dict(self.sim.order_rates),
                    "seed": self.sim.seed, "label_cron": self.sim.label_cron,
                    "maturation": _duration_text(self.sim.maturation),
                    "drift_at": None if self.sim.drift_at is None else _duration_text(self.sim.drift_at)},
            "monitor": {"bootstrap_b": self.monitor.bootstrap_b, "bootstrap_seed": self.monitor.bootstrap_seed,
                        "drift_k": self.monitor.drift_k, "drift_window": _duration_text(self.monitor.drift_window)},
            "drift": {"covariate_shift": self.drift_covariate_shift, "concept_shift": self.drift_concept_shift,
                      "prevalence_shift": dict(self.drift_prevalence_shift)},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TrialConfig:
        if d.get("format") != CONFIG_FORMAT:
            raise ConfigError(f"not a trial config (format {d.get('format')!r})")
        if d.get("version") != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {d.get('version')!r}")
        base = cls()
        try:
            world = WorldConfig.from_dict({**base.world.to_dict(), **d.get("world", {}), "drift": None})
            t = dict(d.get("task", {}))
            forest = ForestParams.from_dict({**base.task.forest.to_dict(), **t.pop("forest", {})})
            task = replace(base.task, **t, forest=forest)
            trigger = TriggerConfig.from_dict(d["trigger"]) if "trigger" in d else base.trigger
            s = dict(d.get("sim", {}))
            sim = SimConfig(
                duration=parse_duration(s.get("duration", "30d")),
                order_rates={k: float(v) for k, v in s.get("order_rates", {"CBC": 80.0}).items()},
                seed=int(s.get("seed", base.sim.seed)),
                label_cron=s.get("label_cron", base.sim.label_cron),
                maturation=parse_duration(s.get("maturation", "6h")),
                drift_at=parse_duration(s["drift_at"]) if s.get("drift_at") else None)
            m = dict(d.get("monitor", {}))
            monitor = MonitorConfig(int(m.get("bootstrap_b", 1000)), int(m.get("bootstrap_seed", 4)),
                                    float(m.get("drift_k", 4.0)), parse_duration(m.get("drift_window", "15d")))
            dr = dict(d.get("drift", {}))
            return cls(world, task, trigger, sim, monitor, float(dr.get("covariate_shift", base.drift_covariate_shift)),
                       float(dr.get("concept_shift", base.drift_concept_shift)),
                       {k: float(v) for k, v in dr.get("prevalence_shift", {}).items()})
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> TrialConfig:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
