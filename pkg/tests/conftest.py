"""Shared fixtures: a small world, its warehouse, a quick model and an in-process stack."""

from __future__ import annotations

from datetime import timedelta
from typing import Any, Callable

import pytest

from emrdeploy.clock import utc
from emrdeploy.config import SimConfig, TaskConfig, TrialConfig
from emrdeploy.emr.warehouse import export_warehouse, load_warehouse
from emrdeploy.emr.world import WorldConfig, generate_world
from emrdeploy.model.cohort import build_cohort
from emrdeploy.model.forest import ForestParams
from emrdeploy.model.train import fit_model
from emrdeploy.serve.engine import EventTrigger, TriggerConfig
from emrdeploy.sim import build_stack
from emrdeploy.web import Response, TransportError

SMALL_WORLD = WorldConfig(seed=11, n_patients=400, n_years=4, orders_per_year=400, prospective_days=30)
SMALL_FOREST = ForestParams(n_trees=15, max_depth=6)


def small_trial_config(**sim: Any) -> TrialConfig:
    sim_cfg = SimConfig(duration=sim.get("duration", timedelta(days=3)),
                        order_rates=sim.get("order_rates", {"CBC": 40.0}), seed=5)
    return TrialConfig(world=SMALL_WORLD, task=TaskConfig(per_year=200, forest=SMALL_FOREST),
                       trigger=TriggerConfig(EventTrigger("CBC")), sim=sim_cfg)


@pytest.fixture(scope="session")
def small_warehouse(tmp_path_factory):
    world = generate_world(SMALL_WORLD)
    dest = tmp_path_factory.mktemp("warehouse")
    export_warehouse(world, world.retro_end, dest)
    return load_warehouse(dest)


@pytest.fixture(scope="session")
def small_model(small_warehouse):
    years = range(SMALL_WORLD.start_year, SMALL_WORLD.start_year + SMALL_WORLD.n_years)
    cohort = build_cohort(small_warehouse, "CBC", "HGB", 200, years, seed=1)
    return fit_model(small_warehouse, cohort, "cbc-hgb", utc(2019), SMALL_FOREST, seed=2)


@pytest.fixture
def world():
    """A fresh (mutable) copy of the small world."""
    return generate_world(SMALL_WORLD)


@pytest.fixture
def stack(world, tmp_path):
    return build_stack(world, tmp_path / "packets.jsonl", world.retro_end)


class FaultyTransport:
    """Wraps a transport; ``rule(method, url)`` may return a Response or raise to inject a fault."""

    def __init__(self, inner: Any, rule: Callable[[str, str], Response | None]):
        self.inner = inner
        self.rule = rule

    def request(self, method: str, url: str, **kw: Any) -> Response:
        injected = self.rule(method, url)
        if injected is not None:
            return injected
        return self.inner.request(method, url, **kw)


def refuse(method: str, url: str) -> None:
    raise TransportError(f"connection refused: {url}")
