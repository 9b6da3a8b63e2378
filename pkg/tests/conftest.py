import dataclasses

import numpy as np
import pytest

from skirmish.engine import CATALOG, EngineConfig, Team, new_world
from skirmish.scenario import ScenarioSpec, get_scenario


def make_world(units, config=None, arena=(32.0, 32.0)):
    """Build a world from (spec_name, team, (x, y)) triples in map coords."""
    members = [(CATALOG[name], team) for name, team, _ in units]
    positions = [pos for _, _, pos in units]
    return new_world(members, positions, config or EngineConfig(), arena=arena)


def zero_jitter(name):
    return dataclasses.replace(get_scenario(name), spawn_spread=0.0)


def tiny_scenario(red=("marine", 2), blue=("marine", 2), step_limit=40, arena=(32.0, 32.0)):
    return ScenarioSpec(
        name="custom",
        red_composition=((CATALOG[red[0]], red[1]),),
        blue_composition=((CATALOG[blue[0]], blue[1]),),
        arena=arena,
        episode_step_limit=step_limit,
        spawn_spread=0.0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
