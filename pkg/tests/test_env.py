"""Environment API: encodings, masks, rewards, lifecycle, replay logs."""

import dataclasses
import json

import numpy as np
import pytest

from skirmish.engine import CATALOG, Outcome, Team, new_world
from skirmish.env import (
    ACTION_MOVE_EAST,
    ACTION_MOVE_WEST,
    ACTION_NOOP,
    ACTION_STOP,
    TARGET_OFFSET,
    BattleEnv,
    EnvError,
    EpisodeAlreadyTerminated,
    ReplayWriter,
    RewardConfig,
    UnavailableAction,
    compute_reward,
    read_replay,
    replay_record,
    reward_scale,
)
from skirmish.engine import StepEvents, TeamEvents
from skirmish.scenario import get_scenario

from conftest import tiny_scenario, zero_jitter


def restore_world(env, units):
    members = [(CATALOG[name], team) for name, team, _ in units]
    positions = [pos for _, _, pos in units]
    world = new_world(members, positions, env.engine_config, arena=env.scenario.arena)
    return env.restore(world)


def all_stop(env, team):
    return np.full(env.team_spec(team).n_agents, ACTION_STOP)


# -- reset ---------------------------------------------------------------------


def test_reset_deterministic():
    env_a, env_b = BattleEnv(get_scenario("3m")), BattleEnv(get_scenario("3m"))
    ra, _ = env_a.reset(seed=1)
    rb, _ = env_b.reset(seed=1)
    assert np.array_equal(ra.observations, rb.observations)
    assert np.array_equal(ra.masks, rb.masks)
    assert np.array_equal(ra.state, rb.state)
    rc, _ = env_a.reset(seed=2)
    assert not np.array_equal(ra.observations, rc.observations)


def test_reset_enemies_out_of_sight():
    env = BattleEnv(get_scenario("3m"))
    r, b = env.reset(seed=0)
    E, T = 3, 1
    enemy_block = r.observations[:, 4 : 4 + E * (6 + T)]
    assert (enemy_block == 0).all()
    assert (b.observations[:, 4 : 4 + E * (6 + T)] == 0).all()
    assert not r.masks[:, TARGET_OFFSET:].any()
    assert r.reward == 0.0 and not r.terminated and r.outcome is None


def test_reset_team_sizes_mmm2():
    env = BattleEnv(get_scenario("MMM2"))
    r, b = env.reset(seed=0)
    assert r.observations.shape[0] == 10
    assert b.observations.shape[0] == 12


@pytest.mark.parametrize(
    "name,expected",
    [
        ("3m", 4 + 3 * 7 + 2 * 6 + 3),          # T=1 -> 40
        ("MMM", 4 + 10 * 9 + 9 * 8 + 5),        # T=3
        ("2s3z", 4 + 5 * 8 + 4 * 7 + 4),        # T=2
    ],
)
def test_observation_length_formula(name, expected):
    env = BattleEnv(get_scenario(name))
    r, _ = env.reset(seed=0)
    assert env.team_spec(Team.RED).obs_len == expected
    assert r.observations.shape == (env.team_spec(Team.RED).n_agents, expected)


def test_restore_rejects_wrong_roster():
    env = BattleEnv(tiny_scenario())
    world = new_world([(CATALOG["marine"], Team.RED), (CATALOG["marine"], Team.BLUE)], [(10, 16), (20, 16)])
    with pytest.raises(EnvError):
        env.restore(world)


# -- observation encoding --------------------------------------------------------


def test_visible_enemy_fields():
    env = BattleEnv(tiny_scenario())
    r, b = restore_world(
        env,
        [
            ("marine", Team.RED, (13.0, 16.0)),
            ("marine", Team.RED, (10.0, 16.0)),
            ("marine", Team.BLUE, (21.0, 16.0)),   # 8 east of red 0: in sight, out of range
            ("marine", Team.BLUE, (28.0, 16.0)),   # out of sight
        ],
    )
    row = r.observations[0]
    # enemy slot 0: [id, dist, rel_x, rel_y, health, shield, type...]
    assert row[4] == 0.0          # id 0 normalised by enemy count
    assert row[5] == pytest.approx(8.0 / 9.0)
    assert row[6] == pytest.approx(8.0 / 9.0)   # eastward in canonical frame
    assert row[7] == 0.0
    assert row[8] == 1.0          # full health
    assert row[9] == 0.0          # marines have no shield
    assert row[10] == 1.0         # one-hot (T=1)
    # enemy slot 1 is out of sight: zeroed
    assert (row[11:18] == 0).all()
    # its target action is available through the attack-move macro
    assert r.masks[0, TARGET_OFFSET + 0]
    assert not r.masks[0, TARGET_OFFSET + 1]


def test_ally_fields_and_personal_block():
    env = BattleEnv(tiny_scenario())
    r, _ = restore_world(
        env,
        [
            ("marine", Team.RED, (13.0, 16.0)),
            ("marine", Team.RED, (10.0, 16.0)),
            ("marine", Team.BLUE, (28.0, 15.0)),
            ("marine", Team.BLUE, (28.0, 17.0)),
        ],
    )
    row = r.observations[0]
    ally = row[4 + 2 * 7 : 4 + 2 * 7 + 6]
    assert ally[0] == pytest.approx(3.0 / 9.0)     # distance
    assert ally[1] == pytest.approx(-3.0 / 9.0)    # ally is west of observer
    assert ally[2] == 0.0
    assert ally[3] == 1.0 and ally[4] == 0.0 and ally[5] == 1.0
    personal = row[-3:]
    assert personal[0] == 1.0 and personal[1] == 0.0 and personal[2] == 1.0


def test_mirrored_observations_in_symmetric_world():
    for name in ("3m", "2s3z", "MMM"):
        env = BattleEnv(zero_jitter(name))
        r, b = env.reset(seed=0)
        assert np.array_equal(r.observations, b.observations)
        assert np.array_equal(r.masks, b.masks)
        assert np.array_equal(r.state, b.state)


def test_observation_bounds_over_random_play(rng):
    env = BattleEnv(get_scenario("MMM2"))
    from skirmish.learners import make_learner

    red = make_learner("random", env.team_spec(Team.RED))
    blue = make_learner("random", env.team_spec(Team.BLUE))
    r, b = env.reset(seed=3)
    for _ in range(80):
        if env.terminated:
            break
        assert (r.observations >= -1.0).all() and (r.observations <= 1.0).all()
        assert (b.observations >= -1.0).all() and (b.observations <= 1.0).all()
        r, b = env.step(red.act(r.observations, r.masks, 0, rng), blue.act(b.observations, b.masks, 0, rng))


def test_dead_agent_rows_zeroed_and_masked():
    env = BattleEnv(tiny_scenario())
    r, b = restore_world(
        env,
        [
            ("marine", Team.RED, (10.0, 16.0)),
            ("marine", Team.RED, (12.0, 16.0)),
            ("marine", Team.BLUE, (20.0, 16.0)),
            ("marine", Team.BLUE, (22.0, 16.0)),
        ],
    )
    world = env.world
    world.alive[0] = False
    world.health[0] = 0.0
    r, b = env.restore(world)
    assert (r.observations[0] == 0).all()
    assert r.masks[0, ACTION_NOOP] and r.masks[0, 1:].sum() == 0
    # the dead unit's row in teammates' views is zeroed too
    ally_row = r.observations[1, 4 + 2 * 7 : 4 + 2 * 7 + 6]
    assert (ally_row == 0).all()


# -- masks -----------------------------------------------------------------------


def test_move_mask_at_arena_edge():
    env = BattleEnv(tiny_scenario())
    r, b = restore_world(
        env,
        [
            ("marine", Team.RED, (0.5, 16.0)),    # near west wall
            ("marine", Team.RED, (10.0, 16.0)),
            ("marine", Team.BLUE, (20.0, 16.0)),
            ("marine", Team.BLUE, (31.5, 16.0)),  # near east wall
        ],
    )
    assert not r.masks[0, ACTION_MOVE_WEST]
    assert r.masks[0, ACTION_MOVE_EAST]
    # blue's canonical east points at the west wall, so its edge flips too
    assert not b.masks[1, ACTION_MOVE_WEST]   # canonical west = map east
    assert b.masks[1, ACTION_MOVE_EAST]


def test_healer_mask_targets_allies():
    scn = get_scenario("MMM")
    env = BattleEnv(zero_jitter(scn.name))
    r, _ = env.reset(seed=0)
    # agent 0 is the medivac: its target slots address teammates
    assert env.views[Team.RED].is_healer[0]
    heal_slots = r.masks[0, TARGET_OFFSET:]
    assert heal_slots[: 9].any()
    # marines next to it are valid patients, enemies are out of sight anyway
    assert not r.masks[1, TARGET_OFFSET:].any()


# -- step lifecycle ----------------------------------------------------------------


def test_all_stop_step():
    env = BattleEnv(get_scenario("3m"))
    env.reset(seed=0)
    r, b = env.step(all_stop(env, Team.RED), all_stop(env, Team.BLUE))
    assert r.reward == 0.0 and b.reward == 0.0
    assert not r.terminated and r.outcome is None


def test_step_after_termination_raises():
    env = BattleEnv(tiny_scenario(step_limit=1))
    env.reset(seed=0)
    r, b = env.step(all_stop(env, Team.RED), all_stop(env, Team.BLUE))
    assert r.terminated and r.outcome is Outcome.DRAW
    with pytest.raises(EpisodeAlreadyTerminated):
        env.step(all_stop(env, Team.RED), all_stop(env, Team.BLUE))


def test_unavailable_action_identifies_agent():
    env = BattleEnv(tiny_scenario())
    restore_world(
        env,
        [
            ("marine", Team.RED, (10.0, 16.0)),
            ("marine", Team.RED, (12.0, 16.0)),
            ("marine", Team.BLUE, (20.0, 16.0)),
            ("marine", Team.BLUE, (22.0, 16.0)),
        ],
    )
    world = env.world
    world.alive[0] = False
    world.health[0] = 0.0
    env.restore(world)
    with pytest.raises(UnavailableAction) as err:
        env.step(np.array([2, ACTION_STOP]), all_stop(env, Team.BLUE))
    assert err.value.team is Team.RED and err.value.agent == 0 and err.value.code == 2
    # attacking an out-of-sight enemy is equally rejected (slot 1 is 10 away)
    with pytest.raises(UnavailableAction):
        env.step(np.array([ACTION_NOOP, TARGET_OFFSET + 1]), all_stop(env, Team.BLUE))


# -- rewards -----------------------------------------------------------------------


def test_reward_scale_3m():
    assert reward_scale(get_scenario("3m"), Team.RED, RewardConfig()) == 20.0 / 365.0


def test_damage_only_rewards():
    env = BattleEnv(tiny_scenario())
    restore_world(
        env,
        [
            ("marine", Team.RED, (12.0, 16.0)),
            ("marine", Team.RED, (10.0, 12.0)),
            ("marine", Team.BLUE, (17.0, 16.0)),  # in range of red 0
            ("marine", Team.BLUE, (26.0, 16.0)),
        ],
    )
    scale = 20.0 / (2 * 45 + 2 * 10 + 200)
    r, b = env.step(np.array([TARGET_OFFSET, ACTION_STOP]), all_stop(env, Team.BLUE))
    assert r.reward == pytest.approx(6.0 * scale)
    assert b.reward == pytest.approx(-0.5 * 6.0 * scale)
    assert r.info["damage_dealt"] == 6.0 and b.info["damage_taken"] == 6.0


def test_reward_formula_example_values():
    # 6 damage on 3m: r_red = 6 * 20/365, r_blue = -0.5 * 6 * 20/365
    events = StepEvents(red=TeamEvents(damage_dealt=6.0), blue=TeamEvents(damage_taken=6.0))
    cfg = RewardConfig()
    scn = get_scenario("3m")
    assert compute_reward(events, Outcome.ONGOING, Team.RED, cfg, scn) == pytest.approx(0.3288, abs=1e-4)
    assert compute_reward(events, Outcome.ONGOING, Team.BLUE, cfg, scn) == pytest.approx(-0.1644, abs=1e-4)


def test_draw_penalty_on_timeout():
    env = BattleEnv(tiny_scenario(step_limit=1))
    env.reset(seed=0)
    r, b = env.step(all_stop(env, Team.RED), all_stop(env, Team.BLUE))
    scale = 20.0 / (2 * 45 + 2 * 10 + 200)
    assert r.outcome is Outcome.DRAW
    assert r.reward == pytest.approx(-50.0 * scale)
    assert b.reward == pytest.approx(-50.0 * scale)


def test_win_and_loss_terminal_rewards():
    env = BattleEnv(tiny_scenario(red=("marine", 1), blue=("marine", 1)))
    restore_world(env, [("marine", Team.RED, (12.0, 16.0)), ("marine", Team.BLUE, (17.0, 16.0))])
    world = env.world
    world.health[1] = 6.0
    env.restore(world)
    r, b = env.step(np.array([TARGET_OFFSET]), np.array([ACTION_STOP]))
    scale = 20.0 / (45 + 10 + 200)
    assert r.terminated and r.outcome is Outcome.RED_WIN
    assert r.reward == pytest.approx((6.0 + 10.0 + 200.0) * scale)
    assert b.reward == pytest.approx((-0.5 * (6.0 + 10.0) - 50.0) * scale)


def test_zero_sum_damage_under_full_self_weight():
    reward = RewardConfig(self_damage_weight=1.0)
    env = BattleEnv(tiny_scenario(), reward_config=reward)
    restore_world(
        env,
        [
            ("marine", Team.RED, (12.0, 16.0)),
            ("marine", Team.RED, (10.0, 12.0)),
            ("marine", Team.BLUE, (17.0, 16.0)),
            ("marine", Team.BLUE, (26.0, 16.0)),
        ],
    )
    r, b = env.step(np.array([TARGET_OFFSET, ACTION_STOP]), all_stop(env, Team.BLUE))
    assert r.reward == -b.reward != 0.0


# -- global state -------------------------------------------------------------------


def test_state_length_and_layout():
    env = BattleEnv(get_scenario("3m"))
    r, _ = env.reset(seed=0)
    # enemies first (health, weapon_cd, rel_x, rel_y, shield, type) then
    # allies (health, rel_x, rel_y, shield, type)
    assert len(r.state) == 3 * 6 + 3 * 5
    assert env.team_spec(Team.RED).state_len == 33


def test_state_weapon_cooldown_normalised():
    env = BattleEnv(tiny_scenario())
    restore_world(
        env,
        [
            ("marine", Team.RED, (12.0, 16.0)),
            ("marine", Team.RED, (10.0, 12.0)),
            ("marine", Team.BLUE, (17.0, 16.0)),
            ("marine", Team.BLUE, (26.0, 16.0)),
        ],
    )
    r, b = env.step(np.array([TARGET_OFFSET, ACTION_STOP]), all_stop(env, Team.BLUE))
    # blue's enemy rows describe red units; red agent 0 just fired
    assert b.state[1] == 1.0          # 0.86 / 0.86
    assert r.state[1] == 0.0          # blue never fired


def test_state_symmetric_world_equal_vectors():
    env = BattleEnv(zero_jitter("3s5z"))
    r, b = env.reset(seed=0)
    assert np.array_equal(r.state, b.state)


def test_state_cooldown_side_flag():
    scn = get_scenario("3m")
    default = BattleEnv(scn)
    flipped = BattleEnv(scn, cooldown_in_state="allies")
    assert default.team_spec(Team.RED).state_len == 33
    assert flipped.team_spec(Team.RED).state_len == 33  # widths swap sides
    r_def, _ = default.reset(seed=0)
    r_flip, _ = flipped.reset(seed=0)
    assert len(r_def.state) == len(r_flip.state)
    env = BattleEnv(tiny_scenario(), cooldown_in_state="allies")
    restore_world(
        env,
        [
            ("marine", Team.RED, (12.0, 16.0)),
            ("marine", Team.RED, (10.0, 12.0)),
            ("marine", Team.BLUE, (17.0, 16.0)),
            ("marine", Team.BLUE, (26.0, 16.0)),
        ],
    )
    r, b = env.step(np.array([TARGET_OFFSET, ACTION_STOP]), all_stop(env, Team.BLUE))
    # ally rows now carry the cooldown: red sees its own agent 0 at full cd
    ally_block = r.state[2 * 5 :]
    assert ally_block[1] == 1.0


def test_state_not_affected_by_sight():
    env = BattleEnv(get_scenario("3m"))
    r, _ = env.reset(seed=0)
    enemy_rows = r.state[: 3 * 6].reshape(3, 6)
    assert (enemy_rows[:, 0] == 1.0).all()  # enemies visible in state despite fog


# -- replay logs --------------------------------------------------------------------


def test_replay_round_trip(tmp_path):
    env = BattleEnv(get_scenario("3m"))
    env.reset(seed=0)
    path = tmp_path / "replay.jsonl"
    with ReplayWriter(path) as writer:
        writer.write(replay_record(env, 0, 0, None, {"red": 0.0, "blue": 0.0}, None, None))
        r, b = env.step(all_stop(env, Team.RED), all_stop(env, Team.BLUE))
        writer.write(
            replay_record(
                env, 0, 1,
                {"red": [1, 1, 1], "blue": [1, 1, 1]},
                {"red": r.reward, "blue": b.reward},
                {"red": r.info, "blue": b.info},
                r.outcome,
            )
        )
    records = read_replay(path)
    assert len(records) == 2
    assert records[0]["v"] == 1
    assert len(records[0]["units"]) == 6
    unit = records[0]["units"][0]
    assert set(unit) == {"team", "id", "x", "y", "health", "shield", "cooldown", "alive"}
    assert records[1]["actions"]["red"] == [1, 1, 1]
    assert json.dumps(records[1])  # serialisable as-is
