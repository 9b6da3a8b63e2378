"""Combat-rule unit tests plus the independent re-simulation check."""

import math

import numpy as np
import pytest

from skirmish.engine import (
    CATALOG,
    COLOSSUS,
    MARAUDER,
    MARINE,
    MEDIVAC,
    STALKER,
    ZEALOT,
    ArmorClass,
    Command,
    CommandKind,
    CommandForDeadUnit,
    EngineConfig,
    InvalidHealTarget,
    MalformedTarget,
    NotAnAttacker,
    Outcome,
    Team,
    Unit,
    apply_damage,
    apply_heal,
    compute_damage,
    regen_shields,
    resolve_attack_move,
    step_world,
    terminal_status,
)

from conftest import make_world


def unit_from(world, index):
    return world.unit(index)


def attack(unit, target):
    return Command(unit, CommandKind.ATTACK, target=target)


def move(unit, dx, dy):
    return Command(unit, CommandKind.MOVE, direction=(dx, dy))


def stop(unit):
    return Command(unit, CommandKind.STOP)


def stops_for_living(world, exclude=()):
    return [stop(i) for i in range(world.n_units) if world.alive[i] and i not in exclude]


# -- damage table --------------------------------------------------------------


@pytest.mark.parametrize(
    "attacker,target,expected",
    [
        (MARAUDER, STALKER, 20.0),   # bonus vs armored
        (MARINE, MARINE, 6.0),
        (COLOSSUS, MARINE, 30.0),    # bonus vs light
        (STALKER, MARAUDER, 18.0),   # bonus vs armored
        (MARAUDER, MARINE, 10.0),    # light target: base damage
        (STALKER, ZEALOT, 13.0),
        (ZEALOT, STALKER, 16.0),
        (COLOSSUS, STALKER, 20.0),   # armored target: base damage
    ],
)
def test_compute_damage_table(attacker, target, expected):
    assert compute_damage(attacker, target) == expected


def test_medivac_cannot_attack():
    with pytest.raises(NotAnAttacker):
        compute_damage(MEDIVAC, MARINE)


def test_armor_classes_match_roster():
    assert MARINE.armor_class is ArmorClass.LIGHT
    assert ZEALOT.armor_class is ArmorClass.LIGHT
    for spec in (MARAUDER, MEDIVAC, STALKER, COLOSSUS):
        assert spec.armor_class is ArmorClass.ARMORED


def test_roster_invariants():
    for spec in CATALOG.values():
        assert spec.attack_range == 6.0
        assert spec.sight_range == 9.0
    assert MEDIVAC.is_healer and MEDIVAC.base_damage is None


# -- single-unit damage and healing --------------------------------------------


def _unit(spec, team=Team.RED, pos=(0.0, 0.0), health=None, shield=None, cooldown=0.0, alive=True):
    return Unit(
        unit_id=0, team=team, spec=spec, pos=pos,
        health=spec.max_health if health is None else health,
        shield=spec.max_shield if shield is None else shield,
        weapon_cooldown=cooldown, alive=alive, last_damaged_at=-math.inf,
    )


def test_apply_damage_shield_first():
    z = _unit(ZEALOT)  # 100 health, 50 shield
    hit = apply_damage(z, 6.0, now=3.0)
    assert (hit.health, hit.shield) == (100.0, 44.0)
    assert hit.last_damaged_at == 3.0


def test_apply_damage_overflow():
    s = _unit(STALKER, shield=10.0)  # 80 health
    hit = apply_damage(s, 18.0, now=0.0)
    assert (hit.health, hit.shield) == (72.0, 0.0)


def test_apply_damage_clamps_and_kills():
    m = _unit(MARINE, health=5.0)
    hit = apply_damage(m, 6.0, now=0.0)
    assert hit.health == 0.0 and not hit.alive


def test_apply_heal():
    medivac = _unit(MEDIVAC)
    marine = _unit(MARINE, health=30.0)
    assert apply_heal(medivac, marine).health == 37.0
    assert apply_heal(medivac, _unit(MARINE)).health == 45.0  # clamp at max


def test_apply_heal_rejects_bad_targets():
    medivac = _unit(MEDIVAC)
    with pytest.raises(InvalidHealTarget):
        apply_heal(medivac, _unit(MARINE, team=Team.BLUE))
    with pytest.raises(InvalidHealTarget):
        apply_heal(medivac, _unit(MARINE, health=0.0, alive=False))
    with pytest.raises(InvalidHealTarget):
        apply_heal(medivac, _unit(MEDIVAC))


# -- step_world ----------------------------------------------------------------


def test_move_displacement():
    world = make_world([("marine", Team.RED, (10.0, 10.0)), ("marine", Team.BLUE, (30.0, 30.0))])
    nxt, _ = step_world(world, [move(0, 1.0, 0.0), stop(1)])
    assert nxt.unit(0).pos == (11.125, 10.0)  # 2.25 speed x 0.5 dt
    assert nxt.time == 0.5 and nxt.step_count == 1


def test_mutual_kill_same_step():
    world = make_world([("marine", Team.RED, (10.0, 16.0)), ("marine", Team.BLUE, (14.0, 16.0))])
    world.health[:] = 6.0
    nxt, events = step_world(world, [attack(0, 1), attack(1, 0)])
    assert not nxt.alive.any()
    assert events.red.kills == 1 and events.blue.kills == 1
    assert terminal_status(nxt, 100) is Outcome.DRAW


def test_cooldown_set_on_fire():
    world = make_world([("marine", Team.RED, (10.0, 16.0)), ("marine", Team.BLUE, (14.0, 16.0))])
    nxt, events = step_world(world, [attack(0, 1), stop(1)])
    assert nxt.unit(0).weapon_cooldown == 0.86
    assert events.red.damage_dealt == 6.0
    # waiting in range: cooldown ticks down, no second shot until ready
    nxt2, ev2 = step_world(nxt, [attack(0, 1), stop(1)])
    assert ev2.red.damage_dealt == 0.0
    assert nxt2.unit(0).weapon_cooldown == pytest.approx(0.36)


def test_no_double_damage_within_period():
    world = make_world([("stalker", Team.RED, (10.0, 16.0)), ("zealot", Team.BLUE, (14.0, 16.0))])
    fire_times = []
    for step in range(12):
        world, events = step_world(world, [attack(0, 1), stop(1)])
        if events.red.damage_dealt > 0:
            fire_times.append(step * 0.5)
    assert fire_times, "never fired"
    gaps = np.diff(fire_times)
    assert (gaps >= STALKER.attack_period).all()


def test_attack_move_approach_then_fire():
    # out of range: approach along the line, no damage
    world = make_world([("marine", Team.RED, (0.0, 0.0)), ("marine", Team.BLUE, (8.0, 0.0))], arena=(64, 64))
    nxt, events = step_world(world, [attack(0, 1), stop(1)])
    assert nxt.unit(0).pos == (1.125, 0.0)
    assert events.red.damage_dealt == 0.0

    # in range and ready: fires immediately without moving
    world = make_world([("marine", Team.RED, (0.0, 0.0)), ("marine", Team.BLUE, (5.0, 0.0))], arena=(64, 64))
    nxt, events = step_world(world, [attack(0, 1), stop(1)])
    assert nxt.unit(0).pos == (0.0, 0.0)
    assert events.red.damage_dealt == 6.0


def test_attack_move_two_step_trace():
    # 6.5 away: one approach step to 5.375, then fire on the next step
    world = make_world([("marine", Team.RED, (0.0, 0.0)), ("marine", Team.BLUE, (6.5, 0.0))], arena=(64, 64))
    mid, events = step_world(world, [attack(0, 1), stop(1)])
    assert events.red.damage_dealt == 0.0
    assert mid.unit(0).pos == (1.125, 0.0)
    assert math.dist(mid.unit(0).pos, mid.unit(1).pos) == 5.375
    nxt, events = step_world(mid, [attack(0, 1), stop(1)])
    assert events.red.damage_dealt == 6.0
    assert nxt.unit(0).pos == (1.125, 0.0)


def test_resolve_attack_move_cases():
    cfg = EngineConfig()
    attacker = _unit(MARINE, pos=(0.0, 0.0))
    out_of_range = resolve_attack_move(attacker, _unit(MARINE, team=Team.BLUE, pos=(8.0, 0.0)), cfg)
    assert not out_of_range.fires and out_of_range.pos == (1.125, 0.0)
    in_range = resolve_attack_move(attacker, _unit(MARINE, team=Team.BLUE, pos=(5.0, 0.0)), cfg)
    assert in_range.fires and in_range.pos == (0.0, 0.0)
    dead = _unit(MARINE, team=Team.BLUE, pos=(5.0, 0.0), health=0.0, alive=False)
    dissolved = resolve_attack_move(attacker, dead, cfg)
    assert not dissolved.fires and dissolved.pos == (0.0, 0.0)


def test_colossus_splash_hits_clustered_enemies():
    world = make_world(
        [
            ("colossus", Team.RED, (10.0, 16.0)),
            ("marine", Team.BLUE, (15.0, 16.0)),
            ("marine", Team.BLUE, (15.5, 16.0)),   # within radius 1 of target
            ("marine", Team.BLUE, (15.0, 20.0)),   # outside radius
        ]
    )
    nxt, events = step_world(world, [attack(0, 1)] + stops_for_living(world, exclude=(0,)))
    assert events.red.damage_dealt == 60.0  # 30 to each clustered light target
    assert nxt.health[1] == 15.0 and nxt.health[2] == 15.0 and nxt.health[3] == 45.0


def test_heal_applies_in_range_and_not_to_dead():
    world = make_world(
        [
            ("medivac", Team.RED, (10.0, 16.0)),
            ("marine", Team.RED, (12.0, 16.0)),
            ("marine", Team.BLUE, (30.0, 16.0)),
        ]
    )
    world.health[1] = 30.0
    nxt, events = step_world(world, [Command(0, CommandKind.HEAL, target=1), stop(1), stop(2)])
    assert nxt.health[1] == 37.0
    assert events.red.heals == 7.0


def test_heal_approaches_out_of_range_patient():
    world = make_world(
        [
            ("medivac", Team.RED, (0.0, 0.0)),
            ("marine", Team.RED, (8.0, 0.0)),
            ("marine", Team.BLUE, (30.0, 30.0)),
        ],
        arena=(64, 64),
    )
    world.health[1] = 30.0
    nxt, events = step_world(world, [Command(0, CommandKind.HEAL, target=1), stop(1), stop(2)])
    assert events.red.heals == 0.0
    assert nxt.unit(0).pos == (1.125, 0.0)


def test_shield_regen_delay_and_clamp():
    cfg = EngineConfig()
    world = make_world([("zealot", Team.RED, (10.0, 16.0)), ("zealot", Team.BLUE, (30.0, 16.0))], cfg)
    world.shield[0] = 44.0
    world.last_damaged[0] = 0.0
    # not yet eligible: damaged at t=0, delay 10
    nxt, _ = step_world(world, stops_for_living(world))
    assert nxt.shield[0] == 44.0
    world.time = 10.0  # now - last_damaged reaches the delay
    nxt, _ = step_world(world, stops_for_living(world))
    assert nxt.shield[0] == 45.0  # rate 2 x dt 0.5
    assert nxt.shield[1] == ZEALOT.max_shield  # full stays clamped


def test_regen_shields_operation():
    world = make_world([("zealot", Team.RED, (10.0, 16.0)), ("marine", Team.BLUE, (30.0, 16.0))])
    world.shield[0] = 44.0
    world.last_damaged[0] = -20.0
    regen = regen_shields(world)
    assert regen.shield[0] == 45.0
    assert world.shield[0] == 44.0  # purity
    assert regen.shield[1] == 0.0   # no shield to regenerate


def test_terminal_status_cases():
    world = make_world([("marine", Team.RED, (10.0, 16.0)), ("marine", Team.RED, (10.0, 18.0)), ("marine", Team.BLUE, (30.0, 16.0))])
    world.alive[2] = False
    world.health[2] = 0.0
    assert terminal_status(world, 100) is Outcome.RED_WIN
    world.alive[2] = True
    world.health[2] = 45.0
    world.step_count = 100
    assert terminal_status(world, 100) is Outcome.DRAW
    world.step_count = 99
    assert terminal_status(world, 100) is Outcome.ONGOING


def test_command_errors():
    world = make_world([("marine", Team.RED, (10.0, 16.0)), ("marine", Team.BLUE, (30.0, 16.0))])
    world.alive[0] = False
    world.health[0] = 0.0
    with pytest.raises(CommandForDeadUnit):
        step_world(world, [stop(0), stop(1)])
    world.alive[0] = True
    world.health[0] = 45.0
    with pytest.raises(MalformedTarget):
        step_world(world, [attack(0, 5), stop(1)])
    with pytest.raises(MalformedTarget):  # attack aimed at an ally
        step_world(world, [attack(0, 0), stop(1)])


def test_step_requires_one_command_per_living_unit():
    world = make_world([("marine", Team.RED, (10.0, 16.0)), ("marine", Team.BLUE, (30.0, 16.0))])
    with pytest.raises(ValueError):
        step_world(world, [stop(0)])
    with pytest.raises(ValueError):
        step_world(world, [stop(0), stop(0), stop(1)])


# -- properties ----------------------------------------------------------------


def _random_commands(world, rng):
    cmds = []
    for i in range(world.n_units):
        if not world.alive[i]:
            continue
        if world.stats.is_healer[i]:
            patients = [
                j for j in range(world.n_units)
                if world.team_of[j] == world.team_of[i] and world.alive[j] and not world.stats.is_healer[j]
            ]
            if patients and rng.integers(0, 2):
                cmds.append(Command(i, CommandKind.HEAL, target=patients[rng.integers(0, len(patients))]))
            else:
                cmds.append(stop(i))
            continue
        enemies = [j for j in range(world.n_units) if world.team_of[j] != world.team_of[i] and world.alive[j]]
        choice = rng.integers(0, 3)
        if choice == 0 or (choice == 2 and not enemies):
            cmds.append(stop(i))
        elif choice == 1:
            d = [(0.0, 1.0), (0.0, -1.0), (1.0, 0.0), (-1.0, 0.0)][rng.integers(0, 4)]
            cmds.append(move(i, *d))
        else:
            cmds.append(attack(i, enemies[rng.integers(0, len(enemies))]))
    return cmds


def _random_world(rng, max_per_team=2):
    names = list(CATALOG)
    units = []
    for team in (Team.RED, Team.BLUE):
        for _ in range(int(rng.integers(1, max_per_team + 1))):
            name = names[rng.integers(0, len(names))]
            pos = (float(rng.uniform(8, 24)), float(rng.uniform(8, 24)))
            units.append((name, team, pos))
    units.sort(key=lambda u: u[1])
    return make_world(units)


def test_conservation_and_bounds_over_random_battles():
    rng = np.random.default_rng(42)
    for _ in range(30):
        world = _random_world(rng, max_per_team=3)
        red_dealt = blue_taken = 0.0
        red_kills = blue_deaths = 0
        for _ in range(25):
            if terminal_status(world, 1000) is not Outcome.ONGOING:
                break
            world, events = step_world(world, _random_commands(world, rng))
            assert events.red.damage_dealt == events.blue.damage_taken
            assert events.blue.damage_dealt == events.red.damage_taken
            assert events.red.kills == events.blue.deaths
            assert events.blue.kills == events.red.deaths
            red_dealt += events.red.damage_dealt
            blue_taken += events.blue.damage_taken
            red_kills += events.red.kills
            blue_deaths += events.blue.deaths
            assert (world.health >= 0).all() and (world.health <= world.stats.max_health).all()
            assert (world.shield >= 0).all() and (world.shield <= world.stats.max_shield).all()
            assert (np.abs(world.pos_x) <= world.half_w).all()
            assert (np.abs(world.pos_y) <= world.half_h).all()
        assert red_dealt == blue_taken and red_kills == blue_deaths


def test_step_world_determinism_and_purity():
    rng = np.random.default_rng(7)
    world = _random_world(rng)
    cmds = _random_commands(world, rng)
    before = world.pos_x.copy()
    a, _ = step_world(world, cmds)
    b, _ = step_world(world, cmds)
    assert np.array_equal(world.pos_x, before)  # input untouched
    for field in ("pos_x", "pos_y", "health", "shield", "cooldown", "alive", "last_damaged"):
        assert np.array_equal(getattr(a, field), getattr(b, field))
    assert a.time == b.time and a.step_count == b.step_count


def test_engine_mirror_symmetry():
    """Point-reflected world + reflected commands -> point-reflected successor."""
    rng = np.random.default_rng(3)
    for _ in range(10):
        n_per = int(rng.integers(1, 4))
        names = [list(CATALOG)[rng.integers(0, len(CATALOG))] for _ in range(n_per)]
        # spawn on a 1/8 grid so the map->centre conversion is exact
        red = [
            (nm, Team.RED, (rng.integers(64, 120) / 8.0, rng.integers(64, 192) / 8.0))
            for nm in names
        ]
        blue = [(nm, Team.BLUE, (32.0 - x, 32.0 - y)) for nm, _, (x, y) in red]
        world = make_world(red + blue)
        for _ in range(6):
            if terminal_status(world, 1000) is not Outcome.ONGOING:
                break
            cmds = []
            for i in range(n_per):
                choice = rng.integers(0, 3)
                if choice == 0 or world.stats.is_healer[i]:
                    cmds += [stop(i), stop(n_per + i)]
                elif choice == 1:
                    d = [(0.0, 1.0), (0.0, -1.0), (1.0, 0.0), (-1.0, 0.0)][rng.integers(0, 4)]
                    cmds += [move(i, *d), move(n_per + i, -d[0], -d[1])]
                else:
                    k = int(rng.integers(0, n_per))
                    cmds += [attack(i, n_per + k), attack(n_per + i, k)]
            world, _ = step_world(world, cmds)
            assert np.array_equal(world.pos_x[n_per:], -world.pos_x[:n_per])
            assert np.array_equal(world.pos_y[n_per:], -world.pos_y[:n_per])
            assert np.array_equal(world.health[n_per:], world.health[:n_per])
            assert np.array_equal(world.shield[n_per:], world.shield[:n_per])
            assert np.array_equal(world.cooldown[n_per:], world.cooldown[:n_per])


# -- independent straight-line re-simulation ------------------------------------


def naive_step(world, commands):
    """Plain-dict re-simulation written straight from the rule text."""
    cfg = world.config
    dt = cfg.step_dt
    units = [
        {
            "spec": world.specs[i], "team": int(world.team_of[i]),
            "x": float(world.pos_x[i]), "y": float(world.pos_y[i]),
            "health": float(world.health[i]), "shield": float(world.shield[i]),
            "cd": float(world.cooldown[i]), "alive": bool(world.alive[i]),
        }
        for i in range(world.n_units)
    ]
    start = [dict(u) for u in units]

    fired = set()
    hits = {}
    heals = []
    for cmd in commands:
        u = units[cmd.unit]
        s = start[cmd.unit]
        if cmd.kind is CommandKind.STOP:
            continue
        if cmd.kind is CommandKind.MOVE:
            step_len = s["spec"].move_speed * dt
            nx = s["x"] + cmd.direction[0] * step_len
            ny = s["y"] + cmd.direction[1] * step_len
            u["x"] = min(world.half_w, max(-world.half_w, nx))
            u["y"] = min(world.half_h, max(-world.half_h, ny))
            continue
        tgt = start[cmd.target]
        if not tgt["alive"]:
            continue
        dx = tgt["x"] - s["x"]
        dy = tgt["y"] - s["y"]
        dist = math.sqrt(dx * dx + dy * dy)
        if dist > s["spec"].attack_range:
            step_len = s["spec"].move_speed * dt
            if dist <= step_len:
                nx, ny = tgt["x"], tgt["y"]
            else:
                nx = s["x"] + dx / dist * step_len
                ny = s["y"] + dy / dist * step_len
            u["x"] = min(world.half_w, max(-world.half_w, nx))
            u["y"] = min(world.half_h, max(-world.half_h, ny))
        elif cmd.kind is CommandKind.ATTACK:
            if s["cd"] <= 0.0:
                fired.add(cmd.unit)
                dmg = compute_damage(s["spec"], tgt["spec"])
                if s["spec"].splash_radius > 0:
                    for j, other in enumerate(start):
                        if other["alive"] and other["team"] != s["team"]:
                            dd = math.dist((other["x"], other["y"]), (tgt["x"], tgt["y"]))
                            if dd <= s["spec"].splash_radius:
                                hits[j] = hits.get(j, 0.0) + dmg
                else:
                    hits[cmd.target] = hits.get(cmd.target, 0.0) + dmg
        else:
            heals.append((cmd.unit, cmd.target))

    for j in sorted(hits):
        u = units[j]
        amount = hits[j]
        shield_loss = min(u["shield"], amount)
        health_loss = min(u["health"], amount - shield_loss)
        u["shield"] -= shield_loss
        u["health"] -= health_loss
        if u["health"] <= 0:
            u["alive"] = False

    for i, t in sorted(heals):
        patient = units[t]
        if not patient["alive"]:
            continue
        patient["health"] = min(patient["spec"].max_health, patient["health"] + units[i]["spec"].heal_per_action)

    for i, u in enumerate(units):
        if i in fired:
            u["cd"] = u["spec"].attack_period
        else:
            u["cd"] = max(0.0, start[i]["cd"] - dt)
    return units


def test_brute_force_equivalence():
    rng = np.random.default_rng(11)
    for _ in range(40):
        world = _random_world(rng, max_per_team=2)
        for _ in range(5):
            if terminal_status(world, 1000) is not Outcome.ONGOING:
                break
            cmds = _random_commands(world, rng)
            expected = naive_step(world, cmds)
            world, _ = step_world(world, cmds)
            for i, exp in enumerate(expected):
                assert world.pos_x[i] == exp["x"], f"unit {i} x"
                assert world.pos_y[i] == exp["y"], f"unit {i} y"
                assert world.health[i] == exp["health"], f"unit {i} health"
                assert world.cooldown[i] == exp["cd"], f"unit {i} cooldown"
                assert bool(world.alive[i]) == exp["alive"], f"unit {i} alive"
