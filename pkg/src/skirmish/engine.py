"""Deterministic fixed-timestep combat engine.

Two teams of units fight on a rectangular arena.  One call to
:func:`step_world` advances the whole world by ``step_dt`` time units:
movement first, then the approach leg of attack-move macros, then every
ready attack resolved against the state captured at the start of the step,
then heals, cooldowns, shield regeneration and the clock.  Because damage
lands simultaneously, mutual kills are possible and mirrored set-ups stay
exactly mirrored.

Positions are stored relative to the arena centre.  Point reflection of a
world is then plain negation of coordinates, which IEEE arithmetic carries
out exactly; that is what makes mirror-symmetric rollouts bit-reproducible.
The public :class:`Unit` view converts back to map coordinates.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _fastpath


class EngineError(ValueError):
    """Base class for combat-rule violations."""


class NotAnAttacker(EngineError):
    """Raised when damage is requested from a unit without a weapon."""


class CommandForDeadUnit(EngineError):
    """Raised when a command addresses a unit that is no longer alive."""


class MalformedTarget(EngineError):
    """Raised when a command's target index is out of range or on the wrong team."""


class InvalidHealTarget(EngineError):
    """Raised when a heal addresses an enemy, a corpse or another healer."""


class ArmorClass(enum.Enum):
    LIGHT = "light"
    ARMORED = "armored"


class Race(enum.Enum):
    TERRAN = "terran"
    PROTOSS = "protoss"


class Team(enum.IntEnum):
    RED = 0
    BLUE = 1

    @property
    def other(self) -> "Team":
        return Team.BLUE if self is Team.RED else Team.RED


class Outcome(enum.Enum):
    ONGOING = "ongoing"
    RED_WIN = "red_win"
    BLUE_WIN = "blue_win"
    DRAW = "draw"

    def is_win_for(self, team: Team) -> bool:
        return (self is Outcome.RED_WIN) if team is Team.RED else (self is Outcome.BLUE_WIN)

    def is_loss_for(self, team: Team) -> bool:
        return self.is_win_for(team.other)


@dataclass(frozen=True)
class UnitSpec:
    """Static combat parameters of one unit type."""

    spec_id: int
    name: str
    race: Race
    max_health: float
    max_shield: float
    attack_range: float
    sight_range: float
    base_damage: float | None
    bonus_vs: tuple[ArmorClass, float] | None
    attack_period: float | None
    move_speed: float
    armor_class: ArmorClass
    is_healer: bool = False
    heal_per_action: float = 0.0
    splash_radius: float = 0.0


# The built-in roster.  The medivac has no weapon; its listed move speed is
# shared with every other unit so mixed squads can advance together.
MARINE = UnitSpec(0, "marine", Race.TERRAN, 45.0, 0.0, 6.0, 9.0, 6.0, None, 0.86, 2.25, ArmorClass.LIGHT)
MARAUDER = UnitSpec(1, "marauder", Race.TERRAN, 125.0, 0.0, 6.0, 9.0, 10.0, (ArmorClass.ARMORED, 20.0), 1.5, 2.25, ArmorClass.ARMORED)
MEDIVAC = UnitSpec(2, "medivac", Race.TERRAN, 150.0, 0.0, 6.0, 9.0, None, None, None, 2.25, ArmorClass.ARMORED, is_healer=True, heal_per_action=7.0)
ZEALOT = UnitSpec(3, "zealot", Race.PROTOSS, 100.0, 50.0, 6.0, 9.0, 16.0, None, 1.2, 2.25, ArmorClass.LIGHT)
STALKER = UnitSpec(4, "stalker", Race.PROTOSS, 80.0, 80.0, 6.0, 9.0, 13.0, (ArmorClass.ARMORED, 18.0), 1.87, 2.25, ArmorClass.ARMORED)
COLOSSUS = UnitSpec(5, "colossus", Race.PROTOSS, 200.0, 150.0, 6.0, 9.0, 20.0, (ArmorClass.LIGHT, 30.0), 1.5, 2.25, ArmorClass.ARMORED, splash_radius=1.0)

CATALOG: dict[str, UnitSpec] = {
    s.name: s for s in (MARINE, MARAUDER, MEDIVAC, ZEALOT, STALKER, COLOSSUS)
}


@dataclass(frozen=True)
class EngineConfig:
    """Tunable mechanics shared by every scenario."""

    step_dt: float = 0.5
    shield_regen_delay: float = 10.0
    shield_regen_rate: float = 2.0
    arena_width: float = 32.0
    arena_height: float = 32.0
    allow_overlap: bool = True


@dataclass(frozen=True)
class Unit:
    """Value snapshot of one battlefield unit, in map coordinates."""

    unit_id: int
    team: Team
    spec: UnitSpec
    pos: tuple[float, float]
    health: float
    shield: float
    weapon_cooldown: float
    alive: bool
    last_damaged_at: float


class CommandKind(enum.Enum):
    STOP = "stop"
    MOVE = "move"
    ATTACK = "attack"
    HEAL = "heal"


@dataclass(frozen=True)
class Command:
    """One order for one living unit, addressed by global unit index.

    ``direction`` is a world-frame unit vector for MOVE; ``target`` is the
    global index of the victim (ATTACK) or patient (HEAL).
    """

    unit: int
    kind: CommandKind
    direction: tuple[float, float] = (0.0, 0.0)
    target: int = -1


@dataclass
class TeamEvents:
    damage_dealt: float = 0.0
    kills: int = 0
    damage_taken: float = 0.0
    deaths: int = 0
    heals: float = 0.0


@dataclass
class StepEvents:
    """What happened to each team during one engine step."""

    red: TeamEvents = field(default_factory=TeamEvents)
    blue: TeamEvents = field(default_factory=TeamEvents)

    def for_team(self, team: Team) -> TeamEvents:
        return self.red if team is Team.RED else self.blue


def compute_damage(attacker: UnitSpec, target: UnitSpec) -> float:
    """Damage one attack by ``attacker`` inflicts on ``target``.

    The bonus figure replaces the base damage outright when the target's
    armor class matches.
    """
    if attacker.base_damage is None:
        raise NotAnAttacker(f"{attacker.name} has no weapon")
    if attacker.bonus_vs is not None and target.armor_class is attacker.bonus_vs[0]:
        return attacker.bonus_vs[1]
    return attacker.base_damage


def _split_damage(health: float, shield: float, amount: float) -> tuple[float, float, float]:
    """Shield absorbs first; overflow reduces health, clamped at zero.

    Returns (new_health, new_shield, effective_amount).
    """
    shield_loss = shield if amount > shield else amount
    health_loss = amount - shield_loss
    if health_loss > health:
        health_loss = health
    return health - health_loss, shield - shield_loss, shield_loss + health_loss


def apply_damage(unit: Unit, amount: float, now: float) -> Unit:
    """Pure single-unit damage application (shield first, clamp at zero)."""
    if amount < 0:
        raise EngineError("damage amount must be non-negative")
    if not unit.alive:
        raise EngineError("damage to a dead unit must be filtered by the caller")
    health, shield, _ = _split_damage(unit.health, unit.shield, amount)
    return replace(unit, health=health, shield=shield, alive=health > 0.0, last_damaged_at=now)


def apply_heal(healer: Unit, target: Unit) -> Unit:
    """Heal ``target`` by the healer's per-step amount; shields are never healed."""
    if not healer.spec.is_healer:
        raise InvalidHealTarget(f"{healer.spec.name} cannot heal")
    if target.team is not healer.team:
        raise InvalidHealTarget("heal target must be an ally")
    if not target.alive:
        raise InvalidHealTarget("heal target is dead")
    if target.spec.is_healer:
        raise InvalidHealTarget("healers cannot heal each other")
    health = min(target.spec.max_health, target.health + healer.spec.heal_per_action)
    return replace(target, health=health)


@dataclass(frozen=True)
class SpecArrays:
    """Per-unit spec constants unpacked into flat arrays for the step loop."""

    max_health: np.ndarray
    max_shield: np.ndarray
    move_speed: np.ndarray
    attack_range: np.ndarray
    sight_range: np.ndarray
    base_damage: np.ndarray       # nan where unarmed
    bonus_damage: np.ndarray      # nan where no bonus
    bonus_class: np.ndarray       # armor-class ordinal, -1 where no bonus
    armor_class: np.ndarray
    attack_period: np.ndarray     # 0 where unarmed
    is_healer: np.ndarray
    heal_amount: np.ndarray
    splash_radius: np.ndarray
    has_shields: bool


_ARMOR_CODE = {ArmorClass.LIGHT: 0, ArmorClass.ARMORED: 1}


def _spec_arrays(specs: tuple[UnitSpec, ...]) -> SpecArrays:
    n = len(specs)
    out = SpecArrays(
        max_health=np.empty(n), max_shield=np.empty(n), move_speed=np.empty(n),
        attack_range=np.empty(n), sight_range=np.empty(n), base_damage=np.empty(n),
        bonus_damage=np.empty(n), bonus_class=np.empty(n, dtype=np.int64),
        armor_class=np.empty(n, dtype=np.int64), attack_period=np.empty(n),
        is_healer=np.empty(n, dtype=bool), heal_amount=np.empty(n), splash_radius=np.empty(n),
        has_shields=any(s.max_shield > 0 for s in specs),
    )
    for i, s in enumerate(specs):
        out.max_health[i] = s.max_health
        out.max_shield[i] = s.max_shield
        out.move_speed[i] = s.move_speed
        out.attack_range[i] = s.attack_range
        out.sight_range[i] = s.sight_range
        out.base_damage[i] = math.nan if s.base_damage is None else s.base_damage
        out.bonus_damage[i] = math.nan if s.bonus_vs is None else s.bonus_vs[1]
        out.bonus_class[i] = -1 if s.bonus_vs is None else _ARMOR_CODE[s.bonus_vs[0]]
        out.armor_class[i] = _ARMOR_CODE[s.armor_class]
        out.attack_period[i] = 0.0 if s.attack_period is None else s.attack_period
        out.is_healer[i] = s.is_healer
        out.heal_amount[i] = s.heal_per_action
        out.splash_radius[i] = s.splash_radius
    return out


@dataclass
class WorldState:
    """Full simulation snapshot.

    Treated as immutable: :func:`step_world` returns a fresh value and never
    mutates its input, so snapshots can be kept, compared and shipped across
    contexts.  Coordinates are centre-origin; ``center`` restores map space.
    """

    config: EngineConfig
    specs: tuple[UnitSpec, ...]
    stats: SpecArrays
    team_of: np.ndarray           # int8, RED=0 / BLUE=1
    n_red: int
    pos_x: np.ndarray
    pos_y: np.ndarray
    health: np.ndarray
    shield: np.ndarray
    cooldown: np.ndarray
    alive: np.ndarray
    last_damaged: np.ndarray
    time: float
    step_count: int
    half_w: float
    half_h: float
    center: tuple[float, float]

    @property
    def n_units(self) -> int:
        return len(self.specs)

    @property
    def n_blue(self) -> int:
        return self.n_units - self.n_red

    def team_slice(self, team: Team) -> slice:
        return slice(0, self.n_red) if team is Team.RED else slice(self.n_red, self.n_units)

    def global_index(self, team: Team, slot: int) -> int:
        return slot if team is Team.RED else self.n_red + slot

    def unit(self, index: int) -> Unit:
        """Materialise a value view of one unit, in map coordinates."""
        team = Team(int(self.team_of[index]))
        slot = index if team is Team.RED else index - self.n_red
        return Unit(
            unit_id=slot,
            team=team,
            spec=self.specs[index],
            pos=(float(self.pos_x[index]) + self.center[0], float(self.pos_y[index]) + self.center[1]),
            health=float(self.health[index]),
            shield=float(self.shield[index]),
            weapon_cooldown=float(self.cooldown[index]),
            alive=bool(self.alive[index]),
            last_damaged_at=float(self.last_damaged[index]),
        )

    def units(self) -> list[Unit]:
        return [self.unit(i) for i in range(self.n_units)]


def new_world(
    members: list[tuple[UnitSpec, Team]],
    positions: list[tuple[float, float]],
    config: EngineConfig | None = None,
    arena: tuple[float, float] | None = None,
) -> WorldState:
    """Build a world from (spec, team) pairs and map-coordinate positions.

    Red units must precede blue units; within a team, list order fixes the
    mirror-paired unit ids.
    """
    config = config or EngineConfig()
    if arena is None:
        arena = (config.arena_width, config.arena_height)
    if len(members) != len(positions):
        raise EngineError("one position per unit required")
    teams = [t for _, t in members]
    n_red = sum(1 for t in teams if t is Team.RED)
    if any(t is Team.BLUE for t in teams[:n_red]):
        raise EngineError("red units must precede blue units")
    specs = tuple(s for s, _ in members)
    n = len(specs)
    cx, cy = arena[0] / 2.0, arena[1] / 2.0
    world = WorldState(
        config=config,
        specs=specs,
        stats=_spec_arrays(specs),
        team_of=np.array([int(t) for t in teams], dtype=np.int8),
        n_red=n_red,
        pos_x=np.array([p[0] - cx for p in positions]),
        pos_y=np.array([p[1] - cy for p in positions]),
        health=np.array([s.max_health for s in specs]),
        shield=np.array([s.max_shield for s in specs]),
        cooldown=np.zeros(n),
        alive=np.ones(n, dtype=bool),
        last_damaged=np.full(n, -math.inf),
        time=0.0,
        step_count=0,
        half_w=cx,
        half_h=cy,
        center=(cx, cy),
    )
    out_x = np.abs(world.pos_x) > world.half_w
    out_y = np.abs(world.pos_y) > world.half_h
    if out_x.any() or out_y.any():
        raise EngineError("spawn position outside arena bounds")
    return world


@dataclass(frozen=True)
class MacroStep:
    """Outcome of one attack-move decision: either fire now or close in."""

    fires: bool
    pos: tuple[float, float]


def _approach(ax: float, ay: float, tx: float, ty: float, step_len: float) -> tuple[float, float]:
    dx = tx - ax
    dy = ty - ay
    dist = math.sqrt(dx * dx + dy * dy)
    if dist <= step_len:
        return tx, ty
    return ax + dx / dist * step_len, ay + dy / dist * step_len


def resolve_attack_move(unit: Unit, target: Unit, config: EngineConfig | None = None) -> MacroStep:
    """One step of the attack-move macro against a sighted target.

    In range with a ready weapon: fire without moving.  Out of range: close
    straight in; firing waits for a later step even if this leg ends inside
    range.  A dead target dissolves the macro into a stop.
    """
    config = config or EngineConfig()
    if not target.alive:
        return MacroStep(False, unit.pos)
    dx = target.pos[0] - unit.pos[0]
    dy = target.pos[1] - unit.pos[1]
    dist = math.sqrt(dx * dx + dy * dy)
    if dist <= unit.spec.attack_range:
        return MacroStep(unit.weapon_cooldown <= 0.0, unit.pos)
    step_len = unit.spec.move_speed * config.step_dt
    return MacroStep(False, _approach(unit.pos[0], unit.pos[1], target.pos[0], target.pos[1], step_len))


def regen_shields(world: WorldState) -> WorldState:
    """Return a world with one regeneration tick applied to idle shields."""
    shield = world.shield.copy()
    _regen_into(shield, world)
    return replace(world, shield=shield)


def _regen_into(shield: np.ndarray, world: WorldState) -> None:
    stats = world.stats
    if not stats.has_shields:
        return
    eligible = (
        world.alive
        & (stats.max_shield > 0.0)
        & (world.time - world.last_damaged >= world.config.shield_regen_delay)
    )
    if eligible.any():
        gain = world.config.shield_regen_rate * world.config.step_dt
        shield[eligible] = np.minimum(stats.max_shield[eligible], shield[eligible] + gain)


_KIND_CODE = {CommandKind.STOP: 0, CommandKind.MOVE: 1, CommandKind.ATTACK: 2, CommandKind.HEAL: 3}


def step_world(world: WorldState, commands: list[Command]) -> tuple[WorldState, StepEvents]:
    """Advance the world one step under exactly one command per living unit.

    Resolution order: (1) movement, (2) attack-move approach for attackers
    out of range, (3) ready attacks decided against the start-of-step
    snapshot, (4) damage and heals applied together, (5) cooldowns,
    (6) shield regeneration, (7) clock.
    """
    n = world.n_units
    kind = np.zeros(n, dtype=np.int8)
    dir_x = np.zeros(n)
    dir_y = np.zeros(n)
    target = np.full(n, -1, dtype=np.int64)
    seen = [False] * n
    for cmd in commands:
        if not 0 <= cmd.unit < n:
            raise MalformedTarget(f"no unit {cmd.unit}")
        if seen[cmd.unit]:
            raise EngineError(f"duplicate command for unit {cmd.unit}")
        seen[cmd.unit] = True
        if not world.alive[cmd.unit]:
            raise CommandForDeadUnit(f"unit {cmd.unit} is dead")
        kind[cmd.unit] = _KIND_CODE[cmd.kind]
        if cmd.kind is CommandKind.MOVE:
            dir_x[cmd.unit] = cmd.direction[0]
            dir_y[cmd.unit] = cmd.direction[1]
        elif cmd.kind is not CommandKind.STOP:
            target[cmd.unit] = cmd.target
    for i in range(n):
        if world.alive[i] and not seen[i]:
            raise EngineError(f"missing command for living unit {i}")
    return step_world_arrays(world, kind, dir_x, dir_y, target)


def step_world_arrays(
    world: WorldState,
    kind: np.ndarray,
    dir_x: np.ndarray,
    dir_y: np.ndarray,
    target: np.ndarray,
    validate: bool = True,
) -> tuple[WorldState, StepEvents]:
    """Array-form of :func:`step_world`: per-unit command codes 0 stop,
    1 move, 2 attack, 3 heal.  ``validate=False`` skips target sanity checks
    for callers that already enforced the action masks.
    """
    stats = world.stats
    team_of = world.team_of
    n = world.n_units
    if validate:
        for i in range(n):
            k = kind[i]
            if k < 2:
                continue
            t = target[i]
            if not 0 <= t < n:
                raise MalformedTarget(f"target {t} out of range")
            if k == 2:
                if team_of[t] == team_of[i]:
                    raise MalformedTarget("attack target must be an enemy")
                if stats.is_healer[i]:
                    raise NotAnAttacker(f"unit {i} has no weapon")
            else:
                if team_of[t] != team_of[i]:
                    raise InvalidHealTarget("heal target must be an ally")
                if not stats.is_healer[i]:
                    raise InvalidHealTarget(f"unit {i} is not a healer")
                if stats.is_healer[t]:
                    raise InvalidHealTarget("healers cannot heal each other")

    px = world.pos_x.copy()
    py = world.pos_y.copy()
    health = world.health.copy()
    shield = world.shield.copy()
    cooldown = world.cooldown.copy()
    alive = world.alive.copy()
    last_damaged = world.last_damaged.copy()
    events = np.zeros(10)
    core = _fastpath.engine_step if _fastpath.HAVE_NUMBA else _step_core
    core(
        px, py, health, shield, cooldown, alive, last_damaged,
        kind, dir_x, dir_y, target,
        stats.move_speed, stats.attack_range, stats.base_damage, stats.bonus_damage,
        stats.bonus_class, stats.armor_class, stats.attack_period, stats.heal_amount,
        stats.splash_radius, stats.max_health, stats.max_shield,
        team_of, world.config.step_dt, world.half_w, world.half_h, world.time,
        world.config.shield_regen_delay, world.config.shield_regen_rate, stats.has_shields,
        events,
    )
    nxt = WorldState(
        config=world.config,
        specs=world.specs,
        stats=stats,
        team_of=team_of,
        n_red=world.n_red,
        pos_x=px,
        pos_y=py,
        health=health,
        shield=shield,
        cooldown=cooldown,
        alive=alive,
        last_damaged=last_damaged,
        time=world.time + world.config.step_dt,
        step_count=world.step_count + 1,
        half_w=world.half_w,
        half_h=world.half_h,
        center=world.center,
    )
    step_events = StepEvents(
        red=TeamEvents(events[0], int(events[1]), events[2], int(events[3]), events[4]),
        blue=TeamEvents(events[5], int(events[6]), events[7], int(events[8]), events[9]),
    )
    return nxt, step_events


def _step_core(
    px, py, health, shield, cooldown, alive, last_damaged,
    kind, dir_x, dir_y, target,
    move_speed, attack_range, base_damage, bonus_damage, bonus_class, armor_class,
    attack_period, heal_amount, splash_radius, max_health, max_shield,
    team_of, dt, half_w, half_h, now,
    regen_delay, regen_rate, has_shields,
    events,
) -> None:
    """Pure-python twin of the compiled step kernel (see _fastpath)."""
    n = len(px)
    px0 = px.copy()
    py0 = py.copy()
    health0 = health.copy()
    shield0 = shield.copy()
    cd0 = cooldown.copy()
    alive0 = alive.copy()
    incoming = np.zeros(n)
    fired = np.zeros(n, dtype=bool)
    heal_target = np.full(n, -1, dtype=np.int64)

    for i in range(n):
        k = kind[i]
        if k == 0:
            continue
        if k == 1:
            step_len = move_speed[i] * dt
            nx = px0[i] + dir_x[i] * step_len
            ny = py0[i] + dir_y[i] * step_len
            px[i] = min(half_w, max(-half_w, nx))
            py[i] = min(half_h, max(-half_h, ny))
            continue
        t = target[i]
        if not alive0[t]:
            continue  # macro dissolves to stop
        dx = px0[t] - px0[i]
        dy = py0[t] - py0[i]
        dist = math.sqrt(dx * dx + dy * dy)
        if dist > attack_range[i]:
            step_len = move_speed[i] * dt
            if dist <= step_len:
                nx, ny = px0[t], py0[t]
            else:
                nx = px0[i] + dx / dist * step_len
                ny = py0[i] + dy / dist * step_len
            px[i] = min(half_w, max(-half_w, nx))
            py[i] = min(half_h, max(-half_h, ny))
        elif k == 2:
            if cd0[i] <= 0.0:
                fired[i] = True
                dmg = bonus_damage[i] if bonus_class[i] == armor_class[t] else base_damage[i]
                radius = splash_radius[i]
                if radius > 0.0:
                    for j in range(n):
                        if alive0[j] and team_of[j] != team_of[i]:
                            ddx = px0[j] - px0[t]
                            ddy = py0[j] - py0[t]
                            if math.sqrt(ddx * ddx + ddy * ddy) <= radius:
                                incoming[j] += dmg
                else:
                    incoming[t] += dmg
        else:
            heal_target[i] = t

    for j in range(n):
        amount = incoming[j]
        if amount <= 0.0:
            continue
        h, s, effective = _split_damage(health0[j], shield0[j], amount)
        health[j] = h
        shield[j] = s
        last_damaged[j] = now
        base = 5 if team_of[j] == 0 else 0  # the attacker's tally block
        events[base + 0] += effective
        events[(5 - base) + 2] += effective
        if h <= 0.0:
            alive[j] = False
            events[base + 1] += 1.0
            events[(5 - base) + 3] += 1.0

    for i in range(n):
        t = heal_target[i]
        if t < 0 or not alive[t]:
            continue
        healed = min(max_health[t] - health[t], heal_amount[i])
        if healed > 0.0:
            health[t] += healed
            events[(0 if team_of[i] == 0 else 5) + 4] += healed

    for i in range(n):
        if fired[i]:
            cooldown[i] = attack_period[i]
        else:
            c = cd0[i] - dt
            cooldown[i] = c if c > 0.0 else 0.0

    if has_shields:
        gain = regen_rate * dt
        for i in range(n):
            if alive[i] and max_shield[i] > 0.0 and now - last_damaged[i] >= regen_delay:
                shield[i] = min(max_shield[i], shield[i] + gain)


def terminal_status(world: WorldState, step_limit: int) -> Outcome:
    """Elimination beats the clock; simultaneous elimination and timeouts draw."""
    red_alive = bool(world.alive[: world.n_red].any())
    blue_alive = bool(world.alive[world.n_red :].any())
    if not red_alive and not blue_alive:
        return Outcome.DRAW
    if not blue_alive:
        return Outcome.RED_WIN
    if not red_alive:
        return Outcome.BLUE_WIN
    if world.step_count >= step_limit:
        return Outcome.DRAW
    return Outcome.ONGOING
