"""Lockstep dual-team wire protocol over newline-delimited JSON.

A server owns one environment and two team slots.  External processes
claim a slot with ``hello``, receive an ``assign`` describing the scenario
and tensor shapes, then answer every ``obs`` with an ``act``; the world
only advances once both teams have acted.  Episodes restart automatically;
terminal ``obs`` messages are acknowledged with ``reset_ack``.  The
centralized training state never crosses the wire.

Messages (every one carries ``type``):
  hello      {v, team: "red"|"blue"|"any", name}
  assign     {v, team, scenario, n_agents, obs_len, n_actions, episodes}
  obs        {episode, step, obs, masks, reward, terminated, outcome}
  act        {actions}
  reset_ack  {}
  error      {code, message}
  bye        {reason}
"""

from __future__ import annotations

import json
import socket
from dataclasses import dataclass, field

import numpy as np

from .engine import EngineConfig, Team
from .env import BattleEnv, RewardConfig, UnavailableAction
from .learners import Learner, ScriptedBot
from .scenario import CATALOG, ScenarioSpec, get_scenario
from .seeding import episode_seed

PROTOCOL_VERSION = 1


class ProtocolError(RuntimeError):
    pass


class HandshakeVersionMismatch(ProtocolError):
    pass


class TeamSlotTaken(ProtocolError):
    pass


class MalformedMessage(ProtocolError):
    pass


class ActTimeout(ProtocolError):
    def __init__(self, message: str, offender: Team):
        super().__init__(message)
        self.offender = offender


class ConnectionLost(ProtocolError):
    pass


class ProtocolViolation(ProtocolError):
    pass


def scenario_summary(spec: ScenarioSpec) -> dict:
    return {
        "name": spec.name,
        "red": [[s.name, c] for s, c in spec.red_composition],
        "blue": [[s.name, c] for s, c in spec.blue_composition],
        "arena": [spec.arena[0], spec.arena[1]],
        "episode_step_limit": spec.episode_step_limit,
        "spawn_spread": spec.spawn_spread,
    }


def spec_from_summary(summary: dict) -> ScenarioSpec:
    return ScenarioSpec(
        name=summary["name"],
        red_composition=tuple((CATALOG[n], c) for n, c in summary["red"]),
        blue_composition=tuple((CATALOG[n], c) for n, c in summary["blue"]),
        arena=(summary["arena"][0], summary["arena"][1]),
        episode_step_limit=summary["episode_step_limit"],
        spawn_spread=summary["spawn_spread"],
    )


def _send(fh, message: dict) -> None:
    fh.write(json.dumps(message, separators=(",", ":")) + "\n")
    fh.flush()


def _recv(fh) -> dict:
    line = fh.readline()
    if not line:
        raise ConnectionLost("peer closed the connection")
    try:
        message = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedMessage(str(exc)) from exc
    if not isinstance(message, dict) or "type" not in message:
        raise MalformedMessage("messages must be objects with a 'type' field")
    return message


class _Slot:
    def __init__(self, team: Team, conn: socket.socket, name: str):
        self.team = team
        self.name = name
        self.conn = conn
        self.rfile = conn.makefile("r", encoding="utf-8")
        self.wfile = conn.makefile("w", encoding="utf-8")

    def close(self) -> None:
        for closer in (self.rfile.close, self.wfile.close, self.conn.close):
            try:
                closer()
            except OSError:
                pass


@dataclass
class ServedEpisode:
    outcome: str
    rewards: dict[str, list[float]] = field(default_factory=dict)
    length: int = 0


class BattleServer:
    """One listening endpoint, one session, up to two external teams.

    With ``bot_team`` set, that side is played in-process by the scripted
    bot and only the other slot accepts a client.
    """

    def __init__(
        self,
        scenario: ScenarioSpec,
        *,
        host: str = "127.0.0.1",
        port: int = 0,
        seed: int = 0,
        episodes: int = 100,
        engine_config: EngineConfig | None = None,
        reward_config: RewardConfig | None = None,
        bot_team: Team | None = None,
        act_timeout: float | None = None,
    ):
        self.scenario = scenario
        self.seed = seed
        self.episodes = episodes
        self.env = BattleEnv(scenario, engine_config, reward_config)
        self.bot_team = bot_team
        self.act_timeout = act_timeout
        self._bot = ScriptedBot(scenario, bot_team) if bot_team is not None else None
        self._listener = socket.create_server((host, port))
        self.address = self._listener.getsockname()
        self.served: list[ServedEpisode] = []

    # -- handshake ----------------------------------------------------------

    def _accept_slots(self) -> dict[Team, _Slot]:
        wanted = [t for t in (Team.RED, Team.BLUE) if t is not self.bot_team]
        slots: dict[Team, _Slot] = {}
        while len(slots) < len(wanted):
            conn, _ = self._listener.accept()
            rfile = conn.makefile("r", encoding="utf-8")
            wfile = conn.makefile("w", encoding="utf-8")
            try:
                hello = _recv(rfile)
            except ProtocolError:
                conn.close()
                continue
            if hello.get("type") != "hello" or hello.get("v") != PROTOCOL_VERSION:
                _send(wfile, {"type": "error", "code": "HandshakeVersionMismatch",
                              "message": f"server speaks v{PROTOCOL_VERSION}"})
                conn.close()
                continue
            req = hello.get("team", "any")
            free = [t for t in wanted if t not in slots]
            if req in ("red", "blue"):
                team = Team[req.upper()]
                if team not in free:
                    _send(wfile, {"type": "error", "code": "TeamSlotTaken",
                                  "message": f"{req} is not available"})
                    conn.close()
                    continue
            else:
                team = free[0]
            slot = _Slot(team, conn, hello.get("name", "anonymous"))
            slot.rfile = rfile
            slot.wfile = wfile
            slots[team] = slot
            view = self.env.team_spec(team)
            _send(wfile, {
                "type": "assign",
                "v": PROTOCOL_VERSION,
                "team": team.name.lower(),
                "scenario": scenario_summary(self.scenario),
                "n_agents": view.n_agents,
                "obs_len": view.obs_len,
                "n_actions": view.n_actions,
                "episodes": self.episodes,
            })
        return slots

    # -- session ------------------------------------------------------------

    def run(self) -> list[ServedEpisode]:
        try:
            slots = self._accept_slots()
        except Exception:
            self._listener.close()
            raise
        try:
            for slot in slots.values():
                if self.act_timeout is not None:
                    slot.conn.settimeout(self.act_timeout)
            for ep in range(self.episodes):
                try:
                    record = self._run_episode(ep, slots)
                except ActTimeout as exc:
                    # The slow side forfeits; a broken client ends the session.
                    winner = exc.offender.other
                    self.served.append(ServedEpisode(outcome=f"{winner.name.lower()}_win_forfeit"))
                    for slot in slots.values():
                        _send(slot.wfile, {"type": "bye", "reason": "act timeout forfeit"})
                    return self.served
                self.served.append(record)
            for slot in slots.values():
                _send(slot.wfile, {"type": "bye", "reason": "session complete"})
        finally:
            for slot in slots.values():
                slot.close()
            self._listener.close()
        return self.served

    def _send_obs(self, slots, results, episode: int, step: int) -> None:
        for team, result in zip(Team, results):
            if team is self.bot_team:
                continue
            slot = slots[team]
            _send(slot.wfile, {
                "type": "obs",
                "episode": episode,
                "step": step,
                "obs": [list(row) for row in result.observations],
                "masks": [[int(x) for x in row] for row in result.masks],
                "reward": result.reward,
                "terminated": result.terminated,
                "outcome": result.outcome.value if result.outcome is not None else None,
            })

    def _read_act(self, slot: _Slot, episode: int, step: int) -> np.ndarray:
        """Blocks until this team sends a mask-consistent act."""
        view = self.env.team_spec(slot.team)
        while True:
            try:
                message = _recv(slot.rfile)
            except socket.timeout as exc:
                raise ActTimeout(
                    f"{slot.team.name.lower()} missed the {self.act_timeout}s deadline", slot.team
                ) from exc
            if message["type"] != "act":
                raise ProtocolViolation(f"expected act, got {message['type']!r}")
            actions = message.get("actions")
            if not isinstance(actions, list) or len(actions) != view.n_agents:
                _send(slot.wfile, {"type": "error", "code": "MalformedMessage",
                                   "message": f"actions must be a list of {view.n_agents} codes"})
                continue
            arr = np.asarray(actions, dtype=np.int64)
            mask = self.env.available_actions(slot.team)
            bad = [a for a in range(view.n_agents) if arr[a] < 0 or arr[a] >= view.n_actions or not mask[a, arr[a]]]
            if bad:
                _send(slot.wfile, {"type": "error", "code": "UnavailableAction",
                                   "message": f"agent {bad[0]} cannot take action {int(arr[bad[0]])}"})
                continue
            return arr

    def _run_episode(self, episode: int, slots) -> ServedEpisode:
        if self._bot is not None:
            self._bot.begin_episode()
        results = self.env.reset(episode_seed(self.seed, episode))
        self._send_obs(slots, results, episode, 0)
        rewards: dict[str, list[float]] = {"red": [], "blue": []}
        step = 0
        while not self.env.terminated:
            acts: dict[Team, np.ndarray] = {}
            for team in Team:
                if team is self.bot_team:
                    result = results[int(team)]
                    acts[team] = self._bot.act(result.observations, result.masks)
                else:
                    acts[team] = self._read_act(slots[team], episode, step)
            results = self.env.step(acts[Team.RED], acts[Team.BLUE])
            step += 1
            rewards["red"].append(results[0].reward)
            rewards["blue"].append(results[1].reward)
            self._send_obs(slots, results, episode, step)
        for team, slot in slots.items():
            message = _recv(slot.rfile)
            if message["type"] != "reset_ack":
                raise ProtocolViolation(f"expected reset_ack, got {message['type']!r}")
        return ServedEpisode(outcome=results[0].outcome.value, rewards=rewards, length=step)


def serve(
    scenario: ScenarioSpec | str,
    *,
    host: str = "127.0.0.1",
    port: int = 0,
    seed: int = 0,
    episodes: int = 100,
    engine_config: EngineConfig | None = None,
    reward_config: RewardConfig | None = None,
    bot_team: Team | None = None,
    act_timeout: float | None = None,
) -> list[ServedEpisode]:
    """Run one blocking session to completion; returns per-episode records."""
    if isinstance(scenario, str):
        scenario = get_scenario(scenario)
    server = BattleServer(
        scenario, host=host, port=port, seed=seed, episodes=episodes,
        engine_config=engine_config, reward_config=reward_config,
        bot_team=bot_team, act_timeout=act_timeout,
    )
    return server.run()


@dataclass
class ClientEpisode:
    outcome: str
    rewards: list[float]
    length: int


def client_loop(
    policy,
    address: tuple[str, int],
    *,
    team: str = "any",
    name: str = "client",
) -> list[ClientEpisode]:
    """Reference client: answer every obs with the policy's actions.

    ``policy`` is a Learner or a callable ``assign_message -> Learner`` for
    policies that need the scenario (the scripted bot, say).
    """
    conn = socket.create_connection(address)
    rfile = conn.makefile("r", encoding="utf-8")
    wfile = conn.makefile("w", encoding="utf-8")
    episodes: list[ClientEpisode] = []
    try:
        _send(wfile, {"type": "hello", "v": PROTOCOL_VERSION, "team": team, "name": name})
        assign = _recv(rfile)
        if assign.get("type") == "error":
            code = assign.get("code", "error")
            exc = {"HandshakeVersionMismatch": HandshakeVersionMismatch, "TeamSlotTaken": TeamSlotTaken}.get(
                code, ProtocolViolation
            )
            raise exc(assign.get("message", code))
        if assign.get("type") != "assign":
            raise ProtocolViolation(f"expected assign, got {assign.get('type')!r}")
        if callable(policy) and not isinstance(policy, Learner):
            policy = policy(assign)
        rewards: list[float] = []
        steps = 0
        policy.begin_episode()
        while True:
            message = _recv(rfile)
            kind = message["type"]
            if kind == "bye":
                break
            if kind == "error":
                raise ProtocolViolation(f"server error {message.get('code')}: {message.get('message')}")
            if kind != "obs":
                raise ProtocolViolation(f"expected obs, got {kind!r}")
            if message["step"] == 0:
                rewards = []
                steps = 0
                policy.begin_episode()
            else:
                rewards.append(message["reward"])
                steps += 1
            if message["terminated"]:
                episodes.append(ClientEpisode(message["outcome"], rewards, steps))
                _send(wfile, {"type": "reset_ack"})
                continue
            obs = np.asarray(message["obs"], dtype=float)
            masks = np.asarray(message["masks"], dtype=bool)
            actions = policy.act(obs, masks, 0.0, None)
            _send(wfile, {"type": "act", "actions": [int(a) for a in actions]})
    finally:
        for closer in (rfile.close, wfile.close, conn.close):
            try:
                closer()
            except OSError:
                pass
    return episodes


def bot_client(assign: dict) -> ScriptedBot:
    """Client-side factory: rebuild the scripted bot from the assign message."""
    return ScriptedBot(spec_from_summary(assign["scenario"]), Team[assign["team"].upper()])
