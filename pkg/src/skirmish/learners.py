"""Policies and trainers behind one pluggable interface.

Four implementations: a deterministic scripted bot (the built-in-AI
stand-in), a uniform-random policy, and three episodic Q-learners —
independent per-agent TD (iql), additive team mixing (vdn) and monotonic
state-conditioned mixing (qmix).  The learners share one feed-forward
network across a team's agents; each agent's input is its observation plus
an agent-id one-hot and a last-action one-hot.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _fastpath, nn
from .engine import Team
from .env import ACTION_MOVE_EAST, ACTION_NOOP, ACTION_STOP, TARGET_OFFSET, TeamSpec
from .scenario import ScenarioSpec, parse_scenario_config, scenario_config
from .seeding import STREAM_INIT, derive_seed


class LearnerError(ValueError):
    pass


class NoAvailableAction(LearnerError):
    pass


@dataclass(frozen=True)
class LearnerConfig:
    """Hyperparameters shared by the Q-learners; all overridable."""

    hidden: tuple[int, ...] = (64, 64)
    lr: float = 5e-4
    gamma: float = 0.99
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_anneal_steps: int = 50_000
    buffer_episodes: int = 5_000
    batch_episodes: int = 32
    target_interval: int = 200
    double_q: bool = False
    mixer_embed: int = 32
    mixer_layers: int = 2
    grad_clip: float = 10.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LearnerConfig":
        data = json.loads(text)
        data["hidden"] = tuple(data["hidden"])
        return cls(**data)

    def epsilon_at(self, env_steps: int) -> float:
        if env_steps >= self.epsilon_anneal_steps:
            return self.epsilon_end
        frac = env_steps / self.epsilon_anneal_steps
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


def epsilon_greedy(q_values: np.ndarray, mask: np.ndarray, epsilon: float, rng) -> np.ndarray:
    """Per-row epsilon-greedy over available actions, ties to the lowest code."""
    q_values = np.atleast_2d(q_values)
    mask = np.atleast_2d(mask)
    counts = mask.cumsum(axis=1)
    if not counts[:, -1].all():
        raise NoAvailableAction("an agent has no available action")
    greedy = np.where(mask, q_values, -np.inf).argmax(axis=1)
    if epsilon <= 0.0:
        return greedy
    if rng is None:
        raise LearnerError("exploration requires an rng")
    picks = rng.integers(0, counts[:, -1])
    uniform = (counts > picks[:, None]).argmax(axis=1)
    explore = rng.random(len(greedy)) < epsilon
    return np.where(explore, uniform, greedy)


@dataclass
class TeamEpisode:
    """One team's record of one episode, ready for episodic replay."""

    obs: np.ndarray       # (T+1, A, obs_len) float32
    state: np.ndarray     # (T+1, state_len) float32
    masks: np.ndarray     # (T+1, A, n_actions) bool
    actions: np.ndarray   # (T, A) int16
    rewards: np.ndarray   # (T,) float64

    @property
    def length(self) -> int:
        return len(self.actions)


class Learner:
    """Behaviour contract shared by bots, random policies and trainers."""

    algo = "base"
    trainable = False

    def __init__(self, team_spec: TeamSpec):
        self.team_spec = team_spec
        self.frozen = not self.trainable
        self.env_steps = 0

    def freeze(self) -> None:
        self.frozen = True

    def begin_episode(self) -> None:
        pass

    def act(self, obs: np.ndarray, masks: np.ndarray, epsilon: float = 0.0, rng=None) -> np.ndarray:
        raise NotImplementedError

    def observe(self, episode: TeamEpisode) -> None:
        pass

    def train_step(self) -> float | None:
        return None

    def parameter_arrays(self) -> list[np.ndarray]:
        return []

    def checkpoint_hash(self) -> str:
        return nn.params_hash(self.parameter_arrays())

    def extra_meta(self) -> dict:
        return {}


class RandomPolicy(Learner):
    """Uniform over available actions; the weakest useful baseline."""

    algo = "random"

    def act(self, obs, masks, epsilon: float = 0.0, rng=None) -> np.ndarray:
        if rng is None:
            raise LearnerError("random policy requires an rng")
        draws = rng.random(len(masks))
        out = np.empty(len(masks), dtype=np.int64)
        if _fastpath.HAVE_NUMBA:
            if not _fastpath.sample_available(masks, draws, out):
                raise NoAvailableAction("an agent has no available action")
            return out
        counts = masks.cumsum(axis=1)
        totals = counts[:, -1]
        if not totals.all():
            raise NoAvailableAction("an agent has no available action")
        picks = np.minimum((draws * totals).astype(np.int64), totals - 1)
        return (counts > picks[:, None]).argmax(axis=1)


class ScriptedBot(Learner):
    """Deterministic heuristic opponent working from its own observations.

    Armed units focus-fire the reachable enemy with the lowest remaining
    health+shield; healers patch the most damaged patient in range; with
    nothing in sight everyone advances on the enemy side of the arena.
    """

    algo = "bot"

    def __init__(self, scenario: ScenarioSpec, team: Team):
        units = scenario.team_units(team)
        enemies = scenario.team_units(team.other)
        types = scenario.unit_types()
        A, E, T = len(units), len(enemies), len(types)
        self.scenario = scenario
        self.team = team
        n_targets = max(E, A - 1) if any(u.is_healer for u in units) else E
        super().__init__(
            TeamSpec(
                team=team,
                n_agents=A,
                n_enemies=E,
                obs_len=4 + E * (6 + T) + (A - 1) * (5 + T) + (2 + T),
                state_len=0,
                n_actions=TARGET_OFFSET + n_targets,
                scenario=scenario.name,
            )
        )
        self.n_types = T
        self.enemy_pool = np.array([s.max_health + s.max_shield for s in enemies])
        self.enemy_max_h = np.array([s.max_health for s in enemies])
        self.enemy_max_s = np.array([s.max_shield for s in enemies])
        self.is_healer = np.array([u.is_healer for u in units])
        # Patient slots mirror the observation's ally rows (self excluded).
        self.ally_max_h = np.array(
            [[units[j].max_health for j in range(A) if j != a] for a in range(A)]
        ) if A > 1 else np.zeros((A, 0))
        self.enemy_row = 6 + T
        self.ally_row = 5 + T
        self.enemy_off = 4
        self.ally_off = 4 + E * self.enemy_row

    def act(self, obs, masks, epsilon: float = 0.0, rng=None) -> np.ndarray:
        obs = np.atleast_2d(obs)
        masks = np.atleast_2d(masks)
        A, E = self.team_spec.n_agents, self.team_spec.n_enemies
        actions = np.empty(A, dtype=np.int64)
        for a in range(A):
            mask = masks[a]
            if mask[ACTION_NOOP]:
                actions[a] = ACTION_NOOP
                continue
            chosen = -1
            if self.is_healer[a]:
                avail = mask[TARGET_OFFSET : TARGET_OFFSET + A - 1]
                if avail.any():
                    rows = obs[a, self.ally_off : self.ally_off + (A - 1) * self.ally_row]
                    health = rows.reshape(A - 1, self.ally_row)[:, 3] * self.ally_max_h[a]
                    damaged = avail & (health < self.ally_max_h[a])
                    if damaged.any():
                        pool = np.where(damaged, health, np.inf)
                        chosen = int(pool.argmin())
            else:
                avail = mask[TARGET_OFFSET : TARGET_OFFSET + E]
                if avail.any():
                    rows = obs[a, self.enemy_off : self.enemy_off + E * self.enemy_row]
                    rows = rows.reshape(E, self.enemy_row)
                    pool = rows[:, 4] * self.enemy_max_h + rows[:, 5] * self.enemy_max_s
                    pool = np.where(avail, pool, np.inf)
                    chosen = int(pool.argmin())
            if chosen >= 0:
                actions[a] = TARGET_OFFSET + chosen
            elif mask[ACTION_MOVE_EAST]:
                actions[a] = ACTION_MOVE_EAST
            else:
                actions[a] = ACTION_STOP
        return actions


def scripted_bot_act(bot: ScriptedBot, obs: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Functional alias for the bot policy."""
    return bot.act(obs, masks)


# -- value mixing -----------------------------------------------------------


def vdn_mix(per_agent_q: np.ndarray) -> np.ndarray:
    """Additive decomposition: the team value is the sum of agent values."""
    return np.asarray(per_agent_q).sum(axis=-1)


def _elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, 1.0, np.exp(np.minimum(x, 0.0)))


@dataclass
class QmixMixer:
    """State-conditioned monotonic mixer.

    Hypernetworks map the global state to mixing weights whose absolute
    value is used, so every partial derivative of the team value with
    respect to an agent value stays non-negative.  ``layers=1`` drops the
    hidden mixing layer; with unit weights and zero bias it degenerates to
    the additive mix.
    """

    n_agents: int
    state_dim: int
    embed: int
    layers: int
    hyper_w1: nn.Mlp
    hyper_b1: nn.Mlp
    hyper_w2: nn.Mlp | None = None
    hyper_v: nn.Mlp | None = None

    def nets(self) -> list[nn.Mlp]:
        out = [self.hyper_w1, self.hyper_b1]
        if self.layers == 2:
            out += [self.hyper_w2, self.hyper_v]
        return out

    def params(self) -> list[np.ndarray]:
        return [p for net in self.nets() for p in net.params()]

    def clone(self) -> "QmixMixer":
        return QmixMixer(
            self.n_agents, self.state_dim, self.embed, self.layers,
            self.hyper_w1.clone(), self.hyper_b1.clone(),
            self.hyper_w2.clone() if self.hyper_w2 else None,
            self.hyper_v.clone() if self.hyper_v else None,
        )

    def copy_from(self, other: "QmixMixer") -> None:
        for dst, src in zip(self.nets(), other.nets()):
            dst.copy_from(src)


def make_mixer(state_dim: int, n_agents: int, embed: int = 32, layers: int = 2, seed: int = 0) -> QmixMixer:
    if layers not in (1, 2):
        raise LearnerError("mixer supports 1 or 2 mixing layers")
    if layers == 1:
        return QmixMixer(
            n_agents, state_dim, 1, 1,
            hyper_w1=nn.init_params((state_dim, n_agents), derive_seed(STREAM_INIT, seed, 1)),
            hyper_b1=nn.init_params((state_dim, 1), derive_seed(STREAM_INIT, seed, 2)),
        )
    return QmixMixer(
        n_agents, state_dim, embed, 2,
        hyper_w1=nn.init_params((state_dim, n_agents * embed), derive_seed(STREAM_INIT, seed, 1)),
        hyper_b1=nn.init_params((state_dim, embed), derive_seed(STREAM_INIT, seed, 2)),
        hyper_w2=nn.init_params((state_dim, embed), derive_seed(STREAM_INIT, seed, 3)),
        hyper_v=nn.init_params((state_dim, embed, 1), derive_seed(STREAM_INIT, seed, 4)),
    )


def make_identity_mixer(state_dim: int, n_agents: int) -> QmixMixer:
    """Single mixing layer pinned to unit weights and zero bias."""
    mixer = make_mixer(state_dim, n_agents, layers=1, seed=0)
    mixer.hyper_w1.weights[0][:] = 0.0
    mixer.hyper_w1.biases[0][:] = 1.0
    mixer.hyper_b1.weights[0][:] = 0.0
    mixer.hyper_b1.biases[0][:] = 0.0
    return mixer


def _mixer_forward(mixer: QmixMixer, q: np.ndarray, state: np.ndarray) -> tuple[np.ndarray, dict]:
    """Batched mix with a cache for the backward pass; rows are samples."""
    w1_pre = nn.forward(mixer.hyper_w1, state)
    b1 = nn.forward(mixer.hyper_b1, state)
    if mixer.layers == 1:
        w = np.abs(w1_pre)
        qtot = (q * w).sum(axis=-1) + b1[:, 0]
        return qtot, {"w1_pre": w1_pre, "w": w}
    w1 = np.abs(w1_pre).reshape(len(q), mixer.n_agents, mixer.embed)
    h_pre = np.einsum("na,nae->ne", q, w1) + b1
    h = _elu(h_pre)
    w2_pre = nn.forward(mixer.hyper_w2, state)
    w2 = np.abs(w2_pre)
    v = nn.forward(mixer.hyper_v, state)
    qtot = (h * w2).sum(axis=-1) + v[:, 0]
    return qtot, {"w1_pre": w1_pre, "w1": w1, "h_pre": h_pre, "h": h, "w2_pre": w2_pre, "w2": w2}


def _mixer_backward(
    mixer: QmixMixer, q: np.ndarray, state: np.ndarray, cache: dict, d_qtot: np.ndarray
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Returns (d_q, gradient list aligned with mixer.params())."""
    g = d_qtot[:, None]
    if mixer.layers == 1:
        w = cache["w"]
        d_q = g * w
        d_w_pre = g * q * np.sign(cache["w1_pre"])
        gw1 = nn.backward(mixer.hyper_w1, state, d_w_pre)
        gb1 = nn.backward(mixer.hyper_b1, state, g)
        return d_q, gw1.params() + gb1.params()
    w1, w2 = cache["w1"], cache["w2"]
    d_h = g * w2
    d_w2_pre = g * cache["h"] * np.sign(cache["w2_pre"])
    d_h_pre = d_h * _elu_grad(cache["h_pre"])
    d_q = np.einsum("ne,nae->na", d_h_pre, w1)
    d_w1 = np.einsum("na,ne->nae", q, d_h_pre).reshape(len(q), -1) * np.sign(cache["w1_pre"])
    gw1 = nn.backward(mixer.hyper_w1, state, d_w1)
    gb1 = nn.backward(mixer.hyper_b1, state, d_h_pre)
    gw2 = nn.backward(mixer.hyper_w2, state, d_w2_pre)
    gv = nn.backward(mixer.hyper_v, state, g)
    return d_q, gw1.params() + gb1.params() + gw2.params() + gv.params()


def qmix_mix(per_agent_q: np.ndarray, state: np.ndarray, mixer: QmixMixer) -> np.ndarray:
    """Monotonic team value from per-agent chosen-action values."""
    q = np.asarray(per_agent_q, dtype=float)
    s = np.asarray(state, dtype=float)
    squeeze = q.ndim == 1
    if squeeze:
        q = q[None, :]
        s = s[None, :]
    if q.shape[-1] != mixer.n_agents or s.shape[-1] != mixer.state_dim:
        raise nn.ShapeMismatch("mixer shapes do not match inputs")
    qtot, _ = _mixer_forward(mixer, q, s)
    return qtot[0] if squeeze else qtot


# -- episodic replay ---------------------------------------------------------


class EpisodeBuffer:
    def __init__(self, capacity: int):
        self._store: deque[TeamEpisode] = deque(maxlen=capacity)

    def add(self, episode: TeamEpisode) -> None:
        self._store.append(episode)

    def sample(self, rng, k: int) -> list[TeamEpisode]:
        idx = rng.choice(len(self._store), size=k, replace=False)
        return [self._store[i] for i in idx]

    def __len__(self) -> int:
        return len(self._store)


class ValueLearner(Learner):
    """Shared-parameter episodic Q-learner; ``algo`` picks the mixing rule."""

    trainable = True

    def __init__(self, algo: str, team_spec: TeamSpec, config: LearnerConfig, seed: int):
        if algo not in ("iql", "vdn", "qmix"):
            raise LearnerError(f"unknown value learner {algo!r}")
        super().__init__(team_spec)
        self.algo = algo
        self.config = config
        self.seed = seed
        A, nA = team_spec.n_agents, team_spec.n_actions
        self.input_dim = team_spec.obs_len + A + nA
        widths = (self.input_dim, *config.hidden, nA)
        self.net = nn.init_params(widths, derive_seed(STREAM_INIT, seed, 0))
        self.target_net = self.net.clone()
        self.mixer: QmixMixer | None = None
        self.target_mixer: QmixMixer | None = None
        if algo == "qmix":
            self.mixer = make_mixer(team_spec.state_len, A, config.mixer_embed, config.mixer_layers, seed)
            self.target_mixer = self.mixer.clone()
        self.opt = nn.OptimState.for_params(self.parameter_arrays(), config.lr)
        self.buffer = EpisodeBuffer(config.buffer_episodes)
        self.train_steps = 0
        self._rng = np.random.default_rng(derive_seed(STREAM_INIT, seed, 97))
        self._agent_eye = np.eye(A)
        self._action_eye = np.eye(nA)
        self._last_actions: np.ndarray | None = None

    def parameter_arrays(self) -> list[np.ndarray]:
        params = self.net.params()
        if self.mixer is not None:
            params += self.mixer.params()
        return params

    def begin_episode(self) -> None:
        self._last_actions = None

    def _inputs(self, obs: np.ndarray, last_actions: np.ndarray | None) -> np.ndarray:
        A = self.team_spec.n_agents
        last = self._action_eye[last_actions] if last_actions is not None else np.zeros((A, self.team_spec.n_actions))
        return np.concatenate([obs, self._agent_eye, last], axis=1)

    def act(self, obs, masks, epsilon: float = 0.0, rng=None) -> np.ndarray:
        q = nn.forward(self.net, self._inputs(np.asarray(obs, dtype=float), self._last_actions))
        actions = epsilon_greedy(q, masks, epsilon, rng)
        self._last_actions = actions
        return actions

    def observe(self, episode: TeamEpisode) -> None:
        if not self.frozen:
            self.buffer.add(episode)

    def train_step(self) -> float | None:
        if self.frozen or len(self.buffer) < self.config.batch_episodes:
            return None
        episodes = self.buffer.sample(self._rng, self.config.batch_episodes)
        if self.algo == "iql":
            return iql_train_step(self, episodes)
        return team_td_train_step(self, episodes)

    def _sync_targets_if_due(self) -> None:
        self.train_steps += 1
        if self.train_steps % self.config.target_interval == 0:
            self.target_net.copy_from(self.net)
            if self.mixer is not None:
                self.target_mixer.copy_from(self.mixer)

    def extra_meta(self) -> dict:
        return {"config": self.config.to_json(), "train_steps": self.train_steps, "seed": self.seed}


@dataclass
class _Batch:
    inputs: np.ndarray     # (B, T+1, A, D)
    states: np.ndarray     # (B, T+1, S)
    avail: np.ndarray      # (B, T+1, A, nA) bool
    actions: np.ndarray    # (B, T, A)
    rewards: np.ndarray    # (B, T)
    pad: np.ndarray        # (B, T) 1.0 while the episode is live
    boot: np.ndarray       # (B, T) 1.0 where a next-state bootstrap applies


def _collate(learner: ValueLearner, episodes: list[TeamEpisode]) -> _Batch:
    spec = learner.team_spec
    B = len(episodes)
    Tm = max(ep.length for ep in episodes)
    A, nA, D = spec.n_agents, spec.n_actions, learner.input_dim
    inputs = np.zeros((B, Tm + 1, A, D))
    states = np.zeros((B, Tm + 1, spec.state_len))
    avail = np.zeros((B, Tm + 1, A, nA), dtype=bool)
    actions = np.zeros((B, Tm, A), dtype=np.int64)
    rewards = np.zeros((B, Tm))
    pad = np.zeros((B, Tm))
    boot = np.zeros((B, Tm))
    eye_a = learner._agent_eye
    eye_u = learner._action_eye
    for b, ep in enumerate(episodes):
        T = ep.length
        inputs[b, : T + 1, :, : spec.obs_len] = ep.obs
        inputs[b, : T + 1, :, spec.obs_len : spec.obs_len + A] = eye_a
        inputs[b, 1 : T + 1, :, spec.obs_len + A :] = eye_u[ep.actions]
        states[b, : T + 1] = ep.state
        avail[b, : T + 1] = ep.masks
        actions[b, :T] = ep.actions
        rewards[b, :T] = ep.rewards
        pad[b, :T] = 1.0
        boot[b, : T - 1] = 1.0
    avail[..., ACTION_NOOP] |= ~avail.any(axis=-1)  # padding rows stay maskable
    return _Batch(inputs, states, avail, actions, rewards, pad, boot)


def _q_values(learner: ValueLearner, batch: _Batch):
    """Online Q (with trace) on steps 0..T-1 and target max-Q on steps 1..T."""
    B, T1, A, D = batch.inputs.shape
    nA = learner.team_spec.n_actions
    flat_now = batch.inputs[:, :-1].reshape(-1, D)
    q_now, trace = nn.forward_trace(learner.net, flat_now)
    q_now = q_now.reshape(B, T1 - 1, A, nA)
    q_next = nn.forward(learner.target_net, batch.inputs[:, 1:].reshape(-1, D)).reshape(B, T1 - 1, A, nA)
    avail_next = batch.avail[:, 1:]
    if learner.config.double_q:
        online_next = nn.forward(learner.net, batch.inputs[:, 1:].reshape(-1, D)).reshape(B, T1 - 1, A, nA)
        pick = np.where(avail_next, online_next, -np.inf).argmax(axis=-1)
        next_max = np.take_along_axis(q_next, pick[..., None], axis=-1)[..., 0]
    else:
        next_max = np.where(avail_next, q_next, -np.inf).max(axis=-1)
    chosen = np.take_along_axis(q_now, batch.actions[..., None], axis=-1)[..., 0]
    return chosen, next_max, flat_now, trace


def _apply_gradients(learner: ValueLearner, flat_now, trace, d_q_flat, mixer_grads=None) -> None:
    g = nn.backward(learner.net, flat_now, d_q_flat)
    grads = g.params()
    if mixer_grads is not None:
        grads = grads + mixer_grads
    clip = learner.config.grad_clip
    if clip > 0:
        total = np.sqrt(sum(float((a * a).sum()) for a in grads))
        if total > clip:
            scale = clip / total
            grads = [a * scale for a in grads]
    nn.adam_step(learner.parameter_arrays(), grads, learner.opt)
    learner._sync_targets_if_due()


def iql_train_step(learner: ValueLearner, episodes: list[TeamEpisode], gamma: float | None = None) -> float:
    """Per-agent TD regression; terminal steps regress straight to the reward."""
    if not episodes:
        raise LearnerError("empty batch")
    gamma = learner.config.gamma if gamma is None else gamma
    batch = _collate(learner, episodes)
    chosen, next_max, flat_now, trace = _q_values(learner, batch)
    y = batch.rewards[..., None] + gamma * batch.boot[..., None] * next_max
    diff = (chosen - y) * batch.pad[..., None]
    norm = batch.pad.sum() * learner.team_spec.n_agents
    loss = float((diff * diff).sum() / norm)
    d_chosen = 2.0 * diff / norm
    d_q = np.zeros(chosen.shape + (learner.team_spec.n_actions,))
    np.put_along_axis(d_q, batch.actions[..., None], d_chosen[..., None], axis=-1)
    _apply_gradients(learner, flat_now, trace, d_q.reshape(len(flat_now), -1))
    return loss


def team_td_train_step(learner: ValueLearner, episodes: list[TeamEpisode], gamma: float | None = None) -> float:
    """Team TD with additive (vdn) or monotonic (qmix) mixing."""
    if not episodes:
        raise LearnerError("empty batch")
    gamma = learner.config.gamma if gamma is None else gamma
    batch = _collate(learner, episodes)
    chosen, next_max, flat_now, trace = _q_values(learner, batch)
    B, T = batch.rewards.shape
    A = learner.team_spec.n_agents

    if learner.mixer is None:
        q_tot = chosen.sum(axis=-1)
        next_tot = next_max.sum(axis=-1)
        mix_cache = None
    else:
        flat_chosen = chosen.reshape(-1, A)
        flat_state = batch.states[:, :-1].reshape(-1, learner.team_spec.state_len)
        q_tot_flat, mix_cache = _mixer_forward(learner.mixer, flat_chosen, flat_state)
        q_tot = q_tot_flat.reshape(B, T)
        next_tot = _mixer_forward(
            learner.target_mixer,
            next_max.reshape(-1, A),
            batch.states[:, 1:].reshape(-1, learner.team_spec.state_len),
        )[0].reshape(B, T)

    y = batch.rewards + gamma * batch.boot * next_tot
    diff = (q_tot - y) * batch.pad
    norm = batch.pad.sum()
    loss = float((diff * diff).sum() / norm)
    d_tot = 2.0 * diff / norm

    mixer_grads = None
    if learner.mixer is None:
        d_chosen = np.broadcast_to(d_tot[..., None], chosen.shape)
    else:
        d_chosen_flat, mixer_grads = _mixer_backward(
            learner.mixer,
            chosen.reshape(-1, A),
            batch.states[:, :-1].reshape(-1, learner.team_spec.state_len),
            mix_cache,
            d_tot.reshape(-1),
        )
        d_chosen = d_chosen_flat.reshape(chosen.shape)

    d_q = np.zeros(chosen.shape + (learner.team_spec.n_actions,))
    np.put_along_axis(d_q, batch.actions[..., None], d_chosen[..., None], axis=-1)
    _apply_gradients(learner, flat_now, trace, d_q.reshape(len(flat_now), -1), mixer_grads)
    return loss


# -- construction and checkpoints --------------------------------------------

ALGORITHMS = ("iql", "vdn", "qmix", "bot", "random")


def make_learner(
    algo: str,
    team_spec: TeamSpec,
    config: LearnerConfig | None = None,
    seed: int = 0,
    scenario: ScenarioSpec | None = None,
) -> Learner:
    config = config or LearnerConfig()
    if algo in ("iql", "vdn", "qmix"):
        return ValueLearner(algo, team_spec, config, seed)
    if algo == "random":
        return RandomPolicy(team_spec)
    if algo == "bot":
        if scenario is None:
            raise LearnerError("the scripted bot needs the scenario")
        return ScriptedBot(scenario, team_spec.team)
    raise LearnerError(f"unknown algorithm {algo!r} (expected one of {ALGORITHMS})")


def save_learner(path, learner: Learner, extra_meta: dict | None = None) -> None:
    """One-file checkpoint: parameter arrays plus a reconstruction manifest."""
    spec = learner.team_spec
    meta = {
        "algo": learner.algo,
        "team": spec.team.name.lower(),
        "scenario": spec.scenario,
        "n_agents": spec.n_agents,
        "n_enemies": spec.n_enemies,
        "obs_len": spec.obs_len,
        "state_len": spec.state_len,
        "n_actions": spec.n_actions,
        "env_steps": learner.env_steps,
    }
    meta.update(learner.extra_meta())
    meta.update(extra_meta or {})
    arrays: dict[str, np.ndarray] = {"format_version": np.array([1], dtype=np.int64)}
    for i, p in enumerate(learner.parameter_arrays()):
        arrays[f"p{i}"] = p
    if isinstance(learner, ValueLearner):
        arrays["opt_scalars"] = np.array(
            [learner.opt.lr, learner.opt.beta1, learner.opt.beta2, learner.opt.eps, float(learner.opt.step)]
        )
        for i, (m, v) in enumerate(zip(learner.opt.m, learner.opt.v)):
            arrays[f"opt_m{i}"] = m
            arrays[f"opt_v{i}"] = v
    if isinstance(learner, ScriptedBot):
        meta["scenario_config"] = scenario_config(learner.scenario)
    blob = json.dumps(meta, sort_keys=True)
    arrays["meta"] = np.frombuffer(blob.encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_learner_meta(path) -> dict:
    with np.load(path) as data:
        return json.loads(bytes(data["meta"]).decode("utf-8"))


def load_learner(path, scenario: ScenarioSpec | None = None) -> Learner:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        team_spec = TeamSpec(
            team=Team[meta["team"].upper()],
            n_agents=meta["n_agents"],
            n_enemies=meta["n_enemies"],
            obs_len=meta["obs_len"],
            state_len=meta["state_len"],
            n_actions=meta["n_actions"],
            scenario=meta["scenario"],
        )
        algo = meta["algo"]
        if algo == "bot":
            if scenario is None:
                scenario = parse_scenario_config(meta["scenario_config"])
            learner: Learner = ScriptedBot(scenario, team_spec.team)
        elif algo == "random":
            learner = RandomPolicy(team_spec)
        else:
            config = LearnerConfig.from_json(meta["config"])
            learner = ValueLearner(algo, team_spec, config, seed=meta.get("seed", 0))
            for i, p in enumerate(learner.parameter_arrays()):
                np.copyto(p, data[f"p{i}"])
            learner.target_net.copy_from(learner.net)
            if learner.mixer is not None:
                learner.target_mixer.copy_from(learner.mixer)
            if "opt_scalars" in data:
                lr, b1, b2, eps, step = data["opt_scalars"]
                learner.opt = nn.OptimState(
                    lr=float(lr), beta1=float(b1), beta2=float(b2), eps=float(eps), step=int(step),
                    m=[data[f"opt_m{i}"] for i in range(len(learner.parameter_arrays()))],
                    v=[data[f"opt_v{i}"] for i in range(len(learner.parameter_arrays()))],
                )
            learner.train_steps = meta.get("train_steps", 0)
        learner.env_steps = meta.get("env_steps", 0)
    return learner
