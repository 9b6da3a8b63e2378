"""Training controllers and evaluation.

Three ways to train a team: against the scripted bot, paired against a
second learner that trains simultaneously, or against a frozen pool of
opponents with one member drawn per episode.  Evaluation periodically runs
a fixed number of greedy episodes; every run is reproducible from its seed
because episode seeds, exploration, opponent sampling and evaluation each
use an independent derived stream.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .engine import EngineConfig, Outcome, Team
from .env import BattleEnv, ReplayWriter, RewardConfig, replay_record
from .learners import Learner, LearnerConfig, TeamEpisode
from .seeding import STREAM_EVAL, STREAM_EXPLORE, STREAM_POOL, derive_seed, episode_seed


class TrainingError(ValueError):
    pass


class MisalignedRuns(TrainingError):
    pass


class MutablePoolMember(TrainingError):
    pass


class AsymmetricScenarioWarning(UserWarning):
    """Paired mode on an asymmetric scenario: results will favour one side."""


@dataclass(frozen=True)
class TrainConfig:
    """One training run's budget, evaluation cadence and hyperparameters."""

    total_env_steps: int = 300_000
    test_interval: int = 10_000
    test_episodes: int = 32
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    mode: str = "bot"
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    engine: EngineConfig | None = None
    reward: RewardConfig | None = None


@dataclass
class EvalPoint:
    env_step: int
    wins: int
    draws: int
    losses: int
    mean_return_red: float
    mean_return_blue: float

    @property
    def episodes(self) -> int:
        return self.wins + self.draws + self.losses

    @property
    def win_rate(self) -> float:
        return self.wins / self.episodes


@dataclass
class RunMetrics:
    """Evaluation trace of one seeded run, from the subject team's view.

    ``algo_red`` names the subject (the side whose wins are counted);
    ``algo_blue`` names the opponent.
    """

    scenario: str
    mode: str
    algo_red: str
    algo_blue: str
    seed: int
    points: list[EvalPoint] = field(default_factory=list)


@dataclass
class EpisodeResult:
    outcome: Outcome
    length: int
    return_red: float
    return_blue: float
    red_episode: TeamEpisode | None
    blue_episode: TeamEpisode | None


class _Recorder:
    def __init__(self, first, collect: bool):
        self.collect = collect
        self.obs = [first.observations.astype(np.float32)] if collect else None
        self.state = [first.state.astype(np.float32)] if collect else None
        self.masks = [first.masks.copy()] if collect else None
        self.actions: list[np.ndarray] = []
        self.rewards: list[float] = []

    def record(self, actions, result) -> None:
        if not self.collect:
            return
        self.actions.append(np.asarray(actions, dtype=np.int16))
        self.rewards.append(result.reward)
        self.obs.append(result.observations.astype(np.float32))
        self.state.append(result.state.astype(np.float32))
        self.masks.append(result.masks.copy())

    def episode(self) -> TeamEpisode | None:
        if not self.collect:
            return None
        return TeamEpisode(
            obs=np.stack(self.obs),
            state=np.stack(self.state),
            masks=np.stack(self.masks),
            actions=np.stack(self.actions),
            rewards=np.array(self.rewards),
        )


def run_episode(
    env: BattleEnv,
    red: Learner,
    blue: Learner,
    *,
    seed: int,
    epsilon_red: float = 0.0,
    epsilon_blue: float = 0.0,
    rng_red=None,
    rng_blue=None,
    collect_red: bool = False,
    collect_blue: bool = False,
    replay: ReplayWriter | None = None,
    episode_id: int = 0,
) -> EpisodeResult:
    """Lockstep episode: both teams act on their own observations each step."""
    red.begin_episode()
    blue.begin_episode()
    r_res, b_res = env.reset(seed)
    rec_r = _Recorder(r_res, collect_red)
    rec_b = _Recorder(b_res, collect_blue)
    if replay is not None:
        replay.write(replay_record(env, episode_id, 0, None, {"red": 0.0, "blue": 0.0}, None, None))
    ret_r = 0.0
    ret_b = 0.0
    steps = 0
    while not env.terminated:
        a_r = red.act(r_res.observations, r_res.masks, epsilon_red, rng_red)
        a_b = blue.act(b_res.observations, b_res.masks, epsilon_blue, rng_blue)
        r_res, b_res = env.step(a_r, a_b)
        steps += 1
        ret_r += r_res.reward
        ret_b += b_res.reward
        rec_r.record(a_r, r_res)
        rec_b.record(a_b, b_res)
        if replay is not None:
            replay.write(
                replay_record(
                    env,
                    episode_id,
                    steps,
                    {"red": [int(a) for a in a_r], "blue": [int(a) for a in a_b]},
                    {"red": r_res.reward, "blue": b_res.reward},
                    {"red": r_res.info, "blue": b_res.info},
                    r_res.outcome,
                )
            )
    return EpisodeResult(
        outcome=r_res.outcome,
        length=steps,
        return_red=ret_r,
        return_blue=ret_b,
        red_episode=rec_r.episode(),
        blue_episode=rec_b.episode(),
    )


@dataclass
class EvalResult:
    wins: int
    draws: int
    losses: int
    mean_return_red: float
    mean_return_blue: float


def evaluate(
    red: Learner,
    blue: Learner,
    scenario,
    n_episodes: int = 32,
    seed: int = 0,
    engine_config: EngineConfig | None = None,
    reward_config: RewardConfig | None = None,
    opponent_pool: "OpponentPool | None" = None,
) -> EvalResult:
    """Greedy head-to-head: no exploration, per-episode seeds from (seed, i).

    Counts are from red's perspective.  With ``opponent_pool``, blue is
    redrawn from the pool for every episode.
    """
    if n_episodes < 1:
        raise TrainingError("n_episodes must be >= 1")
    env = BattleEnv(scenario, engine_config, reward_config)
    rng_red = np.random.default_rng(derive_seed(STREAM_EVAL, seed, 0))
    rng_blue = np.random.default_rng(derive_seed(STREAM_EVAL, seed, 1))
    pool_rng = np.random.default_rng(derive_seed(STREAM_EVAL, seed, 2))
    wins = draws = losses = 0
    ret_r = 0.0
    ret_b = 0.0
    for i in range(n_episodes):
        opponent = blue if opponent_pool is None else opponent_pool.draw(pool_rng, record=False)
        ep = run_episode(
            env, red, opponent, seed=episode_seed(seed, i), rng_red=rng_red, rng_blue=rng_blue
        )
        if ep.outcome is Outcome.RED_WIN:
            wins += 1
        elif ep.outcome is Outcome.BLUE_WIN:
            losses += 1
        else:
            draws += 1
        ret_r += ep.return_red
        ret_b += ep.return_blue
    return EvalResult(wins, draws, losses, ret_r / n_episodes, ret_b / n_episodes)


def _eval_schedule(total: int, interval: int) -> list[int]:
    points = list(range(0, total + 1, interval))
    if points[-1] != total:
        points.append(total)
    return points


class _TrainLoop:
    """Shared skeleton: collect one episode, train, evaluate on schedule."""

    def __init__(self, scenario, config: TrainConfig, seed: int):
        self.scenario = scenario
        self.config = config
        self.seed = seed
        self.env = BattleEnv(scenario, config.engine, config.reward)
        self.rng_red = np.random.default_rng(derive_seed(STREAM_EXPLORE, seed, 0))
        self.rng_blue = np.random.default_rng(derive_seed(STREAM_EXPLORE, seed, 1))
        self.steps_done = 0
        self.episode_index = 0
        self.pending = _eval_schedule(config.total_env_steps, config.test_interval)

    def epsilon(self, learner: Learner) -> float:
        if not learner.trainable or learner.frozen:
            return 0.0
        cfg = getattr(learner, "config", None) or LearnerConfig()
        return cfg.epsilon_at(self.steps_done)

    def collect(self, red: Learner, blue: Learner) -> EpisodeResult:
        ep = run_episode(
            self.env,
            red,
            blue,
            seed=episode_seed(self.seed, self.episode_index),
            epsilon_red=self.epsilon(red),
            epsilon_blue=self.epsilon(blue),
            rng_red=self.rng_red,
            rng_blue=self.rng_blue,
            collect_red=red.trainable and not red.frozen,
            collect_blue=blue.trainable and not blue.frozen,
        )
        self.episode_index += 1
        self.steps_done += ep.length
        return ep

    def due_evals(self) -> list[int]:
        due = []
        while self.pending and self.steps_done >= self.pending[0]:
            due.append(self.pending.pop(0))
        return due

    @property
    def finished(self) -> bool:
        return self.steps_done >= self.config.total_env_steps and not self.pending


def _eval_point(loop: _TrainLoop, nominal: int, point_idx: int, red, blue, pool=None) -> EvalPoint:
    res = evaluate(
        red,
        blue,
        loop.scenario,
        n_episodes=loop.config.test_episodes,
        seed=derive_seed(STREAM_EVAL, loop.seed, point_idx),
        engine_config=loop.config.engine,
        reward_config=loop.config.reward,
        opponent_pool=pool,
    )
    return EvalPoint(nominal, res.wins, res.draws, res.losses, res.mean_return_red, res.mean_return_blue)


def train_vs_bot(algo: Learner, scenario, config: TrainConfig, seed: int = 0) -> RunMetrics:
    """Red trains against the frozen scripted bot on blue."""
    from .learners import ScriptedBot

    blue = ScriptedBot(scenario, Team.BLUE)
    loop = _TrainLoop(scenario, config, seed)
    metrics = RunMetrics(scenario.name, "bot", algo.algo, "bot", seed)
    point_idx = 0
    for nominal in loop.due_evals():  # the untouched-network baseline point
        metrics.points.append(_eval_point(loop, nominal, point_idx, algo, blue))
        point_idx += 1
    while not loop.finished:
        ep = loop.collect(algo, blue)
        algo.observe(ep.red_episode)
        algo.train_step()
        algo.env_steps = loop.steps_done
        for nominal in loop.due_evals():
            metrics.points.append(_eval_point(loop, nominal, point_idx, algo, blue))
            point_idx += 1
    return metrics


def train_paired(
    algo_a: Learner, algo_b: Learner, scenario, config: TrainConfig, seed: int = 0
) -> tuple[RunMetrics, RunMetrics]:
    """Both learners train simultaneously from the same episode stream.

    A plays red, B plays blue.  Each evaluation runs one greedy set and
    reports it from both perspectives, so A's wins equal B's losses exactly.
    """
    if not scenario.symmetric:
        warnings.warn(
            f"paired training on asymmetric scenario {scenario.name!r}", AsymmetricScenarioWarning
        )
    loop = _TrainLoop(scenario, config, seed)
    metrics_a = RunMetrics(scenario.name, "paired", algo_a.algo, algo_b.algo, seed)
    metrics_b = RunMetrics(scenario.name, "paired", algo_b.algo, algo_a.algo, seed)

    def both(nominal: int, point_idx: int) -> None:
        point = _eval_point(loop, nominal, point_idx, algo_a, algo_b)
        metrics_a.points.append(point)
        metrics_b.points.append(
            EvalPoint(nominal, point.losses, point.draws, point.wins, point.mean_return_blue, point.mean_return_red)
        )

    point_idx = 0
    for nominal in loop.due_evals():
        both(nominal, point_idx)
        point_idx += 1
    while not loop.finished:
        ep = loop.collect(algo_a, algo_b)
        algo_a.observe(ep.red_episode)
        algo_b.observe(ep.blue_episode)
        algo_a.train_step()
        algo_b.train_step()
        algo_a.env_steps = loop.steps_done
        algo_b.env_steps = loop.steps_done
        for nominal in loop.due_evals():
            both(nominal, point_idx)
            point_idx += 1
    return metrics_a, metrics_b


@dataclass
class OpponentPool:
    """Frozen opponents for the mixed mode; one is drawn per episode."""

    members: list[Learner]
    names: list[str]
    weights: np.ndarray | None = None
    draw_counts: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.members:
            raise TrainingError("opponent pool must not be empty")
        for name, member in zip(self.names, self.members):
            if not member.frozen:
                raise MutablePoolMember(f"pool member {name!r} is not frozen")
        self.draw_counts = np.zeros(len(self.members), dtype=np.int64)

    def draw(self, rng, record: bool = True) -> Learner:
        if self.weights is None:
            idx = int(rng.integers(0, len(self.members)))
        else:
            idx = int(rng.choice(len(self.members), p=self.weights))
        if record:
            self.draw_counts[idx] += 1
        return self.members[idx]

    def hashes(self) -> list[str]:
        return [m.checkpoint_hash() for m in self.members]


def train_mixed(
    algo: Learner, pool: OpponentPool, scenario, config: TrainConfig, seed: int = 0
) -> RunMetrics:
    """Red trains against a per-episode draw from the frozen pool."""
    before = pool.hashes()
    loop = _TrainLoop(scenario, config, seed)
    pool_rng = np.random.default_rng(derive_seed(STREAM_POOL, seed))
    metrics = RunMetrics(scenario.name, "mixed", algo.algo, "pool", seed)
    point_idx = 0
    for nominal in loop.due_evals():
        metrics.points.append(_eval_point(loop, nominal, point_idx, algo, None, pool=pool))
        point_idx += 1
    while not loop.finished:
        opponent = pool.draw(pool_rng)
        ep = loop.collect(algo, opponent)
        algo.observe(ep.red_episode)
        algo.train_step()
        algo.env_steps = loop.steps_done
        for nominal in loop.due_evals():
            metrics.points.append(_eval_point(loop, nominal, point_idx, algo, None, pool=pool))
            point_idx += 1
    if pool.hashes() != before:
        raise MutablePoolMember("a pool member's parameters changed during the run")
    return metrics


@dataclass(frozen=True)
class PoolRecipe:
    """How to build an opponent pool: which algorithms, how long, plus the bot."""

    algos: tuple[str, ...] = ("iql", "vdn", "qmix")
    steps_per_member: int = 150_000
    include_bot: bool = True
    learner: LearnerConfig = field(default_factory=LearnerConfig)


def build_opponent_pool(scenario, recipe: PoolRecipe, seed: int = 0, config: TrainConfig | None = None) -> OpponentPool:
    """Train each member on the opponent side against the bot, then freeze.

    Members are trained as blue so their shapes fit the opponent slot even
    on asymmetric scenarios.
    """
    from .learners import ScriptedBot, make_learner

    if not recipe.algos and not recipe.include_bot:
        raise TrainingError("empty pool recipe")
    members: list[Learner] = []
    names: list[str] = []
    base = config or TrainConfig(
        total_env_steps=recipe.steps_per_member,
        test_interval=max(1, recipe.steps_per_member),  # endpoints only
        learner=recipe.learner,
    )
    for k, algo_name in enumerate(recipe.algos):
        member_seed = derive_seed(STREAM_POOL, seed, k)
        learner = make_learner(
            algo_name,
            BattleEnv(scenario, base.engine, base.reward).team_spec(Team.BLUE),
            recipe.learner,
            seed=member_seed,
        )
        _train_blue_vs_bot(learner, scenario, base, member_seed)
        learner.freeze()
        members.append(learner)
        names.append(algo_name)
    if recipe.include_bot:
        members.append(ScriptedBot(scenario, Team.BLUE))
        names.append("bot")
    return OpponentPool(members=members, names=names)


def _train_blue_vs_bot(learner: Learner, scenario, config: TrainConfig, seed: int) -> None:
    """Pool-building loop: red is the bot, blue is the member in training."""
    from .learners import ScriptedBot

    red = ScriptedBot(scenario, Team.RED)
    loop = _TrainLoop(scenario, config, seed)
    while loop.steps_done < config.total_env_steps:
        ep = loop.collect(red, learner)
        learner.observe(ep.blue_episode)
        learner.train_step()
        learner.env_steps = loop.steps_done


# -- aggregation and persistence ----------------------------------------------


@dataclass
class CurvePoint:
    env_step: int
    median: float
    mean: float
    q1: float
    q3: float


def median_win_rate(runs: list[RunMetrics]) -> list[CurvePoint]:
    """Per evaluation point: median/mean/quartiles of win rate across runs."""
    if not runs:
        raise MisalignedRuns("no runs to aggregate")
    grids = [[p.env_step for p in run.points] for run in runs]
    if any(g != grids[0] for g in grids):
        raise MisalignedRuns("runs do not share evaluation points")
    out = []
    for i, env_step in enumerate(grids[0]):
        rates = np.array([run.points[i].win_rate for run in runs])
        out.append(
            CurvePoint(
                env_step=env_step,
                median=float(np.median(rates)),
                mean=float(rates.mean()),
                q1=float(np.percentile(rates, 25)),
                q3=float(np.percentile(rates, 75)),
            )
        )
    return out


CSV_COLUMNS = [
    "env_step", "wins", "draws", "losses", "win_rate",
    "mean_return_red", "mean_return_blue", "seed", "mode", "scenario", "algo_red", "algo_blue",
]


def write_metrics_csv(metrics: RunMetrics, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for p in metrics.points:
            writer.writerow(
                [
                    p.env_step, p.wins, p.draws, p.losses, repr(p.win_rate),
                    repr(p.mean_return_red), repr(p.mean_return_blue),
                    metrics.seed, metrics.mode, metrics.scenario, metrics.algo_red, metrics.algo_blue,
                ]
            )


def read_metrics_csv(path) -> RunMetrics:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise TrainingError(f"empty metrics file {path}")
    first = rows[0]
    metrics = RunMetrics(
        scenario=first["scenario"], mode=first["mode"],
        algo_red=first["algo_red"], algo_blue=first["algo_blue"], seed=int(first["seed"]),
    )
    for row in rows:
        metrics.points.append(
            EvalPoint(
                env_step=int(row["env_step"]),
                wins=int(row["wins"]),
                draws=int(row["draws"]),
                losses=int(row["losses"]),
                mean_return_red=float(row["mean_return_red"]),
                mean_return_blue=float(row["mean_return_blue"]),
            )
        )
    return metrics


def curve_to_json(points: list[CurvePoint]) -> list[dict]:
    return [
        {"env_step": p.env_step, "median": p.median, "mean": p.mean, "q1": p.q1, "q3": p.q3}
        for p in points
    ]
