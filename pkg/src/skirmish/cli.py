"""Command-line entry points.

Subcommands: train, eval, pit, pool, serve, analyze, scenarios, replay,
bench.  Configuration precedence is built-in defaults < --config file <
command-line flags; every run directory gets a manifest with the fully
resolved configuration so it can be reproduced bit-for-bit.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .engine import EngineConfig, Team
from .env import BattleEnv, ReplayWriter, RewardConfig
from .learners import ALGORITHMS, Learner, LearnerConfig, load_learner, load_learner_meta, make_learner
from .scenario import ScenarioSpec, builtin_scenarios, get_scenario, parse_scenario_config
from .seeding import STREAM_INIT, derive_seed
from .training import (
    OpponentPool,
    PoolRecipe,
    TrainConfig,
    build_opponent_pool,
    curve_to_json,
    evaluate,
    median_win_rate,
    run_episode,
    train_mixed,
    train_paired,
    train_vs_bot,
    write_metrics_csv,
)


class CliError(ValueError):
    pass


class CheckpointScenarioMismatch(CliError):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", default="3m", help="built-in scenario name or a scenario config file")
    p.add_argument("--spawn-spread", type=float, default=None, help="override spawn jitter half-width")
    p.add_argument("--config", default=None, help="JSON file overriding engine/reward/learner defaults")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skirmish",
        description="Deterministic dual-team micro-combat arena and self-play benchmark.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"skirmish {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("train", help="train one side in bot, paired or mixed mode", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--mode", choices=("bot", "paired", "mixed"), default="bot", help="training controller")
    p.add_argument("--algo", default="iql", choices=("iql", "vdn", "qmix"), help="learning algorithm")
    p.add_argument("--algo-b", default=None, choices=("iql", "vdn", "qmix"), help="second learner (paired mode)")
    p.add_argument("--pool", default=None, help="opponent pool directory (mixed mode)")
    p.add_argument("--steps", type=int, default=300_000, help="training env steps per seed")
    p.add_argument("--seeds", type=int, default=5, help="number of seeded runs")
    p.add_argument("--seed-base", type=int, default=0, help="first seed value")
    p.add_argument("--test-interval", type=int, default=10_000, help="env steps between evaluations")
    p.add_argument("--test-episodes", type=int, default=32, help="greedy episodes per evaluation point")
    p.add_argument("--jobs", type=int, default=1, help="seeds trained in parallel processes")
    p.add_argument("--out", default="runs/train", help="output directory")

    p = sub.add_parser("eval", help="evaluate two policies head to head", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--red", default="bot", help="checkpoint path, 'bot' or 'random'")
    p.add_argument("--blue", default="random", help="checkpoint path, 'bot' or 'random'")
    p.add_argument("--episodes", type=int, default=32, help="evaluation episodes")
    p.add_argument("--seed", type=int, default=0, help="evaluation seed")
    p.add_argument("--out", default=None, help="write the result as JSON here")

    p = sub.add_parser("pit", help="pit two policies and optionally record replays", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--red", default="bot", help="checkpoint path, 'bot' or 'random'")
    p.add_argument("--blue", default="random", help="checkpoint path, 'bot' or 'random'")
    p.add_argument("--episodes", type=int, default=32, help="episodes to play")
    p.add_argument("--seed", type=int, default=0, help="evaluation seed")
    p.add_argument("--replay-out", default=None, help="write replay JSONL here")

    p = sub.add_parser("pool", help="build a frozen opponent pool", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--algos", default="iql,vdn,qmix", help="comma-separated member algorithms")
    p.add_argument("--steps-per-member", type=int, default=150_000, help="training env steps per member")
    p.add_argument("--no-bot", action="store_true", help="leave the scripted bot out of the pool")
    p.add_argument("--seed", type=int, default=0, help="pool build seed")
    p.add_argument("--out", default="runs/pool", help="output directory")

    p = sub.add_parser("serve", help="serve lockstep protocol sessions", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--host", default="127.0.0.1", help="bind address")
    p.add_argument("--port", type=int, default=7777, help="bind port (0 picks a free one)")
    p.add_argument("--episodes", type=int, default=100, help="episodes per session")
    p.add_argument("--seed", type=int, default=0, help="episode seed base")
    p.add_argument("--bot-team", choices=("red", "blue"), default=None, help="play this side in-process")
    p.add_argument("--timeout", type=float, default=None, help="act deadline in seconds (forfeit on miss)")

    p = sub.add_parser("analyze", help="aggregate metrics and analyze replays", formatter_class=fmt)
    p.add_argument("--metrics-dir", default=None, help="directory of metrics CSV files")
    p.add_argument("--replays", nargs="*", default=[], help="replay JSONL files for diversity analysis")
    p.add_argument("--diversity-bandwidth", type=float, default=None, help="mean-shift bandwidth (default adaptive)")
    p.add_argument("--out", default="runs/analysis", help="output directory")

    p = sub.add_parser("scenarios", help="list the built-in scenarios", formatter_class=fmt)

    p = sub.add_parser("replay", help="summarize a replay file", formatter_class=fmt)
    p.add_argument("--file", required=True, help="replay JSONL file")

    p = sub.add_parser("bench", help="measure env steps per second with random policies", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--steps", type=int, default=30_000, help="env steps to run")
    p.add_argument("--seed", type=int, default=0, help="benchmark seed")
    return parser


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _resolve_scenario(args, overrides: dict) -> ScenarioSpec:
    name = args.scenario
    if Path(name).is_file():
        spec = parse_scenario_config(Path(name).read_text(encoding="utf-8"))
    else:
        spec = get_scenario(name)
    scn = overrides.get("scenario", {})
    if scn:
        spec = dataclasses.replace(spec, **scn)
    if getattr(args, "spawn_spread", None) is not None:
        spec = dataclasses.replace(spec, spawn_spread=args.spawn_spread)
    return spec


def _build_section(cls, overrides: dict, key: str):
    data = overrides.get(key, {})
    if key == "learner" and "hidden" in data:
        data = dict(data, hidden=tuple(data["hidden"]))
    return cls(**data) if data else cls()


def _policy(label: str, scenario: ScenarioSpec, team: Team, env: BattleEnv, seed: int) -> Learner:
    if label == "bot":
        return make_learner("bot", env.team_spec(team), scenario=scenario)
    if label == "random":
        return make_learner("random", env.team_spec(team))
    learner = load_learner(label)
    if learner.team_spec.scenario != scenario.name:
        raise CheckpointScenarioMismatch(
            f"checkpoint {label} was trained on {learner.team_spec.scenario!r}, not {scenario.name!r}"
        )
    if learner.team_spec.team is not team:
        raise CliError(f"checkpoint {label} plays {learner.team_spec.team.name.lower()}, not {team.name.lower()}")
    return learner


def _manifest(path: Path, args, extra: dict) -> None:
    payload = {
        "version": __version__,
        "argv": sys.argv[1:],
        "resolved": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
    }
    payload.update(extra)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str), encoding="utf-8")


# -- subcommand bodies ---------------------------------------------------------


def _train_one_seed(payload: tuple) -> list[str]:
    """Run one seed; returns written artifact paths (multiprocessing-safe)."""
    args, overrides, seed, out = payload
    scenario = _resolve_scenario(args, overrides)
    engine = _build_section(EngineConfig, overrides, "engine")
    reward = _build_section(RewardConfig, overrides, "reward")
    learner_cfg = _build_section(LearnerConfig, overrides, "learner")
    config = TrainConfig(
        total_env_steps=args.steps,
        test_interval=args.test_interval,
        test_episodes=args.test_episodes,
        mode=args.mode,
        learner=learner_cfg,
        engine=engine,
        reward=reward,
    )
    env = BattleEnv(scenario, engine, reward)
    out = Path(out)
    written: list[str] = []
    from .learners import save_learner

    if args.mode == "bot":
        red = make_learner(args.algo, env.team_spec(Team.RED), learner_cfg, seed=derive_seed(STREAM_INIT, seed))
        metrics = train_vs_bot(red, scenario, config, seed=seed)
        runs = [metrics]
        ckpts = [(red, out / f"checkpoint_seed{seed}_{args.algo}_red.npz")]
    elif args.mode == "paired":
        algo_b = args.algo_b or args.algo
        red = make_learner(args.algo, env.team_spec(Team.RED), learner_cfg, seed=derive_seed(STREAM_INIT, seed, 0))
        blue = make_learner(algo_b, env.team_spec(Team.BLUE), learner_cfg, seed=derive_seed(STREAM_INIT, seed, 1))
        ma, mb = train_paired(red, blue, scenario, config, seed=seed)
        runs = [ma, mb]
        ckpts = [
            (red, out / f"checkpoint_seed{seed}_{args.algo}_red.npz"),
            (blue, out / f"checkpoint_seed{seed}_{algo_b}_blue.npz"),
        ]
    else:
        pool = _load_pool(Path(args.pool))
        red = make_learner(args.algo, env.team_spec(Team.RED), learner_cfg, seed=derive_seed(STREAM_INIT, seed))
        metrics = train_mixed(red, pool, scenario, config, seed=seed)
        runs = [metrics]
        ckpts = [(red, out / f"checkpoint_seed{seed}_{args.algo}_red.npz")]

    for i, metrics in enumerate(runs):
        suffix = "" if len(runs) == 1 else ("_red" if i == 0 else "_blue")
        path = out / f"metrics_seed{seed}{suffix}.csv"
        write_metrics_csv(metrics, path)
        written.append(str(path))
    for learner, path in ckpts:
        save_learner(path, learner, {"train_seed": seed, "mode": args.mode})
        written.append(str(path))
    return written


def cmd_train(args) -> int:
    if args.mode == "paired" and args.algo_b is None:
        print("train: --mode paired requires --algo-b", file=sys.stderr)
        return 2
    if args.mode == "mixed" and args.pool is None:
        print("train: --mode mixed requires --pool", file=sys.stderr)
        return 2
    overrides = _load_config_file(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [args.seed_base + k for k in range(args.seeds)]
    payloads = [(args, overrides, seed, str(out)) for seed in seeds]
    if args.jobs > 1:
        import concurrent.futures

        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for _ in pool.map(_train_one_seed, payloads):
                pass
    else:
        for payload in payloads:
            _train_one_seed(payload)

    from .training import read_metrics_csv

    primary = [read_metrics_csv(out / f"metrics_seed{s}.csv")
               if (out / f"metrics_seed{s}.csv").exists()
               else read_metrics_csv(out / f"metrics_seed{s}_red.csv")
               for s in seeds]
    aggregate = {
        "scenario": primary[0].scenario,
        "mode": primary[0].mode,
        "algo_red": primary[0].algo_red,
        "algo_blue": primary[0].algo_blue,
        "seeds": seeds,
        "median_win_rate": curve_to_json(median_win_rate(primary)),
    }
    (out / "aggregate.json").write_text(json.dumps(aggregate, indent=2, sort_keys=True), encoding="utf-8")
    _manifest(out / "manifest.json", args, {"seeds": seeds, "config_file": _load_config_file(args.config)})
    print(f"wrote {len(seeds)} run(s) to {out}")
    return 0


def _eval_common(args) -> tuple[ScenarioSpec, BattleEnv, Learner, Learner]:
    overrides = _load_config_file(args.config)
    scenario = _resolve_scenario(args, overrides)
    engine = _build_section(EngineConfig, overrides, "engine")
    reward = _build_section(RewardConfig, overrides, "reward")
    env = BattleEnv(scenario, engine, reward)
    red = _policy(args.red, scenario, Team.RED, env, args.seed)
    blue = _policy(args.blue, scenario, Team.BLUE, env, args.seed)
    return scenario, env, red, blue


def cmd_eval(args) -> int:
    scenario, env, red, blue = _eval_common(args)
    result = evaluate(red, blue, scenario, n_episodes=args.episodes, seed=args.seed,
                      engine_config=env.engine_config, reward_config=env.reward_config)
    payload = {
        "scenario": scenario.name, "red": args.red, "blue": args.blue,
        "episodes": args.episodes, "seed": args.seed,
        "wins": result.wins, "draws": result.draws, "losses": result.losses,
        "win_rate": result.wins / args.episodes,
        "mean_return_red": result.mean_return_red, "mean_return_blue": result.mean_return_blue,
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    print(text)
    return 0


def cmd_pit(args) -> int:
    scenario, env, red, blue = _eval_common(args)
    writer = ReplayWriter(args.replay_out) if args.replay_out else None
    rng_red = np.random.default_rng(derive_seed(1, args.seed, 0))
    rng_blue = np.random.default_rng(derive_seed(1, args.seed, 1))
    from .seeding import episode_seed

    wins = draws = losses = 0
    ret_r = ret_b = 0.0
    try:
        for i in range(args.episodes):
            ep = run_episode(env, red, blue, seed=episode_seed(args.seed, i),
                             rng_red=rng_red, rng_blue=rng_blue, replay=writer, episode_id=i)
            wins += ep.outcome.value == "red_win"
            losses += ep.outcome.value == "blue_win"
            draws += ep.outcome.value == "draw"
            ret_r += ep.return_red
            ret_b += ep.return_blue
    finally:
        if writer is not None:
            writer.close()
    print(f"scenario {scenario.name}: {args.red} (red) vs {args.blue} (blue), {args.episodes} episodes")
    print(f"  red wins {wins}  draws {draws}  red losses {losses}")
    print(f"  mean return red {ret_r / args.episodes:.4f}  blue {ret_b / args.episodes:.4f}")
    if args.replay_out:
        print(f"  replay written to {args.replay_out}")
    return 0


def _load_pool(directory: Path) -> OpponentPool:
    manifest_path = directory / "pool_manifest.json"
    if not manifest_path.is_file():
        raise CliError(f"{directory} has no pool_manifest.json")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    members = []
    names = []
    for entry in manifest["members"]:
        learner = load_learner(directory / entry["file"])
        learner.freeze()
        members.append(learner)
        names.append(entry["algo"])
    return OpponentPool(members=members, names=names)


def cmd_pool(args) -> int:
    overrides = _load_config_file(args.config)
    scenario = _resolve_scenario(args, overrides)
    learner_cfg = _build_section(LearnerConfig, overrides, "learner")
    algos = tuple(a for a in args.algos.split(",") if a)
    recipe = PoolRecipe(
        algos=algos,
        steps_per_member=args.steps_per_member,
        include_bot=not args.no_bot,
        learner=learner_cfg,
    )
    pool = build_opponent_pool(scenario, recipe, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .learners import save_learner

    entries = []
    for name, member in zip(pool.names, pool.members):
        filename = f"member_{len(entries)}_{name}.npz"
        save_learner(out / filename, member, {"pool_seed": args.seed})
        entries.append({
            "algo": name, "file": filename, "scenario": scenario.name,
            "steps": member.env_steps, "hash": member.checkpoint_hash(),
        })
    (out / "pool_manifest.json").write_text(
        json.dumps({"scenario": scenario.name, "seed": args.seed, "members": entries}, indent=2),
        encoding="utf-8",
    )
    _manifest(out / "manifest.json", args, {})
    print(f"built pool of {len(entries)} members in {out}")
    return 0


def cmd_serve(args) -> int:
    from .protocol import serve

    overrides = _load_config_file(args.config)
    scenario = _resolve_scenario(args, overrides)
    engine = _build_section(EngineConfig, overrides, "engine")
    reward = _build_section(RewardConfig, overrides, "reward")
    bot_team = Team[args.bot_team.upper()] if args.bot_team else None
    served = serve(
        scenario, host=args.host, port=args.port, seed=args.seed, episodes=args.episodes,
        engine_config=engine, reward_config=reward, bot_team=bot_team, act_timeout=args.timeout,
    )
    outcomes = [ep.outcome for ep in served]
    print(f"served {len(served)} episodes: "
          f"{outcomes.count('red_win')} red wins, {outcomes.count('blue_win')} blue wins, "
          f"{outcomes.count('draw')} draws")
    return 0


def cmd_analyze(args) -> int:
    from .analysis import NoInputFiles, action_diversity, aggregate_runs, log_from_replay, write_summary
    from .env import read_replay

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    did_anything = False
    if args.metrics_dir:
        files = sorted(Path(args.metrics_dir).glob("*.csv"))
        if not files:
            raise NoInputFiles(f"no metrics CSV files in {args.metrics_dir}")
        summary = aggregate_runs(files)
        write_summary(summary, out)
        print(f"aggregated {len(files)} metrics files into {out}")
        did_anything = True
    for replay_path in args.replays:
        records = read_replay(replay_path)
        log = log_from_replay(records)
        report = action_diversity(log, args.diversity_bandwidth)
        dest = out / (Path(replay_path).stem + "_diversity.json")
        dest.write_text(json.dumps(report.to_json(), indent=2), encoding="utf-8")
        print(f"{replay_path}: {report.n_clusters} joint-action clusters "
              f"(explained variance {report.explained_variance[0]:.3f}/{report.explained_variance[1]:.3f})")
        did_anything = True
    if not did_anything:
        raise NoInputFiles("nothing to analyze: pass --metrics-dir and/or --replays")
    return 0


def cmd_scenarios(args) -> int:
    def describe(comp) -> str:
        return ", ".join(f"{c} {s.name}" for s, c in comp)

    print(f"{'name':<12} {'limit':>5}  {'sym':<4} red / blue")
    for name, spec in builtin_scenarios().items():
        sym = "yes" if spec.symmetric else "no"
        print(f"{name:<12} {spec.episode_step_limit:>5}  {sym:<4} {describe(spec.red_composition)} / {describe(spec.blue_composition)}")
    return 0


def cmd_replay(args) -> int:
    from .env import read_replay

    records = read_replay(args.file)
    episodes: dict[int, dict] = {}
    for rec in records:
        ep = episodes.setdefault(rec["episode"], {"steps": 0, "outcome": None})
        ep["steps"] = max(ep["steps"], rec["step"])
        if rec.get("outcome"):
            ep["outcome"] = rec["outcome"]
    print(f"{args.file}: {len(records)} records, {len(episodes)} episodes (schema v{records[0]['v']})")
    for idx in sorted(episodes):
        ep = episodes[idx]
        print(f"  episode {idx}: {ep['steps']} steps, outcome {ep['outcome']}")
    return 0


def cmd_bench(args) -> int:
    overrides = _load_config_file(args.config)
    scenario = _resolve_scenario(args, overrides)
    engine = _build_section(EngineConfig, overrides, "engine")
    reward = _build_section(RewardConfig, overrides, "reward")
    env = BattleEnv(scenario, engine, reward)
    red = make_learner("random", env.team_spec(Team.RED))
    blue = make_learner("random", env.team_spec(Team.BLUE))
    rng_r = np.random.default_rng(derive_seed(7, args.seed, 0))
    rng_b = np.random.default_rng(derive_seed(7, args.seed, 1))
    # Warm-up episode so first-use allocations stay out of the measurement.
    r_res, b_res = env.reset(0)
    while not env.terminated:
        r_res, b_res = env.step(red.act(r_res.observations, r_res.masks, 0.0, rng_r),
                                blue.act(b_res.observations, b_res.masks, 0.0, rng_b))
    steps = 0
    episode = 0
    start = time.perf_counter()
    while steps < args.steps:
        r_res, b_res = env.reset(episode)
        episode += 1
        while not env.terminated and steps < args.steps:
            r_res, b_res = env.step(red.act(r_res.observations, r_res.masks, 0.0, rng_r),
                                    blue.act(b_res.observations, b_res.masks, 0.0, rng_b))
            steps += 1
    elapsed = time.perf_counter() - start
    rate = steps / elapsed
    print(f"scenario {scenario.name}: {steps} env steps in {elapsed:.3f}s -> {rate:,.0f} steps/s")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "pit": cmd_pit,
    "pool": cmd_pool,
    "serve": cmd_serve,
    "analyze": cmd_analyze,
    "scenarios": cmd_scenarios,
    "replay": cmd_replay,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (CliError, ValueError) as exc:
        print(f"skirmish {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures
        print(f"skirmish {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
