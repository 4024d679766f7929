"""Command-line pipeline.

    ditto collect        --run NAME [--env patrol] [--seed S] [--expert-episodes N]
    ditto train-wm       --run NAME
    ditto encode         --run NAME
    ditto train-agent    --run NAME --agent {ditto,dgail,dbc,bc} [--reward K] [--horizon H] [--seeds 0,1,2]
    ditto evaluate       --run NAME --agent ... [--seeds ...]
    ditto ablate-horizon --run NAME [--horizons 3,9,15]
    ditto plot           RUN_DIR [RUN_DIR ...]

Every run lives in ``<runs-dir>/<name>/``::

    config.echo   data/   wm/   latents/   agent/   eval/   plots/

Configuration is layered: defaults, then the run's ``config.echo`` (written by
``collect``), then ``--config FILE``, then ``--set key=value`` pairs, then
the dedicated flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import AGENT_KINDS, REWARD_KINDS, TrainConfig, parse_flat
from .datastore import LatentStore, ProvenanceError, read_dataset, write_dataset
from .envsim import NoisyExpert, RandomPolicy, ScriptedExpert, collect_episodes, collect_mixture, make_env
from .evaluation import RunReport, eval_dict, evaluate, mean_stderr
from .plotting import band_plot, write_band_csv

log = logging.getLogger("ditto")


class MissingArtifactError(RuntimeError):
    """An upstream pipeline phase has not been run for this run directory."""


# ---------------------------------------------------------------------------
# Run directory


class RunDir:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    config = property(lambda self: self.root / "config.echo")
    data = property(lambda self: self.root / "data")
    wm = property(lambda self: self.root / "wm")
    latents = property(lambda self: self.root / "latents")
    agent = property(lambda self: self.root / "agent")
    eval = property(lambda self: self.root / "eval")
    plots = property(lambda self: self.root / "plots")

    @property
    def wm_ckpt(self) -> Path:
        return self.wm / "model.ckpt"

    @property
    def latent_file(self) -> Path:
        return self.latents / "expert.npz"

    def require(self, path: Path, phase: str, what: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(f"{what} not found at {path}; run `ditto {phase} --run {self.root.name}` first")
        return path


def agent_name(kind: str, expert_episodes: int, horizon: int, seed: int) -> str:
    if kind == "bc" or kind == "dbc":
        return f"{kind}_ne{expert_episodes}_s{seed}"
    return f"{kind}_ne{expert_episodes}_h{horizon}_s{seed}"


def git_hash() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        return out.stdout.strip() if out.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        return ""


# ---------------------------------------------------------------------------
# Config handling


def build_config(args: argparse.Namespace, run: RunDir | None) -> TrainConfig:
    cfg = TrainConfig()
    if run is not None and run.config.exists():
        cfg = TrainConfig.load(run.config)
    if getattr(args, "config", None):
        for key, value in parse_flat(Path(args.config).read_text()).items():
            cfg.set(key, value)
    for item in getattr(args, "set", None) or []:
        key, _, value = item.partition("=")
        cfg.set(key.strip(), value.strip())
    flags = {
        "seed": "seed", "env": "env.name", "agent": "agent.kind", "reward": "reward.kind",
        "horizon": "agent.horizon", "expert_episodes": "data.expert_episodes",
    }
    for attr, key in flags.items():
        value = getattr(args, attr, None)
        if attr == "agent" and value == "expert":
            continue
        if value is not None:
            cfg.set(key, value)
    cfg.validate()
    return cfg


def parse_seeds(text: str | None, default: int) -> list[int]:
    if not text:
        return [default]
    seeds: list[int] = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    return seeds


def stream_seeds(seed: int) -> dict[str, int]:
    """Independent seeds for the data streams of one run."""
    children = np.random.SeedSequence(seed).spawn(3)
    values = [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]
    return dict(zip(("wm", "expert", "eval"), values))


# ---------------------------------------------------------------------------
# Phases


def cmd_collect(cfg: TrainConfig, run: RunDir) -> dict:
    env = make_env(cfg.env.name)
    seeds = stream_seeds(cfg.seed)
    n_random = int(round(cfg.data.wm_episodes * cfg.data.random_fraction))
    n_noisy = cfg.data.wm_episodes - n_random
    mixture = [(p, n) for p, n in ((RandomPolicy(env.spec.num_actions), n_random),
                                   (NoisyExpert(env, cfg.data.noise_eps), n_noisy)) if n > 0]
    wm_eps = collect_mixture(env, mixture, seeds["wm"]) if mixture else []
    expert_eps = collect_episodes(ScriptedExpert(env), env, cfg.data.expert_episodes, seeds["expert"])
    write_dataset(run.data, "wm", wm_eps, env.spec.num_actions)
    write_dataset(run.data, "expert", expert_eps, env.spec.num_actions)
    cfg.save(run.config)
    log.info("collected %d world-model and %d expert episodes", len(wm_eps), len(expert_eps))
    return {"wm_episodes": len(wm_eps), "expert_episodes": len(expert_eps)}


def _load_split(run: RunDir, split: str):
    run.require(run.data / "manifest.json", "collect", "dataset")
    return read_dataset(run.data, split)


def cmd_train_wm(cfg: TrainConfig, run: RunDir) -> dict:
    from .worldmodel import train_world_model

    episodes = _load_split(run, "wm") + _load_split(run, "expert")
    env = make_env(cfg.env.name)
    torch.manual_seed(cfg.seed)
    result = train_world_model(episodes, cfg, env.spec, out_dir=run.wm)
    log.info("world model %s trained", result.checkpoint_id)
    return {"checkpoint_id": result.checkpoint_id, "final_loss": result.curves[-1]["total"]}


def _load_wm(run: RunDir):
    from .worldmodel import load_world_model

    model, _ = load_world_model(run.require(run.wm_ckpt, "train-wm", "world model checkpoint"))
    model.eval()
    return model


def cmd_encode(cfg: TrainConfig, run: RunDir) -> dict:
    from .worldmodel import encode_dataset

    model = _load_wm(run)
    experts = _load_split(run, "expert")
    store = encode_dataset(experts, model, cfg.wm.encode_seed)
    run.latents.mkdir(parents=True, exist_ok=True)
    store.save(run.latent_file)
    return {"episodes": len(store.episodes), "provenance": store.provenance}


def _load_store(run: RunDir, model, n_expert: int) -> LatentStore:
    store = LatentStore.load(run.require(run.latent_file, "encode", "expert latent store"))
    store.check_provenance(model.checkpoint_id)
    if n_expert > len(store.episodes):
        raise ValueError(f"requested {n_expert} expert episodes but only {len(store.episodes)} were collected")
    return store.subset(n_expert)


def train_one(cfg: TrainConfig, run: RunDir, seed: int, steps: int | None = None) -> Path:
    """Train one agent of kind cfg.agent.kind with ``seed``; returns its directory."""
    from .agent import train_agent
    from .baselines import train_dbc, train_dgail, train_pixel_bc
    from .rewards import RewardSpec

    cfg = TrainConfig.from_flat({**cfg.to_flat(), "seed": seed})
    kind, n = cfg.agent.kind, cfg.data.expert_episodes
    out = run.agent / agent_name(kind, n, cfg.agent.horizon, seed)
    out.mkdir(parents=True, exist_ok=True)
    report: dict = {}
    if kind == "bc":
        experts = _load_split(run, "expert")[:n]
        train_pixel_bc(experts, cfg, make_env(cfg.env.name).spec, steps=steps, out_dir=out)
    else:
        model = _load_wm(run)
        store = _load_store(run, model, n)
        if kind == "dbc":
            train_dbc(store, model, cfg, steps=steps, out_dir=out)
        elif kind == "dgail":
            report = train_dgail(store, model, cfg, steps=steps, out_dir=out).report
        else:
            train_agent(store, model, RewardSpec.from_config(cfg.reward), cfg, steps=steps, out_dir=out)
    (out / "config.echo").write_text(cfg.dumps())
    (out / "train_report.json").write_text(json.dumps(report, sort_keys=True))
    return out


def _train_job(args):
    flat, root, seed = args
    torch.set_num_threads(1)
    return str(train_one(TrainConfig.from_flat(flat), RunDir(root), seed))


def fan_out(cfg: TrainConfig, run: RunDir, seeds: Sequence[int], jobs: int) -> list[str]:
    tasks = [(cfg.to_flat(), str(run.root), s) for s in seeds]
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(_train_job, tasks))
    return [str(train_one(cfg, run, s)) for s in seeds]


def _read_curve(path: Path, column: str) -> list[float]:
    if not path.exists():
        return []
    with open(path) as f:
        return [float(r[column]) for r in csv.DictReader(f) if r.get(column) not in (None, "")]


def evaluate_one(cfg: TrainConfig, run: RunDir, seed: int, kind: str | None = None,
                 ablation: bool = False) -> RunReport:
    """Evaluate a trained agent (or the scripted expert) and write its RunReport."""
    from .agent import LatentPolicy, load_agent
    from .baselines import PixelBCPolicy, load_pixel_bc
    from .checkpoint import load_checkpoint

    kind = kind or cfg.agent.kind
    n = cfg.data.expert_episodes
    env = make_env(cfg.env.name)
    hashes: dict = {"git": git_hash()}
    extra: dict = {"ablation": True} if ablation else {}
    collapse: dict = {}
    curve: list[float] = []
    if kind == "expert":
        policy = ScriptedExpert(env)
        name = f"expert_s{seed}"
    else:
        name = agent_name(kind, n, cfg.agent.horizon, seed)
        agent_dir = run.require(run.agent / name, "train-agent", f"{kind} agent {name}")
        ckpt_path = run.require(agent_dir / "policy.ckpt", "train-agent", f"{kind} policy checkpoint")
        train_report = json.loads((agent_dir / "train_report.json").read_text()) if (agent_dir / "train_report.json").exists() else {}
        if "adversarial_collapse" in train_report:
            collapse["adversarial"] = bool(train_report["adversarial_collapse"])
        curve = _read_curve(agent_dir / "curves.csv", "intrinsic_return")
        if kind == "bc":
            model = load_pixel_bc(ckpt_path)
            policy = PixelBCPolicy(model, cfg.agent.greedy)
            hashes["policy"] = load_checkpoint(ckpt_path).content_hash
        else:
            wm = _load_wm(run)
            agent, ckpt = load_agent(ckpt_path, wm.state_dim, wm.spec.num_actions)
            if agent.provenance != wm.checkpoint_id:
                raise ProvenanceError(f"agent {name} was trained on world model {agent.provenance}, "
                                      f"but {wm.checkpoint_id} is in {run.wm}; retrain the agent")
            policy = LatentPolicy(agent.actor, wm, cfg.agent.greedy, tag=kind)
            hashes["policy"] = ckpt.content_hash
            hashes["world_model"] = wm.checkpoint_id
    eval_seed = stream_seeds(cfg.seed)["eval"]
    result = evaluate(policy, env, cfg.eval.episodes, seed=eval_seed)
    report = RunReport(kind, cfg.env.name, seed, n, eval_dict(result), curve, collapse, cfg.to_flat(), hashes, extra)
    report.save(run.eval / f"{name}.json")
    log.info("%s: mean return %.2f +- %.2f (expert %.2f)", name, result.mean, result.stderr, result.expert_mean)
    return report


def cmd_ablate_horizon(cfg: TrainConfig, run: RunDir, horizons: Sequence[int], seeds: Sequence[int],
                       jobs: int, include_dbc: bool = True) -> dict:
    model = _load_wm(run)
    _load_store(run, model, cfg.data.expert_episodes)
    scores: dict[float, list[float]] = defaultdict(list)
    for H in horizons:
        hcfg = TrainConfig.from_flat({**cfg.to_flat(), "agent.horizon": H, "agent.kind": "ditto"})
        fan_out(hcfg, run, seeds, jobs)
        for s in seeds:
            rep = evaluate_one(TrainConfig.from_flat({**hcfg.to_flat(), "seed": s}), run, s, ablation=True)
            if rep.hashes.get("world_model") != model.checkpoint_id:
                raise ProvenanceError("horizon ablation runs must share one world model")
            scores[H].append(rep.eval["relative"])
    reference = {}
    if include_dbc:
        dcfg = TrainConfig.from_flat({**cfg.to_flat(), "agent.kind": "dbc"})
        fan_out(dcfg, run, seeds, jobs)
        dbc = [evaluate_one(TrainConfig.from_flat({**dcfg.to_flat(), "seed": s}), run, s, ablation=True).eval["relative"]
               for s in seeds]
        reference["D-BC"] = float(np.mean(dbc))
        m, se = mean_stderr(dbc)
        write_band_csv(run.plots / "horizon.dbc.csv", [("nan", m, se, len(dbc))])
    files = band_plot({"ditto": scores}, run.plots / "horizon", xlabel="imagination horizon H",
                      ylabel="expert-relative return", title="horizon ablation", reference=reference)
    return {"horizons": list(horizons), "files": [str(f) for f in files], "world_model": model.checkpoint_id}


def cmd_plot(run_dirs: Sequence[Path], out: Path | None) -> list[Path]:
    """Score vs expert episodes per agent kind, plus intrinsic-reward training curves."""
    reports = []
    for d in run_dirs:
        reports += [RunReport.load(p) for p in sorted((Path(d) / "eval").glob("*.json"))]
    if not reports:
        raise MissingArtifactError(f"no RunReports under {[str(d) for d in run_dirs]}; run `ditto evaluate` first")
    out = out or Path(run_dirs[0]) / "plots"
    score: dict[str, dict[float, list[float]]] = defaultdict(lambda: defaultdict(list))
    curves: dict[str, dict[float, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in reports:
        if r.extra.get("ablation"):
            continue
        score[r.agent][r.expert_episodes].append(r.eval["relative"])
        for step, value in enumerate(r.intrinsic_curve, start=1):
            curves[r.agent][step].append(value)
    files = band_plot(score, out / "score_vs_expert_episodes", xlabel="expert episodes",
                      ylabel="expert-relative return", logx=len({x for s in score.values() for x in s}) > 2)
    if curves:
        files += band_plot(curves, out / "intrinsic_return", xlabel="training step", ylabel="intrinsic return")
    return files


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ditto", description="Offline imitation by RL inside a learned world model.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, agent: bool = False):
        p.add_argument("--run", default="default", help="run name under --runs-dir")
        p.add_argument("--runs-dir", default="runs")
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--env")
        p.add_argument("--expert-episodes", type=int)
        if agent:
            p.add_argument("--agent", choices=AGENT_KINDS + ("expert",))
            p.add_argument("--reward", choices=REWARD_KINDS)
            p.add_argument("--horizon", type=int)
            p.add_argument("--seeds", help="comma list or range, e.g. 0,1,2 or 0-4")
            p.add_argument("--jobs", type=int, default=1, help="parallel processes for --seeds")
        return p

    common(sub.add_parser("collect", help="collect world-model and expert episodes"))
    common(sub.add_parser("train-wm", help="train the world model"))
    common(sub.add_parser("encode", help="encode expert episodes into latents"))
    common(sub.add_parser("train-agent", help="train DITTO or a baseline"), agent=True)
    common(sub.add_parser("evaluate", help="evaluate trained agents"), agent=True)
    p = common(sub.add_parser("ablate-horizon", help="DITTO across imagination horizons"), agent=True)
    p.add_argument("--horizons", default="3,9,15")
    p.add_argument("--no-dbc", action="store_true", help="skip the D-BC reference line")
    p = sub.add_parser("plot", help="plot RunReports of one or more run directories")
    p.add_argument("run_dirs", nargs="+", type=Path)
    p.add_argument("--out", type=Path)
    return parser


def run(argv: Sequence[str] | None = None) -> dict | list:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "plot":
        return [str(f) for f in cmd_plot(args.run_dirs, args.out)]
    rd = RunDir(Path(args.runs_dir) / args.run)
    rd.root.mkdir(parents=True, exist_ok=True)
    if args.command != "collect":
        rd.require(rd.config, "collect", "run config echo")
    cfg = build_config(args, rd)
    if args.command == "collect":
        return cmd_collect(cfg, rd)
    if args.command == "train-wm":
        return cmd_train_wm(cfg, rd)
    if args.command == "encode":
        return cmd_encode(cfg, rd)
    seeds = parse_seeds(args.seeds, cfg.seed)
    if args.command == "train-agent":
        if args.agent == "expert":
            raise SystemExit("the scripted expert needs no training")
        return {"agents": fan_out(cfg, rd, seeds, args.jobs)}
    if args.command == "evaluate":
        kind = "expert" if args.agent == "expert" else None
        reports = [evaluate_one(TrainConfig.from_flat({**cfg.to_flat(), "seed": s}), rd, s, kind) for s in seeds]
        return {"means": [r.eval["mean"] for r in reports]}
    if args.command == "ablate-horizon":
        horizons = [int(h) for h in args.horizons.split(",")]
        return cmd_ablate_horizon(cfg, rd, horizons, seeds, args.jobs, include_dbc=not args.no_dbc)
    raise AssertionError(args.command)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        result = run(argv)
    except (MissingArtifactError, ProvenanceError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
