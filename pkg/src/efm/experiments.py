"""Experiment commands behind the ``efm`` CLI.

Each command takes a plain config dataclass, writes its outputs into one
directory and leaves a ``resolved_config.yaml`` beside them, so a run can be
repeated exactly with ``--config <out>/resolved_config.yaml``. Outputs are CSV
files and binary checkpoints; plotting is left to the user, e.g.::

    pandas.read_csv("out/bounds.csv").plot(x="condition")
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from efm import agents as ag
from efm.dataset import EpisodeStore, load_store, save_store
from efm.envs import MazeSpec
from efm.envs.demos import generate_demos, parse_behavior, region_coverage
from efm.envs.pairs import EvalPair, default_eval_pairs, load_pairs, save_pairs
from efm.errors import ConfigError
from efm.extremum import (
    CompareConfig,
    DecomposedModel,
    bound_errors,
    compare_methods,
    estimate_extremum_nd,
    single_model_extremum,
    train_decomposed,
)
from efm.flow import FlowModel, SourceDistribution, TrainConfig, train
from efm.synthetic import FAMILIES, get_family

log = logging.getLogger(__name__)

OBS_DIM = 4  # pusher xy + object xy
ACT_DIM = 2

MATRIX_AGENTS = (
    "FM-GC",
    "FM-AC-no-RL", "FM-AC-use-RL",
    "FM-PC-no-RL", "FM-PC-use-RL",
    "FM-PS-no-RL", "FM-PS-use-RL",
    "FM-AS-no-RL", "FM-AS-use-RL",
)
MATRIX_HEADER = ["agent", "variant", "dataset", "success_mean", "success_std", "n_seeds", "status"]
SUMMARY_HEADER = ["agent", "variant", "dataset", "pair_id", "success_mean", "success_std", "n_seeds"]


# ---------------------------------------------------------------- configs

@dataclass
class GenDataConfig:
    behavior: str = "expert"
    n_episodes: int = 200
    seed: int = 0
    maze: str | None = None  # path to a MazeSpec YAML; None = default maze


@dataclass
class DemoExtremumConfig:
    family: str = "bimodal-uniform"
    steps: int = 6000
    batch_size: int = 256
    lr: float = 2e-3
    lr_final: float = 1e-4
    hidden: list = field(default_factory=lambda: [64, 64, 64])
    n_samples: int = 512
    seed: int = 0


@dataclass
class TrainRunConfig:
    data: str | None = None
    agent: dict = field(default_factory=dict)  # AgentConfig keys
    seed: int = 0
    checkpoint_every: int = 2000
    maze: str | None = None


@dataclass
class EvalRunConfig:
    checkpoints: list = field(default_factory=list)  # one per training seed
    pairs: str | None = None  # None = built-in default pairs (copied to the output)
    n_runs: int = 4
    horizon: int = 400
    seed: int = 0
    dataset: str = "unknown"
    maze: str | None = None


@dataclass
class MatrixConfig:
    datasets: list = field(default_factory=lambda: ["expert", "full", "partitioned"])
    agents: list = field(default_factory=lambda: list(MATRIX_AGENTS))
    seeds: list = field(default_factory=lambda: [0, 1])
    n_episodes: int = 200
    data_seed: int = 1
    agent: dict = field(default_factory=dict)  # AgentConfig overrides shared by every cell
    n_runs: int = 4
    horizon: int = 400
    workers: int = 1
    max_cells: int | None = None  # stop after this many newly run cells (None = all)
    maze: str | None = None


def build_config(cls, file_values: dict | None = None, overrides: dict | None = None):
    """File values overlaid by non-None overrides; unknown keys are a ConfigError."""
    names = {f.name for f in fields(cls)}
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(merged) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
    return cls(**merged)


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return data


def write_resolved(config, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(yaml.safe_dump(asdict(config), sort_keys=True))


def _maze(path) -> MazeSpec:
    return MazeSpec.load(path) if path else MazeSpec()


def _write_csv(path: Path, header: list, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(config: GenDataConfig, out) -> dict:
    """Record demonstrations to ``out/episodes.efed``; returns the printed summary."""
    out = Path(out)
    behavior = parse_behavior(config.behavior)
    spec = _maze(config.maze)
    write_resolved(config, out)
    store = generate_demos(behavior, spec, config.n_episodes, np.random.default_rng(config.seed))
    save_store(store, out / "episodes.efed")
    return data_summary(store, spec, behavior)


def data_summary(store: EpisodeStore, spec: MazeSpec, behavior: str) -> dict:
    coverage = region_coverage(store, spec)
    visits = [sum(r in c for c in coverage) for r in range(len(spec.regions))]
    summary = {
        "behavior": behavior,
        "episodes": len(store),
        "total_steps": store.total_steps,
        "episodes_visiting_region": visits,
        "single_region_episodes": sum(len(c) == 1 for c in coverage),
    }
    return summary


# ---------------------------------------------------------------- demo-extremum

def cmd_demo_extremum(config: DemoExtremumConfig, out) -> dict:
    """Bound tables for 1D families; decomposed vs single-model extrema for 2D ones."""
    out = Path(out)
    family = get_family(config.family)  # unknown family -> ConfigError before any output
    write_resolved(config, out)
    train_cfg = TrainConfig(steps=config.steps, batch_size=config.batch_size, lr=config.lr, lr_final=config.lr_final, seed=config.seed)
    hidden = tuple(config.hidden)
    if family.dim == 1:
        rows = compare_methods(family.name, out / "bounds.csv", CompareConfig(train=train_cfg, hidden=hidden, seed=config.seed))
        return bound_errors(rows)
    return _demo_nd(family, train_cfg, hidden, config, out)


def _demo_nd(family, train_cfg: TrainConfig, hidden, config: DemoExtremumConfig, out: Path) -> dict:
    rng = np.random.default_rng(config.seed)

    def sampler(r, n):
        return family.sample(r, n)[0], None

    decomposed = DecomposedModel.create(family.dim, 0, hidden, rng)
    train_decomposed(decomposed, sampler, train_cfg)
    single = FlowModel(family.dim, 0, hidden, SourceDistribution.uniform(family.dim), np.random.default_rng([config.seed, 1]))
    train(single, sampler, train_cfg)

    lo, hi = family.true_bounds(np.zeros(1))
    truth = {"min": float(lo[0]), "max": float(hi[0])}
    q_rng = np.random.default_rng([config.seed, 2])
    err_rows, clouds = [], []
    for direction in ("min", "max"):
        pts = {
            "decomposed": estimate_extremum_nd(decomposed, direction, config.n_samples, q_rng),
            "single": single_model_extremum(single, direction, config.n_samples, q_rng),
        }
        for method, p in pts.items():
            z_est = float(np.mean(p[:, 0]))
            err_rows.append([family.name, direction, method, _fmt(z_est), _fmt(truth[direction]), _fmt(abs(z_est - truth[direction]))])
            clouds += [[method, direction, _fmt(z), _fmt(y)] for z, y in p[:, :2]]
    data = family.sample(np.random.default_rng([config.seed, 3]), config.n_samples)[0]
    clouds += [["data", "", _fmt(z), _fmt(y)] for z, y in data[:, :2]]
    _write_csv(out / "extremum_nd.csv", ["family", "direction", "method", "z_est", "z_true", "abs_error"], err_rows)
    _write_csv(out / "samples.csv", ["method", "direction", "z", "y"], clouds)
    by_method: dict[str, list[float]] = {}
    for r in err_rows:
        by_method.setdefault(r[2], []).append(float(r[5]))
    return {m: float(np.mean(v)) for m, v in by_method.items()}


# ---------------------------------------------------------------- train

def check_store_dims(store: EpisodeStore) -> None:
    if (store.dim_o, store.dim_a) != (OBS_DIM, ACT_DIM):
        raise ConfigError(
            f"data file has obs dim {store.dim_o} and action dim {store.dim_a}; "
            f"the maze needs {OBS_DIM} and {ACT_DIM}"
        )


def _load_data(path) -> EpisodeStore:
    if not path:
        raise ConfigError("no data file given")
    if not Path(path).exists():
        raise ConfigError(f"data file {path} does not exist")
    store = load_store(path)
    check_store_dims(store)
    return store


def _loss_rows(metrics: ag.TrainMetrics) -> tuple[list, list]:
    keys = sorted({k for r in metrics.rows for k in r} - {"step"})
    rows = [[r["step"]] + [_fmt(r[k]) if k in r else "" for k in keys] for r in metrics.rows]
    return ["step"] + keys, rows


def cmd_train(config: TrainRunConfig, out) -> Path:
    """Train one agent; writes ``checkpoint.efmc``, ``loss.csv`` and periodic checkpoints."""
    out = Path(out)
    agent_cfg = ag.AgentConfig.from_dict(config.agent)
    store = _load_data(config.data)
    write_resolved(config, out)

    def snapshot(step, agent, metrics):
        ag.save_agent(agent, out / "checkpoint_last.efmc")
        _write_csv(out / "loss.csv", *_loss_rows(metrics))

    agent, metrics = ag.train_agent(agent_cfg, store, config.seed, callback=snapshot, callback_every=config.checkpoint_every)
    ag.save_agent(agent, out / "checkpoint.efmc")
    _write_csv(out / "loss.csv", *_loss_rows(metrics))
    return out / "checkpoint.efmc"


# ---------------------------------------------------------------- eval

def _pairs(path, spec: MazeSpec, out: Path) -> list[EvalPair]:
    if path:
        return load_pairs(path)
    pairs = default_eval_pairs(spec)
    save_pairs(pairs, out / "pairs.yaml")
    return pairs


def summarise(per_seed: list[ag.EvalResult]) -> tuple[dict, float, float]:
    """Per-pair and overall (mean, std) over seeds; std is empty for one seed."""
    def stats(values):
        values = np.asarray(values, dtype=np.float64)
        std = float(np.std(values, ddof=1)) if len(values) > 1 else float("nan")
        return float(values.mean()), std

    pair_ids = sorted(per_seed[0].pair_rates())
    per_pair = {p: stats([r.pair_rates()[p] for r in per_seed]) for p in pair_ids}
    mean, std = stats([r.mean_rate for r in per_seed])
    return per_pair, mean, std


def _std_text(std: float) -> str:
    return "" if np.isnan(std) else _fmt(std)


def cmd_eval(config: EvalRunConfig, out) -> dict:
    """Evaluate checkpoints (one per training seed) on a shared pair set."""
    out = Path(out)
    if not config.checkpoints:
        raise ConfigError("no checkpoint given")
    for ckpt in config.checkpoints:
        if not Path(ckpt).exists():
            raise ConfigError(f"checkpoint {ckpt} does not exist")
    spec = _maze(config.maze)
    out.mkdir(parents=True, exist_ok=True)
    pairs = _pairs(config.pairs, spec, out)
    write_resolved(config, out)

    rows, results = [], []
    agent = None
    for k, ckpt in enumerate(config.checkpoints):
        agent = ag.load_agent(ckpt)
        res = ag.evaluate(agent, spec, pairs, config.n_runs, config.horizon, config.seed)
        results.append(res)
        for r in ag.eval_csv_rows(res, agent.config.name, agent.config.variant, config.dataset):
            r[4] += k * config.n_runs  # run index unique across checkpoints
            rows.append(r)
    _write_csv(out / "eval.csv", ag.EVAL_HEADER, rows)

    per_pair, mean, std = summarise(results)
    name, variant, n = agent.config.name, agent.config.variant, len(results)
    summary = [[name, variant, config.dataset, p, _fmt(m), _std_text(s), n] for p, (m, s) in per_pair.items()]
    summary.append([name, variant, config.dataset, "mean", _fmt(mean), _std_text(std), n])
    _write_csv(out / "summary.csv", SUMMARY_HEADER, summary)
    return {"success_mean": mean, "success_std": std}


# ---------------------------------------------------------------- matrix

def parse_agent_name(name: str) -> tuple[str, bool]:
    """``FM-AC-use-RL`` -> ("AC", True); ``FM-GC`` -> ("GC", False)."""
    text = name.strip().upper().removeprefix("FM-")
    use_rl = False
    for suffix, flag in (("-USE-RL", True), ("-NO-RL", False)):
        if text.endswith(suffix):
            text, use_rl = text[: -len(suffix)], flag
            break
    if text not in ag.KINDS:
        raise ConfigError(f"unknown agent {name!r}; expected one of {', '.join(MATRIX_AGENTS)}")
    if text == "GC" and use_rl:
        raise ConfigError("FM-GC has no use-RL variant")
    return text, use_rl


def _key(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _read_json(path: Path) -> dict | None:
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError):
        return None


def _ensure_dataset(name: str, config: MatrixConfig, root: Path) -> Path:
    gen = GenDataConfig(behavior=name, n_episodes=config.n_episodes, seed=config.data_seed, maze=config.maze)
    out = root / "data" / name
    key = _key(asdict(gen))
    done = _read_json(out / "done.json")
    if done and done.get("key") == key and (out / "episodes.efed").exists() and sha256_file(out / "episodes.efed") == done.get("sha256"):
        return out / "episodes.efed"
    cmd_gen_data(gen, out)
    (out / "done.json").write_text(json.dumps({"key": key, "sha256": sha256_file(out / "episodes.efed")}))
    return out / "episodes.efed"


def _cell_done(cell_dir: Path, key: str) -> bool:
    done = _read_json(cell_dir / "done.json")
    eval_path = cell_dir / "eval.csv"
    return bool(done) and done.get("key") == key and eval_path.exists() and sha256_file(eval_path) == done.get("eval_sha256")


def _run_cell(job: dict) -> str:
    """Train and evaluate one (agent, dataset, seed) cell; returns its directory."""
    cell = Path(job["dir"])
    train_cfg = TrainRunConfig(data=job["data"], agent=job["agent"], seed=job["seed"], checkpoint_every=job["checkpoint_every"], maze=job["maze"])
    ckpt = cmd_train(train_cfg, cell)
    eval_cfg = EvalRunConfig(checkpoints=[str(ckpt)], pairs=job["pairs"], n_runs=job["n_runs"], horizon=job["horizon"],
                             seed=job["seed"], dataset=job["dataset"], maze=job["maze"])
    cmd_eval(eval_cfg, cell)
    (cell / "done.json").write_text(json.dumps({"key": job["key"], "eval_sha256": sha256_file(cell / "eval.csv")}))
    return str(cell)


def _cell_rate(cell_dir: Path) -> float:
    with (cell_dir / "eval.csv").open() as fh:
        return float(np.mean([int(r["success"]) for r in csv.DictReader(fh)]))


def cmd_matrix(config: MatrixConfig, out) -> list[list]:
    """Run (or resume) the agents x datasets x seeds grid and write ``matrix.csv``."""
    out = Path(out)
    specs = [(a, *parse_agent_name(a)) for a in config.agents]
    datasets = [parse_behavior(d) for d in config.datasets]
    if not config.seeds:
        raise ConfigError("matrix needs at least one seed")
    spec = _maze(config.maze)
    write_resolved(config, out)
    pairs_path = out / "pairs.yaml"
    if not pairs_path.exists():
        save_pairs(default_eval_pairs(spec), pairs_path)
    pairs_sha = sha256_file(pairs_path)

    jobs, cells = [], {}
    for ds in datasets:
        data = _ensure_dataset(ds, config, out)
        data_sha = sha256_file(data)
        for label, kind, use_rl in specs:
            agent = ag.AgentConfig.from_dict({**config.agent, "kind": kind, "use_rl": use_rl}).to_dict()
            for seed in config.seeds:
                cell = out / "cells" / ds / f"{kind}-{'use-RL' if use_rl else 'no-RL'}" / f"seed{seed}"
                key = _key({"agent": agent, "data": data_sha, "pairs": pairs_sha, "seed": seed,
                            "n_runs": config.n_runs, "horizon": config.horizon})
                cells.setdefault((kind, use_rl, ds), []).append(cell)
                if not _cell_done(cell, key):
                    jobs.append({"dir": str(cell), "data": str(data), "agent": agent, "seed": seed, "key": key,
                                 "checkpoint_every": max(1, agent["steps"] // 4), "maze": config.maze,
                                 "pairs": str(pairs_path), "n_runs": config.n_runs, "horizon": config.horizon, "dataset": ds})
    if config.max_cells is not None:
        jobs = jobs[: config.max_cells]
    _run_jobs(jobs, config.workers)

    table = []
    for (kind, use_rl, ds), dirs in cells.items():
        done = [d for d in dirs if (d / "done.json").exists()]
        name = f"FM-{kind}"
        variant = "use-RL" if use_rl else "no-RL"
        if len(done) < len(dirs):
            table.append([name, variant, ds, "", "", len(done), "INCOMPLETE"])
            continue
        rates = np.array([_cell_rate(d) for d in dirs])
        std = _std_text(float(np.std(rates, ddof=1)) if len(rates) > 1 else float("nan"))
        table.append([name, variant, ds, _fmt(rates.mean()), std, len(rates), "complete"])
    _write_csv(out / "matrix.csv", MATRIX_HEADER, table)
    return table


def _run_jobs(jobs: list[dict], workers: int) -> None:
    if workers <= 1 or len(jobs) <= 1:
        for job in jobs:
            _run_cell(job)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        list(pool.map(_run_cell, jobs))


def available_families() -> list[str]:
    return list(FAMILIES)
