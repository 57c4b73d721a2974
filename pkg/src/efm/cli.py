"""``efm`` command line: gen-data, demo-extremum, train, eval, matrix.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
Every command accepts ``--config <yaml>``; flags given on the command line
override values from the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from efm import experiments as ex
from efm.errors import ConfigError

log = logging.getLogger("efm")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file with command keys")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="efm", description="Extremum flow matching experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="record scripted demonstrations")
    _common(p)
    p.add_argument("--behavior", help="expert, full or partitioned")
    p.add_argument("--episodes", type=int, dest="n_episodes")
    p.add_argument("--maze", help="MazeSpec YAML")

    p = sub.add_parser("demo-extremum", help="bound estimation tables on a synthetic family")
    _common(p)
    p.add_argument("--family", help=", ".join(ex.available_families()))
    p.add_argument("--steps", type=int)

    p = sub.add_parser("train", help="train one agent")
    _common(p)
    p.add_argument("--data", help="episode file")
    p.add_argument("--agent", help="agent name, e.g. FM-AC-use-RL")
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--maze")

    p = sub.add_parser("eval", help="evaluate checkpoints on the shared pair set")
    _common(p)
    p.add_argument("--checkpoint", action="append", dest="checkpoints", help="repeat once per training seed")
    p.add_argument("--pairs", help="pairs YAML (default: built-in pairs)")
    p.add_argument("--runs", type=int, dest="n_runs")
    p.add_argument("--horizon", type=int)
    p.add_argument("--dataset", help="label written into the CSV")
    p.add_argument("--maze")

    p = sub.add_parser("matrix", help="agents x datasets x seeds grid")
    _common(p)
    p.add_argument("--datasets", nargs="+")
    p.add_argument("--agents", nargs="+")
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--episodes", type=int, dest="n_episodes")
    p.add_argument("--steps", type=int)
    p.add_argument("--runs", type=int, dest="n_runs")
    p.add_argument("--horizon", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--max-cells", type=int, dest="max_cells")
    return parser


def _agent_overrides(file_agent: dict, name: str | None, steps: int | None) -> dict:
    agent = dict(file_agent or {})
    if name is not None:
        kind, use_rl = ex.parse_agent_name(name)
        agent.update(kind=kind, use_rl=use_rl)
    if steps is not None:
        agent["steps"] = steps
    return agent


def run(args: argparse.Namespace) -> object:
    values = ex.read_config_file(args.config) if args.config else {}
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "out", "verbose")}
    cmd = args.command
    if cmd == "gen-data":
        cfg = ex.build_config(ex.GenDataConfig, values, flags)
        return ex.cmd_gen_data(cfg, args.out)
    if cmd == "demo-extremum":
        cfg = ex.build_config(ex.DemoExtremumConfig, values, flags)
        return ex.cmd_demo_extremum(cfg, args.out)
    if cmd == "train":
        agent = _agent_overrides(values.get("agent"), flags.pop("agent"), flags.pop("steps"))
        cfg = ex.build_config(ex.TrainRunConfig, {**values, "agent": agent}, flags)
        return str(ex.cmd_train(cfg, args.out))
    if cmd == "eval":
        cfg = ex.build_config(ex.EvalRunConfig, values, flags)
        return ex.cmd_eval(cfg, args.out)
    if cmd == "matrix":
        steps = flags.pop("steps")
        agent = dict(values.get("agent") or {})
        if steps is not None:
            agent["steps"] = steps
        cfg = ex.build_config(ex.MatrixConfig, {**values, "agent": agent}, flags)
        table = ex.cmd_matrix(cfg, args.out)
        incomplete = sum(r[-1] == "INCOMPLETE" for r in table)
        return {"rows": len(table), "incomplete": incomplete}
    raise ConfigError(f"unknown command {cmd!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the usage message
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        result = run(args)
    except ConfigError as exc:
        print(f"efm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("failure", exc_info=True)
        print(f"efm {args.command}: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
