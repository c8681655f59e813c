"""Config-driven command line front end.

``padr COMMAND`` reads a TOML or JSON config and runs one of: dataset
generation, rule training, model evaluation, benchmark reproduction,
stationarity diagnostics, or a hyperparameter sweep.  The filled config
(defaults applied) is echoed to stdout before the run so artifacts are
self-describing.  Artifacts are written temp-then-rename, never leaving
partial files at the declared paths, and wall times never enter artifact
bodies, so a rerun with the same config and seed is byte-identical.

Exit codes: 0 success, 1 domain error (data, solver, shape), 2 config
error (unknown key, bad type, missing field, unresolvable path).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

from . import bench, costs, diagnostics, penalty, rules, smm
from .core import (HypothesisConfig, RngHandle, atomic_write_text,
                   load_dataset, load_model, random_init, save_dataset,
                   save_model)

COMMANDS = ("gen", "train", "eval", "bench", "diagnose", "sweep")
_TOP_KEYS = set(COMMANDS) | {"command", "seed", "threads", "out"}


class ConfigError(Exception):
    pass


@dataclasses.dataclass
class RunConfig:
    command: str
    seed: int
    threads: int
    out: str | None
    block: dict


# ---------------------------------------------------------------------------
# parsing

def _load_document(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.endswith(".json"):
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        else:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a table/object")
    return doc


def _check_keys(block: dict, allowed, where: str) -> None:
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in {where}")


def _typed(block: dict, key: str, default, kind, where: str):
    if key not in block:
        return default
    v = block[key]
    if kind is float and isinstance(v, (int, float)) and not isinstance(v, bool):
        return float(v)
    if kind is int and isinstance(v, int) and not isinstance(v, bool):
        return int(v)
    if kind is bool and isinstance(v, bool):
        return v
    if kind is str and isinstance(v, str):
        return v
    if kind is dict and isinstance(v, dict):
        return v
    if kind is list and isinstance(v, (list, tuple)):
        return list(v)
    raise ConfigError(f"{where}.{key}: expected {kind.__name__}, got {type(v).__name__}")


def _require(block: dict, key: str, kind, where: str):
    if key not in block:
        raise ConfigError(f"missing required key {key!r} in {where}")
    return _typed(block, key, None, kind, where)


def _input_path(path: str, where: str) -> str:
    if not os.path.exists(path):
        raise ConfigError(f"{where}: path not found: {path}")
    return path


def parse_config(args: argparse.Namespace) -> RunConfig:
    doc = _load_document(args.config) if args.config else {}
    _check_keys(doc, _TOP_KEYS, "config")
    command = args.command
    file_cmd = _typed(doc, "command", command, str, "config")
    if file_cmd not in COMMANDS:
        raise ConfigError(f"config.command: unknown command {file_cmd!r}")
    seed = args.seed if args.seed is not None else _typed(doc, "seed", 0, int, "config")
    threads = args.threads if args.threads is not None else _typed(doc, "threads", None, int, "config")
    if threads is None:
        env = os.environ.get("PADR_THREADS", "")
        try:
            threads = int(env) if env else 1
        except ValueError:
            raise ConfigError(f"PADR_THREADS: expected int, got {env!r}") from None
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    block = dict(_typed(doc, command, {}, dict, "config"))
    if args.preset is not None:
        if command != "bench":
            raise ConfigError("--preset only applies to the bench command")
        block["preset"] = args.preset
    out = args.out or block.get("out") or _typed(doc, "out", None, str, "config")
    if out is not None and not isinstance(out, str):
        raise ConfigError(f"{command}.out: expected str, got {type(out).__name__}")
    block.pop("out", None)
    return RunConfig(command, seed, threads, out, block)


# ---------------------------------------------------------------------------
# shared block builders

def _rule_cfg(block: dict, m: int, p: int, where: str) -> HypothesisConfig:
    _check_keys(block, ("k_convex", "k_concave", "bound"), where)
    try:
        return HypothesisConfig(
            m,
            _typed(block, "k_convex", 3, int, where),
            _typed(block, "k_concave", 0, int, where),
            p,
            _typed(block, "bound", 50.0, float, where),
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


_COST_KEYS = ("kind", "backlog", "holding", "cap_rhs", "cap_kind")


def _cost_setup(block: dict, where: str):
    """Returns (cost setup or None for squared loss, kind)."""
    _check_keys(block, _COST_KEYS, where)
    kind = _typed(block, "kind", "newsvendor", str, where)
    if kind == "squared":
        extra = sorted(set(block) - {"kind"})
        if extra:
            raise ConfigError(f"{where}.{extra[0]}: not a squared-loss option")
        return None, kind
    backlog = block.get("backlog", 8.0)
    holding = block.get("holding", 2.0)
    try:
        return bench.CostSetup(
            kind, backlog, holding,
            cap_rhs=_typed(block, "cap_rhs", None, float, where),
            cap_kind=_typed(block, "cap_kind", "linear", str, where),
        ), kind
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _constraint_params(block: dict, setup, where: str):
    _check_keys(block, ("gamma", "lam"), where)
    gamma = _typed(block, "gamma", 0.05, float, where)
    lam = _typed(block, "lam", 100.0, float, where)
    if block and (setup is None or setup.constraint() is None):
        raise ConfigError(f"{where}: the chosen cost has no capacity constraint")
    return gamma, lam


_SMM_KEYS = tuple(f.name for f in dataclasses.fields(smm.SmmConfig) if f.name != "seed")


def _smm_cfg(block: dict, seed: int, where: str) -> smm.SmmConfig:
    _check_keys(block, _SMM_KEYS, where)
    try:
        return smm.SmmConfig(seed=seed, **block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _echo(command: str, seed: int, threads: int, out, filled: dict) -> None:
    doc = {"command": command, "seed": seed, "threads": threads}
    if out is not None:
        doc["out"] = out
    doc[command] = filled
    print(json.dumps(doc, sort_keys=True))


def _training_cost(setup, gamma: float, lam: float):
    if setup is None:
        return costs.squared_loss()
    return setup.training_cost(gamma, lam)


def _sibling_path(out: str, tag: str) -> str:
    stem, _ = os.path.splitext(out)
    return f"{stem}-{tag}.csv"


# ---------------------------------------------------------------------------
# commands

def run_gen(cfg: RunConfig) -> int:
    block, where = cfg.block, "gen"
    _check_keys(block, ("model", "scale", "n", "p"), where)
    if cfg.out is None:
        raise ConfigError("gen needs an output path (--out or gen.out)")
    kind = _typed(block, "model", "maxaffine_basic", str, where)
    scale = _typed(block, "scale", 1.0, float, where)
    n = _typed(block, "n", 1000, int, where)
    p = _typed(block, "p", 2, int, where)
    try:
        model = bench.DemandModel(kind, scale)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    _echo(cfg.command, cfg.seed, cfg.threads, cfg.out,
          {"model": kind, "scale": scale, "n": n, "p": p})
    data = bench.gen_dataset(model, n, p, RngHandle(cfg.seed, "data"))
    save_dataset(cfg.out, data)
    print(f"wrote {cfg.out}: n={data.n} p={data.p} outputs={data.m}")
    return 0


def _train_blocks(cfg: RunConfig, where: str):
    block = cfg.block
    _check_keys(block, ("data", "trace", "rule", "cost", "constraint", "smm",
                        "budget", "validation_split", "grid"), where)
    if cfg.command == "train":
        for key in ("budget", "validation_split", "grid"):
            if key in block:
                raise ConfigError(f"{where}.{key}: sweep-only key")
    data_path = _input_path(_require(block, "data", str, where), f"{where}.data")
    if cfg.out is None:
        raise ConfigError(f"{where} needs an output path (--out or {where}.out)")
    data = load_dataset(data_path)
    rule_block = _typed(block, "rule", {}, dict, where)
    cost_block = _typed(block, "cost", {}, dict, where)
    cons_block = _typed(block, "constraint", {}, dict, where)
    rule = _rule_cfg(rule_block, data.m, data.p, f"{where}.rule")
    setup, kind = _cost_setup(cost_block, f"{where}.cost")
    gamma, lam = _constraint_params(cons_block, setup, f"{where}.constraint")
    scfg = _smm_cfg(_typed(block, "smm", {}, dict, where), cfg.seed, f"{where}.smm")
    filled = {
        "data": data_path,
        "rule": {"k_convex": rule.k_convex, "k_concave": rule.k_concave, "bound": rule.bound},
        "cost": {"kind": kind} if setup is None else setup.to_dict(),
        "smm": {k: getattr(scfg, k) for k in _SMM_KEYS},
    }
    if setup is not None and setup.constraint() is not None:
        filled["constraint"] = {"gamma": gamma, "lam": lam}
    problem = smm.Problem(data, rule, _training_cost(setup, gamma, lam))
    return data, setup, (gamma, lam), problem, scfg, filled


def run_train(cfg: RunConfig) -> int:
    data, setup, (gamma, lam), problem, scfg, filled = _train_blocks(cfg, "train")
    trace_path = cfg.block.get("trace") or _sibling_path(cfg.out, "trace")
    filled["trace"] = trace_path
    _echo(cfg.command, cfg.seed, cfg.threads, cfg.out, filled)
    result = smm.multi_start(problem, scfg)
    save_model(cfg.out, result.best)
    trace = result.rounds[result.best_round].trace
    atomic_write_text(trace_path, "\n".join(trace.csv_lines()) + "\n")
    line = f"wrote {cfg.out}: objective {result.best_objective!r} round {result.best_round}"
    if setup is not None and setup.constraint() is not None:
        z = rules.decisions(result.best, data.features)
        line += f" feasibility {setup.feasibility(z)!r}"
    print(line)
    return 0


def run_sweep(cfg: RunConfig) -> int:
    block, where = cfg.block, "sweep"
    data, setup, (gamma, lam), problem, scfg, filled = _train_blocks(cfg, where)
    budget = _typed(block, "budget", 20, int, where)
    split = _typed(block, "validation_split", 0.2, float, where)
    grid = _typed(block, "grid", None, dict, where)
    if grid is not None:
        _check_keys(grid, _SMM_KEYS, f"{where}.grid")
        grid = {k: list(v) for k, v in grid.items()}
    table_path = block.get("trace") or _sibling_path(cfg.out, "sweep")
    filled.update({"budget": budget, "validation_split": split,
                   "grid": grid or {k: list(v) for k, v in smm.DEFAULT_SWEEP_GRID.items()},
                   "trace": table_path})
    _echo(cfg.command, cfg.seed, cfg.threads, cfg.out, filled)
    best_cfg, theta, entries = smm.sweep(
        problem, grid=grid, validation_split=split,
        rng=RngHandle(cfg.seed, "sweep"), budget=budget, base_cfg=scfg)
    save_model(cfg.out, theta)
    keys = sorted(entries[0].params) if entries else []
    lines = [",".join(keys + ["validation_cost", "feasibility"])]
    for e in entries:
        cells = [f"{e.params[k]!r}" for k in keys]
        lines.append(",".join(cells + [f"{e.validation_cost!r}", f"{e.feasibility!r}"]))
    atomic_write_text(table_path, "\n".join(lines) + "\n")
    chosen = {k: getattr(best_cfg, k) for k in _SMM_KEYS}
    print(f"wrote {cfg.out}: best {json.dumps(chosen, sort_keys=True)}")
    return 0


def run_eval(cfg: RunConfig) -> int:
    block, where = cfg.block, "eval"
    _check_keys(block, ("data", "model", "cost", "constraint"), where)
    data_path = _input_path(_require(block, "data", str, where), f"{where}.data")
    model_path = _input_path(_require(block, "model", str, where), f"{where}.model")
    setup, kind = _cost_setup(_typed(block, "cost", {}, dict, where), f"{where}.cost")
    gamma, lam = _constraint_params(_typed(block, "constraint", {}, dict, where),
                                    setup, f"{where}.constraint")
    filled = {"data": data_path, "model": model_path,
              "cost": {"kind": kind} if setup is None else setup.to_dict()}
    _echo(cfg.command, cfg.seed, cfg.threads, cfg.out, filled)
    data = load_dataset(data_path)
    theta, _ = load_model(model_path)
    z = rules.decisions(theta, data.features)
    spec = costs.squared_loss() if setup is None else setup.cost_spec()
    report = {
        "n": data.n, "p": data.p, "outputs": data.m,
        "mean_cost": float(np.mean(costs.cost_values(spec, z, data.outcomes))),
    }
    if setup is not None and setup.constraint() is not None:
        cons = setup.constraint_spec(gamma, lam)
        report["feasibility"] = setup.feasibility(z)
        report["feasible_cost"] = bench.feasible_cost(setup, z, data.outcomes)
        report["margin_gap"] = penalty.constraint_gap(theta, data, cons)
    text = json.dumps(report, sort_keys=True) + "\n"
    if cfg.out is not None:
        atomic_write_text(cfg.out, text)
        print(f"wrote {cfg.out}")
    else:
        sys.stdout.write(text)
    return 0


def run_bench(cfg: RunConfig) -> int:
    block, where = cfg.block, "bench"
    field_names = [f.name for f in dataclasses.fields(bench.ExperimentConfig)]
    _check_keys(block, ("preset", "timing") + tuple(field_names), where)
    if cfg.out is None:
        raise ConfigError("bench needs an output path (--out or bench.out)")
    timing = _typed(block, "timing", False, bool, where)
    preset_name = _typed(block, "preset", None, str, where)
    overrides = {k: v for k, v in block.items() if k in field_names}
    try:
        if preset_name is not None:
            merged = bench.preset(preset_name).to_dict()
            merged.update(overrides)
        elif overrides:
            merged = {**bench.ExperimentConfig().to_dict(), **overrides}
        else:
            raise ConfigError("bench needs a preset or an inline experiment config")
        exp = bench.ExperimentConfig.from_dict(merged)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    filled = exp.to_dict()
    filled["timing"] = timing
    if preset_name is not None:
        filled["preset"] = preset_name
    _echo(cfg.command, cfg.seed, cfg.threads, cfg.out, filled)
    report = bench.run_benchmark(exp, threads=cfg.threads)
    atomic_write_text(cfg.out, report.csv_text(timing=timing))
    print(f"wrote {cfg.out}: {len(report.rows)} rows")
    for msg in report.failures:
        print(f"failed cell: {msg}", file=sys.stderr)
    return 1 if report.failures else 0


def run_diagnose(cfg: RunConfig) -> int:
    block, where = cfg.block, "diagnose"
    _check_keys(block, ("data", "model", "rule", "cost", "constraint", "probes",
                        "epsilon", "rho", "residual", "draws", "cap"), where)
    data_path = _input_path(_require(block, "data", str, where), f"{where}.data")
    setup, kind = _cost_setup(_typed(block, "cost", {}, dict, where), f"{where}.cost")
    gamma, lam = _constraint_params(_typed(block, "constraint", {}, dict, where),
                                    setup, f"{where}.constraint")
    probes = _typed(block, "probes", 100, int, where)
    epsilon = _typed(block, "epsilon", 0.0, float, where)
    rho = _typed(block, "rho", 0.6, float, where)
    mode = _typed(block, "residual", "exact", str, where)
    draws = _typed(block, "draws", 100, int, where)
    cap = _typed(block, "cap", 10_000, int, where)
    if mode not in ("exact", "sampled", "none"):
        raise ConfigError(f"{where}.residual: expected exact|sampled|none, got {mode!r}")
    data = load_dataset(data_path)
    if "model" in block:
        model_path = _input_path(_require(block, "model", str, where), f"{where}.model")
        theta, _ = load_model(model_path)
        rule = theta.cfg
        ref = model_path
    else:
        rule = _rule_cfg(_typed(block, "rule", {}, dict, where), data.m, data.p,
                         f"{where}.rule")
        theta = random_init(rule, RngHandle(cfg.seed, "init"))
        ref = "random"
    filled = {"data": data_path, "model": ref,
              "cost": {"kind": kind} if setup is None else setup.to_dict(),
              "probes": probes, "epsilon": epsilon, "rho": rho,
              "residual": mode, "draws": draws, "cap": cap}
    _echo(cfg.command, cfg.seed, cfg.threads, cfg.out, filled)
    problem = smm.Problem(data, rule, _training_cost(setup, gamma, lam))
    sur = diagnostics.check_surrogation(problem, theta, epsilon, probes,
                                        RngHandle(cfg.seed, "index"))
    report = {
        "surrogation": {
            "probes": sur.probes, "epsilon": sur.epsilon,
            "touch_gap": sur.touch_gap,
            "majorization_gap": sur.majorization_gap,
            "convexity_gap": sur.convexity_gap, "ok": sur.ok(),
        },
        "objective": smm.full_objective(problem, theta),
        "eps_all_threshold": diagnostics.eps_all_threshold(rule, data),
        "directional_slope": diagnostics.directional_probe(
            problem, theta, RngHandle(cfg.seed, "output")),
    }
    if mode != "none":
        if mode == "exact":
            res = diagnostics.residual_exact(problem, theta, epsilon, rho, cap=cap)
        else:
            res = diagnostics.residual_sampled(problem, theta, epsilon, rho, draws,
                                               RngHandle(cfg.seed, "index"))
        report["residual"] = res.to_dict()
    text = json.dumps(report, sort_keys=True) + "\n"
    if cfg.out is not None:
        atomic_write_text(cfg.out, text)
        print(f"wrote {cfg.out}")
    else:
        sys.stdout.write(text)
    return 0


_RUNNERS = {
    "gen": run_gen,
    "train": run_train,
    "eval": run_eval,
    "bench": run_bench,
    "diagnose": run_diagnose,
    "sweep": run_sweep,
}


def run_command(cfg: RunConfig) -> int:
    return _RUNNERS[cfg.command](cfg)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="padr",
        description="Piecewise-affine decision rules: train, evaluate, benchmark.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="TOML or JSON config file")
    parser.add_argument("--preset", help="benchmark preset name (bench only)")
    parser.add_argument("--seed", type=int, help="global seed (overrides config)")
    parser.add_argument("--out", help="primary output path (overrides config)")
    parser.add_argument("--threads", type=int,
                        help="worker threads (overrides config and PADR_THREADS)")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = parse_config(args)
        return run_command(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
