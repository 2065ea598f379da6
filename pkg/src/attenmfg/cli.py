"""``attenmfg`` command line.

Every command writes its artifacts plus a ``manifest_<command>.json`` into
``--out``.  The manifest records the argv, the resolved configuration, the
seeds, a sha256 per artifact and the wall times.  Artifact hashes skip
wall-clock fields (``seconds``, ``decode_ms``, ``oracle_ms``, ``ms``) so two
runs with the same arguments hash identically.

Exit codes: 0 ok, 1 usage, 2 validation, 3 infeasible, 4 timeout.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from attenmfg import __version__
from attenmfg.core_model import (
    GeneratorConfig,
    config_from_name,
    generate_instance,
    load_instance,
    save_instance,
)
from attenmfg.embedding import assemble_features
from attenmfg.errors import AttenMfgError, BudgetExceededError, InstanceParseError
from attenmfg.evaluator import GapReport, gap, summarize_gaps, write_gap_csv
from attenmfg.oracle import DEFAULT_TIME_BUDGET, solve_bnb, solve_exhaustive
from attenmfg.policy import load_policy, rollout
from attenmfg.training import TRAIN_PRESETS, TrainConfig, Trainer, metrics_csv
from attenmfg import verification

log = logging.getLogger("attenmfg")

WALL_TIME_FIELDS = frozenset({"seconds", "decode_ms", "oracle_ms", "ms"})


class UsageError(AttenMfgError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2, which we reserve for validation
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config and manifest helpers


def read_config(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as e:
        raise UsageError(f"cannot read config {p}: {e}") from e
    if p.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        try:
            return tomllib.loads(raw.decode())
        except tomllib.TOMLDecodeError as e:
            raise InstanceParseError(str(p), f"{p}: {e}") from e
    try:
        return json.loads(raw)
    except json.JSONDecodeError as e:
        raise InstanceParseError(str(p), f"{p}: {e}") from e


def content_hash(path: Path) -> str:
    """sha256 of an artifact with wall-clock fields removed."""
    data = path.read_bytes()
    if path.suffix == ".csv":
        rows = list(csv.reader(io.StringIO(data.decode())))
        if rows:
            keep = [i for i, h in enumerate(rows[0]) if h not in WALL_TIME_FIELDS]
            data = "\n".join(",".join(r[i] for i in keep) for r in rows).encode()
    elif path.suffix == ".json":
        obj = json.loads(data)
        if isinstance(obj, dict):
            obj = {k: v for k, v in obj.items() if k not in WALL_TIME_FIELDS}
        data = json.dumps(obj, sort_keys=True).encode()
    return hashlib.sha256(data).hexdigest()


def write_manifest(out: Path, command: str, argv: Sequence[str], config: dict, seeds: dict,
                   artifacts: Sequence[Path], wall: dict[str, float]) -> Path:
    hashes = {p.relative_to(out).as_posix(): content_hash(p) for p in sorted(artifacts)}
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "config": config,
        "seeds": seeds,
        "artifacts": hashes,
        "outputs_sha256": hashlib.sha256(json.dumps(hashes, sort_keys=True).encode()).hexdigest(),
        "wall_times": wall,
    }
    path = out / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _write(path: Path, data: bytes | str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    path.write_bytes(data)
    return path


def _generator(name: str, overrides: dict | None = None, seed: int = 0) -> GeneratorConfig:
    try:
        return config_from_name(name, seed=seed, **(overrides or {}))
    except TypeError as e:
        raise UsageError(f"bad generator option: {e}") from e


def _load_instance_file(p: Path):
    try:
        return load_instance(p.read_bytes())
    except InstanceParseError as e:
        raise InstanceParseError(e.field, f"{p.name}: {e}") from e
    except AttenMfgError as e:
        e.args = (f"{p.name}: {e}",)
        raise


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args, cfg: dict, out: Path) -> tuple[dict, dict, list[Path]]:
    model = args.model or cfg.get("model")
    if not model:
        raise UsageError("generate needs --model (e.g. L5P10M25 or D_L2P4M6_J2)")
    n = args.n if args.n is not None else int(cfg.get("n", 20))
    base = _generator(model, cfg.get("generator"))
    seeds = [args.seed + i for i in range(n)]
    files = []
    for s in seeds:
        inst = generate_instance(base.with_seed(s))
        files.append(_write(out / f"{model}_{s}.json", save_instance(inst)))
    return {"model": model, "n": n, "generator": base.to_dict()}, {"instance_seeds": seeds}, files


def train_config_from(args, cfg: dict) -> tuple[TrainConfig, GeneratorConfig]:
    preset = args.preset or cfg.get("preset", "desk")
    if preset not in TRAIN_PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(TRAIN_PRESETS)}")
    model, train_cfg = TRAIN_PRESETS[preset]
    model = args.model or cfg.get("model", model)
    d = train_cfg.to_dict()
    d.update(cfg.get("train", {}))
    for key in ("epochs", "lr", "batch", "instances_per_epoch", "baseline_rollouts"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    d["seed"] = args.seed
    try:
        train_cfg = TrainConfig.from_dict(d)
    except TypeError as e:
        raise UsageError(f"bad training option: {e}") from e
    return train_cfg, _generator(model, cfg.get("generator"))


def cmd_train(args, cfg: dict, out: Path) -> tuple[dict, dict, list[Path]]:
    if args.resume:
        trainer = Trainer.from_checkpoint(Path(args.resume).read_bytes())
    else:
        train_cfg, gen_cfg = train_config_from(args, cfg)
        trainer = Trainer(train_cfg, gen_cfg)
    metrics = trainer.train(lambda m: print(
        f"epoch {m.epoch}: train {m.train_mean_cost:.2f} holdout {m.holdout_greedy_cost:.2f} "
        f"|g| {m.grad_norm:.3g} ({m.seconds:.1f}s)", flush=True))
    files = [_write(out / "model.ckpt", trainer.checkpoint()),
             _write(out / "metrics.csv", metrics_csv(metrics))]
    config = {"train": trainer.cfg.to_dict(), "generator": trainer.gen_cfg.to_dict()}
    return config, {"train_seed": trainer.cfg.seed}, files


def _oracle(f, economics, budget: float, exhaustive: bool):
    if exhaustive:
        return solve_exhaustive(f, economics)
    return solve_bnb(f, economics, time_budget=budget)


def cmd_solve_oracle(args, cfg: dict, out: Path) -> tuple[dict, dict, list[Path]]:
    budget = args.time_budget if args.time_budget is not None else float(cfg.get("time_budget", DEFAULT_TIME_BUDGET))
    files = []
    timed_out = False
    for name in args.instances:
        p = Path(name)
        inst = _load_instance_file(p)
        res = _oracle(assemble_features(inst), inst.economics, budget, args.exhaustive)
        timed_out |= not res.proven
        files.append(_write(out / f"{p.stem}.oracle.json", json.dumps(res.to_json(), indent=2) + "\n"))
        print(json.dumps(res.to_json()))
    args._timed_out = timed_out
    return {"time_budget": budget, "exhaustive": args.exhaustive}, {}, files


def evaluate_dir(policy, paths: Sequence[Path], with_oracle: bool, budget: float) -> list[GapReport]:
    rows = []
    for p in paths:
        inst = _load_instance_file(p)
        f = assemble_features(inst)
        t0 = time.perf_counter()
        r = rollout(inst, policy, "greedy", features=f)
        decode_ms = (time.perf_counter() - t0) * 1e3
        o_cost = g = o_ms = None
        proven = False
        if with_oracle:
            res = solve_bnb(f, inst.economics, time_budget=budget)
            o_ms = res.ms
            if res.proven:
                proven = True
                o_cost, g = res.cost, gap(res.cost, r.cost)
        rows.append(GapReport(p.stem, o_cost, r.cost, g, decode_ms, o_ms, proven))
    return rows


def cmd_evaluate(args, cfg: dict, out: Path) -> tuple[dict, dict, list[Path]]:
    ckpt = args.ckpt or cfg.get("ckpt")
    inst_dir = args.instances or cfg.get("instances")
    if not ckpt or not inst_dir:
        raise UsageError("evaluate needs --ckpt and --instances")
    policy, _ = load_policy(Path(ckpt).read_bytes())
    paths = sorted(p for p in Path(inst_dir).glob("*.json")
                   if not p.name.startswith("manifest_") and not p.name.endswith(".oracle.json"))
    budget = args.time_budget if args.time_budget is not None else float(cfg.get("time_budget", 60.0))
    rows = evaluate_dir(policy, paths, not args.no_oracle, budget)
    summary = summarize_gaps(rows)
    files = [_write(out / "gaps.csv", write_gap_csv(rows)),
             _write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")]
    print(json.dumps(summary))
    return {"ckpt": str(ckpt), "instances": str(inst_dir), "oracle": not args.no_oracle,
            "time_budget": budget}, {}, files


def gap_matrix(ckpts: Sequence[Path], configs: Sequence[str], n_eval: int, seed: int,
               budget: float) -> tuple[list[list[str]], dict]:
    """Mean greedy gap of each checkpoint on fresh instances of each configuration."""
    header = ["train_config", *configs]
    table = [header]
    cells = []
    for ck in ckpts:
        policy, meta = load_policy(ck.read_bytes())
        gen = meta.get("generator_config", {})
        train_name = gen.get("name") or ck.stem
        train_sites = gen.get("n_sites")
        row = [train_name]
        for c in configs:
            eval_cfg = config_from_name(c)
            gaps = []
            for i in range(n_eval):
                inst = generate_instance(eval_cfg.with_seed(seed + i))
                f = assemble_features(inst)
                res = solve_bnb(f, inst.economics, time_budget=budget)
                if not res.proven:
                    continue
                gaps.append(gap(res.cost, rollout(inst, policy, features=f).cost))
            value = float(np.mean(gaps)) if gaps else None
            row.append("NA" if value is None else repr(value))
            matched = train_sites is not None and train_sites == eval_cfg.n_sites
            cells.append({"train": train_name, "eval": c, "mean_gap": value, "n_proven": len(gaps),
                          "matched_sites": matched})
        table.append(row)
    matched = [c["mean_gap"] for c in cells if c["matched_sites"] and c["mean_gap"] is not None]
    other = [c["mean_gap"] for c in cells if not c["matched_sites"] and c["mean_gap"] is not None]
    report = {
        "cells": cells,
        "matched_mean_gap": float(np.mean(matched)) if matched else None,
        "mismatched_mean_gap": float(np.mean(other)) if other else None,
    }
    report["matched_lower"] = (None if not matched or not other
                               else report["matched_mean_gap"] < report["mismatched_mean_gap"])
    return table, report


def cmd_gap_matrix(args, cfg: dict, out: Path) -> tuple[dict, dict, list[Path]]:
    ckpts = [Path(c) for c in (args.ckpt or cfg.get("ckpts", []))]
    configs = args.configs.split(",") if args.configs else list(cfg.get("configs", []))
    if not ckpts or not configs:
        raise UsageError("gap-matrix needs at least one --ckpt and --configs")
    n_eval = args.n_eval if args.n_eval is not None else int(cfg.get("n_eval", 20))
    budget = args.time_budget if args.time_budget is not None else float(cfg.get("time_budget", 60.0))
    eval_seed = 1_000_000 + args.seed  # disjoint from generate's default seeds
    table, report = gap_matrix(ckpts, configs, n_eval, eval_seed, budget)
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(table)
    flag = report["matched_lower"]
    print(buf.getvalue(), end="")
    print("matched-site cells have lower mean gap: "
          + ("n/a" if flag is None else "yes" if flag else "no"))
    files = [_write(out / "gap_matrix.csv", buf.getvalue()),
             _write(out / "gap_matrix_report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")]
    return {"ckpts": [str(c) for c in ckpts], "configs": configs, "n_eval": n_eval,
            "time_budget": budget}, {"eval_seed": eval_seed}, files


def cmd_verify(args, cfg: dict, out: Path) -> tuple[dict, dict, list[Path]]:
    q = args.quick
    checks = [
        verification.check_dual_path(20 if q else 100, 10, args.seed),
        verification.check_throughput_cube(10 if q else 50, args.seed),
        verification.check_masking(1000 if q else 10_000, 10 if q else 50, args.seed),
        verification.check_gradient(args.seed),
        verification.check_oracle(10 if q else 50, args.seed, 5 if q else 20),
    ]
    for c in checks:
        print(c.line())
    report = [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in checks]
    args._failed = not all(c.passed for c in checks)
    return {"quick": q}, {"seed": args.seed}, [_write(out / "verify.json", json.dumps(report, indent=2) + "\n")]


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "solve-oracle": cmd_solve_oracle,
    "evaluate": cmd_evaluate,
    "gap-matrix": cmd_gap_matrix,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="base seed (default 0)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="torch intra-op threads; 1 (default) is bit-reproducible")
    common.add_argument("--config", default=argparse.SUPPRESS, help="TOML or JSON config file")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default .)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="attenmfg", parents=[common],
                description="Attention-based maintenance scheduling: generate, train, solve, evaluate.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write instance JSON files")
    g.add_argument("--model", help="configuration name, e.g. L5P10M25, LRP15M40, D_L2P4M6_J2")
    g.add_argument("--n", type=int, help="number of instances (default 20)")

    t = sub.add_parser("train", parents=[common], help="REINFORCE training")
    t.add_argument("--preset", help=f"one of {sorted(TRAIN_PRESETS)} (default desk)")
    t.add_argument("--model", help="override the preset's instance configuration")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--instances-per-epoch", dest="instances_per_epoch", type=int)
    t.add_argument("--rollouts", dest="baseline_rollouts", type=int)
    t.add_argument("--resume", help="continue from a training checkpoint")

    s = sub.add_parser("solve-oracle", parents=[common], help="exact solve of instance files")
    s.add_argument("instances", nargs="+")
    s.add_argument("--time-budget", type=float)
    s.add_argument("--exhaustive", action="store_true", help="full enumeration (tiny instances only)")

    e = sub.add_parser("evaluate", parents=[common], help="greedy decode and optimality gaps")
    e.add_argument("--ckpt")
    e.add_argument("--instances", help="directory of instance JSON files")
    e.add_argument("--no-oracle", action="store_true")
    e.add_argument("--time-budget", type=float, help="oracle seconds per instance (default 60)")

    m = sub.add_parser("gap-matrix", parents=[common], help="cross-configuration gap matrix")
    m.add_argument("--ckpt", action="append", help="checkpoint (repeatable)")
    m.add_argument("--configs", help="comma-separated evaluation configuration names")
    m.add_argument("--n-eval", type=int)
    m.add_argument("--time-budget", type=float)

    v = sub.add_parser("verify", parents=[common], help="run the invariant suites")
    v.add_argument("--quick", action="store_true")
    return p


def run(argv: Sequence[str]) -> int:
    args = build_parser().parse_args(argv)
    for k, default in (("seed", 0), ("threads", 1), ("config", None), ("out", "."), ("verbose", False)):
        if not hasattr(args, k):
            setattr(args, k, default)
    if not args.command:
        raise UsageError("missing command; see --help")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    cfg = read_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    config, seeds, files = COMMANDS[args.command](args, cfg, out)
    seeds = {"seed": args.seed, "threads": args.threads, **seeds}
    write_manifest(out, args.command, argv, config, seeds, files,
                   {"total_seconds": round(time.perf_counter() - t0, 3)})
    if getattr(args, "_timed_out", False):
        return BudgetExceededError.exit_code
    if getattr(args, "_failed", False):
        return 2
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return run(argv)
    except AttenMfgError as e:
        print(f"attenmfg: error: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, ValueError) as e:
        print(f"attenmfg: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
