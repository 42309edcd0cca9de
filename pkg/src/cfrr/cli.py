"""Command line entry point: ``synth``, ``ingest``, ``run`` and ``report``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure, 4 data error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import yaml

from .core import DataError
from .experiment import ConfigError, ExperimentConfig, config_hash, file_hash, run_experiment, write_report
from .synthgen import SynthConfig, dump_world, generate_world, simulate_log

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_DATA = 4


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{p}: config file not found")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return data


def _write_manifest(out: Path, payload: dict, files: List[str]) -> None:
    payload = dict(payload)
    payload["files"] = {f: file_hash(out / f) for f in sorted(files)}
    (out / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_synth(args) -> int:
    raw = load_config(args.config)
    synth = dict(raw.get("synth", raw.get("dataset", {}).get("synth", {})) or {})
    if args.seed is not None:
        synth["seed"] = args.seed
    if args.bias_strength is not None:
        synth["bias_strength"] = args.bias_strength
    try:
        sc = SynthConfig(**synth)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synth: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world = generate_world(sc)
    sim = simulate_log(world)
    paths = dump_world(world, out, sim)
    sim.log.to_csv(out / "exposure_log.csv")
    files = [p.name for p in paths.values()] + ["exposure_log.csv"]
    echo = asdict(sc)
    _write_manifest(out, {
        "command": "synth", "config": echo, "config_hash": config_hash(echo),
        "n_users": sc.n_users, "log_size": len(sim.log), **sim.metadata,
    }, files)
    print(f"synth: {sc.n_users} users, {len(sim.log)} logged pairs -> {out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    from .ingest import build_dataset

    res = build_dataset(args.path, directed=not args.undirected, max_users=args.max_users, seed=args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.log.to_csv(out / "exposure_log.csv")
    res.graph.save_id_map(out / "id_map.csv")
    echo = {"path": str(args.path), "directed": not args.undirected, "max_users": args.max_users, "seed": args.seed or 0}
    _write_manifest(out, {
        "command": "ingest", "config": echo, "config_hash": config_hash(echo),
        "source_hash": file_hash(args.path), "n_users": res.graph.n_nodes,
        "n_positives": res.n_positives, "n_negatives": res.n_negatives, "has_timestamps": res.has_timestamps,
    }, ["exposure_log.csv", "id_map.csv"])
    print(f"ingest: {res.graph.n_nodes} users, {res.n_positives} reciprocal positives, "
          f"{res.n_negatives} sampled negatives -> {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    raw = load_config(args.config)
    if args.seed is not None:
        raw["seeds"] = [args.seed]
    if args.method:
        listed = {(m if isinstance(m, str) else m.get("name")): m for m in raw.get("methods", [])}
        raw["methods"] = [listed.get(name, name) for name in args.method]
        if raw.get("baseline") not in args.method:
            raw.pop("baseline", None)
        raw["comparisons"] = [c for c in raw.get("comparisons", []) if set(c) <= set(args.method)]
    ds = dict(raw.get("dataset") or {"kind": "synth"})
    if args.bias_strength is not None:
        ds["synth"] = {**(ds.get("synth") or {}), "bias_strength": args.bias_strength}
    if args.max_users is not None:
        ds["max_users"] = args.max_users
    raw["dataset"] = ds
    config = ExperimentConfig.from_dict(raw)
    agg = run_experiment(config, args.out)
    print((Path(args.out) / "table.md").read_text(), end="")
    return EXIT_OK if agg else EXIT_RUNTIME


def cmd_report(args) -> int:
    write_report(args.run_dir)
    print((Path(args.run_dir) / "table.md").read_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfrr", description="Counterfactual reciprocal recommendation experiments")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic world and exposure log")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--bias-strength", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    i = sub.add_parser("ingest", help="turn an edge list into an exposure log")
    i.add_argument("path")
    i.add_argument("--undirected", action="store_true", help="treat every edge as a mutual tie")
    i.add_argument("--max-users", type=int)
    i.add_argument("--seed", type=int)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_ingest)

    r = sub.add_parser("run", help="train and evaluate methods over seeds")
    r.add_argument("--config")
    r.add_argument("--seed", type=int)
    r.add_argument("--method", action="append", help="restrict to this method (repeatable)")
    r.add_argument("--bias-strength", type=float)
    r.add_argument("--max-users", type=int)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="re-aggregate a run directory")
    rep.add_argument("run_dir")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
