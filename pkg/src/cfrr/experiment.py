"""Multi-seed experiment runs, aggregation and Table-1 style reports.

A run directory holds deterministic artifacts (``runs.csv``,
``aggregate.json``, ``table.md``, ``plot.csv``, ``manifest.json``, per-run
training logs and optional matchings) plus ``timings.csv``, the only file
with wall-clock values.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import DataError, ExposureLog, PairSpace, PathLike, SplitSpec, split_log
from .evaluation import bonferroni, cohens_d, evaluate_model, paired_t_test
from .matching import match_pool
from .objectives import OBJECTIVE_KINDS, ObjectiveSpec
from .propensity import GbdtConfig, PropensityConfig, exposure_auc, fit_propensity
from .synthgen import SynthConfig, generate_world, simulate_log
from .trainer import TrainConfig, TrainingDiverged, train

METRICS = ("ndcg_at_10", "mrr", "coverage_at_10", "gini_exposure")
# metrics where a smaller value is better
LOWER_IS_BETTER = {"gini_exposure"}
RUN_FIELDS = (
    "method", "seed", "objective", "reg_lambda", "best_epoch", "epochs_run", "propensity_auc",
    *METRICS, "n_eval_users", "dataset_hash", "config_hash",
)


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def file_hash(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _build(cls, overrides: Optional[dict], where: str):
    overrides = dict(overrides or {})
    known = {f.name for f in fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def propensity_config(d: Optional[dict], seed: int) -> PropensityConfig:
    d = dict(d or {})
    gb = _build(GbdtConfig, d.pop("gbdt", None), "propensity.gbdt")
    if "columns" in d and d["columns"] is not None:
        d["columns"] = tuple(d["columns"])
    d["seed"] = seed
    return _build(PropensityConfig, {**d, "gbdt": gb}, "propensity")


@dataclass(frozen=True)
class MethodSpec:
    name: str
    objective: str
    propensity: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, item) -> "MethodSpec":
        if isinstance(item, str):
            item = {"name": item}
        if not isinstance(item, dict) or "name" not in item:
            raise ConfigError(f"method entries need a name, got {item!r}")
        unknown = set(item) - {"name", "objective", "propensity", "train"}
        if unknown:
            raise ConfigError(f"method {item['name']}: unknown keys {sorted(unknown)}")
        kind = item.get("objective", item["name"])
        if kind not in OBJECTIVE_KINDS:
            raise ConfigError(f"method {item['name']}: unknown objective {kind!r}")
        return cls(item["name"], kind, dict(item.get("propensity") or {}), dict(item.get("train") or {}))


@dataclass
class ExperimentConfig:
    """Everything one ``run`` needs; ``to_dict`` is the hashed echo."""

    dataset: dict = field(default_factory=lambda: {"kind": "synth"})
    methods: List[MethodSpec] = field(default_factory=lambda: [MethodSpec("naive", "naive"), MethodSpec("snips", "snips")])
    seeds: List[int] = field(default_factory=lambda: list(range(10)))
    baseline: Optional[str] = None
    comparisons: List[Tuple[str, str]] = field(default_factory=list)
    train: dict = field(default_factory=dict)
    objective: dict = field(default_factory=dict)
    propensity: dict = field(default_factory=dict)
    reg_grid: Optional[List[float]] = None
    eval: dict = field(default_factory=dict)
    matching: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("at least one method is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ConfigError("method names must be unique")
        if self.baseline is None:
            self.baseline = names[0]
        if self.baseline not in names:
            raise ConfigError(f"baseline {self.baseline!r} is not a listed method")
        for a, b in self.comparisons:
            if a not in names or b not in names:
                raise ConfigError(f"comparison ({a}, {b}) names an unknown method")
        kind = self.dataset.get("kind", "synth")
        if kind not in ("synth", "log", "edgelist"):
            raise ConfigError(f"unknown dataset kind {kind!r}")
        if kind != "synth" and "path" not in self.dataset:
            raise ConfigError(f"dataset kind {kind!r} needs a path")
        unknown_eval = set(self.eval) - {"n_eval_users", "candidates_per_user", "full_ranking", "threshold"}
        if unknown_eval:
            raise ConfigError(f"eval: unknown keys {sorted(unknown_eval)}")
        # validate every nested block eagerly so errors surface before any run
        for m in self.methods:
            self.train_config(m, self.seeds[0])
            propensity_config({**self.propensity, **m.propensity}, 0)
        if kind == "synth":
            self.synth_config(self.seeds[0])

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        if "methods" in d:
            d["methods"] = [MethodSpec.parse(m) for m in d["methods"]]
        if "seeds" in d:
            seeds = d["seeds"]
            d["seeds"] = list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds]
        if "comparisons" in d:
            d["comparisons"] = [tuple(c) for c in d["comparisons"]]
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["comparisons"] = [list(c) for c in self.comparisons]
        return d

    def synth_config(self, seed: int) -> SynthConfig:
        return _build(SynthConfig, {**(self.dataset.get("synth") or {}), "seed": seed}, "dataset.synth")

    def train_config(self, method: MethodSpec, seed: int, reg_lambda: Optional[float] = None) -> TrainConfig:
        obj = {**self.objective, "kind": method.objective}
        if reg_lambda is not None:
            obj["reg_lambda"] = reg_lambda
        spec = _build(ObjectiveSpec, obj, "objective")
        return _build(TrainConfig, {**self.train, **method.train, "objective": spec, "seed": seed}, "train")

    def split_spec(self, seed: int) -> SplitSpec:
        s = dict(self.dataset.get("split") or {})
        if "fractions" in s:
            s["fractions"] = tuple(s["fractions"])
        return _build(SplitSpec, {**s, "seed": seed}, "dataset.split")


@dataclass
class Dataset:
    log: ExposureLog
    extras: Optional[np.ndarray]
    hash: str


def load_log_dir(path: PathLike) -> ExposureLog:
    """Exposure log written by ``synth`` or ``ingest`` (needs its manifest for the user count)."""
    path = Path(path)
    man = path / "manifest.json"
    if not man.exists():
        raise FileNotFoundError(f"{man}: dataset manifest not found")
    n_users = int(json.loads(man.read_text())["n_users"])
    return ExposureLog.from_csv(path / "exposure_log.csv", PairSpace.square(n_users))


def build_dataset_for_seed(config: ExperimentConfig, seed: int) -> Dataset:
    kind = config.dataset.get("kind", "synth")
    if kind == "synth":
        sc = config.synth_config(seed)
        world = generate_world(sc)
        sim = simulate_log(world)
        return Dataset(sim.log, world.attributes, config_hash({"synth": asdict(sc)}))
    if kind == "log":
        path = Path(config.dataset["path"])
        return Dataset(load_log_dir(path), None, file_hash(path / "exposure_log.csv"))
    from .ingest import build_dataset

    path = Path(config.dataset["path"])
    res = build_dataset(path, bool(config.dataset.get("directed", True)), config.dataset.get("max_users"),
                        int(config.dataset.get("ingest_seed", 0)))
    return Dataset(res.log, None, file_hash(path) + f":{config.dataset.get('max_users')}")


@dataclass
class RunResult:
    rows: List[dict] = field(default_factory=list)
    train_logs: Dict[str, List[dict]] = field(default_factory=dict)
    timings: List[dict] = field(default_factory=list)
    matchings: Dict[str, List[Tuple]] = field(default_factory=dict)
    failures: List[dict] = field(default_factory=list)


def _train_selected(config: ExperimentConfig, method: MethodSpec, seed: int, tr, va, prop, extras):
    """Train once per reg_lambda in the grid, keep the best validation NDCG@10 (earliest on ties)."""
    grid = config.reg_grid or [None]
    best = None
    for lam in grid:
        tc = config.train_config(method, seed, lam)
        model, log = train(tr, va, prop, tc, user_extras=extras)
        score = max(r["valid_ndcg_at_10"] for r in log.records) if log.records else -math.inf
        if best is None or score > best[0]:
            best = (score, tc, model, log)
    return best[1], best[2], best[3]


def run_seed(config: ExperimentConfig, seed: int) -> RunResult:
    """All methods for one seed; failures are recorded, not raised."""
    out = RunResult()
    data = build_dataset_for_seed(config, seed)
    tr, va, te = split_log(data.log, config.split_spec(seed))
    chash = config_hash(config.to_dict())
    ev = {"n_eval_users": 1500, "candidates_per_user": 100, "full_ranking": False, **config.eval}
    props: Dict[str, Tuple] = {}
    for method in config.methods:
        key = f"{method.name}/seed{seed}"
        try:
            prop, auc, prop_seconds = None, float("nan"), 0.0
            if method.objective != "naive":
                pc = propensity_config({**config.propensity, **method.propensity}, seed)
                pkey = canonical_json(asdict(pc))
                if pkey not in props:
                    t0 = time.perf_counter()
                    p = fit_propensity(tr, pc, extras=data.extras)
                    props[pkey] = (p, exposure_auc(p, te, seed), time.perf_counter() - t0)
                prop, auc, prop_seconds = props[pkey]
            t0 = time.perf_counter()
            tc, model, log = _train_selected(config, method, seed, tr, va, prop, data.extras)
            train_seconds = time.perf_counter() - t0
            report = evaluate_model(model, te, exclude=(tr, va), seed=seed, **ev)
        except (TrainingDiverged, DataError, FloatingPointError) as exc:
            out.failures.append({"method": method.name, "seed": seed, "error": f"{type(exc).__name__}: {exc}"})
            continue
        out.rows.append({
            "method": method.name, "seed": seed, "objective": method.objective,
            "reg_lambda": tc.reg_lambda, "best_epoch": log.best_epoch, "epochs_run": len(log.records),
            "propensity_auc": auc, **report.row(), "n_eval_users": report.n_eval_users,
            "dataset_hash": data.hash, "config_hash": chash,
        })
        out.train_logs[key] = log.records
        out.timings.append({
            "method": method.name, "seed": seed, "propensity_seconds": prop_seconds,
            "train_seconds": train_seconds, "outcome_fit_seconds": log.outcome_fit_seconds,
            "epoch_seconds": sum(log.wall_times),
        })
        if config.matching.get("enabled"):
            n = tr.pair_space.n_users
            users = np.arange(min(n, int(config.matching.get("max_users", 200))))
            m, scores = match_pool(model, users, config.matching.get("method", "stable"),
                                   int(config.matching.get("k", 50)), seed)
            out.matchings[key] = (m, scores)
    return out


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return "" if x is None else str(x)


def write_runs(rows: Sequence[dict], path: PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUN_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in RUN_FIELDS])


def read_runs(path: PathLike) -> List[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no run rows found")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for r in reader:
            row = dict(r)
            row["seed"] = int(row["seed"])
            for k in ("reg_lambda", "propensity_auc", *METRICS):
                row[k] = float(row[k]) if row[k] else float("nan")
            for k in ("best_epoch", "epochs_run", "n_eval_users"):
                row[k] = int(row[k])
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: no run rows found")
    return rows


def check_hashes(rows: Sequence[dict]) -> None:
    """All rows share one config hash and, per seed, one dataset hash."""
    if len({r["config_hash"] for r in rows}) > 1:
        raise DataError("runs come from different configurations")
    by_seed: Dict[int, set] = {}
    for r in rows:
        by_seed.setdefault(r["seed"], set()).add(r["dataset_hash"])
    bad = sorted(s for s, h in by_seed.items() if len(h) > 1)
    if bad:
        raise DataError(f"mismatched dataset hashes for seeds {bad}")


def aggregate(rows: Sequence[dict], baseline: Optional[str] = None, comparisons: Sequence[Tuple[str, str]] = ()) -> dict:
    """Mean and std per method and metric; paired tests of methods against the baseline.

    Every (comparison, metric) test belongs to one Bonferroni family.
    """
    check_hashes(rows)
    methods: List[str] = []
    for r in rows:
        if r["method"] not in methods:
            methods.append(r["method"])
    baseline = baseline or methods[0]
    per: Dict[str, Dict[int, dict]] = {m: {} for m in methods}
    for r in rows:
        per[r["method"]][r["seed"]] = r
    summary = {}
    for m in methods:
        seeds = sorted(per[m])
        summary[m] = {"n": len(seeds), "seeds": seeds}
        for k in METRICS:
            vals = np.array([per[m][s][k] for s in seeds])
            summary[m][k] = {
                "mean": float(vals.mean()),
                "std": float(vals.std(ddof=1)) if vals.shape[0] > 1 else 0.0,
            }
    pairs = [(m, baseline) for m in methods if m != baseline and baseline in per]
    pairs += [tuple(c) for c in comparisons if tuple(c) not in pairs and c[0] in per and c[1] in per]
    tests = []
    for a, b in pairs:
        seeds = sorted(set(per[a]) & set(per[b]))
        for k in METRICS:
            x = np.array([per[a][s][k] for s in seeds])
            y = np.array([per[b][s][k] for s in seeds])
            test = {"method": a, "versus": b, "metric": k, "n": len(seeds),
                    "mean_diff": float((x - y).mean()) if seeds else float("nan"), "p_value": None, "cohens_d": None}
            if len(seeds) >= 2:
                test["p_value"] = paired_t_test(x, y)
                try:
                    test["cohens_d"] = cohens_d(x, y)
                except ValueError:
                    pass
            tests.append(test)
    ps = [t["p_value"] for t in tests if t["p_value"] is not None]
    flags = iter(bonferroni(ps) if ps else [])
    for t in tests:
        t["significant"] = bool(next(flags)) if t["p_value"] is not None else False
    return {
        "baseline": baseline,
        "methods": methods,
        "summary": summary,
        "tests": tests,
        "bonferroni_family_size": len(ps),
        "config_hash": rows[0]["config_hash"],
    }


def render_table(agg: dict, digits: int = 4) -> str:
    """Markdown table of mean ± std; best value per metric in bold (ties all bold).

    A star marks a Bonferroni-significant difference from the baseline.
    """
    methods = agg["methods"]
    best = {}
    for k in METRICS:
        vals = [round(agg["summary"][m][k]["mean"], digits) for m in methods]
        target = min(vals) if k in LOWER_IS_BETTER else max(vals)
        best[k] = {m for m, v in zip(methods, vals) if v == target}
    sig = {(t["method"], t["metric"]) for t in agg["tests"] if t["significant"] and t["versus"] == agg["baseline"]}
    head = "| method | " + " | ".join(METRICS) + " |"
    lines = [head, "|" + "---|" * (len(METRICS) + 1)]
    for m in methods:
        cells = []
        for k in METRICS:
            s = agg["summary"][m][k]
            cell = f"{s['mean']:.{digits}f} ± {s['std']:.{digits}f}"
            if m in best[k]:
                cell = f"**{cell}**"
            if (m, k) in sig:
                cell += " *"
            cells.append(cell)
        lines.append(f"| {m} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_plot_csv(agg: dict, path: PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "metric", "mean", "std", "n"])
        for m in agg["methods"]:
            s = agg["summary"][m]
            for k in METRICS:
                w.writerow([m, k, repr(s[k]["mean"]), repr(s[k]["std"]), s["n"]])


def write_report(run_dir: PathLike, baseline: Optional[str] = None, comparisons=()) -> dict:
    """Re-aggregate ``runs.csv`` in ``run_dir`` and write aggregate, table and plot data."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise DataError(f"{run_dir}: run directory not found")
    man_path = run_dir / "manifest.json"
    if man_path.exists() and baseline is None:
        man = json.loads(man_path.read_text())
        baseline = man["config"].get("baseline")
        comparisons = man["config"].get("comparisons", [])
    rows = read_runs(run_dir / "runs.csv")
    agg = aggregate(rows, baseline, comparisons)
    (run_dir / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    (run_dir / "table.md").write_text(render_table(agg))
    write_plot_csv(agg, run_dir / "plot.csv")
    return agg


def run_experiment(config: ExperimentConfig, out_dir: PathLike) -> dict:
    """Run every (method, seed), persist artifacts and return the aggregate."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(exist_ok=True)
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            results = list(pool.map(run_seed, [config] * len(config.seeds), config.seeds))
    else:
        results = [run_seed(config, s) for s in config.seeds]
    order = {m.name: i for i, m in enumerate(config.methods)}
    rows = sorted((r for res in results for r in res.rows), key=lambda r: (order[r["method"]], r["seed"]))
    failures = [f for res in results for f in res.failures]
    chash = config_hash(config.to_dict())
    manifest = {"command": "run", "config": config.to_dict(), "config_hash": chash,
                "failures": failures, "nondeterministic_files": ["timings.csv"]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for res in results:
        for key, recs in res.train_logs.items():
            name = key.replace("/", "_")
            with open(out / "logs" / f"{name}.jsonl", "w") as fh:
                for rec in recs:
                    fh.write(json.dumps({**rec, "config_hash": chash}, sort_keys=True) + "\n")
        for key, (m, scores) in res.matchings.items():
            (out / "matching").mkdir(exist_ok=True)
            m.to_csv(out / "matching" / f"{key.replace('/', '_')}.csv", scores)
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ["method", "seed", "propensity_seconds", "train_seconds", "outcome_fit_seconds", "epoch_seconds"]
        w.writerow(cols)
        for res in results:
            for t in res.timings:
                w.writerow([t[c] for c in cols])
    if failures:
        warnings.warn(f"{len(failures)} run(s) failed; aggregating the completed ones")
    if not rows:
        raise RuntimeError("every run failed")
    write_runs(rows, out / "runs.csv")
    return write_report(out, config.baseline, config.comparisons)
