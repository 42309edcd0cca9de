"""Reciprocal datasets from SNAP-style edge lists."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import DataError, ExposureLog, PairSpace, PathLike, seeded_rng

Pair = Tuple[int, int]

_SPLIT = re.compile(r"[\s,]+")


@dataclass(frozen=True)
class EdgeList:
    """Cleaned graph with dense node ids.

    ``id_map[i]`` is the external id of dense node ``i``.  ``timestamps`` is
    None when the source carried no time column.
    """

    directed: bool
    src: np.ndarray
    dst: np.ndarray
    timestamps: Optional[np.ndarray]
    id_map: Tuple[str, ...]
    metadata: Dict[str, object] = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.id_map)

    @property
    def n_edges(self) -> int:
        return int(self.src.shape[0])

    @property
    def edges(self) -> List[Tuple[int, int, Optional[int]]]:
        ts = self.timestamps
        return [
            (int(a), int(b), None if ts is None else int(ts[i]))
            for i, (a, b) in enumerate(zip(self.src, self.dst))
        ]

    def dense_id(self, external: str) -> int:
        return {ext: i for i, ext in enumerate(self.id_map)}[str(external)]

    def save_id_map(self, path: PathLike) -> None:
        Path(path).write_text(json.dumps({"external_ids": list(self.id_map)}, indent=1))


def load_id_map(path: PathLike) -> Tuple[str, ...]:
    return tuple(json.loads(Path(path).read_text())["external_ids"])


def _densify(src_ext: Sequence[str], dst_ext: Sequence[str]):
    # ids numbered by first appearance
    index: Dict[str, int] = {}
    for a, b in zip(src_ext, dst_ext):
        index.setdefault(a, len(index))
        index.setdefault(b, len(index))
    src = np.array([index[a] for a in src_ext], dtype=np.int64)
    dst = np.array([index[b] for b in dst_ext], dtype=np.int64)
    return src, dst, tuple(index)


def load_edgelist(path: PathLike, directed: bool) -> EdgeList:
    """Parse ``src dst [t]`` lines; ``#`` lines are comments, self-loops dropped."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"edge list not found: {path}")
    src_ext: List[str] = []
    dst_ext: List[str] = []
    times: List[int] = []
    has_time: Optional[bool] = None
    self_loops = 0
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p for p in _SPLIT.split(line) if p]
            if len(parts) not in (2, 3):
                raise DataError(f"{path}:{lineno}: expected 'src dst [t]', got {line!r}")
            if has_time is None:
                has_time = len(parts) == 3
            elif has_time != (len(parts) == 3):
                raise DataError(f"{path}:{lineno}: inconsistent column count")
            if has_time:
                try:
                    t = int(parts[2])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-integer timestamp {parts[2]!r}") from None
                if t < 0:
                    raise DataError(f"{path}:{lineno}: negative timestamp")
            if parts[0] == parts[1]:
                self_loops += 1
                continue
            src_ext.append(parts[0])
            dst_ext.append(parts[1])
            if has_time:
                times.append(t)
    if not src_ext:
        raise DataError(f"{path}: empty graph")
    src, dst, id_map = _densify(src_ext, dst_ext)
    return EdgeList(
        directed=directed,
        src=src,
        dst=dst,
        timestamps=np.array(times, dtype=np.int64) if has_time else None,
        id_map=id_map,
        metadata={"source": str(path), "self_loops_dropped": self_loops},
    )


def reciprocal_positives(graph: EdgeList) -> List[Pair]:
    """Mutual pairs as sorted (min, max) tuples, in order of first completion.

    Directed graphs keep pairs present in both directions; every undirected
    edge is mutual.
    """
    seen = set()
    out: List[Pair] = []
    if graph.directed:
        arcs = set(zip(graph.src.tolist(), graph.dst.tolist()))
        for a, b in zip(graph.src.tolist(), graph.dst.tolist()):
            key = (min(a, b), max(a, b))
            if key not in seen and (b, a) in arcs:
                seen.add(key)
                out.append(key)
    else:
        for a, b in zip(graph.src.tolist(), graph.dst.tolist()):
            key = (min(a, b), max(a, b))
            if key not in seen:
                seen.add(key)
                out.append(key)
    return out


def positive_timestamps(graph: EdgeList, positives: Sequence[Pair]) -> Optional[List[int]]:
    """Time a reciprocal pair became mutual (the later of its two edge times)."""
    if graph.timestamps is None:
        return None
    first: Dict[Pair, int] = {}
    for a, b, t in zip(graph.src.tolist(), graph.dst.tolist(), graph.timestamps.tolist()):
        key = (a, b) if graph.directed else (min(a, b), max(a, b))
        first[key] = min(first.get(key, t), t)
    out = []
    for a, b in positives:
        if graph.directed:
            out.append(max(first[(a, b)], first[(b, a)]))
        else:
            out.append(first[(a, b)])
    return out


def negative_sample(positives: Sequence[Pair], pair_space: PairSpace, seed: int) -> List[Pair]:
    """Uniform unordered non-linked pairs, as many as positives, without replacement."""
    pos_keys = np.unique(pair_space.key(*np.array(positives, dtype=np.int64).reshape(-1, 2).T))
    need = len(pos_keys) if len(positives) else 0
    free = pair_space.size - len(pos_keys)
    if need > free:
        raise DataError(f"only {free} non-linked pairs available, {need} negatives requested")
    rng = seeded_rng(seed)
    if need == 0:
        return []
    if pair_space.size <= 4 * (need + len(pos_keys)) or pair_space.size <= 1_000_000:
        # exhaustive complement
        u, v = pair_space.enumerate()
        keys = pair_space.key(u, v)
        keys = keys[~np.isin(keys, pos_keys)]
        chosen = rng.choice(keys, size=need, replace=False)
    else:
        chosen = np.empty(0, dtype=np.int64)
        while chosen.shape[0] < need:
            cand = pair_space.key(*pair_space.sample_uniform(2 * (need - chosen.shape[0]) + 16, rng))
            cand = cand[~np.isin(cand, pos_keys)]
            merged = np.concatenate([chosen, cand])
            _, first = np.unique(merged, return_index=True)
            chosen = merged[np.sort(first)]
        chosen = chosen[:need]
    u, v = pair_space.unkey(chosen)
    return list(zip(u.tolist(), v.tolist()))


def to_exposure_log(
    positives: Sequence[Pair],
    negatives: Sequence[Pair],
    pair_space: PairSpace,
    timestamps: Optional[Sequence[int]] = None,
) -> ExposureLog:
    """Positives (outcome 1) then negatives (outcome 0), all exposed.

    ``timestamps`` covers positives followed by negatives; when absent,
    records are numbered in input order.
    """
    pairs = list(positives) + list(negatives)
    if set(map(tuple, positives)) & set(map(tuple, negatives)):
        raise DataError("positives and negatives overlap")
    arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    outcome = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))])
    ts = np.arange(len(pairs)) if timestamps is None else np.asarray(timestamps, dtype=np.int64)
    if ts.shape[0] != len(pairs):
        raise DataError("timestamps must cover every pair")
    return ExposureLog.from_exposed(arr[:, 0], arr[:, 1], outcome, pair_space, timestamp=ts)


def negative_timestamps(pos_times: Sequence[int], n_neg: int, seed: int) -> List[int]:
    """Negatives inherit times drawn from the positives' empirical distribution."""
    rng = seeded_rng(seed)
    return rng.choice(np.asarray(pos_times), size=n_neg, replace=True).tolist()


def degrees(graph: EdgeList) -> np.ndarray:
    """Number of distinct neighbours per node (direction ignored)."""
    a = np.minimum(graph.src, graph.dst)
    b = np.maximum(graph.src, graph.dst)
    keys = np.unique(a * graph.n_nodes + b)
    a, b = keys // graph.n_nodes, keys % graph.n_nodes
    return np.bincount(np.concatenate([a, b]), minlength=graph.n_nodes)


def cap_users(graph: EdgeList, max_users: int, seed: int = 0) -> EdgeList:
    """Induced subgraph on the ``max_users`` highest-degree nodes.

    Ties are broken by lower dense id; ``seed`` is accepted for interface
    symmetry and unused because the selection is deterministic.
    """
    if max_users < 2:
        raise ValueError("max_users must be >= 2")
    if max_users >= graph.n_nodes:
        return graph
    deg = degrees(graph)
    order = np.lexsort((np.arange(graph.n_nodes), -deg))
    keep = np.sort(order[:max_users])
    mask = np.zeros(graph.n_nodes, dtype=bool)
    mask[keep] = True
    sel = mask[graph.src] & mask[graph.dst]
    remap = -np.ones(graph.n_nodes, dtype=np.int64)
    remap[keep] = np.arange(keep.shape[0])
    meta = dict(graph.metadata)
    meta["capped_to"] = int(max_users)
    return EdgeList(
        directed=graph.directed,
        src=remap[graph.src[sel]],
        dst=remap[graph.dst[sel]],
        timestamps=None if graph.timestamps is None else graph.timestamps[sel],
        id_map=tuple(graph.id_map[i] for i in keep),
        metadata=meta,
    )


@dataclass
class IngestResult:
    log: ExposureLog
    graph: EdgeList
    n_positives: int
    n_negatives: int
    has_timestamps: bool


def build_dataset(
    path: PathLike,
    directed: bool,
    max_users: Optional[int] = None,
    seed: int = 0,
) -> IngestResult:
    """Edge list -> capped graph -> reciprocal positives + sampled negatives -> log."""
    graph = load_edgelist(path, directed)
    if max_users is not None:
        graph = cap_users(graph, max_users, seed)
    positives = reciprocal_positives(graph)
    if not positives:
        raise DataError(f"{path}: no reciprocal pairs")
    space = PairSpace.square(graph.n_nodes)
    negatives = negative_sample(positives, space, seed)
    pos_t = positive_timestamps(graph, positives)
    ts = None
    if pos_t is not None:
        ts = list(pos_t) + negative_timestamps(pos_t, len(negatives), seed + 1)
    log = to_exposure_log(positives, negatives, space, ts)
    return IngestResult(log, graph, len(positives), len(negatives), pos_t is not None)
