"""Shared domain types: pair spaces, exposure logs, splits and seeded randomness."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

PathLike = Union[str, Path]

LOG_FIELDS = ("u", "v", "exposed", "outcome", "timestamp")


class DataError(ValueError):
    """Raised when input data violates a structural contract."""


def seeded_rng(seed: int) -> np.random.Generator:
    """Return a deterministic random stream for ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def derive_rng(seed: int, *counters: int) -> np.random.Generator:
    """Child stream for ``(seed, *counters)``.

    Workers, epochs and partitions each get their own stream by appending
    their index to the master seed, so the draw order of one consumer never
    shifts another's.
    """
    entropy = [int(seed)] + [int(c) for c in counters]
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class PairSpace:
    """The set of user pairs a dataset lives on.

    For ``symmetric`` spaces both sides are the same pool and (u, v) and
    (v, u) denote one unordered pair with u != v.
    """

    side_u: int
    side_v: int
    symmetric: bool = True

    def __post_init__(self):
        if self.side_u < 1 or self.side_v < 1:
            raise ValueError("pair space sides must be positive")
        if self.symmetric and self.side_u != self.side_v:
            raise ValueError("symmetric pair space needs side_u == side_v")

    @classmethod
    def square(cls, n_users: int) -> "PairSpace":
        return cls(n_users, n_users, True)

    @property
    def n_users(self) -> int:
        return max(self.side_u, self.side_v)

    @property
    def size(self) -> int:
        if self.symmetric:
            return self.side_u * (self.side_u - 1) // 2
        return self.side_u * self.side_v

    def canonical(self, u, v):
        """Map pairs to their storage orientation (min, max) when symmetric."""
        if not self.symmetric:
            return u, v
        if np.isscalar(u) and np.isscalar(v):
            return (u, v) if u <= v else (v, u)
        u = np.asarray(u)
        v = np.asarray(v)
        return np.minimum(u, v), np.maximum(u, v)

    def key(self, u, v):
        """Integer key, identical for both orientations of a symmetric pair."""
        cu, cv = self.canonical(u, v)
        return np.asarray(cu, dtype=np.int64) * self.side_v + np.asarray(cv, dtype=np.int64)

    def unkey(self, key):
        key = np.asarray(key, dtype=np.int64)
        return key // self.side_v, key % self.side_v

    def enumerate(self) -> Tuple[np.ndarray, np.ndarray]:
        """All pairs in canonical orientation, row-major."""
        if self.symmetric:
            u, v = np.triu_indices(self.side_u, k=1)
            return u.astype(np.int64), v.astype(np.int64)
        u, v = np.meshgrid(np.arange(self.side_u), np.arange(self.side_v), indexing="ij")
        return u.ravel().astype(np.int64), v.ravel().astype(np.int64)

    def sample_uniform(self, size: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Draw ``size`` pairs uniformly (with replacement) in canonical orientation."""
        if self.symmetric:
            n = self.side_u
            u = rng.integers(0, n, size=size)
            v = rng.integers(0, n - 1, size=size)
            v = v + (v >= u)
            return self.canonical(u, v)
        return rng.integers(0, self.side_u, size=size), rng.integers(0, self.side_v, size=size)

    def validate(self, u, v) -> None:
        u = np.asarray(u)
        v = np.asarray(v)
        if u.size == 0:
            return
        if u.min() < 0 or v.min() < 0 or u.max() >= self.side_u or v.max() >= self.side_v:
            raise DataError("user id outside the pair-space bounds")
        if self.symmetric and np.any(u == v):
            raise DataError("self-pair (u == v) in a symmetric pair space")


class LoggedInteraction(NamedTuple):
    u: int
    v: int
    exposed: bool
    outcome: Optional[float]
    timestamp: int


class ExposureLog:
    """Column-stored log of (u, v, exposed, outcome, timestamp) records.

    ``outcome`` is NaN exactly where ``exposed`` is false.  Pairs of a
    symmetric space are stored canonically.  Instances are treated as
    immutable; the column arrays are made read-only.
    """

    def __init__(self, u, v, exposed, outcome, timestamp, pair_space: PairSpace):
        u = np.asarray(u, dtype=np.int64)
        v = np.asarray(v, dtype=np.int64)
        exposed = np.asarray(exposed, dtype=bool)
        outcome = np.asarray(outcome, dtype=np.float64)
        timestamp = np.asarray(timestamp, dtype=np.int64)
        n = u.shape[0]
        if not (v.shape[0] == exposed.shape[0] == outcome.shape[0] == timestamp.shape[0] == n):
            raise DataError("log columns differ in length")
        pair_space.validate(u, v)
        u, v = pair_space.canonical(u, v)
        if np.any(exposed & np.isnan(outcome)) or np.any(~exposed & ~np.isnan(outcome)):
            raise DataError("outcome must be present iff the pair was exposed")
        obs = outcome[exposed]
        if obs.size and (obs.min() < 0.0 or obs.max() > 1.0):
            raise DataError("outcomes must lie in [0, 1]")
        if n and np.any(timestamp < 0):
            raise DataError("timestamps must be non-negative")
        keys = pair_space.key(u, v)
        if n and np.unique(np.stack([keys, timestamp]), axis=1).shape[1] != n:
            raise DataError("duplicate (u, v) entry with the same timestamp")
        self.u = np.asarray(u, dtype=np.int64)
        self.v = np.asarray(v, dtype=np.int64)
        self.exposed = exposed
        self.outcome = outcome
        self.timestamp = timestamp
        self.pair_space = pair_space
        for arr in (self.u, self.v, self.exposed, self.outcome, self.timestamp):
            arr.setflags(write=False)

    @classmethod
    def from_exposed(cls, u, v, outcome, pair_space: PairSpace, timestamp=None) -> "ExposureLog":
        u = np.asarray(u, dtype=np.int64)
        if timestamp is None:
            timestamp = np.arange(u.shape[0])
        return cls(u, v, np.ones(u.shape[0], dtype=bool), outcome, timestamp, pair_space)

    def __len__(self) -> int:
        return int(self.u.shape[0])

    def __iter__(self) -> Iterator[LoggedInteraction]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> LoggedInteraction:
        r = self.outcome[i]
        return LoggedInteraction(
            int(self.u[i]), int(self.v[i]), bool(self.exposed[i]),
            None if math.isnan(r) else float(r), int(self.timestamp[i]),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, ExposureLog):
            return NotImplemented
        return (
            self.pair_space == other.pair_space
            and np.array_equal(self.u, other.u)
            and np.array_equal(self.v, other.v)
            and np.array_equal(self.exposed, other.exposed)
            and np.array_equal(self.outcome, other.outcome, equal_nan=True)
            and np.array_equal(self.timestamp, other.timestamp)
        )

    def __repr__(self) -> str:
        return f"ExposureLog(n={len(self)}, exposed={self.n_exposed}, pair_space={self.pair_space})"

    @property
    def n_exposed(self) -> int:
        return int(self.exposed.sum())

    @property
    def interactions(self) -> list:
        return list(self)

    def keys(self) -> np.ndarray:
        return self.pair_space.key(self.u, self.v)

    def take(self, idx) -> "ExposureLog":
        idx = np.asarray(idx)
        return ExposureLog(
            self.u[idx], self.v[idx], self.exposed[idx], self.outcome[idx],
            self.timestamp[idx], self.pair_space,
        )

    def exposed_only(self) -> "ExposureLog":
        return self.take(np.flatnonzero(self.exposed))

    def positives(self, threshold: float = 0.5) -> "ExposureLog":
        return self.take(np.flatnonzero(self.exposed & (np.nan_to_num(self.outcome, nan=-1.0) >= threshold)))

    def to_csv(self, path: PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_FIELDS)
            for rec in self:
                writer.writerow([
                    rec.u, rec.v, int(rec.exposed),
                    "" if rec.outcome is None else repr(rec.outcome), rec.timestamp,
                ])

    @classmethod
    def from_csv(cls, path: PathLike, pair_space: PairSpace) -> "ExposureLog":
        cols = {name: [] for name in LOG_FIELDS}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != LOG_FIELDS:
                raise DataError(f"{path}: expected header {','.join(LOG_FIELDS)}")
            for lineno, row in enumerate(reader, start=2):
                try:
                    cols["u"].append(int(row["u"]))
                    cols["v"].append(int(row["v"]))
                    cols["exposed"].append(bool(int(row["exposed"])))
                    cols["outcome"].append(float(row["outcome"]) if row["outcome"] else math.nan)
                    cols["timestamp"].append(int(row["timestamp"]))
                except (TypeError, ValueError) as exc:
                    raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
        return cls(cols["u"], cols["v"], cols["exposed"], cols["outcome"], cols["timestamp"], pair_space)


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "random"
    fractions: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("random", "temporal"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise ValueError("split fractions must be three positive numbers")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


def _cut_points(n: int, fractions: Sequence[float]) -> Tuple[int, int]:
    # Rounded cumulative boundaries; exact on counts divisible by the fractions.
    c1 = int(round(n * fractions[0]))
    c2 = int(round(n * (fractions[0] + fractions[1])))
    return c1, c2


def split_log(log: ExposureLog, spec: SplitSpec) -> Tuple[ExposureLog, ExposureLog, ExposureLog]:
    """Partition the exposed interactions into train/valid/test logs.

    Random mode shuffles with ``spec.seed``; temporal mode orders by
    timestamp (stable, so ties keep log order) and cuts at the fraction
    boundaries.
    """
    if len(log) == 0:
        raise DataError("cannot split an empty log")
    idx = np.flatnonzero(log.exposed)
    if spec.mode == "random":
        idx = seeded_rng(spec.seed).permutation(idx)
    else:
        idx = idx[np.argsort(log.timestamp[idx], kind="stable")]
    c1, c2 = _cut_points(idx.shape[0], spec.fractions)
    parts = (idx[:c1], idx[c1:c2], idx[c2:])
    if any(p.shape[0] == 0 for p in parts):
        raise DataError(
            f"split of {idx.shape[0]} exposed interactions leaves a part empty "
            f"(sizes {[p.shape[0] for p in parts]})"
        )
    return tuple(log.take(np.sort(p) if spec.mode == "random" else p) for p in parts)
