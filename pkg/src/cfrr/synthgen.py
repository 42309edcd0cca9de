"""Synthetic reciprocal-matching worlds with a popularity-skewed logging policy.

Every user carries a latent factor vector drawn around a user-specific mean;
the true match probability of a pair is the sigmoid of the factors' dot
product, and a user's popularity is its total true acceptance probability.
The historical logging policy displays a pair with probability equal to the
sigmoid of the two users' standardized popularities, so the exposure log
over-represents popular users by a tunable amount.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .core import ExposureLog, PairSpace, PathLike, derive_rng

logger = logging.getLogger(__name__)

# Above this many users pairs are sampled, not enumerated.
ENUMERATION_LIMIT = 20_000
_THIN_BINS = 64
_ROW_CHUNK = 512


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 5000
    latent_dim: int = 16
    target_log_size: int = 50_000
    bias_strength: float = 1.0
    popularity_spread: float = 0.5
    seed: int = 0
    # mean true match probability over the pair space
    target_match_rate: float = 0.1
    # observable per-user attributes are the factors plus this much noise
    attribute_noise: float = 0.5

    def __post_init__(self):
        if self.n_users < 2:
            raise ValueError("n_users must be >= 2")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.target_log_size < 1:
            raise ValueError("target_log_size must be >= 1")
        if self.bias_strength < 0:
            raise ValueError("bias_strength must be >= 0")
        if self.popularity_spread < 0:
            raise ValueError("popularity_spread must be >= 0")
        if not 0.0 < self.target_match_rate < 1.0:
            raise ValueError("target_match_rate must lie in (0, 1)")
        if self.target_log_size >= PairSpace.square(self.n_users).size:
            raise ValueError("target_log_size must be smaller than the pair space")


@dataclass
class LatentWorld:
    """Ground truth of a synthetic world.

    Attributes
    ----------
    factors : ndarray, shape (n_users, latent_dim)
    popularity : ndarray, shape (n_users,)
        Sum over partners of the true match probability.
    match_offset : float
        Intercept added to every factor dot product (calibrates the match rate).
    logging_offset : float
        Intercept of the logging policy (calibrates the expected log size).
    attributes : ndarray
        Noisy observable per-user features, usable as demographic indicators.
    """

    factors: np.ndarray
    popularity: np.ndarray
    pair_space: PairSpace
    match_offset: float
    logging_offset: float
    attributes: np.ndarray
    config: SynthConfig
    metadata: Dict[str, object] = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return int(self.factors.shape[0])

    @property
    def standardized_popularity(self) -> np.ndarray:
        std = self.popularity.std()
        if std == 0:
            return np.zeros_like(self.popularity)
        return (self.popularity - self.popularity.mean()) / std


def _check_pair(u, v) -> None:
    if np.any(np.asarray(u) == np.asarray(v)):
        raise ValueError("pair probabilities are undefined for u == v")


def _row_sums(fn, n: int) -> np.ndarray:
    """Sum fn(rows) over off-diagonal columns, processed in row chunks."""
    out = np.empty(n)
    for start in range(0, n, _ROW_CHUNK):
        rows = np.arange(start, min(start + _ROW_CHUNK, n))
        block = fn(rows)
        block[np.arange(rows.size), rows] = 0.0
        out[rows] = block.sum(axis=1)
    return out


def _mean_match_rate(factors: np.ndarray, offset: float, partners: Optional[np.ndarray]) -> float:
    n = factors.shape[0]
    if partners is None:
        total = _row_sums(lambda rows: expit(factors[rows] @ factors.T + offset), n).sum()
        return float(total / (n * (n - 1)))
    # sampled estimate for very large pools
    u, v = partners
    return float(expit(np.einsum("ij,ij->i", factors[u], factors[v]) + offset).mean())


def _popularity(factors: np.ndarray, offset: float, rng, sampled: bool) -> np.ndarray:
    n = factors.shape[0]
    if not sampled:
        return _row_sums(lambda rows: expit(factors[rows] @ factors.T + offset), n)
    k = 5000
    partners = rng.integers(0, n, size=k)
    pop = np.empty(n)
    for start in range(0, n, _ROW_CHUNK):
        rows = np.arange(start, min(start + _ROW_CHUNK, n))
        block = expit(factors[rows] @ factors[partners].T + offset)
        block[rows[:, None] == partners[None, :]] = 0.0
        pop[rows] = block.mean(axis=1) * (n - 1)
    return pop


def _expected_log_size(z: np.ndarray, bias: float, offset: float, sampled_pairs=None, pair_count=None) -> float:
    """Expected number of exposures, sum over pairs of sigmoid(bias*(z_u+z_v)+offset)."""
    n = z.shape[0]
    if sampled_pairs is None:
        return float(_row_sums(lambda rows: expit(bias * (z[rows, None] + z[None, :]) + offset), n).sum() / 2)
    u, v = sampled_pairs
    return float(expit(bias * (z[u] + z[v]) + offset).mean() * pair_count)


def _solve_offset(fn, target: float, lo: float = -40.0, hi: float = 40.0) -> float:
    return float(brentq(lambda c: fn(c) - target, lo, hi, xtol=1e-12, rtol=1e-12, maxiter=200))


def generate_world(config: SynthConfig) -> LatentWorld:
    """Draw latent factors, calibrate intercepts and compute popularity."""
    rng = derive_rng(config.seed, 0)
    n, d = config.n_users, config.latent_dim
    sampled = n > ENUMERATION_LIMIT
    means = rng.normal(0.0, config.popularity_spread, size=n)
    factors = means[:, None] + rng.normal(0.0, 1.0 / np.sqrt(d), size=(n, d))
    attributes = factors + rng.normal(0.0, config.attribute_noise, size=(n, d))
    space = PairSpace.square(n)

    partners = space.sample_uniform(2_000_000, rng) if sampled else None
    match_offset = _solve_offset(
        lambda b: _mean_match_rate(factors, b, partners), config.target_match_rate
    )
    popularity = _popularity(factors, match_offset, rng, sampled)
    world = LatentWorld(
        factors=factors,
        popularity=popularity,
        pair_space=space,
        match_offset=match_offset,
        logging_offset=0.0,
        attributes=attributes,
        config=config,
        metadata={"sampled_pairs": sampled},
    )
    world.logging_offset = calibrate_logging_offset(world, config)
    return world


def calibrate_logging_offset(world: LatentWorld, config: SynthConfig) -> float:
    """Logging intercept whose expected exposure count equals the target log size."""
    z = world.standardized_popularity
    space = world.pair_space
    if world.metadata.get("sampled_pairs"):
        pairs = space.sample_uniform(2_000_000, derive_rng(config.seed, 1))
        fn = lambda c: _expected_log_size(z, config.bias_strength, c, pairs, space.size)  # noqa: E731
    else:
        fn = lambda c: _expected_log_size(z, config.bias_strength, c)  # noqa: E731
    return _solve_offset(fn, float(config.target_log_size))


def true_match_prob(world: LatentWorld, u, v):
    """sigmoid(<f_u, f_v> + match_offset); accepts scalars or arrays."""
    _check_pair(u, v)
    fu = world.factors[np.asarray(u)]
    fv = world.factors[np.asarray(v)]
    out = expit(np.sum(fu * fv, axis=-1) + world.match_offset)
    return float(out) if np.ndim(out) == 0 else out


def _offset_for(world: LatentWorld, config: Optional[SynthConfig]) -> Tuple[float, float]:
    if config is None or config == world.config:
        return world.config.bias_strength, world.logging_offset
    return config.bias_strength, calibrate_logging_offset(world, config)


def logging_propensity(world: LatentWorld, u, v, config: Optional[SynthConfig] = None):
    """Display probability of the historical policy for pair(s) (u, v)."""
    _check_pair(u, v)
    bias, offset = _offset_for(world, config)
    z = world.standardized_popularity
    out = expit(bias * (z[np.asarray(u)] + z[np.asarray(v)]) + offset)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class SimulatedLog:
    """A sampled exposure log plus the true propensity of every exposed pair.

    ``theta`` is aligned with ``log``; ``theta_table`` maps the full
    enumeration (when available) for oracle experiments.
    """

    log: ExposureLog
    theta: np.ndarray
    metadata: Dict[str, object] = field(default_factory=dict)


def simulate_log(world: LatentWorld, config: Optional[SynthConfig] = None, seed: Optional[int] = None) -> SimulatedLog:
    """Bernoulli exposure per pair, Bernoulli outcome per exposed pair.

    Timestamps follow draw order (row-major canonical enumeration).
    """
    config = config or world.config
    seed = config.seed if seed is None else seed
    space = world.pair_space
    bias, offset = _offset_for(world, config)
    z = world.standardized_popularity
    us, vs, thetas = [], [], []
    if not world.metadata.get("sampled_pairs"):
        n = world.n_users
        for part, start in enumerate(range(0, n - 1, _ROW_CHUNK)):
            rng = derive_rng(seed, 2, part)
            rows = np.arange(start, min(start + _ROW_CHUNK, n - 1))
            u, v = _upper_block(rows, n)
            th = expit(bias * (z[u] + z[v]) + offset)
            hit = rng.random(th.shape[0]) < th
            us.append(u[hit])
            vs.append(v[hit])
            thetas.append(th[hit])
    else:
        # blockwise thinning: users are binned by popularity; within a bin pair
        # candidates are drawn without replacement at the block's max rate and
        # accepted with theta / bound
        order = np.argsort(z, kind="stable")
        bins = np.array_split(order, _THIN_BINS)
        zmax = np.array([z[b].max() for b in bins])
        for a in range(len(bins)):
            for b in range(a, len(bins)):
                rng = derive_rng(seed, 2, a, b)
                ua, ub = bins[a], bins[b]
                count = ua.size * (ua.size - 1) // 2 if a == b else ua.size * ub.size
                if count == 0:
                    continue
                bound = expit(bias * (zmax[a] + zmax[b]) + offset)
                n_cand = int(rng.binomial(count, bound))
                if n_cand == 0:
                    continue
                idx = rng.choice(count, size=n_cand, replace=False)
                if a == b:
                    # index -> (i, j) with i < j inside the bin
                    i = (np.floor((2 * ua.size - 1 - np.sqrt((2 * ua.size - 1) ** 2 - 8.0 * idx)) / 2)).astype(np.int64)
                    i = np.clip(i, 0, ua.size - 2)
                    first = i * (2 * ua.size - i - 1) // 2
                    fix = idx < first
                    i[fix] -= 1
                    first = i * (2 * ua.size - i - 1) // 2
                    nxt = (i + 1) * (2 * ua.size - i - 2) // 2
                    fix = idx >= nxt
                    i[fix] += 1
                    first = i * (2 * ua.size - i - 1) // 2
                    j = idx - first + i + 1
                    x, y = ua[i], ua[j]
                else:
                    x, y = ua[idx // ub.size], ub[idx % ub.size]
                u, v = np.minimum(x, y), np.maximum(x, y)
                th = expit(bias * (z[u] + z[v]) + offset)
                hit = rng.random(th.shape[0]) < th / bound
                us.append(u[hit])
                vs.append(v[hit])
                thetas.append(th[hit])
        keys = world.pair_space.key(np.concatenate(us), np.concatenate(vs))
        srt = np.argsort(keys, kind="stable")
        us, vs, thetas = [np.concatenate(us)[srt]], [np.concatenate(vs)[srt]], [np.concatenate(thetas)[srt]]
    u = np.concatenate(us)
    v = np.concatenate(vs)
    theta = np.concatenate(thetas)
    r_rng = derive_rng(seed, 3)
    outcome = (r_rng.random(u.shape[0]) < true_match_prob(world, u, v)).astype(np.float64)
    log = ExposureLog.from_exposed(u, v, outcome, space)
    meta = {
        "sampled_pairs": bool(world.metadata.get("sampled_pairs")),
        "uniform_logging": bias == 0.0,
        "expected_log_size": float(config.target_log_size),
        "log_size": int(u.shape[0]),
    }
    return SimulatedLog(log=log, theta=theta, metadata=meta)


def _upper_block(rows: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray]:
    counts = n - 1 - rows
    u = np.repeat(rows, counts)
    starts = np.cumsum(counts) - counts
    v = np.arange(counts.sum()) - np.repeat(starts, counts) + u + 1
    return u.astype(np.int64), v.astype(np.int64)


def theta_table(world: LatentWorld, config: Optional[SynthConfig] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full enumeration of (u, v, theta); only for enumerable worlds."""
    if world.metadata.get("sampled_pairs"):
        raise ValueError("theta table is unavailable for sampled worlds")
    u, v = world.pair_space.enumerate()
    return u, v, logging_propensity(world, u, v, config)


FULL_THETA_LIMIT = 2_000_000


def dump_world(world: LatentWorld, out_dir: PathLike, sim: Optional[SimulatedLog] = None) -> Dict[str, Path]:
    """Write factors CSV, a JSON sidecar with config echo, and the theta table.

    The theta table covers every pair when the pair space has at most
    ``FULL_THETA_LIMIT`` pairs, otherwise only the logged pairs of ``sim``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"factors": out / "world_factors.csv", "world": out / "world.json"}
    d = world.factors.shape[1]
    header = ["user", "popularity"] + [f"f{i}" for i in range(d)] + [f"a{i}" for i in range(d)]
    rows = np.column_stack([world.popularity, world.factors, world.attributes])
    with open(paths["factors"], "w") as fh:
        fh.write(",".join(header) + "\n")
        for i, row in enumerate(rows):
            fh.write(f"{i}," + ",".join(f"{x:.17g}" for x in row) + "\n")
    full = not world.metadata.get("sampled_pairs") and world.pair_space.size <= FULL_THETA_LIMIT
    sidecar = {
        "config": asdict(world.config),
        "match_offset": world.match_offset,
        "logging_offset": world.logging_offset,
        "metadata": world.metadata,
        "theta_table": "full" if full else ("logged" if sim is not None else "none"),
    }
    paths["world"].write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    if full:
        u, v, th = theta_table(world)
    elif sim is not None:
        u, v, th = sim.log.u, sim.log.v, sim.theta
    else:
        return paths
    paths["theta"] = out / "theta.csv"
    np.savetxt(paths["theta"], np.column_stack([u, v, th]), fmt=["%d", "%d", "%.17g"],
               delimiter=",", header="u,v,theta", comments="")
    return paths


def load_world(out_dir: PathLike) -> LatentWorld:
    """Inverse of :func:`dump_world` (theta table is recomputed, not read)."""
    out = Path(out_dir)
    side = json.loads((out / "world.json").read_text())
    config = SynthConfig(**side["config"])
    data = np.loadtxt(out / "world_factors.csv", delimiter=",", skiprows=1, ndmin=2)
    d = config.latent_dim
    return LatentWorld(
        factors=data[:, 2:2 + d],
        popularity=data[:, 1],
        pair_space=PairSpace.square(config.n_users),
        match_offset=side["match_offset"],
        logging_offset=side["logging_offset"],
        attributes=data[:, 2 + d:2 + 2 * d],
        config=config,
        metadata=side["metadata"],
    )
