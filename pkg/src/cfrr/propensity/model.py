"""Pair-level display propensities: features, fitting, clipping and refits."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from ..core import DataError, ExposureLog, PairSpace, PathLike, derive_rng
from .gbdt import BoostedTrees, GbdtConfig, fit_gbdt

BASE_FEATURES = (
    "log_degree_a",
    "log_degree_b",
    "log_exposure_a",
    "log_exposure_b",
    "popularity_interaction",
)


@dataclass(frozen=True)
class PropensityConfig:
    kind: str = "gbdt"
    gbdt: GbdtConfig = field(default_factory=GbdtConfig)
    # minimum emitted probability; 1/c aligns the clamp with the weight ceiling
    floor: float = 0.02
    logistic_l2: float = 1.0
    # unexposed rows sampled per exposed row when the log has no O=0 records
    negative_ratio: float = 1.0
    # subset of feature names to keep (None keeps all)
    columns: Optional[Tuple[str, ...]] = None
    # std of pair-level Gaussian noise added to the base features
    feature_noise: float = 0.0
    use_extras: bool = False
    outcome_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gbdt", "logistic"):
            raise ValueError(f"unknown propensity model kind {self.kind!r}")
        if not 0.0 < self.floor < 0.5:
            raise ValueError("floor must lie in (0, 0.5)")


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def pair_noise(keys: np.ndarray, seed: int, k: int) -> np.ndarray:
    """Standard normal draws, shape (len(keys), k), fixed by (seed, pair key).

    The same pair always receives the same perturbation, but draws of
    different pairs are unrelated, so the noise cannot act as a user code.
    """
    base = np.asarray(keys, dtype=np.uint64)[:, None] * np.uint64(2 * k) + np.arange(2 * k, dtype=np.uint64)
    h = _splitmix64(base ^ _splitmix64(np.full(1, seed, dtype=np.uint64)))
    unif = ((h >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0 ** 53
    u1, u2 = unif[:, :k], unif[:, k:]
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


class PairFeaturizer:
    """Per-user count tables from a log, turned into pair feature rows.

    Degree counts the user's positive outcomes, exposure count all of its
    exposed records.  Pairs are ordered canonically (smaller id first) so a
    pair and its reverse get the same row.
    """

    def __init__(
        self,
        pair_space: PairSpace,
        degree: np.ndarray,
        exposures: np.ndarray,
        extras: Optional[np.ndarray] = None,
        columns: Optional[Sequence[str]] = None,
        noise_std: float = 0.0,
        noise_seed: int = 0,
    ):
        self.pair_space = pair_space
        self.degree = np.asarray(degree, dtype=np.float64)
        self.exposures = np.asarray(exposures, dtype=np.float64)
        self.extras = None if extras is None else np.asarray(extras, dtype=np.float64)
        self.noise_std = float(noise_std)
        self.noise_seed = int(noise_seed)
        names = list(BASE_FEATURES)
        if self.extras is not None:
            k = self.extras.shape[1]
            names += [f"extra{i}_a" for i in range(k)] + [f"extra{i}_b" for i in range(k)]
        self.all_names = tuple(names)
        self.columns = tuple(names) if columns is None else tuple(columns)
        unknown = set(self.columns) - set(names)
        if unknown:
            raise ValueError(f"unknown feature columns {sorted(unknown)}")
        self._col_idx = np.array([names.index(c) for c in self.columns], dtype=np.int64)
        self._log_degree = np.log1p(self.degree)
        self._log_exposure = np.log1p(self.exposures)
        std = self.exposures.std()
        self._z = (self.exposures - self.exposures.mean()) / std if std > 0 else np.zeros_like(self.exposures)

    @classmethod
    def from_log(
        cls,
        log: ExposureLog,
        extras: Optional[np.ndarray] = None,
        columns: Optional[Sequence[str]] = None,
        noise_std: float = 0.0,
        noise_seed: int = 0,
        threshold: float = 0.5,
    ) -> "PairFeaturizer":
        deg, exp = user_counts(log, threshold)
        return cls(log.pair_space, deg, exp, extras, columns, noise_std, noise_seed)

    @property
    def n_users(self) -> int:
        return int(self.degree.shape[0])

    @property
    def n_features(self) -> int:
        return int(self._col_idx.shape[0])

    def __call__(self, u, v) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=np.int64))
        v = np.atleast_1d(np.asarray(v, dtype=np.int64))
        if u.size and (min(u.min(), v.min()) < 0 or max(u.max(), v.max()) >= self.n_users):
            raise DataError("unknown user in featurize")
        a, b = self.pair_space.canonical(u, v)
        cols = [
            self._log_degree[a], self._log_degree[b],
            self._log_exposure[a], self._log_exposure[b],
            self._z[a] * self._z[b],
        ]
        if self.extras is not None:
            cols += list(self.extras[a].T) + list(self.extras[b].T)
        X = np.column_stack(cols)
        if self.noise_std > 0:
            X[:, :len(BASE_FEATURES)] += self.noise_std * pair_noise(
                self.pair_space.key(a, b), self.noise_seed, len(BASE_FEATURES)
            )
        return X[:, self._col_idx]

    def to_dict(self) -> dict:
        return {
            "pair_space": asdict(self.pair_space),
            "degree": self.degree.tolist(),
            "exposures": self.exposures.tolist(),
            "extras": None if self.extras is None else self.extras.tolist(),
            "columns": list(self.columns),
            "noise_std": self.noise_std,
            "noise_seed": self.noise_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PairFeaturizer":
        return cls(
            PairSpace(**d["pair_space"]),
            np.array(d["degree"]),
            np.array(d["exposures"]),
            None if d["extras"] is None else np.array(d["extras"]),
            d["columns"],
            d.get("noise_std", 0.0),
            d.get("noise_seed", 0),
        )


def user_counts(log: ExposureLog, threshold: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """(positive-outcome count, exposure count) per user."""
    n = log.pair_space.n_users
    ex = log.exposed
    pos = ex & (np.nan_to_num(log.outcome, nan=-1.0) >= threshold)
    exposures = np.bincount(log.u[ex], minlength=n) + np.bincount(log.v[ex], minlength=n)
    degree = np.bincount(log.u[pos], minlength=n) + np.bincount(log.v[pos], minlength=n)
    return degree.astype(np.float64), exposures.astype(np.float64)


def featurize(log: ExposureLog, u: int, v: int, extras: Optional[np.ndarray] = None) -> np.ndarray:
    """Feature vector of a single pair, with counts taken from ``log``."""
    return PairFeaturizer.from_log(log, extras)(u, v)[0]


@dataclass
class PropensityModel:
    """Fitted display-probability model.

    ``logit_offset`` corrects the intercept for the subsampling rate of
    unexposed rows.  Predictions are clamped to ``[floor, 1 - floor]``.
    """

    kind: str
    featurizer: PairFeaturizer
    floor: float
    logit_offset: float = 0.0
    trees: Optional[BoostedTrees] = None
    coef: Optional[np.ndarray] = None
    intercept: float = 0.0
    mean: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None
    config: PropensityConfig = field(default_factory=PropensityConfig)
    metadata: dict = field(default_factory=dict)

    def margin(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.kind == "gbdt":
            raw = self.trees.margin(X)
        else:
            raw = ((X - self.mean) / self.scale) @ self.coef + self.intercept
        return raw + self.logit_offset

    def predict_features(self, X: np.ndarray) -> np.ndarray:
        return np.clip(expit(self.margin(X)), self.floor, 1.0 - self.floor)

    def predict_pairs(self, u, v) -> np.ndarray:
        return self.predict_features(self.featurizer(u, v))

    def to_dict(self) -> dict:
        cfg = asdict(self.config)
        return {
            "kind": self.kind,
            "floor": self.floor,
            "logit_offset": self.logit_offset,
            "trees": None if self.trees is None else self.trees.to_dict(),
            "coef": None if self.coef is None else self.coef.tolist(),
            "intercept": self.intercept,
            "mean": None if self.mean is None else self.mean.tolist(),
            "scale": None if self.scale is None else self.scale.tolist(),
            "featurizer": self.featurizer.to_dict(),
            "config": cfg,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PropensityModel":
        cfg = dict(d["config"])
        cfg["gbdt"] = GbdtConfig(**cfg["gbdt"])
        if cfg.get("columns") is not None:
            cfg["columns"] = tuple(cfg["columns"])
        return cls(
            kind=d["kind"],
            featurizer=PairFeaturizer.from_dict(d["featurizer"]),
            floor=d["floor"],
            logit_offset=d["logit_offset"],
            trees=None if d["trees"] is None else BoostedTrees.from_dict(d["trees"]),
            coef=None if d["coef"] is None else np.array(d["coef"]),
            intercept=d["intercept"],
            mean=None if d["mean"] is None else np.array(d["mean"]),
            scale=None if d["scale"] is None else np.array(d["scale"]),
            config=PropensityConfig(**cfg),
            metadata=d.get("metadata", {}),
        )

    def save(self, path: PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path: PathLike) -> "PropensityModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def predict_theta(model: PropensityModel, features: np.ndarray) -> np.ndarray:
    return model.predict_features(features)


def clip_weight(theta, c: float):
    """min(1/theta, c), elementwise."""
    if c <= 0:
        raise ValueError("clipping threshold must be positive")
    th = np.asarray(theta, dtype=np.float64)
    if np.any(th <= 0) or np.any(np.isnan(th)):
        raise ValueError("propensities must be positive to be inverted")
    w = np.minimum(1.0 / th, c)
    return float(w) if w.ndim == 0 else w


def sample_unexposed(log: ExposureLog, count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Uniform distinct pairs that never appear exposed in ``log``."""
    space = log.pair_space
    taken = np.unique(log.keys()[log.exposed])
    free = space.size - taken.shape[0]
    if count > free:
        raise DataError(f"cannot sample {count} unexposed pairs, only {free} exist")
    chosen = np.empty(0, dtype=np.int64)
    while chosen.shape[0] < count:
        cand = space.key(*space.sample_uniform(2 * (count - chosen.shape[0]) + 16, rng))
        cand = cand[~np.isin(cand, taken)]
        merged = np.concatenate([chosen, cand])
        _, first = np.unique(merged, return_index=True)
        chosen = merged[np.sort(first)]
    return space.unkey(chosen[:count])


def _labelled_rows(log: ExposureLog, config: PropensityConfig, rng) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """(u, v, label, logit offset) rows for exposure-likelihood fitting."""
    if (~log.exposed).any():
        return log.u, log.v, log.exposed.astype(np.float64), 0.0
    n_pos = len(log)
    n_exposed_pairs = np.unique(log.keys()).shape[0]
    n_neg = max(1, int(round(config.negative_ratio * n_pos)))
    nu, nv = sample_unexposed(log, n_neg, rng)
    rate = n_neg / (log.pair_space.size - n_exposed_pairs)
    u = np.concatenate([log.u, nu])
    v = np.concatenate([log.v, nv])
    y = np.concatenate([np.ones(n_pos), np.zeros(nu.shape[0])])
    return u, v, y, float(np.log(rate))


def _fit_logistic(X, y, l2, x0=None):
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Z = (X - mean) / scale
    n, k = Z.shape

    def objective(params):
        w, b = params[:k], params[k]
        m = Z @ w + b
        loss = (np.logaddexp(0.0, m) - y * m).mean() + 0.5 * l2 * (w @ w) / n
        r = (expit(m) - y) / n
        return loss, np.concatenate([Z.T @ r + l2 * w / n, [r.sum()]])

    if x0 is None:
        x0 = np.zeros(k + 1)
    res = minimize(objective, x0, jac=True, method="L-BFGS-B", options={"maxiter": 500, "gtol": 1e-10})
    return res.x[:k], float(res.x[k]), mean, scale


def _featurizer_for(log: ExposureLog, config: PropensityConfig, extras) -> PairFeaturizer:
    return PairFeaturizer.from_log(
        log,
        extras=extras if config.use_extras else None,
        columns=config.columns,
        noise_std=config.feature_noise,
        noise_seed=config.seed,
        threshold=config.outcome_threshold,
    )


def fit_propensity(
    log_all: ExposureLog,
    config: PropensityConfig = PropensityConfig(),
    labels: Optional[np.ndarray] = None,
    extras: Optional[np.ndarray] = None,
    eval_fraction: float = 0.0,
) -> PropensityModel:
    """Maximum-likelihood fit of the exposure indicator.

    When ``log_all`` holds only exposed records, unexposed pairs are sampled
    uniformly (``negative_ratio`` per exposed record) and the intercept is
    corrected for the sampling rate.  ``labels`` overrides the exposure
    flags of ``log_all`` row by row.
    """
    rng = derive_rng(config.seed, 17)
    featurizer = _featurizer_for(log_all.exposed_only() if labels is None else log_all, config, extras)
    if labels is not None:
        u, v, y, offset = log_all.u, log_all.v, np.asarray(labels, dtype=np.float64), 0.0
    else:
        u, v, y, offset = _labelled_rows(log_all, config, rng)
    if np.unique(y).shape[0] < 2:
        raise DataError("propensity fitting needs both exposed and unexposed rows")
    X = featurizer(u, v)
    model = PropensityModel(config.kind, featurizer, config.floor, offset, config=config)
    eval_set = None
    if eval_fraction > 0:
        hold = rng.random(y.shape[0]) < eval_fraction
        eval_set = (X[hold], y[hold])
        X, y = X[~hold], y[~hold]
    if config.kind == "gbdt":
        model.trees = fit_gbdt(X, y, config.gbdt, eval_set=eval_set)
    else:
        model.coef, model.intercept, model.mean, model.scale = _fit_logistic(X, y, config.logistic_l2)
    model.metadata = {"n_rows": int(y.shape[0]), "n_positive": int(y.sum()), "refits": 0}
    return model


def exposure_auc(model: PropensityModel, log: ExposureLog, seed: int = 0) -> float:
    """AUC of the model separating exposed pairs from uniformly sampled unexposed ones."""
    from ..evaluation import roc_auc

    rng = derive_rng(seed, 23)
    ex = log.exposed_only()
    nu, nv = sample_unexposed(ex, len(ex), rng)
    scores = np.concatenate([model.margin(model.featurizer(ex.u, ex.v)), model.margin(model.featurizer(nu, nv))])
    y = np.concatenate([np.ones(len(ex)), np.zeros(nu.shape[0])])
    return roc_auc(y, scores)


def joint_reestimate(
    model: PropensityModel,
    log_all: ExposureLog,
    frozen_scorer=None,
    enabled: bool = True,
    rounds: int = 10,
    extras: Optional[np.ndarray] = None,
) -> PropensityModel:
    """Warm-started refit of the exposure model with the recommender frozen.

    The exposure log-likelihood does not involve the recommender's
    parameters, so ``frozen_scorer`` only documents the alternation.
    GBDT models grow ``rounds`` more trees on the same draw of unexposed
    rows as the original fit (so a stationary log gives a stationary
    objective); logistic models re-optimize from the current weights.  The input
    model is left untouched.
    """
    if not enabled:
        return model
    refits = int(model.metadata.get("refits", 0)) + 1
    config = model.config
    rng = derive_rng(config.seed, 17)
    featurizer = _featurizer_for(log_all.exposed_only(), config, extras if extras is not None else model.featurizer.extras)
    u, v, y, offset = _labelled_rows(log_all, config, rng)
    if np.unique(y).shape[0] < 2:
        raise DataError("propensity fitting needs both exposed and unexposed rows")
    X = featurizer(u, v)
    new = replace(model, featurizer=featurizer, logit_offset=offset, metadata=dict(model.metadata))
    if model.kind == "gbdt":
        new.trees = fit_gbdt(X, y, config.gbdt, init=model.trees, n_rounds=rounds)
    else:
        x0 = np.concatenate([model.coef, [model.intercept]])
        new.coef, new.intercept, new.mean, new.scale = _fit_logistic(X, y, config.logistic_l2, x0=x0)
    new.metadata["refits"] = refits
    return new


def cross_validate(
    log_all: ExposureLog,
    candidates: Sequence[PropensityConfig],
    folds: int = 5,
    seed: int = 0,
) -> Tuple[PropensityConfig, list]:
    """Pick the candidate with the best mean held-out exposure log-likelihood.

    Labelled rows are assigned to folds by pair, not by user.
    """
    if not candidates:
        raise ValueError("no candidate configurations")
    rng = derive_rng(seed, 29)
    base = candidates[0]
    u, v, y, offset = _labelled_rows(log_all, base, rng)
    fold = rng.permutation(y.shape[0]) % folds
    scores = []
    for cfg in candidates:
        featurizer = _featurizer_for(log_all.exposed_only(), cfg, None)
        X = featurizer(u, v)
        lls = []
        for k in range(folds):
            tr, te = fold != k, fold == k
            if cfg.kind == "gbdt":
                m = fit_gbdt(X[tr], y[tr], cfg.gbdt).margin(X[te])
            else:
                coef, b, mu, sc = _fit_logistic(X[tr], y[tr], cfg.logistic_l2)
                m = ((X[te] - mu) / sc) @ coef + b
            lls.append(-float((np.logaddexp(0.0, m) - y[te] * m).mean()))
        scores.append(float(np.mean(lls)))
    best = int(np.argmax(scores))
    return candidates[best], scores
