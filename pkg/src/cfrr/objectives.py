"""Reciprocal scoring model and the naive / IPS / SNIPS / SNIPS-DR objectives.

Every objective is a weighted sum of pointwise cross-entropies plus a sparse
L2 penalty, so they share one value-and-gradient kernel
(:func:`weighted_loss`) and differ only in how the per-example
coefficients are formed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .core import DataError, ExposureLog, PathLike, derive_rng

EPS = 1e-7
OBJECTIVE_KINDS = ("naive", "ips", "snips", "snips_dr")


class Batch(NamedTuple):
    u: np.ndarray
    v: np.ndarray
    r: np.ndarray

    @classmethod
    def from_log(cls, log: ExposureLog) -> "Batch":
        ex = log.exposed_only()
        return cls(ex.u, ex.v, ex.outcome)

    def __len__(self) -> int:
        return int(self.u.shape[0])

    def take(self, idx) -> "Batch":
        return Batch(self.u[idx], self.v[idx], self.r[idx])


@dataclass
class ScoringModel:
    """s(u, v) = sigmoid(<p_u, q_v> + <p_v, q_u> + b_u + b_v + b0).

    ``P`` holds initiator embeddings, ``Q`` receiver embeddings; summing
    both directed bilinear terms makes the score exactly symmetric.
    """

    P: np.ndarray
    Q: np.ndarray
    b: np.ndarray
    b0: np.ndarray = field(default_factory=lambda: np.zeros(1))
    metadata: dict = field(default_factory=dict)

    @classmethod
    def init(cls, n_users: int, dim: int = 16, seed: int = 0, scale: float = 0.1) -> "ScoringModel":
        rng = derive_rng(seed, 101)
        return cls(
            P=rng.normal(0.0, scale, size=(n_users, dim)),
            Q=rng.normal(0.0, scale, size=(n_users, dim)),
            b=np.zeros(n_users),
            b0=np.zeros(1),
        )

    @property
    def n_users(self) -> int:
        return int(self.P.shape[0])

    @property
    def dim(self) -> int:
        return int(self.P.shape[1])

    def params(self) -> Dict[str, np.ndarray]:
        return {"P": self.P, "Q": self.Q, "b": self.b, "b0": self.b0}

    def copy(self) -> "ScoringModel":
        return ScoringModel(self.P.copy(), self.Q.copy(), self.b.copy(), self.b0.copy(), dict(self.metadata))

    def logits(self, u, v) -> np.ndarray:
        u = np.asarray(u)
        v = np.asarray(v)
        # pairwise grouping keeps the result bit-identical under (u, v) swap
        return (
            (np.sum(self.P[u] * self.Q[v], axis=-1) + np.sum(self.P[v] * self.Q[u], axis=-1))
            + (self.b[u] + self.b[v]) + self.b0[0]
        )

    def __call__(self, u, v) -> np.ndarray:
        return expit(self.logits(u, v))

    def score_matrix(self, users: np.ndarray, candidates: Optional[np.ndarray] = None) -> np.ndarray:
        """Logits of ``users`` x ``candidates`` (all users by default)."""
        cand = np.arange(self.n_users) if candidates is None else np.asarray(candidates)
        users = np.asarray(users)
        return (
            self.P[users] @ self.Q[cand].T + self.Q[users] @ self.P[cand].T
            + self.b[users][:, None] + self.b[cand][None, :] + self.b0[0]
        )

    def to_dict(self) -> dict:
        return {
            "P": self.P.tolist(), "Q": self.Q.tolist(), "b": self.b.tolist(),
            "b0": self.b0.tolist(), "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoringModel":
        return cls(np.array(d["P"]), np.array(d["Q"]), np.array(d["b"]), np.array(d["b0"]), d.get("metadata", {}))

    def save(self, path: PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path: PathLike) -> "ScoringModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def score(model: ScoringModel, u, v):
    if np.any(np.asarray(u) == np.asarray(v)):
        raise ValueError("score is undefined for u == v")
    out = model(u, v)
    return float(out) if np.ndim(out) == 0 else out


def pointwise_loss(r, s):
    """Binary cross-entropy with ``s`` clamped to [EPS, 1 - EPS]."""
    sc = np.clip(np.asarray(s, dtype=np.float64), EPS, 1.0 - EPS)
    r = np.asarray(r, dtype=np.float64)
    out = -r * np.log(sc) - (1.0 - r) * np.log1p(-sc)
    return float(out) if out.ndim == 0 else out


@dataclass
class Gradient:
    """Gradient restricted to the rows of ``users`` (sorted, unique)."""

    users: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    b: np.ndarray
    b0: float

    def dense(self, n_users: int) -> Dict[str, np.ndarray]:
        d = self.P.shape[1]
        out = {"P": np.zeros((n_users, d)), "Q": np.zeros((n_users, d)), "b": np.zeros(n_users), "b0": np.array([self.b0])}
        out["P"][self.users] = self.P
        out["Q"][self.users] = self.Q
        out["b"][self.users] = self.b
        return out

    def sparse(self) -> Dict[str, Tuple[Optional[np.ndarray], np.ndarray]]:
        """Form consumed by :func:`cfrr.trainer.adam_step`."""
        return {
            "P": (self.users, self.P), "Q": (self.users, self.Q),
            "b": (self.users, self.b), "b0": (None, np.array([self.b0])),
        }


def regularizer(model: ScoringModel, users: np.ndarray) -> float:
    """Squared L2 norm of the embeddings and biases of ``users`` (global bias excluded)."""
    users = np.unique(users)
    return float((model.P[users] ** 2).sum() + (model.Q[users] ** 2).sum() + (model.b[users] ** 2).sum())


def weighted_loss(
    model: ScoringModel,
    u: np.ndarray,
    v: np.ndarray,
    target: np.ndarray,
    coef: np.ndarray,
    reg_lambda: float,
) -> Tuple[float, Gradient]:
    """Value and sparse gradient of sum_i coef_i * l(target_i, s_i) + lambda * Omega."""
    u = np.asarray(u, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    z = model.logits(u, v)
    s = expit(z)
    value = float(np.dot(coef, pointwise_loss(target, s)))
    inside = (s > EPS) & (s < 1.0 - EPS)
    dz = np.where(inside, coef * (s - target), 0.0)

    users, inv = np.unique(np.concatenate([u, v]), return_inverse=True)
    iu, iv = inv[: u.shape[0]], inv[u.shape[0]:]
    k, d = users.shape[0], model.dim
    gP = np.zeros((k, d))
    gQ = np.zeros((k, d))
    gb = np.zeros(k)
    np.add.at(gP, iu, dz[:, None] * model.Q[v])
    np.add.at(gP, iv, dz[:, None] * model.Q[u])
    np.add.at(gQ, iv, dz[:, None] * model.P[u])
    np.add.at(gQ, iu, dz[:, None] * model.P[v])
    np.add.at(gb, iu, dz)
    np.add.at(gb, iv, dz)
    if reg_lambda:
        value += reg_lambda * regularizer(model, users)
        gP += 2.0 * reg_lambda * model.P[users]
        gQ += 2.0 * reg_lambda * model.Q[users]
        gb += 2.0 * reg_lambda * model.b[users]
    return value, Gradient(users, gP, gQ, gb, float(dz.sum()))


def _check_batch(batch: Batch, weights=None) -> None:
    if len(batch) == 0:
        raise DataError("empty batch")
    if weights is not None and np.shape(weights)[0] != len(batch):
        raise DataError(f"{np.shape(weights)[0]} weights for a batch of {len(batch)}")


def naive_objective(model: ScoringModel, batch: Batch, reg_lambda: float = 0.001):
    """Mean loss over displayed pairs."""
    _check_batch(batch)
    n = len(batch)
    return weighted_loss(model, batch.u, batch.v, batch.r, np.full(n, 1.0 / n), reg_lambda)


def ips_objective(
    model: ScoringModel,
    batch: Batch,
    weights: np.ndarray,
    pair_space_size: Optional[int] = None,
    reg_lambda: float = 0.001,
):
    """Horvitz-Thompson risk: sum w_i l_i / |P_target|.

    With ``pair_space_size=None`` the batch size is the normalizer (the
    batch-mean variant used for optimization; it has the same minimizer).
    """
    _check_batch(batch, weights)
    w = np.asarray(weights, dtype=np.float64)
    norm = float(len(batch) if pair_space_size is None else pair_space_size)
    return weighted_loss(model, batch.u, batch.v, batch.r, w / norm, reg_lambda)


def snips_objective(model: ScoringModel, batch: Batch, weights: np.ndarray, reg_lambda: float = 0.001):
    """Self-normalized risk sum w_i l_i / sum w_i over the batch."""
    _check_batch(batch, weights)
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise DataError("SNIPS needs a positive weight sum")
    return weighted_loss(model, batch.u, batch.v, batch.r, w / total, reg_lambda)


def snips_risk(model: ScoringModel, batch: Batch, weights: np.ndarray) -> float:
    """Value of the self-normalized data term alone (no gradient, no penalty)."""
    _check_batch(batch, weights)
    w = np.asarray(weights, dtype=np.float64)
    s = expit(model.logits(batch.u, batch.v))
    return float(np.dot(w, pointwise_loss(batch.r, s)) / w.sum())


def snips_dr_objective(
    model: ScoringModel,
    batch: Batch,
    weights: np.ndarray,
    outcome_model: Callable[[np.ndarray, np.ndarray], np.ndarray],
    uniform_sample: Tuple[np.ndarray, np.ndarray],
    reg_lambda: float = 0.001,
):
    """Self-normalized doubly robust risk.

    SNIPS loss on observed outcomes, minus the SNIPS loss against the
    outcome model's pseudo-labels on the same pairs, plus the mean loss
    against pseudo-labels on a uniform sample of the pair space.
    """
    _check_batch(batch, weights)
    us, vs = (np.asarray(a, dtype=np.int64) for a in uniform_sample)
    if us.shape[0] == 0:
        raise DataError("empty uniform sample")
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise DataError("SNIPS-DR needs a positive weight sum")
    m_batch = np.asarray(outcome_model(batch.u, batch.v), dtype=np.float64)
    m_unif = np.asarray(outcome_model(us, vs), dtype=np.float64)
    u = np.concatenate([batch.u, batch.u, us])
    v = np.concatenate([batch.v, batch.v, vs])
    target = np.concatenate([batch.r, m_batch, m_unif])
    coef = np.concatenate([w / total, -w / total, np.full(us.shape[0], 1.0 / us.shape[0])])
    return weighted_loss(model, u, v, target, coef, reg_lambda)


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = "snips"
    clip_c: float = 50.0
    reg_lambda: float = 0.001
    # 0 means "same as the batch size"
    dr_uniform_sample_size: int = 0
    # redraw the uniform sample every batch (else once per epoch)
    dr_resample_per_batch: bool = True
    # "batch" (optimization form) or "population" (Horvitz-Thompson |P|)
    ips_normalizer: str = "batch"

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.clip_c <= 0 or self.reg_lambda < 0:
            raise ValueError("clip_c must be positive and reg_lambda non-negative")
        if self.ips_normalizer not in ("batch", "population"):
            raise ValueError("ips_normalizer must be 'batch' or 'population'")

    @property
    def uses_propensity(self) -> bool:
        return self.kind != "naive"


def evaluate_objective(
    spec: ObjectiveSpec,
    model: ScoringModel,
    batch: Batch,
    weights: Optional[np.ndarray] = None,
    outcome_model=None,
    uniform_sample=None,
    pair_space_size: Optional[int] = None,
):
    """Dispatch to the objective named by ``spec.kind``."""
    lam = spec.reg_lambda
    if spec.kind == "naive":
        return naive_objective(model, batch, lam)
    if spec.kind == "ips":
        size = pair_space_size if spec.ips_normalizer == "population" else None
        return ips_objective(model, batch, weights, size, lam)
    if spec.kind == "snips":
        return snips_objective(model, batch, weights, lam)
    return snips_dr_objective(model, batch, weights, outcome_model, uniform_sample, lam)


# ---------------------------------------------------------------------------
# outcome model


class UserFeatureTable:
    """Standardized per-user feature rows with symmetric pair features.

    A pair (u, v) maps to ``[x_u + x_v, x_u * x_v, |x_u - x_v|]``, which is
    invariant to swapping the two users.
    """

    def __init__(self, table: np.ndarray, mean: Optional[np.ndarray] = None, std: Optional[np.ndarray] = None):
        table = np.asarray(table, dtype=np.float64)
        self.mean = table.mean(axis=0) if mean is None else np.asarray(mean)
        std = table.std(axis=0) if std is None else np.asarray(std)
        self.std = np.where(std > 0, std, 1.0)
        self.raw = table
        self.x = (table - self.mean) / self.std

    @property
    def n_pair_features(self) -> int:
        return 3 * self.x.shape[1]

    def __call__(self, u, v) -> np.ndarray:
        xu = self.x[np.asarray(u)]
        xv = self.x[np.asarray(v)]
        return np.concatenate([xu + xv, xu * xv, np.abs(xu - xv)], axis=-1)

    def to_dict(self) -> dict:
        return {"table": self.raw.tolist(), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "UserFeatureTable":
        return cls(np.array(d["table"]), np.array(d["mean"]), np.array(d["std"]))


@dataclass(frozen=True)
class OutcomeConfig:
    hidden: Tuple[int, ...] = (64, 32)
    learning_rate: float = 0.001
    epochs: int = 50
    batch_size: int = 256
    patience: int = 5
    valid_fraction: float = 0.1
    seed: int = 0


class OutcomeModel:
    """ReLU feed-forward network with a sigmoid output, m(u, v) in (0, 1)."""

    def __init__(self, weights: List[np.ndarray], biases: List[np.ndarray], features: Optional[UserFeatureTable] = None):
        self.weights = weights
        self.biases = biases
        self.features = features
        self.metadata: dict = {}

    @classmethod
    def init(cls, n_in: int, hidden: Sequence[int] = (64, 32), seed: int = 0, features=None) -> "OutcomeModel":
        rng = derive_rng(seed, 211)
        sizes = [n_in, *hidden, 1]
        weights = [rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
        biases = [np.zeros(b) for b in sizes[1:]]
        return cls(weights, biases, features)

    def params(self) -> List[np.ndarray]:
        return self.weights + self.biases

    def logits(self, X: np.ndarray) -> np.ndarray:
        h = X
        for W, c in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ W + c, 0.0)
        return (h @ self.weights[-1] + self.biases[-1])[:, 0]

    def predict(self, X: np.ndarray) -> np.ndarray:
        return expit(self.logits(X))

    def __call__(self, u, v) -> np.ndarray:
        if self.features is None:
            raise ValueError("outcome model has no feature table attached")
        return self.predict(self.features(np.atleast_1d(u), np.atleast_1d(v)))

    def loss_and_grad(self, X: np.ndarray, y: np.ndarray) -> Tuple[float, List[np.ndarray]]:
        """Mean cross-entropy from logits and its gradient (weights then biases)."""
        acts = [X]
        pre = []
        h = X
        for W, c in zip(self.weights[:-1], self.biases[:-1]):
            a = h @ W + c
            pre.append(a)
            h = np.maximum(a, 0.0)
            acts.append(h)
        z = (h @ self.weights[-1] + self.biases[-1])[:, 0]
        n = X.shape[0]
        loss = float((np.logaddexp(0.0, z) - y * z).mean())
        delta = ((expit(z) - y) / n)[:, None]
        gW: List[np.ndarray] = [None] * len(self.weights)
        gb: List[np.ndarray] = [None] * len(self.biases)
        for layer in range(len(self.weights) - 1, -1, -1):
            gW[layer] = acts[layer].T @ delta
            gb[layer] = delta.sum(axis=0)
            if layer > 0:
                delta = (delta @ self.weights[layer].T) * (pre[layer - 1] > 0)
        return loss, gW + gb

    def to_dict(self) -> dict:
        return {
            "weights": [W.tolist() for W in self.weights],
            "biases": [c.tolist() for c in self.biases],
            "features": None if self.features is None else self.features.to_dict(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OutcomeModel":
        m = cls(
            [np.array(W) for W in d["weights"]],
            [np.array(c) for c in d["biases"]],
            None if d["features"] is None else UserFeatureTable.from_dict(d["features"]),
        )
        m.metadata = d.get("metadata", {})
        return m


def fit_outcome_model(
    train: Batch,
    features: UserFeatureTable,
    config: OutcomeConfig = OutcomeConfig(),
    valid: Optional[Batch] = None,
) -> OutcomeModel:
    """Adam on cross-entropy with early stopping on validation AUC.

    Without ``valid`` a ``valid_fraction`` slice of ``train`` is held out.
    Passing ``patience=0`` disables early stopping.
    """
    from .evaluation import roc_auc
    from .trainer import AdamState

    y = (np.asarray(train.r, dtype=np.float64))
    if np.unique(y).shape[0] < 2 and config.patience > 0:
        raise DataError("outcome model needs both outcome classes")
    rng = derive_rng(config.seed, 223)
    if valid is None and config.patience > 0:
        hold = rng.random(len(train)) < config.valid_fraction
        valid, train = train.take(np.flatnonzero(hold)), train.take(np.flatnonzero(~hold))
    X = features(train.u, train.v)
    y = np.asarray(train.r, dtype=np.float64)
    model = OutcomeModel.init(X.shape[1], config.hidden, config.seed, features)
    names = [f"p{i}" for i in range(len(model.params()))]
    state = AdamState(dict(zip(names, model.params())))
    best_auc, best, stale = -np.inf, None, 0
    history = []
    Xv = yv = None
    if valid is not None and config.patience > 0:
        Xv, yv = features(valid.u, valid.v), np.asarray(valid.r, dtype=np.float64)
    for epoch in range(config.epochs):
        order = derive_rng(config.seed, 227, epoch).permutation(X.shape[0])
        for start in range(0, X.shape[0], config.batch_size):
            idx = order[start:start + config.batch_size]
            _, grads = model.loss_and_grad(X[idx], y[idx])
            state.step({name: (None, g) for name, g in zip(names, grads)}, config.learning_rate)
        if Xv is None:
            continue
        auc = roc_auc(yv, model.logits(Xv))
        history.append(auc)
        if auc > best_auc:
            best_auc, stale = auc, 0
            best = [p.copy() for p in model.params()]
        else:
            stale += 1
            if stale >= config.patience:
                break
    if best is not None:
        k = len(model.weights)
        model.weights, model.biases = best[:k], best[k:]
    model.metadata = {"valid_auc": None if Xv is None else float(best_auc), "auc_history": history}
    return model
