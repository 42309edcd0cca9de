"""Mini-batch training loop with sparse Adam, joint propensity refits and early stopping."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import DataError, ExposureLog, PathLike, derive_rng
from .evaluation import ndcg_at_k, rank_candidates, sample_candidates
from .objectives import (
    Batch,
    ObjectiveSpec,
    OutcomeModel,
    ScoringModel,
    UserFeatureTable,
    evaluate_objective,
    fit_outcome_model,
    snips_risk,
)
from .propensity import PropensityModel, clip_weight, joint_reestimate, user_counts


class AdamState:
    """Adam moments for a dict of parameter arrays, updated in place.

    Gradients arrive as ``name -> (rows, values)``; ``rows=None`` means the
    whole array.  Only the listed rows have their moments and values
    touched, the bias correction uses the global step count.
    """

    def __init__(self, params: Dict[str, np.ndarray], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, grads, lr: float) -> "AdamState":
        unknown = set(grads) - set(self.params)
        if unknown:
            raise KeyError(f"gradient for unknown parameters {sorted(unknown)}")
        for name, (_, g) in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {name}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, (rows, g) in grads.items():
            p, m, v = self.params[name], self.m[name], self.v[name]
            idx = slice(None) if rows is None else rows
            m[idx] = self.beta1 * m[idx] + (1.0 - self.beta1) * g
            v[idx] = self.beta2 * v[idx] + (1.0 - self.beta2) * g * g
            p[idx] -= lr * (m[idx] / c1) / (np.sqrt(v[idx] / c2) + self.eps)
        return self


def adam_step(state: AdamState, gradients, lr: float) -> AdamState:
    return state.step(gradients, lr)


def best_epoch(history) -> int:
    """Index of the best value, earliest on ties."""
    if len(history) == 0:
        raise ValueError("empty history")
    return int(np.argmax(np.asarray(history)))


def early_stop(history, patience: int) -> bool:
    """True once ``patience`` epochs passed without beating the best value."""
    if len(history) == 0:
        raise ValueError("empty history")
    return len(history) - 1 - best_epoch(history) >= patience


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    embedding_dim: int = 16
    batch_size: int = 512
    max_epochs: int = 20
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    joint_propensity: bool = False
    refit_rounds: int = 10
    early_stop_metric: str = "ndcg@10"
    patience: int = 3
    seed: int = 0
    init_scale: float = 0.1
    valid_users: int = 500
    valid_candidates: int = 100

    def __post_init__(self):
        if self.learning_rate <= 0 or self.embedding_dim < 1 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("learning_rate, embedding_dim and batch_size must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.early_stop_metric != "ndcg@10":
            raise ValueError("only ndcg@10 early stopping is supported")

    @property
    def reg_lambda(self) -> float:
        return self.objective.reg_lambda

    @property
    def clip_c(self) -> float:
        return self.objective.clip_c


@dataclass
class TrainLog:
    """Per-epoch records (deterministic) plus wall-clock timings kept apart."""

    records: List[dict] = field(default_factory=list)
    wall_times: List[float] = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False
    outcome_fit_seconds: float = 0.0

    def to_jsonl(self, path: PathLike) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; carries the last finite checkpoint."""

    exit_code = 3

    def __init__(self, message: str, checkpoint: ScoringModel, log: TrainLog):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.log = log


def default_user_features(log: ExposureLog, extras: Optional[np.ndarray] = None) -> UserFeatureTable:
    """log(1 + degree), log(1 + exposures), observed match rate and optional extras."""
    deg, exp = user_counts(log)
    cols = [np.log1p(deg), np.log1p(exp), (deg + 1.0) / (exp + 2.0)]
    table = np.column_stack(cols)
    if extras is not None:
        table = np.column_stack([table, extras])
    return UserFeatureTable(table)


def train(
    train_log: ExposureLog,
    valid_log: ExposureLog,
    propensity: Optional[PropensityModel],
    config: TrainConfig = TrainConfig(),
    outcome_model: Optional[OutcomeModel] = None,
    user_extras: Optional[np.ndarray] = None,
) -> Tuple[ScoringModel, TrainLog]:
    """Fit a :class:`ScoringModel`, returning the best-validation checkpoint.

    Per epoch: shuffle, mini-batch updates of the configured objective with
    clipped inverse propensity weights, optional refit of the propensity
    model with the recommender frozen, validation NDCG@10 on a fixed
    candidate sample, early stopping.
    """
    spec = config.objective
    data = Batch.from_log(train_log)
    if len(data) == 0 or valid_log.n_exposed == 0:
        raise DataError("train and validation splits must be non-empty")
    if spec.uses_propensity and propensity is None:
        raise ValueError(f"objective {spec.kind!r} needs a propensity model")
    n_users = train_log.pair_space.n_users
    model = ScoringModel.init(n_users, config.embedding_dim, config.seed, config.init_scale)
    log = TrainLog()
    if config.max_epochs == 0:
        return model, log

    if spec.kind == "snips_dr" and outcome_model is None:
        t0 = time.perf_counter()
        feats = default_user_features(train_log, user_extras)
        outcome_model = fit_outcome_model(data, feats, valid=Batch.from_log(valid_log))
        log.outcome_fit_seconds = time.perf_counter() - t0

    def weights_for(prop):
        if not spec.uses_propensity:
            return np.ones(len(data))
        return clip_weight(prop.predict_pairs(data.u, data.v), spec.clip_c)

    weights = weights_for(propensity)
    prop_hash = propensity.fingerprint() if propensity is not None else None
    valid_sets = sample_candidates(
        valid_log, config.valid_users, config.valid_candidates, derive_rng(config.seed, 401).integers(2**31),
        exclude=(train_log,),
    )
    space = train_log.pair_space
    uniform_size = spec.dr_uniform_sample_size or config.batch_size
    state = AdamState(model.params())
    history: List[float] = []
    best = model.copy()
    last_finite = model.copy()
    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        rng = derive_rng(config.seed, 1000, epoch)
        order = rng.permutation(len(data))
        epoch_uniform = None if spec.dr_resample_per_batch else space.sample_uniform(uniform_size, rng)
        losses = []
        for start in range(0, len(data), config.batch_size):
            idx = order[start:start + config.batch_size]
            uniform = None
            if spec.kind == "snips_dr":
                uniform = epoch_uniform if epoch_uniform is not None else space.sample_uniform(uniform_size, rng)
            value, grad = evaluate_objective(
                spec, model, data.take(idx), weights[idx], outcome_model, uniform, space.size
            )
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", last_finite, log)
            state.step(grad.sparse(), config.learning_rate)
            losses.append(value)
        full_snips = snips_risk(model, data, weights) if spec.uses_propensity else float("nan")
        if spec.uses_propensity and config.joint_propensity:
            propensity = joint_reestimate(propensity, train_log, frozen_scorer=model, rounds=config.refit_rounds)
            weights = weights_for(propensity)
            prop_hash = propensity.fingerprint()
        lists = rank_candidates(model, valid_sets)
        ndcg = float(np.mean([ndcg_at_k(lst, 10) for lst in lists]))
        history.append(ndcg)
        last_finite = model.copy()
        if best_epoch(history) == epoch:
            best = model.copy()
        log.records.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "full_snips": None if np.isnan(full_snips) else float(full_snips),
            "valid_ndcg_at_10": ndcg,
            "steps": len(losses),
            "propensity_hash": prop_hash,
        })
        log.wall_times.append(time.perf_counter() - t0)
        if early_stop(history, config.patience):
            log.stopped_early = True
            break
    log.best_epoch = best_epoch(history)
    best.metadata = {"best_epoch": log.best_epoch, "objective": spec.kind, "epochs_run": len(history)}
    return best, log
