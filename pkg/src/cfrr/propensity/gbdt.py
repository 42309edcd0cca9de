"""Gradient-boosted regression trees on the logistic loss.

Exact greedy split search (every distinct threshold) and Newton leaf values,
in the XGBoost formulation: for a node with gradient sum G and hessian sum H
the leaf value is -G / (H + l2) and a split gains
``G_L^2/(H_L+l2) + G_R^2/(H_R+l2) - G^2/(H+l2)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.special import expit


@dataclass(frozen=True)
class GbdtConfig:
    n_rounds: int = 100
    learning_rate: float = 0.1
    max_depth: int = 6
    loss: str = "binary_crossentropy"
    l2: float = 1.0
    min_child_weight: float = 1.0
    # held-out log-likelihood is checked every `eval_every` rounds
    eval_every: int = 10

    def __post_init__(self):
        if self.n_rounds < 0 or self.learning_rate <= 0 or self.max_depth < 1:
            raise ValueError("n_rounds >= 0, learning_rate > 0 and max_depth >= 1 required")
        if self.loss != "binary_crossentropy":
            raise ValueError("only the binary cross-entropy loss is supported")


@dataclass
class Tree:
    """Flat array tree; leaves have ``feature == -1``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        leaf = self.feature < 0
        ids = np.arange(self.feature.shape[0])
        # leaves point to themselves, so every row can step in lockstep
        left = np.where(leaf, ids, self.left)
        right = np.where(leaf, ids, self.right)
        feat = np.where(leaf, 0, self.feature)
        rows = np.arange(X.shape[0])
        node = np.zeros(X.shape[0], dtype=np.int64)
        for _ in range(self.depth()):
            node = np.where(X[rows, feat[node]] <= self.threshold[node], left[node], right[node])
        return self.value[node]

    def depth(self) -> int:
        d = np.zeros(self.feature.shape[0], dtype=np.int64)
        # children always follow their parent in the flat arrays
        for i in np.flatnonzero(self.feature >= 0):
            d[self.left[i]] = d[self.right[i]] = d[i] + 1
        return int(d.max())

    def to_dict(self, i: int = 0) -> dict:
        if self.feature[i] < 0:
            return {"leaf": float(self.value[i])}
        return {
            "feature": int(self.feature[i]),
            "threshold": float(self.threshold[i]),
            "left": self.to_dict(int(self.left[i])),
            "right": self.to_dict(int(self.right[i])),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        feature: List[int] = []
        threshold: List[float] = []
        left: List[int] = []
        right: List[int] = []
        value: List[float] = []

        def visit(node: dict) -> int:
            i = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            if "leaf" in node:
                value[i] = float(node["leaf"])
            else:
                feature[i] = int(node["feature"])
                threshold[i] = float(node["threshold"])
                left[i] = visit(node["left"])
                right[i] = visit(node["right"])
            return i

        visit(d)
        return cls(
            np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
            np.array(right, dtype=np.int64), np.array(value),
        )


def _best_split(X, g, h, rows, l2, min_child_weight):
    G = g[rows].sum()
    H = h[rows].sum()
    parent = G * G / (H + l2)
    best = (0.0, -1, 0.0)
    for f in range(X.shape[1]):
        x = X[rows, f]
        order = np.argsort(x, kind="stable")
        xs = x[order]
        gl = np.cumsum(g[rows][order])[:-1]
        hl = np.cumsum(h[rows][order])[:-1]
        ok = (xs[:-1] < xs[1:]) & (hl >= min_child_weight) & (H - hl >= min_child_weight)
        if not ok.any():
            continue
        pos = np.flatnonzero(ok)
        gl, hl = gl[pos], hl[pos]
        gain = gl * gl / (hl + l2) + (G - gl) ** 2 / (H - hl + l2) - parent
        k = int(np.argmax(gain))
        if gain[k] > best[0] + 1e-12:
            p = pos[k]
            best = (float(gain[k]), f, 0.5 * (xs[p] + xs[p + 1]))
    return best, G, H


def build_tree(X: np.ndarray, g: np.ndarray, h: np.ndarray, config: GbdtConfig) -> Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    root = new_node()
    frontier = [(root, np.arange(X.shape[0]), 0)]
    while frontier:
        node, rows, depth = frontier.pop(0)
        (gain, f, thr), G, H = (
            _best_split(X, g, h, rows, config.l2, config.min_child_weight)
            if depth < config.max_depth and rows.shape[0] > 1
            else ((0.0, -1, 0.0), g[rows].sum(), h[rows].sum())
        )
        if f < 0:
            value[node] = -G / (H + config.l2)
            continue
        feature[node] = f
        threshold[node] = thr
        mask = X[rows, f] <= thr
        left[node] = new_node()
        right[node] = new_node()
        frontier.append((left[node], rows[mask], depth + 1))
        frontier.append((right[node], rows[~mask], depth + 1))
    return Tree(
        np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64), np.array(value),
    )


def log_loss(y: np.ndarray, margin: np.ndarray, weight: Optional[np.ndarray] = None) -> float:
    """Mean binary cross-entropy from margins (numerically stable)."""
    per = np.logaddexp(0.0, margin) - y * margin
    if weight is None:
        return float(per.mean())
    return float((weight * per).sum() / weight.sum())


@dataclass
class BoostedTrees:
    base_score: float
    learning_rate: float
    trees: List[Tree] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    heldout_ll: List[float] = field(default_factory=list)

    def margin(self, X: np.ndarray) -> np.ndarray:
        out = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            out += self.learning_rate * tree.predict(X)
        return out

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return expit(self.margin(X))

    def to_dict(self) -> dict:
        return {
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoostedTrees":
        return cls(d["base_score"], d["learning_rate"], [Tree.from_dict(t) for t in d["trees"]])


def fit_gbdt(
    X: np.ndarray,
    y: np.ndarray,
    config: GbdtConfig,
    sample_weight: Optional[np.ndarray] = None,
    eval_set=None,
    init: Optional[BoostedTrees] = None,
    n_rounds: Optional[int] = None,
) -> BoostedTrees:
    """Boost ``n_rounds`` (default ``config.n_rounds``) trees.

    With ``init`` the new trees continue from its margins (warm start).
    With ``eval_set=(X_val, y_val)`` the held-out log-likelihood is recorded
    every ``config.eval_every`` rounds; boosting stops after the second
    decrease below the best value and is truncated to the best checkpoint.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    rounds = config.n_rounds if n_rounds is None else n_rounds
    if init is None:
        p0 = np.clip((w * y).sum() / w.sum(), 1e-6, 1 - 1e-6)
        model = BoostedTrees(float(np.log(p0 / (1 - p0))), config.learning_rate)
    else:
        model = BoostedTrees(init.base_score, init.learning_rate, list(init.trees))
    margin = model.margin(X)
    val_margin = model.margin(eval_set[0]) if eval_set is not None else None
    model.train_loss.append(log_loss(y, margin, w))
    best_ll, best_len, violations = -np.inf, len(model.trees), 0
    for r in range(rounds):
        p = expit(margin)
        tree = build_tree(X, w * (p - y), w * p * (1 - p), config)
        model.trees.append(tree)
        margin += model.learning_rate * tree.predict(X)
        model.train_loss.append(log_loss(y, margin, w))
        if eval_set is not None:
            val_margin += model.learning_rate * tree.predict(eval_set[0])
            if (r + 1) % config.eval_every == 0 or r + 1 == rounds:
                ll = -log_loss(np.asarray(eval_set[1], dtype=np.float64), val_margin)
                model.heldout_ll.append(ll)
                if ll > best_ll:
                    best_ll, best_len = ll, len(model.trees)
                else:
                    violations += 1
                    if violations > 1:
                        break
    if eval_set is not None and best_len < len(model.trees):
        model.trees = model.trees[:best_len]
    return model
