"""Monte-Carlo behaviour of the risk estimators on a fully enumerable world.

For a fixed scoring model the per-pair expected loss is known exactly, so
the true uniform-population risk is a finite average.  Simulated logs
repeat the logging process: each of ``impressions`` rounds exposes every
pair independently with probability theta and draws a Bernoulli(R)
outcome.  Per pair only the exposure count and the positive count matter,
so a log is summarized by two integer vectors.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from scipy.special import expit

from .core import derive_rng
from .synthgen import LatentWorld, SynthConfig, generate_world, logging_propensity, true_match_prob


@dataclass(frozen=True)
class OracleWorld:
    world: LatentWorld
    u: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    R: np.ndarray

    @property
    def n_pairs(self) -> int:
        return int(self.u.shape[0])


def oracle_world(n_users: int = 6, bias_strength: float = 2.0, seed: int = 0, latent_dim: int = 4,
                 target_log_size: float = 4.0, popularity_spread: float = 0.5,
                 target_match_rate: float = 0.3) -> OracleWorld:
    config = SynthConfig(
        n_users=n_users, latent_dim=latent_dim, target_log_size=target_log_size,
        bias_strength=bias_strength, popularity_spread=popularity_spread,
        target_match_rate=target_match_rate, seed=seed,
    )
    world = generate_world(config)
    u, v = world.pair_space.enumerate()
    return OracleWorld(world, u, v, logging_propensity(world, u, v), true_match_prob(world, u, v))


def pair_losses(s: np.ndarray):
    """Cross-entropy of a positive and of a negative outcome at score ``s``."""
    return -np.log(s), -np.log1p(-s)


def true_risk(ow: OracleWorld, s: np.ndarray) -> float:
    """Expected loss averaged uniformly over the pair space."""
    l1, l0 = pair_losses(s)
    return float(np.mean(ow.R * l1 + (1 - ow.R) * l0))


def simulate_counts(ow: OracleWorld, n_logs: int, impressions: int = 1, seed: int = 0):
    """Exposure and positive counts per pair, shape (n_logs, n_pairs)."""
    rng = derive_rng(seed, 901, impressions)
    shown = rng.binomial(impressions, np.broadcast_to(ow.theta, (n_logs, ow.n_pairs)))
    pos = rng.binomial(shown, ow.R)
    return shown, pos


def estimates(ow: OracleWorld, s: np.ndarray, shown: np.ndarray, pos: np.ndarray, impressions: int = 1,
              theta_hat: Optional[np.ndarray] = None, m_hat: Optional[np.ndarray] = None,
              clip_c: float = np.inf) -> Dict[str, np.ndarray]:
    """Naive, IPS, SNIPS and (when ``m_hat`` is given) SNIPS-DR risk per simulated log.

    Logs without any exposure give NaN for the ratio estimators.
    """
    th = ow.theta if theta_hat is None else np.asarray(theta_hat, dtype=np.float64)
    w = np.minimum(1.0 / th, clip_c)
    l1, l0 = pair_losses(s)
    loss = pos * l1 + (shown - pos) * l0
    n_shown = shown.sum(axis=1)
    wsum = (w * shown).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = {
            "naive": loss.sum(axis=1) / n_shown,
            "ips": (w * loss).sum(axis=1) / (impressions * ow.n_pairs),
            "snips": (w * loss).sum(axis=1) / wsum,
        }
        if m_hat is not None:
            m = np.asarray(m_hat, dtype=np.float64)
            pseudo = m * l1 + (1 - m) * l0
            out["snips_dr"] = (w * (loss - shown * pseudo)).sum(axis=1) / wsum + pseudo.mean()
    return out


def random_scores(ow: OracleWorld, seed: int = 0, scale: float = 1.0) -> np.ndarray:
    """A fixed arbitrary model: independent logistic scores per pair."""
    return expit(derive_rng(seed, 903).normal(0.0, scale, ow.n_pairs))
