"""Reward shaping, group-relative advantages, and the policy losses.

Rewards of unassigned drivers are exactly zero and never enter the group
statistics or any gradient. Group statistics use the population standard
deviation, floored at ``SIGMA_FLOOR``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import numpy as np

from .routing import InsertionResult, manhattan_km

if TYPE_CHECKING:
    from .config import SimConfig

SIGMA_FLOOR = 1e-8
PROB_FLOOR = 1e-12


def compute_reward(insertion: InsertionResult | None, order: Any, cfg: "SimConfig") -> float:
    """Shaped reward of admitting ``order`` through ``insertion``; 0 when nothing was assigned.

    fare in  = fare_base + fare_km * direct order km
    payout   = payout_km * extra km the vehicle drives
    r        = b1 + b2*fare - b3*payout - b4*late_orders - b5*extra_passenger_minutes
    """
    if insertion is None:
        return 0.0
    b1, b2, b3, b4, b5 = cfg.beta
    p_in = cfg.fare_base + cfg.fare_km * manhattan_km(order.origin, order.dest)
    p_out = cfg.payout_km * insertion.added_vehicle_km
    rho_min = insertion.added_passenger_time / 60.0
    return b1 + b2 * p_in - b3 * p_out - b4 * insertion.late_count - b5 * rho_min


def _stats(x: np.ndarray) -> tuple[float, float]:
    return float(x.mean()), max(float(x.std()), SIGMA_FLOOR)


def spread(cum_rewards: np.ndarray) -> float:
    """Fleet-wide population std of cumulative rewards."""
    return float(np.std(cum_rewards))


@dataclass(frozen=True)
class AdvantageBatch:
    values: np.ndarray  # (n, T); NaN where the driver was not assigned
    mean: np.ndarray | float
    std: np.ndarray | float
    spread_delta: np.ndarray  # (T,)
    alpha: float

    def assigned_values(self) -> np.ndarray:
        return self.values[~np.isnan(self.values)]


def ospo_advantage(
    rewards: np.ndarray,
    assigned: np.ndarray,
    cum_before: np.ndarray,
    cum_after: np.ndarray,
    alpha: float,
) -> np.ndarray:
    """One-step advantages of the drivers assigned at a single step, in driver order.

    ``(r - mean_t) / std_t - alpha * (spread_after - spread_before)`` where the
    mean and std run over assigned drivers only and the spread covers all
    drivers' cumulative rewards.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    assigned = np.asarray(assigned, dtype=bool)
    if not assigned.any():
        return np.zeros(0)
    r = rewards[assigned]
    mu, sigma = _stats(r)
    penalty = alpha * (spread(cum_after) - spread(cum_before))
    return (r - mu) / sigma - penalty


def ospo_batch(rewards: np.ndarray, assigned: np.ndarray, spread_delta: np.ndarray, alpha: float) -> AdvantageBatch:
    """Per-step normalized advantages for a whole (n, T) episode."""
    out = np.full(rewards.shape, np.nan)
    n_steps = rewards.shape[1]
    mus, sigmas = np.zeros(n_steps), np.ones(n_steps)
    for t in range(n_steps):
        mask = assigned[:, t]
        if not mask.any():
            continue
        mus[t], sigmas[t] = _stats(rewards[mask, t])
        out[mask, t] = (rewards[mask, t] - mus[t]) / sigmas[t] - alpha * spread_delta[t]
    return AdvantageBatch(out, mus, sigmas, np.asarray(spread_delta), alpha)


def episode_stats(rewards: np.ndarray, assigned: np.ndarray) -> tuple[float, float]:
    """Mean and floored population std of all assigned rewards of an episode."""
    if not assigned.any():
        return 0.0, 1.0
    return _stats(rewards[assigned])


def grpo_batch(
    rewards: np.ndarray,
    assigned: np.ndarray,
    spread_delta: np.ndarray,
    gamma: float,
    alpha: float,
) -> AdvantageBatch:
    """Discounted sum of episode-normalized rewards to the end of the episode.

    Idle steps inside the sum count as a reward of 0, normalized like any
    other. Advantages exist only at assigned (driver, step) entries.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    mu, sigma = episode_stats(rewards, assigned)
    z = (rewards - mu) / sigma
    acc = np.zeros(rewards.shape[0])
    ret = np.zeros_like(z)
    for t in range(z.shape[1] - 1, -1, -1):
        acc = z[:, t] + gamma * acc
        ret[:, t] = acc
    vals = np.where(assigned, ret - alpha * np.asarray(spread_delta)[None, :], np.nan)
    return AdvantageBatch(vals, mu, sigma, np.asarray(spread_delta), alpha)


def ospo_episode_batch(rewards: np.ndarray, assigned: np.ndarray, spread_delta: np.ndarray, alpha: float) -> AdvantageBatch:
    """One-step advantages normalized with episode-wide statistics."""
    mu, sigma = episode_stats(rewards, assigned)
    vals = np.where(assigned, (rewards - mu) / sigma - alpha * np.asarray(spread_delta)[None, :], np.nan)
    return AdvantageBatch(vals, mu, sigma, np.asarray(spread_delta), alpha)


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """Reward-to-go along the last axis."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[:-1])
    for t in range(rewards.shape[-1] - 1, -1, -1):
        acc = rewards[..., t] + gamma * acc
        out[..., t] = acc
    return out


def gae(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and critic targets.

    ``values`` has one more column than ``rewards`` (bootstrap value after the
    last step; 0 for a terminated episode). Returns (advantages, value targets).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    adv = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[:-1])
    for t in range(rewards.shape[-1] - 1, -1, -1):
        delta = rewards[..., t] + gamma * values[..., t + 1] - values[..., t]
        acc = delta + gamma * lam * acc
        adv[..., t] = acc
    return adv, adv + values[..., :-1]


def clip_ratio(ratio: np.ndarray, clip_low: float, clip_high: float) -> np.ndarray:
    return np.clip(ratio, 1.0 - clip_low, 1.0 + clip_high)


def ppo_surrogate_loss(
    new_prob: np.ndarray,
    old_prob: np.ndarray,
    advantage: np.ndarray,
    clip_low: float,
    clip_high: float,
    kl_coef: float = 0.0,
    kl: np.ndarray | float = 0.0,
) -> float:
    """Batch mean of ``-min(ratio*A, clip(ratio)*A) + kl_coef*kl``."""
    new_prob = np.asarray(new_prob, dtype=np.float64)
    old_prob = np.asarray(old_prob, dtype=np.float64)
    if np.any(old_prob <= 0):
        raise ValueError("old probabilities must be positive")
    ratio = new_prob / old_prob
    if not np.all(np.isfinite(ratio)):
        raise FloatingPointError("non-finite probability ratio")
    adv = np.asarray(advantage, dtype=np.float64)
    surr = np.minimum(ratio * adv, clip_ratio(ratio, clip_low, clip_high) * adv)
    return float(np.mean(-surr + kl_coef * np.asarray(kl)))


def surrogate_ratio_grad(ratio: np.ndarray, advantage: np.ndarray, clip_low: float, clip_high: float) -> np.ndarray:
    """d(-min(ratio*A, clip(ratio)*A)) / d ratio, per sample.

    Zero wherever the clipped branch is the smaller one and the ratio sits
    outside the clip interval.
    """
    unclipped = ratio * advantage
    clipped = clip_ratio(ratio, clip_low, clip_high) * advantage
    active = (unclipped <= clipped) | ((ratio >= 1.0 - clip_low) & (ratio <= 1.0 + clip_high))
    return np.where(active, -advantage, 0.0)


def categorical_kl(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) over one candidate set; q is floored at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"candidate sets differ: {p.shape} vs {q.shape}")
    q = np.maximum(q, PROB_FLOOR)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def exploration_noise(values: np.ndarray, feasible: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Binary-symmetric-channel noise: each feasible score p flips to 1 - p with probability ``eps``."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    flips = rng.random(values.shape) < eps
    return np.where(flips & feasible, 1.0 - values, values)


class BestCheckpoint:
    """Keeps the best policy seen so far; replaced only on strict improvement."""

    def __init__(self):
        self.score: float | None = None
        self.episode: int | None = None
        self.params = None

    def update(self, score: float, params, episode: int) -> bool:
        if self.score is not None and not score > self.score:
            return False
        self.score = float(score)
        self.episode = int(episode)
        self.params = params.copy()
        return True
