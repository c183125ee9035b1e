"""Episode rollouts and the policy-optimization loop for every trainer variant.

One shared network scores every driver-order pair. Each driver's scores are
turned into a distribution over the current order pool, the distributions
are matched by maximum total score, and the chosen pairs become training
samples. Drivers left unmatched produce no sample.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig, SimConfig, TrainerConfig
from .matching import Pair, ScoreMatrix, greedy_assignment, solve_assignment
from .nn import (
    AdamState,
    CandidateBatch,
    Mlp,
    adam_step,
    backward,
    critic_sizes,
    forward,
    policy_sizes,
    segment_softmax,
)
from .objectives import (
    AdvantageBatch,
    BestCheckpoint,
    discounted_returns,
    exploration_noise,
    gae,
    grpo_batch,
    ospo_batch,
    ospo_episode_batch,
    surrogate_ratio_grad,
)
from .sim import EpisodeMetrics, Observation, OrderSource, RideWorld

log = logging.getLogger(__name__)

TRAIN_SEED_BASE = 10_000_000


@dataclass
class Transition:
    agent: int
    step: int
    features: np.ndarray  # (w, d) every candidate of this driver
    chosen: int
    old_prob: float
    reward: float = 0.0


@dataclass
class EpisodeBuffer:
    transitions: list[Transition]
    rewards: np.ndarray  # (n, T)
    assigned: np.ndarray  # (n, T) bool
    spread_delta: np.ndarray  # (T,)
    metrics: EpisodeMetrics
    critic_inputs: np.ndarray | None = None  # (n, T, d) when recorded


def policy_distribution(params: Mlp, obs: Observation) -> np.ndarray:
    """(n, w) matrix of per-driver action probabilities; rows of unavailable drivers are zero."""
    n, w, d = obs.features.shape
    probs = np.zeros((n, w))
    rows = np.flatnonzero(obs.available)
    if w == 0 or rows.size == 0:
        return probs
    logits = forward(params, obs.features[rows].reshape(-1, d)).reshape(rows.size, w)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    probs[rows] = e / e.sum(axis=1, keepdims=True)
    return probs


def critic_input(obs: Observation) -> np.ndarray:
    """Per-driver critic features: mean order block of the pool plus the driver's own state."""
    n = obs.driver_features.shape[0]
    pooled = obs.order_features.mean(axis=0) if len(obs.pool) else np.zeros(5)
    return np.concatenate([np.broadcast_to(pooled, (n, 5)), obs.driver_features], axis=1)


Policy = Callable[[RideWorld, Observation], Sequence[Pair]]


def greedy_policy(world: RideWorld, obs: Observation) -> Sequence[Pair]:
    return greedy_assignment(world.positions(), obs.available, [o.origin for o in obs.pool])


def run_episode(
    world: RideWorld,
    params: Mlp | None,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
    record: bool = False,
    record_critic: bool = False,
    timer: dict[str, float] | None = None,
) -> EpisodeBuffer:
    """Play one episode; ``params=None`` dispatches greedily.

    With ``record`` set, every matched pair becomes a Transition holding the
    driver's full candidate feature matrix and the pre-noise probability of
    the chosen order.
    """
    cfg = world.cfg
    n, horizon = cfg.n_drivers, cfg.horizon
    rewards = np.zeros((n, horizon))
    assigned = np.zeros((n, horizon), dtype=bool)
    spread_delta = np.zeros(horizon)
    transitions: list[Transition] = []
    critic = np.zeros((n, horizon, cfg.feature_dim)) if record_critic else None
    clock = time.perf_counter

    while not world.done:
        t = world.t
        t0 = clock()
        obs = world.observe()
        t1 = clock()
        if params is None:
            pairs = greedy_policy(world, obs)
            probs = None
            t2 = clock()
        else:
            probs = policy_distribution(params, obs)
            scores = probs
            if noise > 0 and rng is not None:
                scores = exploration_noise(probs, obs.feasible, noise, rng)
            t2 = clock()
            pairs = solve_assignment(ScoreMatrix(scores, obs.feasible))
        t3 = clock()
        res = world.step(pairs)
        t4 = clock()
        rewards[:, t] = res.rewards
        spread_delta[t] = res.spread_after - res.spread_before
        for i, j in pairs:
            assigned[i, t] = True
            if record and probs is not None:
                transitions.append(Transition(i, t, obs.features[i].copy(), j, float(probs[i, j]), float(res.rewards[i])))
        if critic is not None:
            critic[:, t] = critic_input(obs)
        if timer is not None:
            timer["scoring"] = timer.get("scoring", 0.0) + (t1 - t0) + (t2 - t1)
            timer["matching"] = timer.get("matching", 0.0) + (t3 - t2)
            timer["routing"] = timer.get("routing", 0.0) + (t4 - t3)
    return EpisodeBuffer(transitions, rewards, assigned, spread_delta, world.metrics(), critic)


def evaluate(
    sim: SimConfig,
    params: Mlp | None,
    seeds: Sequence[int],
    source_factory: Callable[[int], OrderSource] | None = None,
) -> list[EpisodeMetrics]:
    """Noise-free episodes, one per seed, in the given seed order."""
    out = []
    for seed in seeds:
        source = source_factory(seed) if source_factory else None
        world = RideWorld(sim, source, seed=seed)
        out.append(run_episode(world, params).metrics)
    return out


def advantages_for(method: str, buf: EpisodeBuffer, tcfg: TrainerConfig) -> AdvantageBatch:
    if method == "ospo":
        return ospo_batch(buf.rewards, buf.assigned, buf.spread_delta, tcfg.alpha)
    if method == "ospo-episode-norm":
        return ospo_episode_batch(buf.rewards, buf.assigned, buf.spread_delta, tcfg.alpha)
    if method == "grpo":
        return grpo_batch(buf.rewards, buf.assigned, buf.spread_delta, tcfg.gamma, tcfg.alpha)
    raise ValueError(f"method {method!r} has no group advantage")


def policy_loss_grads(
    params: Mlp,
    batch: CandidateBatch,
    old_prob: np.ndarray,
    advantage: np.ndarray,
    tcfg: TrainerConfig,
    ref: Mlp | None = None,
    clipped: bool = True,
) -> tuple[float, float, Mlp]:
    """Mean clipped-surrogate loss (+ KL to ``ref``) over the batch and its gradient.

    Returns (loss, mean KL, grads). With ``clipped`` False the objective is the
    plain importance-weighted policy gradient ``-ratio * A``.
    """
    logits = forward(params, batch.features)
    probs = segment_softmax(logits, batch.offsets)
    seg = batch.segment_ids
    rows = batch.chosen_rows
    b = len(batch)
    ratio = probs[rows] / old_prob
    if not np.all(np.isfinite(ratio)):
        raise FloatingPointError("non-finite probability ratio")
    if clipped:
        lo, hi = tcfg.clip_low, tcfg.clip_high
        surr = np.minimum(ratio * advantage, np.clip(ratio, 1 - lo, 1 + hi) * advantage)
        dratio = surrogate_ratio_grad(ratio, advantage, lo, hi)
    else:
        surr = ratio * advantage
        dratio = -advantage
    # d ratio / d logit_j = ratio * (onehot_j - p_j)
    dlogp = dratio * ratio
    dlogits = -probs * dlogp[seg]
    dlogits[rows] += dlogp
    loss = -surr
    kl_mean = 0.0
    if ref is not None and tcfg.kl_coef > 0:
        q = segment_softmax(forward(ref, batch.features), batch.offsets)
        logratio = np.log(np.maximum(probs, 1e-300)) - np.log(np.maximum(q, 1e-12))
        kl = np.add.reduceat(probs * logratio, batch.offsets[:-1])
        dlogits += tcfg.kl_coef * probs * (logratio - kl[seg])
        loss = loss + tcfg.kl_coef * kl
        kl_mean = float(kl.mean())
    grads = backward(params, batch.features, dlogits / b)
    return float(loss.mean()), kl_mean, grads


def ipg_loss_grads(params: Mlp, batch: CandidateBatch, returns: np.ndarray) -> tuple[float, Mlp]:
    """REINFORCE: mean of ``-log pi(chosen) * G`` and its gradient."""
    logits = forward(params, batch.features)
    probs = segment_softmax(logits, batch.offsets)
    seg = batch.segment_ids
    rows = batch.chosen_rows
    dlogp = -np.asarray(returns, dtype=np.float64)
    dlogits = -probs * dlogp[seg]
    dlogits[rows] += dlogp
    loss = float(np.mean(-np.log(probs[rows]) * returns))
    return loss, backward(params, batch.features, dlogits / len(batch))


@dataclass
class EvalRecord:
    episode: int
    eval_reward_mean: float
    served: float
    pickup: float | None
    confirmation: float | None
    delivery: float | None
    detour: float | None
    kl: float
    loss: float
    noise: float
    improved: bool


def _nanmean(values: list[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def summarize(metrics: Sequence[EpisodeMetrics]) -> dict[str, float | None]:
    return {
        "total_reward": float(np.mean([m.total_reward for m in metrics])),
        "served": float(np.mean([m.served for m in metrics])),
        "pickup": _nanmean([m.mean_pickup_time for m in metrics]),
        "confirmation": _nanmean([m.mean_confirmation_time for m in metrics]),
        "delivery": _nanmean([m.mean_delivery_time for m in metrics]),
        "detour": _nanmean([m.mean_detour_time for m in metrics]),
    }


@dataclass
class TrainingResult:
    params: Mlp
    optimizer: AdamState
    best: BestCheckpoint
    evals: list[EvalRecord] = field(default_factory=list)
    episode_rewards: list[float] = field(default_factory=list)


class Trainer:
    """Runs the collect / optimize / evaluate loop for one configured method."""

    def __init__(self, cfg: RunConfig, source_factory: Callable[[int], OrderSource] | None = None):
        self.cfg = cfg.validate()
        self.sim = cfg.sim
        self.tcfg = cfg.trainer
        self.source_factory = source_factory
        tc = self.tcfg
        self.rng = np.random.default_rng([tc.seed, 0xA11CE])
        init_rng = np.random.default_rng([tc.seed, 0x1417])
        self.params = Mlp.init(policy_sizes(self.sim.feature_dim, tc.hidden), init_rng)
        self.optimizer = AdamState.fresh(self.params, tc.lr, tc.lr_decay)
        # reference policy starts as the initial policy and tracks the best checkpoint
        self.ref = self.params.copy()
        self.best = BestCheckpoint()
        self.critic: Mlp | None = None
        self.critic_opt: AdamState | None = None
        if tc.method == "ippo":
            self.critic = Mlp.init(critic_sizes(self.sim.feature_dim, tc.hidden), init_rng)
            self.critic_opt = AdamState.fresh(self.critic, tc.critic_lr, 1.0)
        self.episode = 0

    def world_seed(self, episode: int) -> int:
        return TRAIN_SEED_BASE + self.tcfg.seed * 100_000 + episode

    def world_for_episode(self, episode: int) -> RideWorld:
        seed = self.world_seed(episode)
        source = self.source_factory(seed) if self.source_factory else None
        return RideWorld(self.sim, source, seed=seed)

    def collect(self, timer: dict[str, float] | None = None) -> EpisodeBuffer:
        world = self.world_for_episode(self.episode)
        return run_episode(
            world,
            self.params,
            noise=self.tcfg.noise_at(self.episode),
            rng=self.rng,
            record=True,
            record_critic=self.tcfg.method == "ippo",
            timer=timer,
        )

    def _sample_advantages(self, buf: EpisodeBuffer) -> np.ndarray:
        method = self.tcfg.method
        if method in ("ospo", "ospo-episode-norm", "grpo"):
            adv = advantages_for(method, buf, self.tcfg).values
        elif method == "ippo":
            adv = self._ippo_advantages(buf)
        else:
            adv = discounted_returns(buf.rewards, self.tcfg.gamma)
        return np.array([adv[tr.agent, tr.step] for tr in buf.transitions])

    def _ippo_advantages(self, buf: EpisodeBuffer) -> np.ndarray:
        assert self.critic is not None and self.critic_opt is not None and buf.critic_inputs is not None
        n, horizon, d = buf.critic_inputs.shape
        x = buf.critic_inputs.reshape(-1, d)
        values = np.zeros((n, horizon + 1))
        values[:, :horizon] = forward(self.critic, x).reshape(n, horizon)
        adv, targets = gae(buf.rewards, values, self.tcfg.gamma, self.tcfg.gae_lambda)
        y = targets.reshape(-1)
        for _ in range(self.tcfg.epochs):
            perm = self.rng.permutation(len(y))
            for start in range(0, len(y), self.tcfg.batch_size):
                idx = perm[start : start + self.tcfg.batch_size]
                err = forward(self.critic, x[idx]) - y[idx]
                grads = backward(self.critic, x[idx], 2.0 * err / len(idx))
                adam_step(self.critic, grads, self.critic_opt)
        return adv

    def optimize(self, buf: EpisodeBuffer) -> tuple[float, float]:
        """Epochs of minibatch updates on one episode's samples; returns (mean loss, mean KL)."""
        trs = buf.transitions
        if not trs:
            return 0.0, 0.0
        adv = self._sample_advantages(buf)
        old = np.array([tr.old_prob for tr in trs])
        method = self.tcfg.method
        losses, kls = [], []
        for _ in range(self.tcfg.epochs):
            perm = self.rng.permutation(len(trs))
            for start in range(0, len(trs), self.tcfg.batch_size):
                idx = perm[start : start + self.tcfg.batch_size]
                batch = CandidateBatch.stack([trs[k].features for k in idx], [trs[k].chosen for k in idx])
                if method == "ipg":
                    loss, grads = ipg_loss_grads(self.params, batch, adv[idx])
                    kl = 0.0
                else:
                    ref = self.ref if method != "ippo" else None
                    loss, kl, grads = policy_loss_grads(self.params, batch, old[idx], adv[idx], self.tcfg, ref)
                adam_step(self.params, grads, self.optimizer)
                losses.append(loss)
                kls.append(kl)
        return float(np.mean(losses)), float(np.mean(kls))

    def evaluate(self, params: Mlp | None = None) -> list[EpisodeMetrics]:
        return evaluate(self.sim, self.params if params is None else params, self.tcfg.eval_seeds, self.source_factory)

    def train_episode(self, timer: dict[str, float] | None = None) -> tuple[EpisodeBuffer, float, float]:
        buf = self.collect(timer)
        t0 = time.perf_counter()
        loss, kl = self.optimize(buf)
        if timer is not None:
            timer["learning"] = timer.get("learning", 0.0) + time.perf_counter() - t0
        self.optimizer.decay_lr()
        self.episode += 1
        return buf, loss, kl

    def train(self, on_eval: Callable[[EvalRecord], None] | None = None) -> TrainingResult:
        result = TrainingResult(self.params, self.optimizer, self.best)
        for _ in range(self.tcfg.episodes):
            noise = self.tcfg.noise_at(self.episode)
            buf, loss, kl = self.train_episode()
            result.episode_rewards.append(buf.metrics.total_reward)
            if self.episode % self.tcfg.eval_every == 0:
                summary = summarize(self.evaluate())
                improved = self.best.update(summary["total_reward"], self.params, self.episode)
                if improved:
                    self.ref = self.best.params
                rec = EvalRecord(
                    self.episode, summary["total_reward"], summary["served"], summary["pickup"],
                    summary["confirmation"], summary["delivery"], summary["detour"], kl, loss, noise, improved,
                )
                result.evals.append(rec)
                log.info("episode %d eval reward %.2f served %.1f", self.episode, rec.eval_reward_mean, rec.served)
                if on_eval is not None:
                    on_eval(rec)
        return result
