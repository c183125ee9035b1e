"""Fleet simulator: order arrival and expiry, state encoding, and the step loop.

Timeline of step ``t`` (``L = step_len``): orders arriving in ``[tL, (t+1)L)``
join the pool, the dispatch decision is taken at ``(t+1)L``, and vehicles
then drive for ``L`` seconds. Pending orders older than ``max_wait`` at a
decision time are cancelled.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .config import SimConfig
from .matching import Pair, ScoreMatrix, check_assignment
from .objectives import compute_reward
from .routing import (
    DROPOFF,
    PICKUP,
    TIME_TOL,
    Event,
    InsertionResult,
    Point,
    RoutePlan,
    advance_vehicle,
    best_insertion,
    travel_time,
    with_deadline,
)


class ConstraintViolation(AssertionError):
    """A world invariant was broken; the episode cannot continue."""


class OrderStatus(str, enum.Enum):
    PENDING = "pending"
    ASSIGNED = "assigned"
    ONBOARD = "onboard"
    COMPLETED = "completed"
    CANCELLED = "cancelled"


@dataclass(eq=False)
class Order:
    id: int
    origin: Point
    dest: Point
    arrival_t: float
    direct_time: float = 0.0
    assigned_t: float | None = None
    pickup_t: float | None = None
    dropoff_t: float | None = None
    scheduled_dropoff: float | None = None
    status: OrderStatus = OrderStatus.PENDING
    driver: int | None = None


@dataclass(eq=False)
class VehicleState:
    id: int
    pos: Point
    capacity: int
    route: RoutePlan = field(default_factory=RoutePlan)
    onboard: list[Order] = field(default_factory=list)
    assigned: list[Order] = field(default_factory=list)  # admitted, not yet picked up
    cum_reward: float = 0.0

    @property
    def remaining_capacity(self) -> int:
        return self.capacity - len(self.onboard) - len(self.assigned)

    def en_route(self) -> list[Order]:
        return self.onboard + self.assigned


@dataclass(frozen=True)
class EpisodeMetrics:
    served: int
    cancelled: int
    total_reward: float
    mean_delivery_time: float | None
    mean_detour_time: float | None
    mean_pickup_time: float | None
    mean_confirmation_time: float | None
    spawned: int = 0
    assigned: int = 0

    def as_row(self) -> dict[str, float | int | None]:
        return {
            "served": self.served,
            "cancelled": self.cancelled,
            "total_reward": self.total_reward,
            "mean_delivery_time": self.mean_delivery_time,
            "mean_detour_time": self.mean_detour_time,
            "mean_pickup_time": self.mean_pickup_time,
            "mean_confirmation_time": self.mean_confirmation_time,
        }


# ------------------------------------------------------------------ demand


class OrderSource(Protocol):
    def requests(self, t: int) -> list[tuple[float, Point, Point]]:
        """(arrival seconds, origin, destination) for arrivals during step ``t``."""


class SyntheticSource:
    """Poisson arrivals; OD drawn from a mixture of hotspot Gaussians and a uniform city.

    Output for step ``t`` depends only on ``(seed, t)``.
    """

    MIN_TRIP_KM = 0.5

    def __init__(self, cfg: SimConfig, seed: int, rate: float | None = None):
        self.cfg = cfg
        self.seed = int(seed)
        self.rate = cfg.order_rate if rate is None else rate

    def _point(self, rng: np.random.Generator) -> Point:
        cfg = self.cfg
        if cfg.hotspots and rng.random() < cfg.hotspot_frac:
            x, y, sigma = cfg.hotspots[rng.integers(len(cfg.hotspots))]
            px = float(np.clip(rng.normal(x, sigma), 0.0, cfg.city_width))
            py = float(np.clip(rng.normal(y, sigma), 0.0, cfg.city_height))
            return (px, py)
        return (float(rng.uniform(0.0, cfg.city_width)), float(rng.uniform(0.0, cfg.city_height)))

    def requests(self, t: int) -> list[tuple[float, Point, Point]]:
        if self.rate <= 0:
            return []
        rng = np.random.default_rng([self.seed, t])
        k = int(rng.poisson(self.rate))
        arrivals = np.sort(rng.uniform(0.0, self.cfg.step_len, size=k)) + t * self.cfg.step_len
        out = []
        for a in arrivals:
            o = self._point(rng)
            d = self._point(rng)
            while abs(o[0] - d[0]) + abs(o[1] - d[1]) < self.MIN_TRIP_KM:
                d = self._point(rng)
            out.append((float(a), o, d))
        return out


class ReplaySource:
    """Replays ingested order records, each at its recorded arrival time."""

    def __init__(self, records: Iterable, step_len: float):
        self.records = sorted(records, key=lambda r: r.arrival_s)
        self.step_len = step_len

    def requests(self, t: int) -> list[tuple[float, Point, Point]]:
        lo, hi = t * self.step_len, (t + 1) * self.step_len
        return [(float(r.arrival_s), (r.ox, r.oy), (r.dx, r.dy)) for r in self.records if lo <= r.arrival_s < hi]


def spawn_orders(t: int, source: OrderSource, speed_kmh: float = 60.0, first_id: int = 0) -> list[Order]:
    """Orders whose arrival falls in step ``t``, with ids counting up from ``first_id``."""
    return [
        Order(first_id + k, o, d, arrival, direct_time=travel_time(o, d, speed_kmh))
        for k, (arrival, o, d) in enumerate(source.requests(t))
    ]


def expire_orders(pool: list[Order], t_now: float, max_wait: float) -> list[Order]:
    """Cancel pending orders that have waited longer than ``max_wait``; mutates ``pool``."""
    cancelled = [o for o in pool if t_now - o.arrival_t > max_wait]
    if cancelled:
        pool[:] = [o for o in pool if t_now - o.arrival_t <= max_wait]
        for o in cancelled:
            o.status = OrderStatus.CANCELLED
    return cancelled


# ------------------------------------------------------------------ encoding


def _slot_block(driver: VehicleState, t_now: float, cfg: SimConfig) -> np.ndarray:
    slots = np.zeros(5 * cfg.capacity)
    horizon = cfg.episode_seconds
    etas = {s.order_id: s.eta for s in driver.route.stops if s.kind == DROPOFF}
    orders = sorted(driver.en_route(), key=lambda o: (etas.get(o.id, math.inf), o.id))
    for k, o in enumerate(orders[: cfg.capacity]):
        eta = etas.get(o.id, t_now)
        slots[5 * k : 5 * k + 5] = (
            o.dest[0] / cfg.city_width,
            o.dest[1] / cfg.city_height,
            (eta - o.arrival_t) / horizon,
            (eta - t_now) / horizon,
            1.0,
        )
    return slots


def _driver_block(driver: VehicleState, group_avg: float, reward_scale: float, cfg: SimConfig) -> np.ndarray:
    return np.array([
        driver.pos[0] / cfg.city_width,
        driver.pos[1] / cfg.city_height,
        driver.remaining_capacity / cfg.capacity,
        driver.cum_reward / reward_scale,
        group_avg / reward_scale,
    ])


def _order_block(order: Order, t_now: float, cfg: SimConfig) -> np.ndarray:
    return np.array([
        order.origin[0] / cfg.city_width,
        order.origin[1] / cfg.city_height,
        order.dest[0] / cfg.city_width,
        order.dest[1] / cfg.city_height,
        (t_now - order.arrival_t) / cfg.episode_seconds,
    ])


def encode_pair(
    driver: VehicleState,
    order: Order,
    group_avg_cum_reward: float,
    t_now: float,
    cfg: SimConfig,
    reward_scale: float = 1.0,
) -> np.ndarray:
    """Feature vector of one driver-order pair, length ``10 + 5 * capacity``.

    Layout: order block, driver block, then one block per en-route order
    (sorted by dropoff ETA) and zero padding for free seats.
    """
    if order.status is not OrderStatus.PENDING:
        raise ValueError(f"order {order.id} is {order.status.value}, not pending")
    if driver.remaining_capacity < 1:
        raise ValueError(f"driver {driver.id} has no remaining capacity")
    return np.concatenate([
        _order_block(order, t_now, cfg),
        _driver_block(driver, group_avg_cum_reward, reward_scale, cfg),
        _slot_block(driver, t_now, cfg),
    ])


# ------------------------------------------------------------------ world


@dataclass
class Observation:
    """Decision-time snapshot: the order pool and every driver-order feature row."""

    t: int
    now: float
    pool: list[Order]
    available: np.ndarray  # (n,) drivers with a free seat
    features: np.ndarray  # (n, w, feature_dim)
    driver_features: np.ndarray  # (n, 5 + 5c) driver block and seat slots
    order_features: np.ndarray  # (w, 5)

    @property
    def feasible(self) -> np.ndarray:
        return np.broadcast_to(self.available[:, None], (len(self.available), len(self.pool)))


@dataclass(frozen=True)
class StepResult:
    rewards: np.ndarray  # (n,), zero for unassigned drivers
    events: list[Event]
    insertions: dict[int, InsertionResult]  # driver -> insertion of its new order
    spread_before: float  # population std of cumulative rewards before the step's rewards
    spread_after: float


class RideWorld:
    """One independent episode of the ride-pooling fleet."""

    def __init__(self, cfg: SimConfig, source: OrderSource | None = None, seed: int | None = None):
        self.cfg = cfg.validate()
        self.seed = cfg.seed if seed is None else int(seed)
        self.source = source if source is not None else SyntheticSource(cfg, self.seed)
        self.reset()

    # -- lifecycle

    def reset(self) -> None:
        cfg = self.cfg
        rng = np.random.default_rng([self.seed, 0x5EED])
        xs = rng.uniform(0.0, cfg.city_width, cfg.n_drivers)
        ys = rng.uniform(0.0, cfg.city_height, cfg.n_drivers)
        self.vehicles = [VehicleState(i, (float(x), float(y)), cfg.capacity) for i, (x, y) in enumerate(zip(xs, ys))]
        self.orders: list[Order] = []
        self.pool: list[Order] = []
        self.t = 0
        self.total_reward = 0.0
        self.reward_scale = 1.0
        self.reward_log: list[np.ndarray] = []
        self._begin_step()

    @property
    def now(self) -> float:
        return (self.t + 1) * self.cfg.step_len

    @property
    def done(self) -> bool:
        return self.t >= self.cfg.horizon

    def _begin_step(self) -> None:
        if self.done:
            return
        new = spawn_orders(self.t, self.source, self.cfg.speed_kmh, first_id=len(self.orders))
        self.orders.extend(new)
        self.pool.extend(new)
        expire_orders(self.pool, self.now, self.cfg.max_wait)
        self.pool.sort(key=lambda o: (o.arrival_t, o.id))

    # -- observation

    def cum_rewards(self) -> np.ndarray:
        return np.array([v.cum_reward for v in self.vehicles])

    def available(self) -> np.ndarray:
        return np.array([v.remaining_capacity >= 1 for v in self.vehicles], dtype=bool)

    def observe(self) -> Observation:
        cfg = self.cfg
        now = self.now
        avail = self.available()
        w = len(self.pool)
        n = len(self.vehicles)
        group_avg = float(self.cum_rewards().mean())
        if w:
            order_blk = np.stack([_order_block(o, now, cfg) for o in self.pool])
        else:
            order_blk = np.zeros((0, 5))
        drv = np.stack([
            np.concatenate([_driver_block(v, group_avg, self.reward_scale, cfg), _slot_block(v, now, cfg)])
            for v in self.vehicles
        ])
        feats = np.empty((n, w, cfg.feature_dim))
        feats[:, :, :5] = order_blk[None, :, :]
        feats[:, :, 5:] = drv[:, None, :]
        return Observation(self.t, now, list(self.pool), avail, feats, drv, order_blk)

    def positions(self) -> np.ndarray:
        return np.array([v.pos for v in self.vehicles], dtype=float)

    # -- transition

    def step(self, assignment: Sequence[Pair]) -> StepResult:
        """Apply one assignment (pairs index vehicles and the current pool), then drive one step."""
        if self.done:
            raise RuntimeError("episode is over")
        cfg = self.cfg
        now = self.now
        n = len(self.vehicles)
        feasible = np.broadcast_to(self.available()[:, None], (n, len(self.pool)))
        try:
            for i, j in assignment:
                if not (0 <= i < n and 0 <= j < len(self.pool)):
                    raise ValueError(f"pair ({i}, {j}) out of range")
            check_assignment(ScoreMatrix(np.zeros(feasible.shape), feasible), assignment)
        except ValueError as exc:
            raise ConstraintViolation(str(exc)) from exc

        rewards = np.zeros(n)
        insertions: dict[int, InsertionResult] = {}
        taken = set()
        for i, j in sorted(assignment, key=lambda p: (p[1], p[0])):
            veh, order = self.vehicles[i], self.pool[j]
            ins = best_insertion(veh.route, veh.pos, order, now, cfg.speed_kmh)
            rewards[i] = compute_reward(ins, order, cfg)
            order.status = OrderStatus.ASSIGNED
            order.assigned_t = now
            order.scheduled_dropoff = ins.new_order_eta
            order.driver = i
            veh.route = with_deadline(ins.new_route, order.id, ins.new_order_eta)
            veh.assigned.append(order)
            insertions[i] = ins
            taken.add(j)
        self.pool = [o for k, o in enumerate(self.pool) if k not in taken]

        cum_before = self.cum_rewards()
        for v, r in zip(self.vehicles, rewards):
            v.cum_reward += float(r)
        cum_after = self.cum_rewards()
        self.total_reward += float(rewards.sum())
        self.reward_scale = max(self.reward_scale, float(np.abs(cum_after).max()))
        self.reward_log.append(rewards)

        events: list[Event] = []
        by_id = {o.id: o for v in self.vehicles for o in v.en_route()}
        for v in self.vehicles:
            v.pos, v.route, evs = advance_vehicle(v.pos, v.route, now, cfg.step_len, cfg.speed_kmh)
            for ev in evs:
                order = by_id[ev.order_id]
                if ev.kind == PICKUP:
                    v.assigned.remove(order)
                    v.onboard.append(order)
                    order.pickup_t = ev.time
                    order.status = OrderStatus.ONBOARD
                else:
                    v.onboard.remove(order)
                    order.dropoff_t = ev.time
                    order.status = OrderStatus.COMPLETED
            events.extend(evs)

        self.t += 1
        self._begin_step()
        self.check_invariants()
        return StepResult(rewards, events, insertions, float(cum_before.std()), float(cum_after.std()))

    # -- bookkeeping

    def check_invariants(self) -> None:
        c = self.cfg.capacity
        for v in self.vehicles:
            if len(v.onboard) > c or v.remaining_capacity < 0:
                raise ConstraintViolation(f"vehicle {v.id} exceeds capacity")
            drops = [s.order_id for s in v.route.stops if s.kind == DROPOFF]
            picks = [s.order_id for s in v.route.stops if s.kind == PICKUP]
            for o in v.onboard:
                if drops.count(o.id) != 1 or o.id in picks:
                    raise ConstraintViolation(f"onboard order {o.id} not routed exactly once on vehicle {v.id}")
            for o in v.assigned:
                if drops.count(o.id) != 1 or picks.count(o.id) != 1:
                    raise ConstraintViolation(f"assigned order {o.id} not routed on vehicle {v.id}")
        counts = {s: 0 for s in OrderStatus}
        for o in self.orders:
            counts[o.status] += 1
            stamps = [o.arrival_t, o.assigned_t, o.pickup_t, o.dropoff_t]
            seen = [s for s in stamps if s is not None]
            if any(b < a - TIME_TOL for a, b in zip(seen, seen[1:])):
                raise ConstraintViolation(f"order {o.id} timestamps are not monotone: {stamps}")
        if counts[OrderStatus.PENDING] != len(self.pool):
            raise ConstraintViolation("pending orders and the pool disagree")
        if sum(counts.values()) != len(self.orders):
            raise ConstraintViolation("order conservation broken")

    def metrics(self) -> EpisodeMetrics:
        return collect_metrics(self.orders, self.total_reward)


def _mean(xs: list[float]) -> float | None:
    return float(np.mean(xs)) if xs else None


def collect_metrics(orders: Sequence[Order], total_reward: float = 0.0) -> EpisodeMetrics:
    """Served/cancelled counts and mean times; means cover completed orders only."""
    done = [o for o in orders if o.status is OrderStatus.COMPLETED]
    confirmation = [o.assigned_t - o.arrival_t for o in done]
    pickup = [o.pickup_t - o.arrival_t for o in done]
    delivery = [o.dropoff_t - o.pickup_t for o in done]
    # floor absorbs float noise; the route can never beat the direct trip
    detour = [max(0.0, (o.dropoff_t - o.pickup_t) - o.direct_time) for o in done]
    return EpisodeMetrics(
        served=len(done),
        cancelled=sum(o.status is OrderStatus.CANCELLED for o in orders),
        total_reward=float(total_reward),
        mean_delivery_time=_mean(delivery),
        mean_detour_time=_mean(detour),
        mean_pickup_time=_mean(pickup),
        mean_confirmation_time=_mean(confirmation),
        spawned=len(orders),
        assigned=sum(o.assigned_t is not None for o in orders),
    )
