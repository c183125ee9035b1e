"""Planar travel model, pickup-and-delivery route insertion, and vehicle motion.

Travel is Manhattan distance at constant speed. Routes are re-optimized by
exact enumeration of every precedence-valid stop ordering when the stop count
is small (capacity 3 gives at most 6 stops); longer routes fall back to
cheapest insertion into the existing stop order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

Point = tuple[float, float]

PICKUP = "pickup"
DROPOFF = "dropoff"

# Stop counts above this use cheapest insertion instead of exact enumeration.
EXACT_STOP_LIMIT = 8
# Float guard for comparing route durations and deadlines, in seconds.
TIME_TOL = 1e-6


class RoutingError(RuntimeError):
    pass


class HasOD(Protocol):
    id: int
    origin: Point
    dest: Point


def manhattan_km(a: Point, b: Point) -> float:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def travel_time(a: Point, b: Point, speed_kmh: float = 60.0) -> float:
    """Seconds to drive from ``a`` to ``b`` (km coordinates) at ``speed_kmh``."""
    return manhattan_km(a, b) / speed_kmh * 3600.0


@dataclass(frozen=True)
class Stop:
    kind: str
    order_id: int
    loc: Point
    eta: float = 0.0
    # scheduled dropoff of the order; only set on dropoff stops of admitted orders
    deadline: float | None = None

    @property
    def key(self) -> tuple[str, int]:
        return (self.kind, self.order_id)


@dataclass(frozen=True)
class RoutePlan:
    stops: tuple[Stop, ...] = ()
    start_time: float = 0.0

    @property
    def total_time(self) -> float:
        if not self.stops:
            return 0.0
        return self.stops[-1].eta - self.start_time

    def __len__(self) -> int:
        return len(self.stops)

    def dropoff_eta(self, order_id: int) -> float:
        for s in self.stops:
            if s.kind == DROPOFF and s.order_id == order_id:
                return s.eta
        raise KeyError(order_id)


@dataclass(frozen=True)
class InsertionResult:
    new_route: RoutePlan
    added_vehicle_time: float  # seconds
    added_passenger_time: float  # rho, seconds summed over en-route orders
    late_count: int  # chi
    added_vehicle_km: float
    new_order_eta: float  # dropoff ETA of the inserted order
    pickup_eta: float


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    order_id: int


def plan_route(pos: Point, t_now: float, stops: Sequence[Stop], speed_kmh: float) -> RoutePlan:
    """Recompute ETAs for ``stops`` visited in order starting from ``pos`` at ``t_now``."""
    out = []
    t = t_now
    here = pos
    for s in stops:
        t += travel_time(here, s.loc, speed_kmh)
        out.append(Stop(s.kind, s.order_id, s.loc, t, s.deadline))
        here = s.loc
    return RoutePlan(tuple(out), t_now)


def is_valid_route(route: RoutePlan) -> bool:
    """Precedence (pickup before dropoff) and non-decreasing ETAs."""
    seen_pickup: set[int] = set()
    dropped: set[int] = set()
    pickups = {s.order_id for s in route.stops if s.kind == PICKUP}
    prev = route.start_time
    for s in route.stops:
        if s.eta < prev - TIME_TOL:
            return False
        prev = s.eta
        if s.kind == PICKUP:
            if s.order_id in seen_pickup or s.order_id in dropped:
                return False
            seen_pickup.add(s.order_id)
        else:
            if s.order_id in dropped:
                return False
            if s.order_id in pickups and s.order_id not in seen_pickup:
                return False
            dropped.add(s.order_id)
    return True


def _position_changes(old: Sequence[Stop], new: Sequence[Stop]) -> int:
    old_keys = [s.key for s in old]
    kept = [s.key for s in new if s.key in set(old_keys)]
    return sum(a != b for a, b in zip(old_keys, kept))


def _enumerate_best(pos: Point, items: list[Stop], speed_kmh: float) -> list[tuple[float, tuple[int, ...]]]:
    """All precedence-valid orderings within TIME_TOL of the optimum, as (duration, index order)."""
    n = len(items)
    needs = [-1] * n
    for k, s in enumerate(items):
        if s.kind == DROPOFF:
            for m, p in enumerate(items):
                if p.kind == PICKUP and p.order_id == s.order_id:
                    needs[k] = m
    best = [float("inf")]
    found: list[tuple[float, tuple[int, ...]]] = []
    used = [False] * n
    seq: list[int] = []

    def dfs(here: Point, cost: float) -> None:
        if cost > best[0] + TIME_TOL:
            return
        if len(seq) == n:
            if cost < best[0]:
                best[0] = cost
            found.append((cost, tuple(seq)))
            return
        for k in range(n):
            if used[k] or (needs[k] >= 0 and not used[needs[k]]):
                continue
            used[k] = True
            seq.append(k)
            dfs(items[k].loc, cost + travel_time(here, items[k].loc, speed_kmh))
            seq.pop()
            used[k] = False

    dfs(pos, 0.0)
    return [(c, s) for c, s in found if c <= best[0] + TIME_TOL]


def _cheapest_insertion(pos: Point, old: list[Stop], pick: Stop, drop: Stop, speed_kmh: float) -> list[tuple[float, tuple[Stop, ...]]]:
    m = len(old)
    options = []
    for p in range(m + 1):
        for q in range(p + 1, m + 2):
            seq = list(old)
            seq.insert(p, pick)
            seq.insert(q, drop)
            plan = plan_route(pos, 0.0, seq, speed_kmh)
            options.append((plan.total_time, tuple(seq)))
    best = min(c for c, _ in options)
    return [(c, s) for c, s in options if c <= best + TIME_TOL]


def best_insertion(
    route: RoutePlan,
    vehicle_pos: Point,
    new_order: HasOD,
    t_now: float | None = None,
    speed_kmh: float = 60.0,
) -> InsertionResult:
    """Insert ``new_order`` into ``route`` at minimum total route duration.

    Every existing stop may be reordered. Among equally short routes the one
    that moves the fewest existing stops wins, then the one picking the new
    order up earliest. Lateness and added passenger time are measured against
    the existing route replanned from ``vehicle_pos`` at ``t_now``.
    """
    if t_now is None:
        t_now = route.start_time
    old = plan_route(vehicle_pos, t_now, route.stops, speed_kmh)
    pick = Stop(PICKUP, new_order.id, tuple(new_order.origin))
    drop = Stop(DROPOFF, new_order.id, tuple(new_order.dest))
    items = list(old.stops) + [pick, drop]

    if len(items) <= EXACT_STOP_LIMIT:
        tied = [(c, tuple(items[k] for k in seq)) for c, seq in _enumerate_best(vehicle_pos, items, speed_kmh)]
    else:
        tied = _cheapest_insertion(vehicle_pos, list(old.stops), pick, drop, speed_kmh)
    if not tied:
        raise RoutingError(f"no feasible route for order {new_order.id}")

    def rank(entry: tuple[float, tuple[Stop, ...]]) -> tuple[int, int]:
        seq = entry[1]
        pickup_idx = next(k for k, s in enumerate(seq) if s.key == pick.key)
        return (_position_changes(old.stops, seq), pickup_idx)

    # min() keeps the first of equal ranks, and tied is in deterministic enumeration order
    _, seq = min(tied, key=rank)
    new = plan_route(vehicle_pos, t_now, seq, speed_kmh)

    old_eta = {s.order_id: s.eta for s in old.stops if s.kind == DROPOFF}
    rho = 0.0
    chi = 0
    for s in new.stops:
        if s.kind != DROPOFF or s.order_id == new_order.id:
            continue
        rho += max(0.0, s.eta - old_eta[s.order_id])
        if s.deadline is not None and s.eta > s.deadline + TIME_TOL:
            chi += 1
    added = max(0.0, new.total_time - old.total_time)
    return InsertionResult(
        new_route=new,
        added_vehicle_time=added,
        added_passenger_time=rho,
        late_count=chi,
        added_vehicle_km=added / 3600.0 * speed_kmh,
        new_order_eta=new.dropoff_eta(new_order.id),
        pickup_eta=next(s.eta for s in new.stops if s.key == pick.key),
    )


def with_deadline(route: RoutePlan, order_id: int, deadline: float) -> RoutePlan:
    """Attach the scheduled dropoff time to an order's dropoff stop."""
    stops = tuple(
        Stop(s.kind, s.order_id, s.loc, s.eta, deadline) if s.kind == DROPOFF and s.order_id == order_id else s
        for s in route.stops
    )
    return RoutePlan(stops, route.start_time)


def _move_toward(here: Point, target: Point, dist_km: float) -> Point:
    # axis-aligned: x first, then y
    dx = target[0] - here[0]
    if dist_km <= abs(dx):
        return (here[0] + (dist_km if dx > 0 else -dist_km), here[1])
    rest = dist_km - abs(dx)
    dy = target[1] - here[1]
    if rest >= abs(dy):
        return target
    return (target[0], here[1] + (rest if dy > 0 else -rest))


def advance_vehicle(
    pos: Point,
    route: RoutePlan,
    t_now: float,
    dt: float,
    speed_kmh: float = 60.0,
) -> tuple[Point, RoutePlan, list[Event]]:
    """Drive along ``route`` for ``dt`` seconds.

    Returns the new position, the remaining route (ETAs recomputed from the
    new position) and the stop events reached, in visiting order.
    """
    events: list[Event] = []
    elapsed = 0.0
    here = pos
    stops = list(route.stops)
    while stops:
        leg = travel_time(here, stops[0].loc, speed_kmh)
        if elapsed + leg <= dt + 1e-9:
            elapsed += leg
            here = stops[0].loc
            events.append(Event(t_now + elapsed, stops[0].kind, stops[0].order_id))
            stops.pop(0)
        else:
            here = _move_toward(here, stops[0].loc, (dt - elapsed) / 3600.0 * speed_kmh)
            break
    t_end = t_now + dt
    return here, plan_route(here, t_end, stops, speed_kmh), events
