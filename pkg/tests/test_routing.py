import numpy as np
import pytest

from ridepool.routing import (
    DROPOFF,
    PICKUP,
    RoutePlan,
    Stop,
    advance_vehicle,
    best_insertion,
    is_valid_route,
    plan_route,
    travel_time,
    with_deadline,
)

from .oracles import naive_route_search


class O:
    def __init__(self, id, origin, dest):
        self.id, self.origin, self.dest = id, origin, dest


def test_travel_time_identity_and_example():
    assert travel_time((3.0, 4.0), (3.0, 4.0)) == 0.0
    assert travel_time((0.0, 0.0), (1.0, 2.0), 60.0) == pytest.approx(180.0)


def test_travel_time_symmetric_and_triangle():
    rng = np.random.default_rng(11)
    pts = rng.uniform(0, 10, size=(1000, 3, 2))
    for a, b, c in pts:
        a, b, c = tuple(a), tuple(b), tuple(c)
        assert travel_time(a, b) == pytest.approx(travel_time(b, a))
        assert travel_time(a, c) <= travel_time(a, b) + travel_time(b, c) + 1e-9


def test_insert_into_empty_route():
    res = best_insertion(RoutePlan((), 0.0), (0.0, 0.0), O(7, (1.0, 0.0), (1.0, 2.0)), 0.0)
    assert [s.key for s in res.new_route.stops] == [(PICKUP, 7), (DROPOFF, 7)]
    assert res.added_passenger_time == 0.0
    assert res.late_count == 0
    assert res.pickup_eta == pytest.approx(60.0)
    assert res.new_order_eta == pytest.approx(180.0)
    assert res.added_vehicle_km == pytest.approx(3.0)


def test_insert_with_one_onboard_dropoff_matches_enumeration():
    old = plan_route((0.0, 0.0), 0.0, [Stop(DROPOFF, 1, (0.0, 1.0), deadline=60.0)], 60.0)
    res = best_insertion(old, (0.0, 0.0), O(2, (0.0, 0.0), (0.0, 0.5)), 0.0)
    assert [s.key for s in res.new_route.stops] == [(PICKUP, 2), (DROPOFF, 2), (DROPOFF, 1)]
    best, tied = naive_route_search((0.0, 0.0), 0.0, [(DROPOFF, 1, (0.0, 1.0), 60.0)], 2, (0.0, 0.0), (0.0, 0.5))
    assert res.new_route.total_time == pytest.approx(best)
    assert best == pytest.approx(60.0)
    # the onboard passenger is not delayed: the new trip lies on the way
    assert res.added_passenger_time == pytest.approx(0.0)
    assert res.late_count == 0


def test_insertion_that_makes_an_onboard_order_late():
    # onboard passenger going east; new order lies west, so serving it first delays the dropoff
    old = plan_route((0.0, 0.0), 0.0, [Stop(DROPOFF, 1, (1.0, 0.0), deadline=60.0)], 60.0)
    new = O(2, (0.0, 0.5), (0.0, 0.6))
    res = best_insertion(old, (0.0, 0.0), new, 0.0)
    # hand-computed: D1 first (60s) then P2 (90s) then D2 (6s) = 156s
    # versus P2 (30) D2 (6) D1 (96): total 132s, D1 arrives at 132 > 60
    assert res.new_route.total_time == pytest.approx(132.0)
    assert res.late_count == 1
    assert res.added_passenger_time == pytest.approx(72.0)
    best, tied = naive_route_search((0.0, 0.0), 0.0, [(DROPOFF, 1, (1.0, 0.0), 60.0)], 2, new.origin, new.dest)
    assert best == pytest.approx(132.0)
    assert (1, pytest.approx(72.0)) in [(c, r) for c, r in tied]


def _random_state(rng):
    """Vehicle with up to three en-route orders (each onboard or still to be picked up)."""
    pos = tuple(rng.uniform(0, 10, 2))
    k = int(rng.integers(0, 3))  # leaves a free seat for the new order at capacity 3
    stops = []
    for oid in range(k):
        if rng.random() < 0.5:
            stops.append(Stop(PICKUP, oid, tuple(rng.uniform(0, 10, 2))))
        stops.append(Stop(DROPOFF, oid, tuple(rng.uniform(0, 10, 2)), deadline=float(rng.uniform(0, 1500))))
    # a random precedence-valid order of the existing stops
    order = list(rng.permutation(len(stops)))
    seq = []
    placed = set()
    while order:
        for idx in order:
            s = stops[idx]
            if s.kind == DROPOFF and any(p.kind == PICKUP and p.order_id == s.order_id and p.key not in placed for p in stops):
                continue
            seq.append(s)
            placed.add(s.key)
            order.remove(idx)
            break
    new = O(99, tuple(rng.uniform(0, 10, 2)), tuple(rng.uniform(0, 10, 2)))
    return pos, seq, new


def test_best_insertion_matches_naive_enumerator_on_random_states():
    rng = np.random.default_rng(5)
    for _ in range(200):
        pos, seq, new = _random_state(rng)
        route = plan_route(pos, 100.0, seq, 60.0)
        res = best_insertion(route, pos, new, 100.0)
        best, tied = naive_route_search(pos, 100.0, [(s.kind, s.order_id, s.loc, s.deadline) for s in seq], 99, new.origin, new.dest)
        assert res.new_route.total_time == pytest.approx(best, abs=1e-6)
        assert any(c == res.late_count and r == pytest.approx(res.added_passenger_time, abs=1e-6) for c, r in tied)
        assert is_valid_route(res.new_route)
        assert res.added_passenger_time >= 0 and res.late_count >= 0


def test_tie_break_prefers_unchanged_existing_order():
    # two onboard dropoffs at the same spot: swapping them costs nothing, so keep the old order
    old = plan_route((0.0, 0.0), 0.0, [Stop(DROPOFF, 1, (2.0, 0.0)), Stop(DROPOFF, 2, (2.0, 0.0))], 60.0)
    res = best_insertion(old, (0.0, 0.0), O(3, (1.0, 0.0), (3.0, 0.0)), 0.0)
    keys = [s.key for s in res.new_route.stops if s.order_id != 3]
    assert keys == [(DROPOFF, 1), (DROPOFF, 2)]


def test_advance_idle_vehicle():
    pos, route, events = advance_vehicle((1.0, 1.0), RoutePlan((), 0.0), 0.0, 60.0)
    assert pos == (1.0, 1.0) and events == [] and len(route) == 0


def test_advance_hits_stop_exactly_at_boundary():
    route = plan_route((0.0, 0.0), 0.0, [Stop(PICKUP, 1, (1.0, 0.0)), Stop(DROPOFF, 1, (5.0, 0.0))], 60.0)
    pos, rest, events = advance_vehicle((0.0, 0.0), route, 0.0, 60.0)
    assert [(e.kind, e.time) for e in events] == [(PICKUP, pytest.approx(60.0))]
    assert pos == (1.0, 0.0)
    assert [s.key for s in rest.stops] == [(DROPOFF, 1)]


def test_advance_two_stops_in_one_step():
    # 20 s then 30 s further at 1 km/min
    route = plan_route((0.0, 0.0), 0.0, [Stop(PICKUP, 1, (0.0, 1 / 3)), Stop(DROPOFF, 1, (0.5, 1 / 3))], 60.0)
    pos, rest, events = advance_vehicle((0.0, 0.0), route, 100.0, 60.0)
    assert [e.time for e in events] == [pytest.approx(120.0), pytest.approx(150.0)]
    assert [e.kind for e in events] == [PICKUP, DROPOFF]
    assert len(rest) == 0 and pos == (0.5, 1 / 3)


def test_advance_moves_x_before_y_mid_leg():
    route = plan_route((0.0, 0.0), 0.0, [Stop(DROPOFF, 1, (0.5, 2.0))], 60.0)
    pos, rest, events = advance_vehicle((0.0, 0.0), route, 0.0, 60.0)
    assert events == []
    assert pos == pytest.approx((0.5, 0.5))
    assert rest.stops[0].eta == pytest.approx(150.0)
    assert is_valid_route(rest)


def test_route_validity_preserved_by_advance():
    rng = np.random.default_rng(2)
    for _ in range(100):
        pos, seq, new = _random_state(rng)
        res = best_insertion(plan_route(pos, 0.0, seq, 60.0), pos, new, 0.0)
        p, route, t = pos, res.new_route, 0.0
        while len(route):
            p, route, _ = advance_vehicle(p, route, t, 60.0)
            t += 60.0
            assert is_valid_route(route)


def test_with_deadline_marks_only_target_dropoff():
    route = plan_route((0.0, 0.0), 0.0, [Stop(PICKUP, 1, (1.0, 0.0)), Stop(DROPOFF, 1, (2.0, 0.0))], 60.0)
    marked = with_deadline(route, 1, 500.0)
    assert marked.stops[0].deadline is None and marked.stops[1].deadline == 500.0
