import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ridepool.matching import (
    ScoreMatrix,
    brute_force_assignment,
    check_assignment,
    greedy_assignment,
    solve_assignment,
    total_score,
)


def random_scores(rng, n, w, infeasible=0.2):
    return ScoreMatrix(rng.random((n, w)), rng.random((n, w)) >= infeasible)


@st.composite
def score_matrices(draw, max_side=5):
    n = draw(st.integers(0, max_side))
    w = draw(st.integers(0, max_side))
    vals = draw(st.lists(st.floats(0, 1), min_size=n * w, max_size=n * w))
    feas = draw(st.lists(st.booleans(), min_size=n * w, max_size=n * w))
    return ScoreMatrix(np.array(vals, dtype=float).reshape(n, w), np.array(feas, dtype=bool).reshape(n, w))


def test_single_pair():
    s = ScoreMatrix.from_rows([[0.7]])
    assert solve_assignment(s) == ((0, 0),)
    assert total_score(s, solve_assignment(s)) == pytest.approx(0.7)


def test_two_by_two_example():
    s = ScoreMatrix.from_rows([[0.9, 0.1], [0.2, 0.8]])
    pairs = solve_assignment(s)
    assert set(pairs) == {(0, 0), (1, 1)}
    assert total_score(s, pairs) == pytest.approx(1.7)
    assert brute_force_assignment(s) == pairs


def test_busy_driver_gets_nothing():
    s = ScoreMatrix.from_rows([[None, None]])
    assert solve_assignment(s) == () and brute_force_assignment(s) == ()


def test_empty_matrix():
    s = ScoreMatrix.from_rows([])
    assert solve_assignment(s) == () and brute_force_assignment(s) == ()


def test_infeasible_row_ignored():
    s = ScoreMatrix.from_rows([[0.3, 0.6], [None, None], [0.5, 0.4]])
    # hand enumeration: best is (0,1)+(2,0) = 1.1
    assert brute_force_assignment(s) == ((2, 0), (0, 1))
    assert total_score(s, solve_assignment(s)) == pytest.approx(1.1)


def test_brute_force_tie_break_is_lexicographic():
    s = ScoreMatrix.from_rows([[0.5, 0.5], [0.5, 0.5]])
    # both perfect matchings score 1.0; (j, i) order (0,0),(1,1) < (0,1),(1,0)
    assert brute_force_assignment(s) == ((0, 0), (1, 1))


def test_brute_force_size_guard():
    with pytest.raises(ValueError):
        brute_force_assignment(ScoreMatrix(np.zeros((9, 2)), np.ones((9, 2), bool)))


def test_solver_is_deterministic():
    rng = np.random.default_rng(0)
    s = random_scores(rng, 6, 6)
    assert solve_assignment(s) == solve_assignment(s)


@settings(max_examples=300, deadline=None)
@given(score_matrices())
def test_solver_matches_brute_force_total(s):
    fast = solve_assignment(s)
    slow = brute_force_assignment(s)
    check_assignment(s, fast)
    check_assignment(s, slow)
    assert total_score(s, fast) == pytest.approx(total_score(s, slow), abs=1e-12)


def test_brute_force_does_not_merge_nearly_equal_totals():
    # two single-pair matchings 1e-12 apart; the larger must win outright
    values = np.zeros((5, 4))
    feasible = np.zeros((5, 4), bool)
    values[2, 3], values[3, 2] = 1e-12, 1.0
    feasible[2, 3] = feasible[3, 2] = True
    s = ScoreMatrix(values, feasible)
    assert total_score(s, brute_force_assignment(s)) == total_score(s, solve_assignment(s)) == 1.0 + 1e-12


@settings(max_examples=200, deadline=None)
@given(score_matrices(), st.lists(st.floats(0, 1), min_size=5, max_size=5), st.lists(st.booleans(), min_size=5, max_size=5))
def test_adding_an_order_never_lowers_the_optimum(s, col, feas):
    n = s.shape[0]
    if n == 0:
        return
    bigger = ScoreMatrix(
        np.column_stack([s.values, np.array(col[:n])]) if s.shape[1] else np.array(col[:n])[:, None],
        np.column_stack([s.feasible, np.array(feas[:n])]) if s.shape[1] else np.array(feas[:n])[:, None],
    )
    assert total_score(bigger, solve_assignment(bigger)) >= total_score(s, solve_assignment(s)) - 1e-12


def test_optimum_beats_greedy_on_same_scores():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n, w = rng.integers(1, 7, size=2)
        s = random_scores(rng, n, w, infeasible=0.0)
        pos = rng.uniform(0, 10, (n, 2))
        origins = rng.uniform(0, 10, (w, 2))
        g = greedy_assignment(pos, [True] * n, origins)
        check_assignment(s, g)
        assert total_score(s, solve_assignment(s)) >= total_score(s, g) - 1e-12


def test_greedy_picks_nearer_driver():
    assert greedy_assignment([(1.0, 0.0), (3.0, 0.0)], [True, True], [(0.0, 0.0)]) == ((0, 0),)
    assert greedy_assignment([(3.0, 0.0), (1.0, 0.0)], [True, True], [(0.0, 0.0)]) == ((1, 0),)


def test_greedy_ties_go_to_lower_driver_id():
    pairs = greedy_assignment([(1.0, 0.0), (0.0, 1.0)], [True, True], [(0.0, 0.0), (0.0, 0.0)])
    assert pairs == ((0, 0), (1, 1))


def test_greedy_sweep_five_orders_three_drivers():
    drivers = [(0.0, 0.0), (5.0, 5.0), (9.0, 9.0)]
    orders = [(9.0, 8.0), (0.5, 0.0), (5.0, 4.0), (1.0, 1.0), (2.0, 2.0)]
    # hand trace: order0 -> driver2, order1 -> driver0, order2 -> driver1, rest unmatched
    assert greedy_assignment(drivers, [True] * 3, orders) == ((2, 0), (0, 1), (1, 2))


def test_greedy_skips_full_drivers():
    pairs = greedy_assignment([(0.0, 0.0), (4.0, 0.0)], [False, True], [(0.0, 0.0), (1.0, 0.0)])
    assert pairs == ((1, 0),)


def test_check_assignment_rejects_violations():
    s = ScoreMatrix.from_rows([[0.5, None], [0.5, 0.5]])
    with pytest.raises(ValueError):
        check_assignment(s, [(0, 0), (1, 0)])
    with pytest.raises(ValueError):
        check_assignment(s, [(1, 0), (1, 1)])
    with pytest.raises(ValueError):
        check_assignment(s, [(0, 1)])
