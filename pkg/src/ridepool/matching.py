"""Per-step driver/order assignment: maximum-score matching, its brute-force oracle, and the greedy baseline."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .routing import Point

Pair = tuple[int, int]  # (driver i, order j)


@dataclass(frozen=True)
class ScoreMatrix:
    """Driver x order scores; ``feasible`` False marks an unavailable pair.

    Infeasible entries are carried as a mask rather than as -inf so that no
    arithmetic ever touches them.
    """

    values: np.ndarray
    feasible: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.feasible.shape or self.values.ndim != 2:
            raise ValueError("values and feasible must be matching 2-D arrays")

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float | None]]) -> "ScoreMatrix":
        """Build from nested lists where ``None`` marks an infeasible pair."""
        if not rows:
            return cls(np.zeros((0, 0)), np.zeros((0, 0), dtype=bool))
        feas = np.array([[v is not None for v in r] for r in rows], dtype=bool)
        vals = np.array([[0.0 if v is None else float(v) for v in r] for r in rows])
        return cls(vals, feas)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def canonical(pairs: Iterable[Pair]) -> tuple[Pair, ...]:
    """Pairs sorted by (order, driver)."""
    return tuple(sorted(pairs, key=lambda p: (p[1], p[0])))


def total_score(scores: ScoreMatrix, pairs: Iterable[Pair]) -> float:
    return float(sum(scores.values[i, j] for i, j in pairs))


def check_assignment(scores: ScoreMatrix, pairs: Iterable[Pair]) -> None:
    """Raise ValueError unless ``pairs`` is a valid matching on feasible entries."""
    drivers: set[int] = set()
    orders: set[int] = set()
    for i, j in pairs:
        if i in drivers:
            raise ValueError(f"driver {i} assigned more than one order")
        if j in orders:
            raise ValueError(f"order {j} assigned to more than one driver")
        if not scores.feasible[i, j]:
            raise ValueError(f"pair ({i}, {j}) is infeasible")
        drivers.add(i)
        orders.add(j)


def solve_assignment(scores: ScoreMatrix) -> tuple[Pair, ...]:
    """Maximum total-score matching; each driver and each order used at most once.

    Infeasible and zero-score pairs never appear in the result. Solved as a
    rectangular linear assignment in which infeasible pairs weigh zero, which
    cannot lose optimality because scores are non-negative and any unwanted
    pair can simply be dropped afterwards.
    """
    n, w = scores.shape
    if n == 0 or w == 0 or not scores.feasible.any():
        return ()
    weight = np.where(scores.feasible, scores.values, 0.0)
    rows, cols = linear_sum_assignment(weight, maximize=True)
    keep = [(int(i), int(j)) for i, j in zip(rows, cols) if scores.feasible[i, j] and scores.values[i, j] > 0.0]
    return canonical(keep)


BRUTE_FORCE_LIMIT = 8


@lru_cache(maxsize=None)
def _all_matchings(n: int, w: int) -> tuple[tuple[tuple[Pair, ...], ...], np.ndarray]:
    """Every partial matching of n drivers to w orders.

    Returns the matchings as (order, driver)-sorted pair tuples together with a
    padded array of flat indices into an (n*w + 1)-vector whose last slot is a
    neutral filler.
    """
    out: list[tuple[Pair, ...]] = []

    def rec(j: int, used: frozenset[int], acc: tuple[Pair, ...]) -> None:
        if j == w:
            out.append(acc)
            return
        rec(j + 1, used, acc)
        for i in range(n):
            if i not in used:
                rec(j + 1, used | {i}, acc + ((i, j),))

    rec(0, frozenset(), ())
    width = max(1, min(n, w))
    idx = np.full((len(out), width), n * w, dtype=np.intp)
    for r, match in enumerate(out):
        for c, (i, j) in enumerate(match):
            idx[r, c] = i * w + j
    return tuple(out), idx


def brute_force_assignment(scores: ScoreMatrix) -> tuple[Pair, ...]:
    """Exhaustive search over all 0-1 assignment matrices.

    Same contract as :func:`solve_assignment`, with an exact tie-break: among
    optimal assignments (zero-score pairs excluded) the lexicographically
    smallest (order, driver)-sorted pair list wins.
    """
    n, w = scores.shape
    if n > BRUTE_FORCE_LIMIT or w > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force limited to {BRUTE_FORCE_LIMIT}x{BRUTE_FORCE_LIMIT}, got {n}x{w}")
    if n == 0 or w == 0:
        return ()
    matches, idx = _all_matchings(n, w)
    usable = np.append((scores.feasible & (scores.values > 0.0)).ravel(), True)
    vals = np.append(np.where(scores.feasible, scores.values, 0.0).ravel(), 0.0)
    ok = usable[idx].all(axis=1)
    totals = np.where(ok, vals[idx].sum(axis=1), -1.0)
    best = totals.max()
    # exact comparison: any tolerance could let a strictly smaller total win the tie-break
    tied = [matches[r] for r in np.flatnonzero(ok & (totals == best))]
    return min(tied, key=lambda m: [(j, i) for i, j in m])


def greedy_assignment(
    driver_pos: Sequence[Point],
    driver_free: Sequence[bool],
    order_origin: Sequence[Point],
) -> tuple[Pair, ...]:
    """Nearest-available-driver dispatch.

    Orders are taken in the given (arrival) order; each goes to the closest
    driver with spare capacity that has not been matched yet this step, ties
    to the lower driver index. Travel time is proportional to Manhattan
    distance, so distance ranks drivers directly.
    """
    if len(driver_pos) == 0 or len(order_origin) == 0:
        return ()
    pos = np.asarray(driver_pos, dtype=float).reshape(-1, 2)
    origins = np.asarray(order_origin, dtype=float).reshape(-1, 2)
    dist = np.abs(pos[:, None, :] - origins[None, :, :]).sum(axis=-1)
    free = np.array(driver_free, dtype=bool)
    pairs: list[Pair] = []
    for j in range(len(origins)):
        if not free.any():
            break
        # argmin returns the first minimum, i.e. the lowest driver index on ties
        i = int(np.argmin(np.where(free, dist[:, j], np.inf)))
        free[i] = False
        pairs.append((i, j))
    return canonical(pairs)
