"""Compare the nearest-driver baseline with a freshly initialised policy network.

Both dispatchers face the same synthetic demand (same seeds). The untrained
network scores driver-order pairs essentially at random, so it shows what the
learning methods have to improve on.
"""
from __future__ import annotations

import numpy as np

from ridepool.config import SimConfig
from ridepool.nn import Mlp, policy_sizes
from ridepool.training import evaluate, summarize

SEEDS = (2000, 2001, 2002)


def main() -> None:
    sim = SimConfig(n_drivers=50)
    untrained = Mlp.init(policy_sizes(sim.feature_dim), np.random.default_rng(0))
    rows = {
        "greedy": summarize(evaluate(sim, None, SEEDS)),
        "untrained": summarize(evaluate(sim, untrained, SEEDS)),
    }
    print(f"{'policy':<10} {'reward':>8} {'served':>7} {'pickup s':>9} {'confirm s':>10}")
    for name, s in rows.items():
        print(f"{name:<10} {s['total_reward']:8.1f} {s['served']:7.1f} {s['pickup']:9.1f} {s['confirmation']:10.1f}")


if __name__ == "__main__":
    main()
