"""Train a small OSPO policy end to end and read back its run directory.

This uses a scaled-down city so it finishes in a few seconds. The run
directory holds the config snapshot, the evaluation log, per-episode rewards
and the final and best checkpoints.
"""
from __future__ import annotations

import csv
import logging
import sys
import tempfile
from pathlib import Path

from ridepool.config import RunConfig, SimConfig, TrainerConfig
from ridepool.harness import load_policy, run_training
from ridepool.training import evaluate, summarize


def main(out_root: str) -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    sim = SimConfig(n_drivers=15, order_rate=3.0, horizon=20)
    trainer = TrainerConfig(
        method="ospo", episodes=40, eval_every=10, eval_seeds=(1000, 1001),
        lr=1e-3, lr_decay=1.0, epochs=8, batch_size=64, kl_coef=5.0, noise_start=0.0, hidden=64,
    )
    manifest = run_training(RunConfig(sim, trainer), out_root)
    run_dir = manifest.run_dir
    print("\nrun directory:", run_dir)
    for p in sorted(run_dir.iterdir()):
        print("  ", p.name)

    with open(run_dir / "training_log.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            print(f"episode {row['episode']:>3}: eval reward {float(row['eval_reward_mean']):7.1f}  kl {row['kl']}")

    best = run_dir / "best.ckpt"
    params = load_policy(best if best.exists() else run_dir / "final.ckpt", sim)
    held_out = (2000, 2001, 2002)
    print("held-out reward, trained:", round(summarize(evaluate(sim, params, held_out))["total_reward"], 1))
    print("held-out reward, greedy: ", round(summarize(evaluate(sim, None, held_out))["total_reward"], 1))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="ridepool-demo-"))
