"""Experiment orchestration: order ingestion, training runs, evaluation, simulation traces and benchmarks.

Every entry point writes into a run directory named ``<UTC timestamp>-<hash>``
where the hash covers the config snapshot. Metric CSVs and checkpoints depend
only on (config, seed); wall-clock figures live in the JSON manifest alone.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .config import RunConfig, SimConfig, dump_config, load_config
from .matching import ScoreMatrix, solve_assignment
from .nn import Mlp, checkpoint_bytes, load_checkpoint
from .routing import DROPOFF, PICKUP
from .sim import EpisodeMetrics, OrderSource, ReplaySource, RideWorld
from .training import EvalRecord, Trainer, evaluate, greedy_policy, policy_distribution

log = logging.getLogger(__name__)

ORDER_COLUMNS = ("arrival_s", "ox", "oy", "dx", "dy")
METRIC_COLUMNS = (
    "seed",
    "served",
    "cancelled",
    "total_reward",
    "mean_delivery_time",
    "mean_detour_time",
    "mean_pickup_time",
    "mean_confirmation_time",
)
TRAIN_LOG_COLUMNS = (
    "episode",
    "eval_reward_mean",
    "served",
    "pickup",
    "confirmation",
    "delivery",
    "detour",
    "kl",
    "loss",
    "noise",
)


class OrderCsvError(ValueError):
    def __init__(self, row: int | None, message: str):
        where = "header" if row == 1 else ("file" if row is None else f"row {row}")
        super().__init__(f"{where}: {message}")
        self.row = row


class CheckpointMismatch(ValueError):
    pass


# ------------------------------------------------------------------ orders


@dataclass(frozen=True)
class OrderRecord:
    arrival_s: float
    ox: float
    oy: float
    dx: float
    dy: float

    @property
    def origin(self) -> tuple[float, float]:
        return (self.ox, self.oy)

    @property
    def dest(self) -> tuple[float, float]:
        return (self.dx, self.dy)


def parse_orders(text: str, sim: SimConfig | None = None) -> list[OrderRecord]:
    """Strictly parse order CSV text; rows are numbered from 1 (the header)."""
    sim = sim or SimConfig()
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise OrderCsvError(None, "empty file")
    if tuple(h.strip() for h in header) != ORDER_COLUMNS:
        raise OrderCsvError(1, f"expected header {','.join(ORDER_COLUMNS)}")
    horizon_s = sim.episode_seconds
    out = []
    for row_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(ORDER_COLUMNS):
            raise OrderCsvError(row_no, f"expected {len(ORDER_COLUMNS)} fields, got {len(row)}")
        vals = []
        for name, cell in zip(ORDER_COLUMNS, row):
            try:
                v = float(cell)
            except ValueError:
                raise OrderCsvError(row_no, f"{name} is not a number: {cell!r}") from None
            if not math.isfinite(v):
                raise OrderCsvError(row_no, f"{name} is not finite")
            vals.append(v)
        rec = OrderRecord(*vals)
        if not 0.0 <= rec.arrival_s < horizon_s:
            raise OrderCsvError(row_no, f"arrival_s {rec.arrival_s} outside [0, {horizon_s})")
        for name, v, hi in (("ox", rec.ox, sim.city_width), ("oy", rec.oy, sim.city_height),
                            ("dx", rec.dx, sim.city_width), ("dy", rec.dy, sim.city_height)):
            if not 0.0 <= v <= hi:
                raise OrderCsvError(row_no, f"{name} {v} outside city extent [0, {hi}]")
        if rec.origin == rec.dest:
            raise OrderCsvError(row_no, "origin equals destination")
        out.append(rec)
    # sorted() is stable, so equal arrival times keep file order
    return sorted(out, key=lambda r: r.arrival_s)


def load_orders_csv(path: str | Path, sim: SimConfig | None = None) -> list[OrderRecord]:
    return parse_orders(Path(path).read_text(), sim)


def replay_factory(records: Sequence[OrderRecord], sim: SimConfig) -> Callable[[int], OrderSource]:
    """Every seed replays the same orders; seeds then only move the fleet's start positions."""
    return lambda seed: ReplaySource(records, sim.step_len)


# ------------------------------------------------------------------ run directories


def git_blob_hash(data: bytes) -> str:
    """Content hash computed the way git hashes a blob."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def make_run_dir(root: str | Path, tag: str, payload: str) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    digest = hashlib.sha256(payload.encode()).hexdigest()[:10]
    path = Path(root) / f"{stamp}-{tag}-{digest}"
    suffix = 1
    while path.exists():
        path = Path(root) / f"{stamp}-{tag}-{digest}-{suffix}"
        suffix += 1
    path.mkdir(parents=True)
    return path


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict[str, Any]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    path.write_text(buf.getvalue())


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _source_factory(cfg: RunConfig) -> Callable[[int], OrderSource] | None:
    if cfg.orders_csv is None:
        return None
    return replay_factory(load_orders_csv(cfg.orders_csv, cfg.sim), cfg.sim)


# ------------------------------------------------------------------ training


@dataclass
class RunManifest:
    run_dir: Path
    config: dict[str, Any]
    train_seeds: list[int]
    eval_seeds: list[int]
    wall_clock_s: float
    files: dict[str, str]
    checkpoint_hashes: dict[str, str]
    best_episode: int | None = None
    best_score: float | None = None
    evals: list[EvalRecord] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        out = {k: v for k, v in asdict(self).items() if k != "evals"}
        out["run_dir"] = str(self.run_dir)
        return out


def _as_run_config(config: str | Path | RunConfig) -> RunConfig:
    return config.validate() if isinstance(config, RunConfig) else load_config(config)


def run_training(
    config: str | Path | RunConfig,
    out_root: str | Path = "runs",
    on_eval: Callable[[EvalRecord], None] | None = None,
) -> RunManifest:
    """Train one method end to end and leave logs, checkpoints and a manifest in a fresh run directory."""
    cfg = _as_run_config(config)
    factory = _source_factory(cfg)
    snapshot = dump_config(cfg)
    run_dir = make_run_dir(out_root, f"train-{cfg.trainer.method}", snapshot)
    (run_dir / "config.yaml").write_text(snapshot)

    start = time.perf_counter()
    trainer = Trainer(cfg, factory)
    result = trainer.train(on_eval)
    wall = time.perf_counter() - start

    _write_csv(run_dir / "training_log.csv", TRAIN_LOG_COLUMNS, [
        {
            "episode": r.episode, "eval_reward_mean": r.eval_reward_mean, "served": r.served,
            "pickup": r.pickup, "confirmation": r.confirmation, "delivery": r.delivery,
            "detour": r.detour, "kl": r.kl, "loss": r.loss, "noise": r.noise,
        }
        for r in result.evals
    ])
    _write_csv(run_dir / "episode_rewards.csv", ("episode", "total_reward"),
               [{"episode": k, "total_reward": v} for k, v in enumerate(result.episode_rewards)])

    meta = {"method": cfg.trainer.method, "seed": cfg.trainer.seed, "episode": trainer.episode,
            "feature_dim": cfg.sim.feature_dim, "capacity": cfg.sim.capacity}
    files = {"config": "config.yaml", "training_log": "training_log.csv", "episode_rewards": "episode_rewards.csv"}
    hashes = {}
    final = checkpoint_bytes(result.params, result.optimizer, meta)
    (run_dir / "final.ckpt").write_bytes(final)
    files["final_checkpoint"] = "final.ckpt"
    hashes["final"] = git_blob_hash(final)
    best = result.best
    if best.params is not None:
        data = checkpoint_bytes(best.params, None, {**meta, "episode": best.episode, "eval_reward_mean": best.score})
        (run_dir / "best.ckpt").write_bytes(data)
        hashes["best"] = git_blob_hash(data)
        files["best_checkpoint"] = "best.ckpt"
        _write_json(run_dir / "best.json", {"file": "best.ckpt", "episode": best.episode,
                                            "eval_reward_mean": best.score, "sha1": hashes["best"]})
        files["best_marker"] = "best.json"

    tc = cfg.trainer
    manifest = RunManifest(
        run_dir=run_dir,
        config=cfg.to_dict(),
        train_seeds=[trainer.world_seed(e) for e in range(tc.episodes)],
        eval_seeds=list(tc.eval_seeds),
        wall_clock_s=wall,
        files=files,
        checkpoint_hashes=hashes,
        best_episode=best.episode,
        best_score=best.score,
        evals=result.evals,
    )
    _write_json(run_dir / "manifest.json", manifest.to_json())
    log.info("training run written to %s in %.1f s", run_dir, wall)
    return manifest


# ------------------------------------------------------------------ evaluation


def load_policy(path: str | Path, sim: SimConfig) -> Mlp:
    """Load a checkpoint's parameters after checking they fit this simulator's feature layout."""
    params, _, meta = load_checkpoint(path)
    if params.sizes[0] != sim.feature_dim or params.sizes[-1] != 1:
        raise CheckpointMismatch(
            f"checkpoint expects {params.sizes[0]} input features, simulator with capacity {sim.capacity} produces {sim.feature_dim}"
        )
    return params


@dataclass
class EvalReport:
    seeds: list[int]
    per_seed: list[EpisodeMetrics]
    summary: dict[str, dict[str, float | None]]

    def rows(self) -> list[dict[str, Any]]:
        return [{"seed": s, **m.as_row()} for s, m in zip(self.seeds, self.per_seed)]


def _mean_std(values: Sequence[float | None]) -> dict[str, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None}
    return {"mean": float(np.mean(vals)), "std": float(np.std(vals))}


def evaluate_policy(
    sim: SimConfig,
    params: Mlp | None,
    seeds: Sequence[int],
    source_factory: Callable[[int], OrderSource] | None = None,
) -> EvalReport:
    """One noise-free episode per seed; rows come back sorted by seed so seed order never matters."""
    ordered = sorted(int(s) for s in seeds)
    if not ordered:
        raise ValueError("at least one evaluation seed is required")
    metrics = evaluate(sim, params, ordered, source_factory)
    summary = {
        col: _mean_std([getattr(m, col) for m in metrics])
        for col in METRIC_COLUMNS[1:]
    }
    return EvalReport(ordered, metrics, summary)


def write_eval(report: EvalReport, run_dir: Path, extra: dict[str, Any] | None = None) -> dict[str, str]:
    _write_csv(run_dir / "metrics.csv", METRIC_COLUMNS, report.rows())
    _write_json(run_dir / "summary.json", {"seeds": report.seeds, "metrics": report.summary, **(extra or {})})
    return {"metrics": "metrics.csv", "summary": "summary.json"}


def run_eval(
    checkpoint: str | Path | None,
    seeds: Sequence[int],
    sim: SimConfig | None = None,
    orders_csv: str | Path | None = None,
    out_root: str | Path | None = "runs",
) -> tuple[EvalReport, Path | None]:
    """Evaluate a checkpoint (``None`` for the greedy baseline) on synthetic or replayed demand."""
    sim = (sim or SimConfig()).validate()
    params = load_policy(checkpoint, sim) if checkpoint is not None else None
    factory = replay_factory(load_orders_csv(orders_csv, sim), sim) if orders_csv else None
    report = evaluate_policy(sim, params, seeds, factory)
    run_dir = None
    if out_root is not None:
        payload = json.dumps({"checkpoint": str(checkpoint), "seeds": report.seeds, "orders": str(orders_csv)})
        run_dir = make_run_dir(out_root, "eval", payload)
        write_eval(report, run_dir, {"policy": "greedy" if checkpoint is None else str(checkpoint),
                                     "orders": None if orders_csv is None else str(orders_csv)})
    return report, run_dir


# ------------------------------------------------------------------ simulate


TRACE_COLUMNS = ("step", "time_s", "pool", "available", "assigned", "step_reward", "pickups", "dropoffs")


def run_simulation(
    sim: SimConfig,
    params: Mlp | None = None,
    seed: int | None = None,
    source_factory: Callable[[int], OrderSource] | None = None,
    out_root: str | Path | None = "runs",
) -> tuple[list[dict[str, Any]], EpisodeMetrics, Path | None]:
    """Play one noise-free episode and return a per-step trace."""
    seed = sim.seed if seed is None else int(seed)
    world = RideWorld(sim, source_factory(seed) if source_factory else None, seed=seed)
    trace = []
    while not world.done:
        obs = world.observe()
        if params is None:
            pairs = greedy_policy(world, obs)
        else:
            pairs = solve_assignment(ScoreMatrix(policy_distribution(params, obs), obs.feasible))
        res = world.step(pairs)
        trace.append({
            "step": obs.t, "time_s": obs.now, "pool": len(obs.pool), "available": int(obs.available.sum()),
            "assigned": len(pairs), "step_reward": float(res.rewards.sum()),
            "pickups": sum(e.kind == PICKUP for e in res.events),
            "dropoffs": sum(e.kind == DROPOFF for e in res.events),
        })
    metrics = world.metrics()
    run_dir = None
    if out_root is not None:
        run_dir = make_run_dir(out_root, "simulate", json.dumps({"seed": seed, "policy": params is not None}))
        _write_csv(run_dir / "trace.csv", TRACE_COLUMNS, trace)
        _write_csv(run_dir / "metrics.csv", METRIC_COLUMNS, [{"seed": seed, **metrics.as_row()}])
    return trace, metrics, run_dir


# ------------------------------------------------------------------ bench


BENCH_PARTS = ("scoring", "matching", "routing", "learning")


def run_bench(
    config: str | Path | RunConfig,
    episodes: int = 3,
    out_root: str | Path | None = "runs",
) -> tuple[dict[str, Any], Path | None]:
    """Time a few training episodes and split the time into scoring / matching / routing / learning."""
    cfg = _as_run_config(config)
    trainer = Trainer(cfg, _source_factory(cfg))
    per_episode = []
    totals = {k: 0.0 for k in BENCH_PARTS}
    for _ in range(episodes):
        timer: dict[str, float] = {}
        t0 = time.perf_counter()
        trainer.train_episode(timer)
        per_episode.append(time.perf_counter() - t0)
        for k in BENCH_PARTS:
            totals[k] += timer.get(k, 0.0)
    measured = sum(totals.values())
    shares = {k: (100.0 * v / measured if measured > 0 else 0.0) for k, v in totals.items()}
    report = {
        "method": cfg.trainer.method,
        "n_drivers": cfg.sim.n_drivers,
        "episodes": episodes,
        "episode_seconds": per_episode,
        "mean_episode_seconds": float(np.mean(per_episode)) if per_episode else 0.0,
        "seconds": totals,
        "share_percent": shares,
    }
    run_dir = None
    if out_root is not None:
        run_dir = make_run_dir(out_root, "bench", dump_config(cfg))
        _write_json(run_dir / "bench.json", report)
    return report, run_dir
