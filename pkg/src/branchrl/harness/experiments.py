"""Experiment drivers shared by the CLI and the acceptance suite."""
from __future__ import annotations

import dataclasses
import math
import time
from pathlib import Path

import numpy as np

from ..rollout import METRIC_COLUMNS, MbpoTrainer, episode_return
from ..sac import dump_agent
from ..seeding import stream
from .config import ExperimentConfig, config_hash, config_text
from .manifest import Manifest, atomic_write, csv_text
from .plotting import emit_learning_curve


def make_trainer(cfg: ExperimentConfig, seed: int | None = None) -> MbpoTrainer:
    return MbpoTrainer(cfg.make_env(), cfg.loop, cfg.schedule, cfg.sac, cfg.model, cfg.expansion,
                       seed=cfg.seed if seed is None else seed)


def metric_columns(cfg: ExperimentConfig) -> list[str]:
    cols = list(METRIC_COLUMNS)
    if cfg.expansion.enabled:
        cols.append("expansion_H")
    return cols


def train(cfg: ExperimentConfig, seed: int | None = None, stop_when=None, on_epoch=None):
    """Runs the epochs; returns ``(trainer, rows, error)``.

    ``stop_when(row)`` may end the run early; an epoch that records an error
    ends it too, keeping the partial row.
    """
    trainer = make_trainer(cfg, seed)
    rows, error = [], None
    for epoch in range(cfg.loop.n_epochs):
        row = trainer.run_epoch(epoch)
        if not cfg.wall_time:
            row["wall_seconds"] = None
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if "error" in row:
            error = row["error"]
            break
        if stop_when is not None and stop_when(row):
            break
    return trainer, rows, error


def write_run(cfg: ExperimentConfig, run_dir, seed: int, command: str = "train", plot: bool = True):
    """Full training run with config snapshot, metrics CSV, checkpoint, SVG and manifest."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg = dataclasses.replace(cfg, seed=seed)
    man = Manifest(run_dir, config_hash(cfg), command)
    atomic_write(run_dir / "config.cfg", config_text(cfg))
    cols = metric_columns(cfg)
    rows = []

    def flush(row=None):
        atomic_write(run_dir / "metrics.csv", csv_text(cols, rows))

    t0 = time.perf_counter()
    try:
        trainer, rows, error = train(cfg, seed, on_epoch=lambda r: None)
        flush()
        atomic_write(run_dir / "agent.bin", dump_agent(trainer.agent))
        if plot and any(not _isnan(r.get("eval_return_mean")) for r in rows):
            _, note = emit_learning_curve([run_dir / "metrics.csv"], "eval_return_mean",
                                          run_dir / "learning_curve.svg")
            if note:
                man.warn(note)
    except Exception as exc:  # record the failure, then let the caller map it to an exit code
        flush()
        man.data["timings"]["train_seconds"] = time.perf_counter() - t0
        man.write("failed", f"{type(exc).__name__}: {exc}")
        raise
    man.data["timings"]["train_seconds"] = time.perf_counter() - t0
    man.write("failed" if error else "ok", error)
    return trainer, rows, error


def _isnan(v) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v))


# -- sample-efficiency metrics --------------------------------------------------

def random_policy_return(env, seeds, rng) -> float:
    """Mean return of the uniform random policy from the given start seeds."""
    spec = env.spec
    total = []
    for seed in seeds:
        state = env.reset(seed)
        ret = 0.0
        for _ in range(spec.horizon):
            state, r, done = env.step(state, rng.uniform(spec.action_low, spec.action_high))
            ret += r
            if done:
                break
        total.append(ret)
    return float(np.mean(total))


def eval_seeds(master: int, n: int) -> list[int]:
    return [int(stream(master, f"eval.start.{i}").integers(2**63)) for i in range(n)]


def normalized_threshold(random_return: float, asymptote: float, fraction: float = 0.9) -> float:
    """Return level at ``fraction`` of the way from random to the asymptote.

    Returns are negative on pendulum, so a plain ``0.9 * asymptote`` would sit
    above the asymptote; normalizing against the random policy fixes that.
    """
    return random_return + fraction * (asymptote - random_return)


def steps_to_threshold(rows, threshold: float, column: str = "eval_return_mean") -> int | None:
    """First ``env_steps`` whose evaluation reaches ``threshold``; None if never."""
    for r in rows:
        v = r.get(column)
        if v is not None and not _isnan(v) and v >= threshold:
            return int(r["env_steps"])
    return None


def asymptotic_return(rows, last: int = 10, column: str = "eval_return_mean") -> float:
    vals = [r[column] for r in rows if not _isnan(r.get(column))]
    return float(np.mean(vals[-last:]))


def episode_returns(env, agent, seeds, rng):
    return [episode_return(env, agent, s, rng) for s in seeds]
