"""The model-based policy optimization loop.

Each epoch refits the dynamics ensemble on the real data, then for every
real environment step: act with the current policy, branch ``M`` short
model rollouts of length ``k`` from states sampled out of the real buffer,
and take ``G`` policy-update steps on minibatches drawn mostly from the
model buffer.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import sac as sac_mod
from .buffers import ReplayBuffer, mixed_sample
from .dynamics import GaussianEnsemble, ModelConfig, estimate_eps_m, fit
from .envs import Env
from .nn import NonFiniteError
from .seeding import stream
from .value_expansion import ExpansionConfig, expanded_target

METRIC_COLUMNS = ("epoch", "env_steps", "k", "eps_m_hat", "model_holdout_nll", "critic_loss",
                  "actor_loss", "alpha", "eval_return_mean", "eval_return_std",
                  "model_buffer_size", "wall_seconds")


@dataclass(frozen=True)
class RolloutSchedule:
    """Rollout length ``x -> y`` linearly over epochs ``a -> b``, clamped outside."""

    x: int = 1
    y: int = 1
    a: int = 0
    b: int = 1

    def __post_init__(self):
        if self.x < 0 or self.y < 0:
            raise ValueError("rollout lengths must be non-negative")
        if self.x != self.y and self.a >= self.b:
            raise ValueError("schedule needs a < b unless it is constant (x == y)")

    @property
    def k_max(self) -> int:
        return max(self.x, self.y)


def schedule_value(sched: RolloutSchedule, epoch: int) -> int:
    """``min(max(x + (e-a)/(b-a) (y-x), x), y)`` rounded down, at least 1."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if sched.x == sched.y:
        f = Fraction(sched.x)
    else:
        f = min(max(sched.x + Fraction(epoch - sched.a, sched.b - sched.a) * (sched.y - sched.x),
                    Fraction(sched.x)), Fraction(sched.y))
    return max(1, math.floor(f))


@dataclass
class LoopConfig:
    n_epochs: int = 125
    env_steps_per_epoch: int = 1000
    model_rollouts_per_env_step: int = 400
    gradient_updates_per_env_step: int = 20
    ensemble_size: int = 7
    real_data_fraction: float = 0.05
    batch_size: int = 256
    init_steps: int = 5000
    eval_episodes: int = 5
    env_buffer_capacity: int = 1_000_000
    model_buffer_capacity: int = 0  # 0 -> 2 * M * E * k_max
    learn_alpha: bool = True

    def __post_init__(self):
        for name in ("n_epochs", "env_steps_per_epoch", "gradient_updates_per_env_step",
                     "ensemble_size", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.model_rollouts_per_env_step < 0 or self.init_steps < 0 or self.eval_episodes < 0:
            raise ValueError("counts must be non-negative")
        if not 0.0 <= self.real_data_fraction <= 1.0:
            raise ValueError("real_data_fraction must lie in [0, 1]")

    @property
    def uses_model(self) -> bool:
        return self.model_rollouts_per_env_step > 0 and self.real_data_fraction < 1.0


def branch_rollouts(model, agent, env_buffer: ReplayBuffer, model_buffer: ReplayBuffer,
                    k: int, m: int, rng: np.random.Generator, termination_fn=None) -> int:
    """Roll the model ``k`` steps under the policy from ``m`` real start states.

    Rows whose prediction is non-finite, and rows after a predicted
    termination, are dropped from then on. Returns the number of
    transitions appended (tagged with their depth ``1..k``).
    """
    if len(env_buffer) == 0:
        raise ValueError("cannot branch from an empty environment buffer")
    if k <= 0 or m <= 0:
        return 0
    obs = env_buffer.obs[env_buffer.sample_indices(m, rng)]
    added = 0
    for depth in range(1, k + 1):
        act, _ = agent.sample_action(obs, rng)
        nxt, rew = model.sample_step(obs, act, rng)
        ok = np.all(np.isfinite(nxt), axis=1) & np.isfinite(rew)
        done = termination_fn(nxt) if termination_fn is not None else np.zeros(len(rew), dtype=bool)
        if not np.all(ok):
            obs, act, nxt, rew, done = obs[ok], act[ok], nxt[ok], rew[ok], done[ok]
        model_buffer.add_batch(obs, act, rew, nxt, done.astype(float), depth)
        added += len(rew)
        obs = nxt[~done]
        if obs.shape[0] == 0:
            break
    return added


@dataclass
class Components:
    env: Env
    agent: sac_mod.SacAgent
    model: GaussianEnsemble | None
    env_buffer: ReplayBuffer
    model_buffer: ReplayBuffer


@dataclass
class MbpoTrainer:
    """Owns the agent, model, buffers and random streams for one run."""

    env: Env
    loop: LoopConfig = field(default_factory=LoopConfig)
    schedule: RolloutSchedule = field(default_factory=RolloutSchedule)
    sac_config: sac_mod.SacConfig = field(default_factory=sac_mod.SacConfig)
    model_config: ModelConfig = field(default_factory=ModelConfig)
    expansion: ExpansionConfig = field(default_factory=ExpansionConfig)
    seed: int = 0

    def __post_init__(self):
        spec = self.env.spec
        s = self.seed
        self.rng_policy = stream(s, "policy")
        self.rng_rollout = stream(s, "rollout")
        self.rng_model = stream(s, "model")
        self.rng_batch = stream(s, "batch")
        self.rng_explore = stream(s, "explore")
        self.rng_eval = stream(s, "eval")
        self.rng_expansion = stream(s, "value_expansion")
        self.agent = sac_mod.SacAgent(spec.state_dim, spec.action_dim, spec.action_low,
                                      spec.action_high, self.sac_config, stream(s, "agent.init"))
        need_model = self.loop.uses_model or self.expansion.enabled
        self.model = GaussianEnsemble(spec.state_dim, spec.action_dim, self.loop.ensemble_size,
                                      self.model_config, stream(s, "model.init")) if need_model else None
        self.env_buffer = ReplayBuffer(self.loop.env_buffer_capacity, spec.state_dim, spec.action_dim)
        cap = self.loop.model_buffer_capacity or max(
            1, 2 * self.loop.model_rollouts_per_env_step * self.loop.env_steps_per_epoch * max(1, self.schedule.k_max))
        self.model_buffer = ReplayBuffer(cap, spec.state_dim, spec.action_dim)
        self.episode = 0
        self.env_state = self.env.reset(self._episode_seed(0))
        self.env_steps = 0
        self.episode_returns: list[float] = []
        self._episode_return = 0.0
        self.last_fit = None
        self.last_eps = float("nan")
        self.last_report = sac_mod.SacUpdateReport()
        self.k_seen = 0
        self.epochs_done = 0
        self.eval_seeds = [int(stream(s, f"eval.start.{i}").integers(2**63)) for i in range(self.loop.eval_episodes)]

    def _episode_seed(self, i):
        return int(stream(self.seed, f"env.episode.{i}").integers(2**63))

    # -- real environment ---------------------------------------------------
    def env_step(self, random_action: bool = False) -> None:
        spec = self.env.spec
        obs = self.env_state.observation
        if random_action:
            a = self.rng_explore.uniform(spec.action_low, spec.action_high)
        else:
            a = self.agent.act(obs, self.rng_policy)
        nxt, r, done = self.env.step(self.env_state, a)
        terminal = bool(self.env.is_terminal(nxt.observation[None])[0])
        self.env_buffer.add(obs, a, r, nxt.observation, terminal, 0)
        self.env_steps += 1
        self._episode_return += r
        if done or terminal:
            self.episode_returns.append(self._episode_return)
            self._episode_return = 0.0
            self.episode += 1
            self.env_state = self.env.reset(self._episode_seed(self.episode))
        else:
            self.env_state = nxt

    def collect_initial(self) -> None:
        while self.env_steps < self.loop.init_steps:
            self.env_step(random_action=True)

    # -- learning -------------------------------------------------------------
    def refit_model(self) -> None:
        data = self.env_buffer.all()
        self.last_fit = fit(self.model, data, self.rng_model)
        hold = {k: v[self.last_fit.holdout_index] for k, v in data.items()}
        self.last_eps, _ = estimate_eps_m(self.model, hold)

    def policy_updates(self) -> None:
        L = self.loop
        if len(self.env_buffer) == 0:
            return
        for _ in range(L.gradient_updates_per_env_step):
            if self.expansion.enabled:
                batch = self.env_buffer.sample(L.batch_size, self.rng_batch)
                obs, act, y = expanded_target(self.model, self.agent, batch, self.expansion.horizon,
                                              self.agent.config.gamma, self.rng_expansion)
                rep = sac_mod.expanded_critic_update(self.agent, obs, act, y)
            else:
                model_buf = self.model_buffer if L.uses_model else _EMPTY
                batch = mixed_sample(self.env_buffer, model_buf, L.batch_size,
                                     L.real_data_fraction, self.rng_batch)
                rep = sac_mod.critic_update(self.agent, batch, rng=self.rng_batch)
            sac_mod.actor_update(self.agent, batch, self.rng_batch, rep)
            if L.learn_alpha:
                sac_mod.alpha_update(self.agent, batch, self.rng_batch, rep)
            self.last_report = rep

    def evaluate(self) -> tuple[float, float]:
        if not self.eval_seeds:
            return float("nan"), float("nan")
        returns = [episode_return(self.env, self.agent, seed, self.rng_eval, deterministic=True)
                   for seed in self.eval_seeds]
        return float(np.mean(returns)), float(np.std(returns))

    def run_epoch(self, epoch: int) -> dict:
        """One outer iteration; returns the metrics row."""
        L = self.loop
        t0 = time.perf_counter()
        row = {c: float("nan") for c in METRIC_COLUMNS}
        row["epoch"] = epoch
        k = schedule_value(self.schedule, epoch) if L.uses_model else 0
        row["k"] = k
        try:
            if epoch == 0:
                self.collect_initial()
            if self.model is not None and len(self.env_buffer) >= 10:
                self.refit_model()
                row["model_holdout_nll"] = self.last_fit.mean_holdout_nll
                row["eps_m_hat"] = self.last_eps
            for _ in range(L.env_steps_per_epoch):
                self.env_step()
                if L.uses_model and self.model is not None and self.model.trained:
                    branch_rollouts(self.model, self.agent, self.env_buffer, self.model_buffer,
                                    k, L.model_rollouts_per_env_step, self.rng_rollout,
                                    self.env.is_terminal)
                    self.k_seen = max(self.k_seen, k)
                self.policy_updates()
            row["eval_return_mean"], row["eval_return_std"] = self.evaluate()
        except (NonFiniteError, FloatingPointError, ValueError) as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        rep = self.last_report
        row.update(env_steps=self.env_steps, critic_loss=rep.critic_loss, actor_loss=rep.actor_loss,
                   alpha=self.agent.alpha, model_buffer_size=len(self.model_buffer))
        row["wall_seconds"] = time.perf_counter() - t0
        if self.expansion.enabled:
            row["expansion_H"] = self.expansion.horizon
        self.epochs_done = epoch + 1
        return row

    def components(self) -> Components:
        return Components(self.env, self.agent, self.model, self.env_buffer, self.model_buffer)


class _Empty:
    def __len__(self):
        return 0


_EMPTY = _Empty()


def mbpo_epoch(trainer: MbpoTrainer, epoch: int) -> dict:
    return trainer.run_epoch(epoch)


def episode_return(env: Env, agent, seed, rng, deterministic=True) -> float:
    state = env.reset(seed)
    total = 0.0
    for _ in range(env.spec.horizon):
        a = agent.act(state.observation, rng, deterministic)
        state, r, done = env.step(state, a)
        total += r
        if done:
            break
    return total
