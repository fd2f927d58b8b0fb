"""Empirical probes: model error under policy shift, and model-vs-true returns.

The generalization probe trains a data-collecting policy pi_D, fits a model
on its data, freezes the model, and then keeps optimizing the policy while
recording the policy divergence KL(pi || pi_D) against the frozen model's
error on fresh trajectories of the current policy.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .bounds import GeneralizationModel
from .buffers import ReplayBuffer
from .dynamics import GaussianEnsemble, ModelConfig, _targets, estimate_eps_m, fit
from .envs import Env
from .rollout import LoopConfig, MbpoTrainer
from .sac import SacAgent, SacConfig, dump_agent, load_agent_into
from .seeding import derive_seed, stream

SMALL_KL_WINDOW = 0.5


@dataclass
class GeneralizationCurve:
    points: list  # (kl, model_error, train_set_size), sorted by kl within each size
    fitted: GeneralizationModel
    by_size: dict = field(default_factory=dict)


@dataclass
class ExploitationReport:
    pairs: list  # (model_return, true_return)
    pearson_r: float | None
    mean_gap: float

    @property
    def correlation_defined(self) -> bool:
        return self.pearson_r is not None


@dataclass
class ProbeConfig:
    train_set_sizes: tuple[int, ...] = (400, 1000, 2000)
    pretrain_steps: int = 600
    probe_steps: int = 1000
    record_every: int = 100
    eval_episodes: int = 2
    gradient_updates_per_env_step: int = 1
    error_metric: str = "mse"  # mse | eps_proxy | nll
    kl_window: float = SMALL_KL_WINDOW

    def __post_init__(self):
        if not self.train_set_sizes or min(self.train_set_sizes) < 10:
            raise ValueError("train_set_sizes must be >= 10")
        if self.probe_steps < 0 or self.record_every < 1 or self.eval_episodes < 1:
            raise ValueError("invalid probe lengths")
        if self.error_metric not in ("mse", "eps_proxy", "nll"):
            raise ValueError(f"unknown error metric {self.error_metric!r}")


def gaussian_policy_kl(agent: SacAgent, ref: SacAgent, obs) -> float:
    """Mean over ``obs`` of the closed-form KL between the pre-squash Gaussians.

    The tanh squash is a shared bijection, so it leaves the KL unchanged.
    """
    mu1, ls1 = agent.gaussian_params(obs)
    mu2, ls2 = ref.gaussian_params(obs)
    var1, var2 = np.exp(2 * ls1), np.exp(2 * ls2)
    kl = (ls2 - ls1) + (var1 + (mu1 - mu2) ** 2) / (2 * var2) - 0.5
    return float(max(kl.sum(axis=1).mean(), 0.0))


def model_error(model, data: dict, metric: str = "mse") -> float:
    """Frozen-model validation error on a set of transitions."""
    if metric == "eps_proxy":
        return estimate_eps_m(model, data)[0]
    if metric == "nll":
        return estimate_eps_m(model, data)[1]
    mu, _ = model.moment_matched(data["obs"], data["act"])
    y = _targets(data["obs"], data["next_obs"], data["rew"])
    return float(np.mean(np.sum((y - mu) ** 2, axis=1)))


def fit_slope(points, kl_max: float | None = None) -> GeneralizationModel:
    """OLS of model error on KL; intercept clamped at 0.

    ``points`` are ``(kl, error, ...)`` tuples; ``kl_max`` restricts the fit to
    the small-divergence window when at least three points fall inside it.
    """
    pts = [(float(p[0]), float(p[1])) for p in points]
    if kl_max is not None:
        inside = [p for p in pts if p[0] <= kl_max]
        if len(inside) >= 3:
            pts = inside
    if len(pts) < 3:
        raise ValueError("need at least 3 points to fit a slope")
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    if np.ptp(x) == 0:
        raise ValueError("all points share one KL value; slope undetermined")
    slope, intercept = np.polyfit(x, y, 1)
    if np.ptp(y) == 0:
        slope, intercept = 0.0, y[0]
    return GeneralizationModel(intercept=float(max(intercept, 0.0)), slope=float(slope))


def _copy_agent(agent: SacAgent, spec) -> SacAgent:
    clone = SacAgent(agent.obs_dim, agent.act_dim, spec.action_low, spec.action_high, agent.config)
    return load_agent_into(clone, dump_agent(agent))


def _rollout_data(env: Env, agent: SacAgent, seeds, rng, max_steps=None) -> dict:
    buf = ReplayBuffer(len(seeds) * env.spec.horizon, env.spec.state_dim, env.spec.action_dim)
    for seed in seeds:
        state = env.reset(seed)
        for _ in range(max_steps or env.spec.horizon):
            a = agent.act(state.observation, rng)
            nxt, r, done = env.step(state, a)
            buf.add(state.observation, a, r, nxt.observation)
            if done:
                break
            state = nxt
    return buf.all()


def run_generalization_probe(env: Env, config: ProbeConfig | None = None, seed: int = 0,
                             sac_config: SacConfig | None = None,
                             model_config: ModelConfig | None = None,
                             ensemble_size: int = 7, frozen_model=None) -> GeneralizationCurve:
    """Model error of a frozen ensemble as the policy drifts away from pi_D.

    ``frozen_model`` replaces the fitted ensemble (e.g. an exact model) when given.
    """
    cfg = config or ProbeConfig()
    sac_config = sac_config or SacConfig()
    model_config = model_config or ModelConfig()
    pre = MbpoTrainer(env, LoopConfig(n_epochs=1, env_steps_per_epoch=max(cfg.pretrain_steps, 1),
                                      model_rollouts_per_env_step=0, real_data_fraction=1.0,
                                      gradient_updates_per_env_step=cfg.gradient_updates_per_env_step,
                                      init_steps=min(200, cfg.pretrain_steps), eval_episodes=0,
                                      batch_size=256),
                      sac_config=sac_config, seed=derive_seed(seed, "probe.pi_d"))
    if cfg.pretrain_steps:
        pre.run_epoch(0)
    pi_d = pre.agent
    all_points, by_size = [], {}
    for size in cfg.train_set_sizes:
        rng = stream(seed, f"probe.size.{size}")
        n_ep = -(-size // env.spec.horizon)
        data = _rollout_data(env, pi_d, [int(rng.integers(2**63)) for _ in range(n_ep)], rng)
        data = {k: v[:size] for k, v in data.items()}
        if frozen_model is None:
            model = GaussianEnsemble(env.spec.state_dim, env.spec.action_dim, ensemble_size, model_config,
                                     stream(seed, f"probe.model.{size}"))
            fit(model, data, rng)
        else:
            model = frozen_model
        before = model_fingerprint(model)

        trainer = MbpoTrainer(env, LoopConfig(n_epochs=1, env_steps_per_epoch=1,
                                              model_rollouts_per_env_step=0, real_data_fraction=1.0,
                                              gradient_updates_per_env_step=cfg.gradient_updates_per_env_step,
                                              init_steps=0, eval_episodes=0, batch_size=256),
                              sac_config=sac_config, seed=derive_seed(seed, f"probe.opt.{size}"))
        trainer.agent = _copy_agent(pi_d, env.spec)
        trainer.env_buffer.add_batch(data["obs"], data["act"], data["rew"], data["next_obs"],
                                     data["done"], 0)
        pts = []
        for step in range(cfg.probe_steps + 1):
            if step % cfg.record_every == 0:
                seeds = [int(rng.integers(2**63)) for _ in range(cfg.eval_episodes)]
                fresh = _rollout_data(env, trainer.agent, seeds, rng)
                kl = gaussian_policy_kl(trainer.agent, pi_d, fresh["obs"])
                pts.append((kl, model_error(model, fresh, cfg.error_metric), size))
            if step < cfg.probe_steps:
                trainer.env_step()
                trainer.policy_updates()
        if model_fingerprint(model) != before:
            raise RuntimeError("probe mutated the frozen model")
        pts.sort(key=lambda p: p[0])
        by_size[size] = _fit_or_flat(pts, cfg.kl_window)
        all_points.extend(pts)
    return GeneralizationCurve(all_points, _fit_or_flat(all_points, cfg.kl_window), by_size)


def _fit_or_flat(points, kl_max):
    """Slope fit, or a zero-slope model at the mean error when the KL values do not spread."""
    try:
        return fit_slope(points, kl_max)
    except ValueError:
        return GeneralizationModel(max(float(np.mean([p[1] for p in points])), 0.0), 0.0)


def model_fingerprint(obj) -> str:
    h = hashlib.sha256()
    for name in ("net", "actor", "critics", "target_critics"):
        net = getattr(obj, name, None)
        if net is not None:
            h.update(net.params.tobytes())
    if hasattr(obj, "log_alpha"):
        h.update(obj.log_alpha.tobytes())
    return h.hexdigest()


def pearson(x, y) -> float | None:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    sx, sy = x.std(), y.std()
    if sx == 0 or sy == 0:
        return None
    return float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))


def run_exploitation_probe(env: Env, model, agent: SacAgent, n_rollouts: int,
                           rng: np.random.Generator, deterministic: bool = True) -> ExploitationReport:
    """Paired undiscounted returns from shared start states, true env vs pure model rollout."""
    if n_rollouts < 2:
        raise ValueError("need at least 2 rollouts for a correlation")
    before = (model_fingerprint(model), model_fingerprint(agent))
    pairs = []
    for i in range(n_rollouts):
        seed = int(rng.integers(2**63))
        pair_rng = np.random.default_rng(seed)
        state = env.reset(seed)
        obs = state.observation.copy()
        true_ret = 0.0
        for _ in range(env.spec.horizon):
            a = agent.act(state.observation, pair_rng, deterministic)
            state, r, done = env.step(state, a)
            true_ret += r
            if done:
                break
        model_ret = 0.0
        m_obs = obs[None]
        for _ in range(env.spec.horizon):
            a, _ = agent.sample_action(m_obs, pair_rng, deterministic)
            m_obs, r = model.sample_step(m_obs, a, pair_rng)
            if not np.all(np.isfinite(m_obs)) or not np.isfinite(r[0]):
                model_ret = float("nan")
                break
            model_ret += float(r[0])
        pairs.append((model_ret, true_ret))
    if (model_fingerprint(model), model_fingerprint(agent)) != before:
        raise RuntimeError("probe mutated its inputs")
    finite = [(m, t) for m, t in pairs if np.isfinite(m)]
    if len(finite) < 2:
        return ExploitationReport(pairs, None, float("nan"))
    m, t = np.array(finite).T
    return ExploitationReport(pairs, pearson(m, t), float(np.mean(m - t)))
