"""Bootstrap ensemble of probabilistic dynamics models.

Each member maps a normalized ``(s, a)`` to a diagonal Gaussian over
``(delta s, r)``. Members are trained by maximum likelihood on their own
with-replacement resample of the environment data and share one holdout
split for early stopping. Predictions pick a member uniformly at random per
transition.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Adam, GaussianHead, Mlp, NonFiniteError, gaussian_nll_grad


@dataclass
class ModelConfig:
    hidden: tuple[int, ...] = (200, 200, 200, 200)
    activation: str = "swish"
    lr: float = 1e-3
    batch_size: int = 256
    holdout_fraction: float = 0.2
    max_holdout: int = 5000
    patience: int = 5
    max_epochs: int = 200
    min_improvement: float = 1e-3
    log_var_bounds: tuple[float, float] = (-10.0, 0.5)
    warm_start: bool = True


@dataclass
class ModelFitReport:
    train_nll: list[float]
    holdout_nll: list[float]
    epochs: int
    early_stopped: bool
    holdout_nll_per_dim: list[list[float]] = field(default_factory=list)
    holdout_index: np.ndarray | None = None

    @property
    def mean_holdout_nll(self) -> float:
        return float(np.mean(self.holdout_nll))


class GaussianEnsemble:
    def __init__(self, obs_dim: int, act_dim: int, n_members: int = 7,
                 config: ModelConfig | None = None, rng: np.random.Generator | None = None):
        if n_members < 1:
            raise ValueError("ensemble needs at least one member")
        self.config = config or ModelConfig()
        self.obs_dim, self.act_dim = int(obs_dim), int(act_dim)
        self.n_members = int(n_members)
        self.out_dim = self.obs_dim + 1
        rng = rng if rng is not None else np.random.default_rng(0)
        c = self.config
        self.net = Mlp((obs_dim + act_dim, *c.hidden, 2 * self.out_dim), c.activation,
                       n_members=self.n_members, rng=rng, out_scale=0.1)
        self.head = GaussianHead(self.out_dim, tuple(c.log_var_bounds))
        self.input_mean = np.zeros(obs_dim + act_dim)
        self.input_std = np.ones(obs_dim + act_dim)
        self.bootstrap_masks: np.ndarray | None = None
        self.trained = False
        self.optimizer = Adam(self.net.size, c.lr)
        # member id of every flat parameter, for per-member best-checkpointing
        owner = np.empty(self.net.size, dtype=np.int64)
        ow, ob = self.net.grad_views(owner)
        for w, b in zip(ow, ob):
            w[...] = np.arange(self.n_members)[:, None, None]
            b[...] = np.arange(self.n_members)[:, None, None]
        self._owner = owner

    # -- prediction ---------------------------------------------------------
    def _inputs(self, obs, act):
        x = np.concatenate([obs, act], axis=-1)
        return (x - self.input_mean) / self.input_std

    def predict(self, obs, act):
        """Per-member mean and log-variance over ``(delta s, r)``, shape ``(B, N, obs_dim + 1)``."""
        out = self.net.forward(self._inputs(np.atleast_2d(obs), np.atleast_2d(act)))
        mean, log_var, _ = self.head.split(out)
        return mean, log_var

    def draw_members(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.n_members, size=n)

    def sample_step(self, obs, act, rng: np.random.Generator):
        """Sample ``(s', r)`` from a uniformly chosen member per row."""
        if not self.trained:
            raise RuntimeError("ensemble has not been fitted")
        obs = np.atleast_2d(obs)
        n = obs.shape[0]
        members = self.draw_members(n, rng)
        mean, log_var = self.predict(obs, act)
        rows = np.arange(n)
        mean, log_var = mean[members, rows], log_var[members, rows]
        y = mean + np.exp(0.5 * log_var) * rng.standard_normal(mean.shape)
        return obs + y[:, :self.obs_dim], y[:, self.obs_dim]

    def moment_matched(self, obs, act):
        """Mean and variance of the uniform mixture over members."""
        mean, log_var = self.predict(obs, act)
        mu = mean.mean(axis=0)
        var = (np.exp(log_var) + mean * mean).mean(axis=0) - mu * mu
        return mu, np.maximum(var, 0.0)

    def holdout_nll(self, obs, act, next_obs, rew) -> np.ndarray:
        """Per-member, per-dimension mean NLL of the targets, shape ``(B, obs_dim + 1)``."""
        y = _targets(obs, next_obs, rew)
        mean, log_var = self.predict(obs, act)
        return 0.5 * (np.log(2 * np.pi) + log_var + (y - mean) ** 2 * np.exp(-log_var)).mean(axis=1)


def _targets(obs, next_obs, rew):
    return np.concatenate([next_obs - obs, np.reshape(rew, (-1, 1))], axis=-1)


def fit(ensemble: GaussianEnsemble, data: dict, rng: np.random.Generator,
        config: ModelConfig | None = None) -> ModelFitReport:
    """Maximum-likelihood training with bootstrap resamples and holdout early stopping.

    ``data`` holds ``obs, act, rew, next_obs`` arrays (e.g. ``ReplayBuffer.all()``).
    """
    c = config or ensemble.config
    obs, act = np.asarray(data["obs"]), np.asarray(data["act"])
    n = obs.shape[0]
    n_hold = min(int(c.holdout_fraction * n), c.max_holdout)
    if n_hold < 1 or n < 2 * n_hold or n - n_hold < 2:
        raise ValueError(f"buffer too small to fit the model ({n} transitions)")
    x_raw = np.concatenate([obs, act], axis=1)
    y = _targets(obs, data["next_obs"], data["rew"])

    perm = rng.permutation(n)
    hold, train = perm[:n_hold], perm[n_hold:]
    n_train = train.size
    ensemble.input_mean = x_raw[train].mean(axis=0)
    ensemble.input_std = np.maximum(x_raw[train].std(axis=0), 1e-8)
    x = (x_raw - ensemble.input_mean) / ensemble.input_std
    x_tr, y_tr, x_ho, y_ho = x[train], y[train], x[hold], y[hold]

    if not (c.warm_start and ensemble.trained):
        ensemble.optimizer = Adam(ensemble.net.size, c.lr)
    B = ensemble.n_members
    masks = rng.integers(0, n_train, size=(B, n_train))
    ensemble.bootstrap_masks = masks
    net, head, opt = ensemble.net, ensemble.head, ensemble.optimizer

    def evaluate(xs, ys):
        mean, log_var, _ = head.split(net.forward(xs))
        per = 0.5 * (np.log(2 * np.pi) + log_var + (ys - mean) ** 2 * np.exp(-log_var))
        return per.mean(axis=-2)  # (B, D)

    best = evaluate(x_ho, y_ho).sum(axis=1)
    if not np.all(np.isfinite(best)):
        best = np.full(B, np.inf)
    best_params = net.params.copy()
    since = 0
    epochs = 0
    early = False
    bs = min(c.batch_size, n_train)
    train_nll = np.full(B, np.nan)
    for epoch in range(c.max_epochs):
        order = rng.permuted(masks, axis=1)
        losses = []
        for start in range(0, n_train, bs):
            idx = order[:, start:start + bs]
            out, cache = net.forward_train(x_tr[idx])
            mean, log_var, dlv = head.split(out)
            yb = y_tr[idx]
            d_mean, d_lv = gaussian_nll_grad(mean, log_var, yb)
            # every member averages over its own rows
            grad, _ = net.backward(cache, head.join_grad(d_mean, d_lv, dlv) * B)
            if not np.all(np.isfinite(grad)):
                net.check_finite(cache)
                raise NonFiniteError("non-finite model gradient")
            opt.step(net.params, grad)
            losses.append((0.5 * (np.log(2 * np.pi) + log_var + (yb - mean) ** 2
                                  * np.exp(-log_var))).sum(-1).mean(-1))
        train_nll = np.mean(losses, axis=0)
        epochs = epoch + 1
        cur = evaluate(x_ho, y_ho).sum(axis=1)
        if not np.all(np.isfinite(cur)):
            raise NonFiniteError("holdout NLL diverged")
        improved = cur < best - c.min_improvement
        if np.any(improved):
            for m in np.flatnonzero(improved):
                best_params[ensemble._owner == m] = net.params[ensemble._owner == m]
            best = np.where(improved, cur, best)
            since = 0
        else:
            since += 1
            if since >= c.patience:
                early = True
                break
    net.params[:] = best_params
    ensemble.trained = True
    per_dim = evaluate(x_ho, y_ho)
    return ModelFitReport(train_nll=[float(v) for v in train_nll],
                          holdout_nll=[float(v) for v in per_dim.sum(axis=1)],
                          epochs=epochs, early_stopped=early,
                          holdout_nll_per_dim=per_dim.tolist(), holdout_index=hold)


def sample_step(ensemble, s, a, rng):
    return ensemble.sample_step(s, a, rng)


def estimate_eps_m(model, validation: dict) -> tuple[float, float]:
    """Model-error proxy on held-out transitions, plus the raw mean NLL.

    Standardizes the state-delta residuals by the model's predictive
    distribution, moment-matches a Gaussian to them and converts its KL from
    N(0, I) into a total-variation figure via Pinsker, clamped to 1. An
    exact model gives residuals ~ N(0, I) and a proxy near 0. This is an
    estimator, not the exact kernel distance.
    """
    obs = np.asarray(validation["obs"])
    if obs.shape[0] == 0:
        raise ValueError("empty validation set")
    mu, var = model.moment_matched(obs, validation["act"])
    y = _targets(obs, validation["next_obs"], validation["rew"])
    d = model.obs_dim
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (y[:, :d] - mu[:, :d]) / np.sqrt(var[:, :d])
        m = z.mean(axis=0)
        v = z.var(axis=0)
        kl = 0.5 * np.sum(v + m * m - 1.0 - np.log(v))
    nll = float(np.mean(0.5 * (np.log(2 * np.pi * var) + (y - mu) ** 2 / var).sum(axis=1)))
    if not np.isfinite(kl):
        return 1.0, nll
    return float(min(1.0, np.sqrt(max(kl, 0.0) / 2.0))), nll


class ExactModel:
    """The environment's own transition law behind the ensemble interface.

    Serves as a ground-truth model in tests, value expansion checks and probes.
    """

    n_members = 1
    trained = True

    def __init__(self, env, reward_log_var: float = -30.0):
        self.env = env
        self.obs_dim = env.spec.state_dim
        self.act_dim = env.spec.action_dim
        self.reward_log_var = reward_log_var

    def _noise_var(self):
        std = getattr(self.env, "params", {}).get("noise_std", 0.0) if self.env.name == "lingauss" else 0.0
        return max(std * std, 1e-300)

    def predict(self, obs, act):
        obs, act = np.atleast_2d(obs), np.atleast_2d(act)
        nxt, rew = transition_mean(self.env, obs, act)
        mean = np.concatenate([nxt - obs, rew[:, None]], axis=1)
        log_var = np.concatenate([np.full(nxt.shape, np.log(self._noise_var())),
                                  np.full((obs.shape[0], 1), self.reward_log_var)], axis=1)
        return mean[None], log_var[None]

    def moment_matched(self, obs, act):
        mean, log_var = self.predict(obs, act)
        return mean[0], np.exp(log_var[0])

    def draw_members(self, n, rng):
        return np.zeros(n, dtype=np.int64)

    def sample_step(self, obs, act, rng):
        obs = np.atleast_2d(obs)
        nxt, rew = transition_mean(self.env, obs, np.atleast_2d(act))
        if self.env.name == "lingauss" and self.env.params["noise_std"] > 0:
            nxt = nxt + self.env.params["noise_std"] * rng.standard_normal(nxt.shape)
        return nxt, rew


def transition_mean(env, obs, act):
    """Vectorized noise-free next observation and reward for the built-in envs."""
    act = np.clip(act, env.spec.action_low, env.spec.action_high)
    p = env.params
    if env.name == "pendulum":
        theta = np.arctan2(obs[:, 1], obs[:, 0])
        omega = obs[:, 2]
        u = act[:, 0]
        rew = -(theta ** 2 + 0.1 * omega ** 2 + 0.001 * u ** 2)
        acc = 3.0 * p["g"] / (2.0 * p["l"]) * np.sin(theta) + 3.0 / (p["m"] * p["l"] ** 2) * u
        omega = np.clip(omega + acc * p["dt"], -p["max_speed"], p["max_speed"])
        theta = theta + omega * p["dt"]
        return np.stack([np.cos(theta), np.sin(theta), omega], axis=1), rew
    if env.name == "pointmass":
        pos, vel = obs[:, :2], obs[:, 2:]
        rew = -((pos * pos).sum(1) + 0.01 * (act * act).sum(1))
        vel = np.clip(vel + act / p["mass"] * p["dt"], -p["max_speed"], p["max_speed"])
        pos = np.clip(pos + vel * p["dt"], -p["bound"], p["bound"])
        return np.concatenate([pos, vel], axis=1), rew
    if env.name == "lingauss":
        return p["decay"] * obs + p["gain"] * act, -(obs * obs).sum(1)
    raise ValueError(f"no analytic transition for {env.name}")
