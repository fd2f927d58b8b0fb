"""Soft actor-critic: squashed-Gaussian actor, twin critics, learned temperature.

The twin critics are a single member-stacked :class:`~branchrl.nn.Mlp` with
two members, so both are evaluated and trained in one batched pass.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .nn import LOG_2PI, Adam, Mlp, NonFiniteError, dump_mlp, load_mlp, register_loss, soft_clamp

SQUASH_EPS = 1e-6


@dataclass
class SacConfig:
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    alpha_lr: float = 1e-3
    gamma: float = 0.99
    tau: float = 0.005
    init_alpha: float = 1.0
    target_entropy: float | None = None  # default -dim(A)
    log_std_bounds: tuple[float, float] = (-5.0, 2.0)


@dataclass
class SacUpdateReport:
    critic_loss: float = float("nan")
    actor_loss: float = float("nan")
    alpha_loss: float = float("nan")
    mean_q: float = float("nan")
    mean_entropy: float = float("nan")


class SacAgent:
    def __init__(self, obs_dim: int, act_dim: int, action_low, action_high,
                 config: SacConfig | None = None, rng: np.random.Generator | None = None):
        self.config = config or SacConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        c = self.config
        self.obs_dim, self.act_dim = int(obs_dim), int(act_dim)
        low = np.asarray(action_low, dtype=float).reshape(act_dim)
        high = np.asarray(action_high, dtype=float).reshape(act_dim)
        self.action_scale = (high - low) / 2.0
        self.action_bias = (high + low) / 2.0
        self.actor = Mlp((obs_dim, *c.hidden, 2 * act_dim), c.activation, rng=rng)
        self.critics = Mlp((obs_dim + act_dim, *c.hidden, 1), c.activation, n_members=2, rng=rng)
        self.target_critics = self.critics.copy()
        self.log_alpha = np.array([np.log(c.init_alpha)])
        self.target_entropy = -float(act_dim) if c.target_entropy is None else float(c.target_entropy)
        self.actor_opt = Adam(self.actor.size, c.actor_lr)
        self.critic_opt = Adam(self.critics.size, c.critic_lr)
        self.alpha_opt = Adam(1, c.alpha_lr)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    # -- policy ------------------------------------------------------------
    def _policy(self, obs, noise, keep_cache=False):
        obs = np.atleast_2d(obs)
        if keep_cache:
            out, cache = self.actor.forward_train(obs)
        else:
            out, cache = self.actor.forward(obs), None
        mu = out[:, :self.act_dim]
        log_std, dls = soft_clamp(out[:, self.act_dim:], *self.config.log_std_bounds)
        std = np.exp(log_std)
        u = mu + std * noise
        t = np.tanh(u)
        a = self.action_scale * t + self.action_bias
        log_prob = (-0.5 * noise * noise - log_std - 0.5 * LOG_2PI
                    - np.log(1.0 - t * t + SQUASH_EPS) - np.log(self.action_scale)).sum(axis=1)
        parts = dict(mu=mu, log_std=log_std, dls=dls, std=std, u=u, t=t, noise=noise, cache=cache)
        return a, log_prob, parts

    def gaussian_params(self, obs):
        """Pre-squash mean and log standard deviation."""
        out = self.actor.forward(np.atleast_2d(obs))
        log_std, _ = soft_clamp(out[:, self.act_dim:], *self.config.log_std_bounds)
        return out[:, :self.act_dim], log_std

    def sample_action(self, obs, rng, deterministic: bool = False):
        obs = np.atleast_2d(obs)
        noise = np.zeros((obs.shape[0], self.act_dim)) if deterministic else rng.standard_normal(
            (obs.shape[0], self.act_dim))
        a, log_prob, _ = self._policy(obs, noise)
        return a, log_prob

    def act(self, obs, rng, deterministic=False) -> np.ndarray:
        a, _ = self.sample_action(np.asarray(obs)[None], rng, deterministic)
        return a[0]

    def q_values(self, obs, act, target=False) -> np.ndarray:
        net = self.target_critics if target else self.critics
        return net.forward(np.concatenate([obs, act], axis=-1))[..., 0]

    def soft_value(self, obs, rng, noise=None):
        """min-target-Q minus alpha log pi at a fresh action (the bootstrap term)."""
        if noise is None:
            noise = rng.standard_normal((np.shape(obs)[0], self.act_dim))
        a, logp, _ = self._policy(obs, noise)
        return self.q_values(obs, a, target=True).min(axis=0) - self.alpha * logp

    def polyak(self):
        tau = self.config.tau
        tp = self.target_critics.params
        tp *= 1.0 - tau
        tp += tau * self.critics.params

    def snapshot(self) -> bytes:
        return dump_agent(self)


# ---------------------------------------------------------------------------
# losses with hand-derived gradients

def critic_loss_and_grad(critics: Mlp, batch):
    """Sum over the two critics of 0.5 * mean squared Bellman error against fixed targets."""
    x = np.concatenate([batch["obs"], batch["act"]], axis=-1)
    q, cache = critics.forward_train(x)
    y = np.asarray(batch["y"])[None, :, None]
    diff = q - y
    n = x.shape[0]
    loss = float(0.5 * (diff * diff).sum() / n)
    grad, _ = critics.backward(cache, diff / n)
    return loss, grad


def actor_loss_and_grad(actor: Mlp, batch):
    """mean(alpha * log pi(a|s) - min_j Q_j(s, a)) with a reparameterized by fixed noise."""
    agent: SacAgent = batch["agent"]
    if actor is not agent.actor:
        raise ValueError("actor must belong to batch['agent']")
    return _actor_pass(agent, batch["obs"], batch["noise"], batch.get("alpha", agent.alpha))[:2]


def _actor_pass(agent: SacAgent, obs, noise, alpha):
    a, logp, p = agent._policy(obs, noise, keep_cache=True)
    n = a.shape[0]
    x = np.concatenate([obs, a], axis=-1)
    q, qcache = agent.critics.forward_train(x)
    q = q[..., 0]
    pick = np.argmin(q, axis=0)
    qmin = q[pick, np.arange(n)]
    loss = float(np.mean(alpha * logp - qmin))

    dq = np.zeros_like(q)
    dq[pick, np.arange(n)] = -1.0 / n
    _, dx = agent.critics.backward(qcache, dq[..., None], input_grad=True)
    da = dx[:, agent.obs_dim:]

    t = p["t"]
    one_m = 1.0 - t * t
    dcorr_du = 2.0 * t * one_m / (one_m + SQUASH_EPS)
    du = alpha / n * dcorr_du + da * agent.action_scale * one_m
    d_mu = du
    d_log_std = -alpha / n + du * p["std"] * noise
    dout = np.concatenate([d_mu, d_log_std * p["dls"]], axis=1)
    grad, _ = agent.actor.backward(p["cache"], dout)
    return loss, grad, logp, qmin


register_loss("sac_critic", critic_loss_and_grad)
register_loss("sac_actor", actor_loss_and_grad)


# ---------------------------------------------------------------------------
# updates

def critic_update(agent: SacAgent, batch, gamma: float | None = None, rng=None, noise=None,
                  report: SacUpdateReport | None = None) -> SacUpdateReport:
    """One gradient step of both critics toward the soft Bellman target, then polyak the targets.

    ``batch`` holds ``obs, act, rew, next_obs, done``; a precomputed target
    array ``y`` (e.g. from value expansion) short-circuits target construction.
    """
    report = report or SacUpdateReport()
    gamma = agent.config.gamma if gamma is None else gamma
    if "y" in batch:
        y = np.asarray(batch["y"])
    else:
        y = np.asarray(batch["rew"], dtype=float)
        if gamma != 0.0:
            nxt = agent.soft_value(batch["next_obs"], rng, noise)
            y = y + gamma * (1.0 - np.asarray(batch["done"], dtype=float)) * nxt
    if not np.all(np.isfinite(y)):
        raise NonFiniteError("non-finite critic target")
    loss, grad = critic_loss_and_grad(agent.critics, {"obs": batch["obs"], "act": batch["act"], "y": y})
    agent.critic_opt.step(agent.critics.params, grad)
    agent.polyak()
    report.critic_loss = loss
    report.mean_q = float(np.mean(agent.q_values(batch["obs"], batch["act"])))
    return report


def expanded_critic_update(agent: SacAgent, obs, act, y, report=None) -> SacUpdateReport:
    """Critic step averaging the squared error over stacked anchors ``obs[h], act[h] -> y[h]``."""
    report = report or SacUpdateReport()
    h1, n = y.shape
    loss, grad = critic_loss_and_grad(
        agent.critics, {"obs": obs.reshape(h1 * n, -1), "act": act.reshape(h1 * n, -1),
                        "y": y.reshape(-1)})
    agent.critic_opt.step(agent.critics.params, grad)
    agent.polyak()
    report.critic_loss = loss
    report.mean_q = float(np.mean(agent.q_values(obs[0], act[0])))
    return report


def actor_update(agent: SacAgent, batch, rng=None, report=None) -> SacUpdateReport:
    """One reparameterized gradient step on E[alpha log pi - min Q]; critics stay frozen."""
    report = report or SacUpdateReport()
    obs = batch["obs"]
    noise = batch.get("noise")
    if noise is None:
        noise = rng.standard_normal((obs.shape[0], agent.act_dim))
    loss, grad, logp, _ = _actor_pass(agent, obs, noise, agent.alpha)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite actor loss")
    agent.actor_opt.step(agent.actor.params, grad)
    report.actor_loss = loss
    report.mean_entropy = float(-np.mean(logp))
    report._logp = logp
    return report


def alpha_update(agent: SacAgent, batch, rng=None, report=None, log_prob=None) -> SacUpdateReport:
    """Gradient step on log alpha; the gradient is (entropy estimate - target entropy)."""
    report = report or SacUpdateReport()
    if log_prob is None:
        log_prob = getattr(report, "_logp", None)
    if log_prob is None:
        _, log_prob = agent.sample_action(batch["obs"], rng)
    entropy = float(-np.mean(log_prob))
    grad = np.array([entropy - agent.target_entropy])
    report.alpha_loss = float(-agent.log_alpha[0] * (-entropy + agent.target_entropy))
    agent.alpha_opt.step(agent.log_alpha, grad)
    report.mean_entropy = entropy
    return report


def update(agent: SacAgent, batch, rng, learn_alpha=True) -> SacUpdateReport:
    """critic -> actor -> alpha, in that order."""
    report = critic_update(agent, batch, rng=rng)
    actor_update(agent, batch, rng, report)
    if learn_alpha:
        alpha_update(agent, batch, rng, report)
    return report


# ---------------------------------------------------------------------------
# checkpoints

_SECTIONS = ("actor", "critic1", "critic2", "targets", "log_alpha")


def dump_agent(agent: SacAgent) -> bytes:
    """Section table (name, offset, length) followed by network blobs.

    The two critics are stored as separate single networks; the target pair
    keeps its member-stacked layout.
    """
    c1, c2 = _split_critics(agent.critics)
    blobs = [dump_mlp(agent.actor), dump_mlp(c1), dump_mlp(c2), dump_mlp(agent.target_critics),
             agent.log_alpha.astype("<f8").tobytes()]
    header_len = 4 + 4 + len(_SECTIONS) * (16 + 8 + 8)
    table, offset = b"", header_len
    for name, blob in zip(_SECTIONS, blobs):
        table += name.encode().ljust(16, b"\0") + struct.pack("<QQ", offset, len(blob))
        offset += len(blob)
    return b"BSAC" + struct.pack("<I", len(_SECTIONS)) + table + b"".join(blobs)


def load_agent_into(agent: SacAgent, blob: bytes) -> SacAgent:
    if blob[:4] != b"BSAC":
        raise ValueError("not an agent checkpoint")
    (n,) = struct.unpack_from("<I", blob, 4)
    sections = {}
    for i in range(n):
        pos = 8 + i * 32
        name = blob[pos:pos + 16].rstrip(b"\0").decode()
        sections[name] = struct.unpack_from("<QQ", blob, pos + 16)
    actor, _ = load_mlp(blob, sections["actor"][0])
    c1, _ = load_mlp(blob, sections["critic1"][0])
    c2, _ = load_mlp(blob, sections["critic2"][0])
    targets, _ = load_mlp(blob, sections["targets"][0])
    agent.actor.params[:] = actor.params
    _join_critics(agent.critics, c1, c2)
    agent.target_critics.params[:] = targets.params
    off, _ = sections["log_alpha"]
    agent.log_alpha[:] = np.frombuffer(blob, "<f8", 1, off)
    return agent


def _split_critics(critics: Mlp):
    singles = [Mlp(critics.widths, critics.activation) for _ in range(2)]
    for j, net in enumerate(singles):
        for w, b, sw, sb in zip(critics.weights, critics.biases, net.weights, net.biases):
            sw[...] = w[j]
            sb[...] = b[j, 0]
    return singles


def _join_critics(critics: Mlp, c1: Mlp, c2: Mlp):
    for j, net in enumerate((c1, c2)):
        for w, b, sw, sb in zip(critics.weights, critics.biases, net.weights, net.biases):
            w[j] = sw
            b[j, 0] = sb
