"""H-step model value expansion for critic targets.

From a real transition ``(s, a, r, s')`` the model is rolled ``H`` steps
under the policy starting at ``s'``. Anchor ``t = -1`` is the real pair and
anchors ``t = 0..H-1`` are the imagined ones; anchor ``t`` regresses onto

    y_t = sum_{k=t}^{H-1} gamma^(k-t) r_k + gamma^(H-t) V(s_H),

with ``r_{-1} = r`` and ``V = min target Q - alpha log pi`` at a fresh action.
The critic loss averages the squared errors over all ``H + 1`` anchors.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class ExpansionConfig:
    horizon: int = 0
    enabled: bool = False

    def __post_init__(self):
        if self.horizon < 0:
            raise ValueError("expansion horizon must be >= 0")


def expanded_target(model, agent, batch: dict, H: int, gamma: float, rng: np.random.Generator,
                    termination_fn=None):
    """Anchors and targets for a batch of real transitions.

    Returns ``(obs, act, y)`` with shapes ``(H+1, N, obs_dim)``,
    ``(H+1, N, act_dim)`` and ``(H+1, N)``; row 0 is the real anchor.
    Samples with a non-finite imagined step, a real terminal, or a predicted
    termination fall back to the one-step target on every anchor.
    """
    if H < 0:
        raise ValueError("H must be >= 0")
    s = np.atleast_2d(batch["obs"])
    a = np.atleast_2d(batch["act"])
    r = np.asarray(batch["rew"], dtype=float).reshape(-1)
    done = np.asarray(batch.get("done", np.zeros_like(r)), dtype=float).reshape(-1)
    n = s.shape[0]

    states = [s, np.asarray(batch["next_obs"], dtype=float)]
    actions = [a]
    rewards = [r]
    bad = done > 0
    with np.errstate(all="ignore"):
        for _ in range(H):
            cur = states[-1]
            act_t, _ = agent.sample_action(cur, rng)
            nxt, rew = model.sample_step(cur, act_t, rng)
            bad |= ~(np.all(np.isfinite(nxt), axis=1) & np.isfinite(rew))
            if termination_fn is not None:
                bad |= termination_fn(nxt)
            nxt = np.where(np.isfinite(nxt), nxt, 0.0)
            actions.append(act_t)
            rewards.append(np.where(np.isfinite(rew), rew, 0.0))
            states.append(nxt)

    tail = states[-1]
    v_tail = agent.soft_value(tail, rng) if gamma != 0.0 else np.zeros(n)
    # backward accumulation: y_t = r_t + gamma * y_{t+1}, y_H = V(s_H)
    y = np.empty((H + 1, n))
    acc = v_tail
    for i in range(H, -1, -1):
        acc = rewards[i] + gamma * acc
        y[i] = acc

    obs = np.stack(states[:H + 1])
    act = np.stack(actions)
    if np.any(bad):
        log.debug("value expansion fell back to the one-step target for %d samples", int(bad.sum()))
        y1 = r[bad].copy()
        if gamma != 0.0:
            y1 += gamma * (1.0 - done[bad]) * agent.soft_value(states[1][bad], rng)
        obs[:, bad] = s[bad]
        act[:, bad] = a[bad]
        y[:, bad] = y1
    return obs, act, y
