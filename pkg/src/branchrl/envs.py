"""Desk-scale continuous-control environments with analytic dynamics.

Every environment is a pure stepping function: ``step(state, action)`` never
mutates ``state`` and draws its noise from the generator state carried inside
it, so replaying a recorded trajectory reproduces rewards bit for bit.
Episodes have a fixed horizon and never terminate early.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    horizon: int
    reward_bound: float

    def __post_init__(self):
        if not np.all(self.action_low < self.action_high):
            raise ValueError("action_low must be < action_high elementwise")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass(frozen=True)
class EnvState:
    observation: np.ndarray
    step_index: int
    rng_state: Any = None
    # physical state when it differs from the observation (pendulum angle/velocity)
    internal: np.ndarray | None = field(default=None, compare=False)


def wrap_angle(theta):
    """Map angles into (-pi, pi]."""
    out = np.pi - np.mod(np.pi - np.asarray(theta, dtype=np.float64), 2.0 * np.pi)
    return out if np.ndim(out) else float(out)


class Env:
    name = "base"
    defaults: dict[str, float] = {}

    def __init__(self, **params):
        unknown = set(params) - set(self.defaults)
        if unknown:
            raise ValueError(f"unknown {self.name} parameters: {sorted(unknown)}")
        self.params = {**self.defaults, **{k: float(v) for k, v in params.items()}}
        self.clamp_count = 0
        self.spec = self._make_spec()

    def _make_spec(self) -> EnvSpec:
        raise NotImplementedError

    def reset(self, seed) -> EnvState:
        raise NotImplementedError

    def _clamp(self, action):
        a = np.asarray(action, dtype=np.float64).reshape(self.spec.action_dim)
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite action")
        c = np.clip(a, self.spec.action_low, self.spec.action_high)
        if np.any(c != a):
            self.clamp_count += 1
        return c

    def step(self, state: EnvState, action) -> tuple[EnvState, float, bool]:
        raise NotImplementedError

    def is_terminal(self, obs: np.ndarray) -> np.ndarray:
        """Termination predicate on (batched) observations; fixed-horizon envs never terminate."""
        return np.zeros(np.shape(obs)[:-1], dtype=bool)


class Pendulum(Env):
    """Torque-limited pendulum swing-up; the angle is measured from upright.

    Observation is ``(cos theta, sin theta, omega)``.
    """

    name = "pendulum"
    defaults = {"g": 10.0, "m": 1.0, "l": 1.0, "dt": 0.05, "max_speed": 8.0,
                "max_torque": 2.0, "horizon": 200}

    def _make_spec(self):
        u = self.params["max_torque"]
        r_max = np.pi ** 2 + 0.1 * self.params["max_speed"] ** 2 + 0.001 * u * u
        return EnvSpec(3, 1, np.array([-u]), np.array([u]), int(self.params["horizon"]), float(r_max))

    @staticmethod
    def observe(theta, omega):
        return np.array([np.cos(theta), np.sin(theta), omega])

    def reset(self, seed) -> EnvState:
        rng = np.random.default_rng(seed)
        theta = np.pi - rng.uniform(0.0, 2.0 * np.pi)  # (-pi, pi]
        omega = rng.uniform(-1.0, 1.0)
        return EnvState(self.observe(theta, omega), 0, None, np.array([theta, omega]))

    def from_angle(self, theta, omega, step_index=0) -> EnvState:
        return EnvState(self.observe(theta, omega), step_index, None, np.array([theta, omega], dtype=float))

    def step(self, state, action):
        u = float(self._clamp(action)[0])
        p = self.params
        theta, omega = state.internal
        reward = -(wrap_angle(theta) ** 2 + 0.1 * omega ** 2 + 0.001 * u ** 2)
        accel = 3.0 * p["g"] / (2.0 * p["l"]) * np.sin(theta) + 3.0 / (p["m"] * p["l"] ** 2) * u
        omega = float(np.clip(omega + accel * p["dt"], -p["max_speed"], p["max_speed"]))
        theta = theta + omega * p["dt"]
        k = state.step_index + 1
        return EnvState(self.observe(theta, omega), k, None, np.array([theta, omega])), float(reward), k >= self.spec.horizon


class PointMass(Env):
    """Planar double integrator regulated to the origin.

    Observation is ``(position, velocity)``; positions are confined to a box
    of half-width ``bound`` so the reward stays bounded.
    """

    name = "pointmass"
    defaults = {"dt": 0.1, "mass": 1.0, "max_force": 1.0, "bound": 5.0, "max_speed": 2.0,
                "horizon": 200}

    def _make_spec(self):
        f, b = self.params["max_force"], self.params["bound"]
        r_max = 2 * b * b + 0.01 * 2 * f * f
        return EnvSpec(4, 2, np.full(2, -f), np.full(2, f), int(self.params["horizon"]), float(r_max))

    def reset(self, seed) -> EnvState:
        rng = np.random.default_rng(seed)
        pos = rng.uniform(-1.0, 1.0, size=2)
        return EnvState(np.concatenate([pos, np.zeros(2)]), 0)

    def step(self, state, action):
        a = self._clamp(action)
        p = self.params
        pos, vel = state.observation[:2], state.observation[2:]
        reward = -(pos @ pos + 0.01 * (a @ a))
        vel = np.clip(vel + a / p["mass"] * p["dt"], -p["max_speed"], p["max_speed"])
        pos = np.clip(pos + vel * p["dt"], -p["bound"], p["bound"])
        k = state.step_index + 1
        return EnvState(np.concatenate([pos, vel]), k), float(reward), k >= self.spec.horizon


class LinearGaussian(Env):
    """``s' = 0.9 s + 0.1 a + w`` with ``w ~ N(0, noise_std^2 I)``; reward ``-|s|^2``.

    The transition density is known in closed form, which makes the model's
    negative log-likelihood floor and its divergence computable.
    """

    name = "lingauss"
    defaults = {"dim": 2, "decay": 0.9, "gain": 0.1, "noise_std": 0.1, "max_action": 1.0,
                "horizon": 200}

    def _make_spec(self):
        d = int(self.params["dim"])
        u = self.params["max_action"]
        return EnvSpec(d, d, np.full(d, -u), np.full(d, u), int(self.params["horizon"]), float("inf"))

    def reset(self, seed) -> EnvState:
        rng = np.random.default_rng(seed)
        s = rng.standard_normal(self.spec.state_dim)
        return EnvState(s, 0, rng.bit_generator.state)

    def mean_next(self, s, a):
        return self.params["decay"] * np.asarray(s) + self.params["gain"] * np.asarray(a)

    def step(self, state, action):
        a = self._clamp(action)
        s = state.observation
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng_state
        w = rng.standard_normal(s.shape) * self.params["noise_std"]
        reward = -float(s @ s)
        s_next = self.mean_next(s, a) + w
        k = state.step_index + 1
        return EnvState(s_next, k, rng.bit_generator.state), reward, k >= self.spec.horizon


ENVS = {cls.name: cls for cls in (Pendulum, PointMass, LinearGaussian)}


def make_env(name: str, **params) -> Env:
    if name not in ENVS:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}")
    return ENVS[name](**params)


def reset(env: Env, seed) -> EnvState:
    return env.reset(seed)


def step(env: Env, state: EnvState, action):
    return env.step(state, action)


def with_step_index(state: EnvState, k: int) -> EnvState:
    return replace(state, step_index=k)
