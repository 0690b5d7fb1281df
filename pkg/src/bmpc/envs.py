"""Built-in toy continuous-control environments with ground-truth oracles.

Two fixed-horizon tasks stand in for the usual physics suites at desk scale:
a torque-limited pendulum swing-up and a 2-D double-integrator point mass.
Both are deterministic given state and action; episode returns under a fixed
policy reproduce bit-exactly for a fixed reset seed. ``oracle_return``
computes a near-optimal undiscounted episode return for each.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    action_dim: int
    episode_len: int      # in environment steps
    action_repeat: int
    reward_range: tuple   # per environment step


class PendulumSwingup:
    """Torque-limited pendulum; angle measured from upright (hanging = pi).

    theta_dd = (g/l) sin(theta) + torque_scale * a, semi-implicit Euler at
    dt = 0.05; per-substep reward (1 + cos(theta))/2 - 0.01 a^2.
    """

    spec = EnvSpec("pendulum_swingup", obs_dim=3, action_dim=1,
                   episode_len=200, action_repeat=2, reward_range=(-0.01, 1.0))

    dt = 0.05
    g_over_l = 10.0
    torque_scale = 6.0
    vel_limit = 8.0  # oracle grid extent; physical speeds stay below this

    def __init__(self):
        self.theta = None
        self.theta_dot = None
        self.t = 0

    def reset(self, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self.theta = np.pi + rng.uniform(-0.1, 0.1)
        self.theta_dot = rng.uniform(-0.05, 0.05)
        self.t = 0
        return self._obs()

    def _obs(self) -> np.ndarray:
        return np.array([np.cos(self.theta), np.sin(self.theta), 0.2 * self.theta_dot])

    def _substep(self, a: float) -> float:
        self.theta_dot += self.dt * (self.g_over_l * np.sin(self.theta) + self.torque_scale * a)
        self.theta += self.dt * self.theta_dot
        self.theta = (self.theta + np.pi) % (2.0 * np.pi) - np.pi
        return (1.0 + np.cos(self.theta)) / 2.0 - 0.01 * a * a

    def step(self, action):
        if self.theta is None:
            raise RuntimeError("reset before first step")
        if self.t >= self.spec.episode_len:
            raise RuntimeError("step after episode end")
        a = float(np.clip(np.asarray(action).reshape(-1)[0], -1.0, 1.0))
        reward = 0.0
        for _ in range(self.spec.action_repeat):
            reward += self._substep(a)
        self.t += self.spec.action_repeat
        return self._obs(), reward, self.t >= self.spec.episode_len

    def energy(self) -> float:
        """Mechanical energy with the potential zeroed at the hanging position."""
        return 0.5 * self.theta_dot**2 + self.g_over_l * (1.0 + np.cos(self.theta))


class PointMassEasy:
    """2-D double integrator steering to a fixed goal; reward exp(-distance)."""

    spec = EnvSpec("pointmass_easy", obs_dim=4, action_dim=2,
                   episode_len=100, action_repeat=1, reward_range=(0.0, 1.0))

    dt = 0.1
    goal = np.array([0.5, 0.5])
    start = np.array([-0.5, -0.5])

    def __init__(self):
        self.pos = None
        self.vel = None
        self.t = 0

    def reset(self, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self.pos = self.start + rng.uniform(-0.05, 0.05, size=2)
        self.vel = np.zeros(2)
        self.t = 0
        return self._obs()

    def _obs(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel])

    def step(self, action):
        if self.pos is None:
            raise RuntimeError("reset before first step")
        if self.t >= self.spec.episode_len:
            raise RuntimeError("step after episode end")
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(2), -1.0, 1.0)
        self.vel = self.vel + self.dt * a
        self.pos = self.pos + self.dt * self.vel
        self.t += 1
        reward = float(np.exp(-np.linalg.norm(self.pos - self.goal)))
        return self._obs(), reward, self.t >= self.spec.episode_len


ENV_NAMES = ("pendulum_swingup", "pointmass_easy")


def make_env(name: str):
    if name == "pendulum_swingup":
        return PendulumSwingup()
    if name == "pointmass_easy":
        return PointMassEasy()
    raise ValueError(f"unknown env {name!r}; choose from {ENV_NAMES}")


# ---------------------------------------------------------------------------
# oracles

_oracle_cache: dict = {}


def _pendulum_tables(env: PendulumSwingup, n_theta: int, n_vel: int, n_act: int):
    """Backward-induction tables on a discretized grid, decisions at the
    action-repeat cadence. Returns (thetas, vels, actions, greedy policy)."""
    thetas = np.linspace(-np.pi, np.pi, n_theta, endpoint=False)
    vels = np.linspace(-env.vel_limit, env.vel_limit, n_vel)
    actions = np.linspace(-1.0, 1.0, n_act)
    th_grid, vel_grid = np.meshgrid(thetas, vels, indexing="ij")
    th_flat = th_grid.ravel()
    vel_flat = vel_grid.ravel()
    S = th_flat.size

    d_theta = 2.0 * np.pi / n_theta
    d_vel = 2.0 * env.vel_limit / (n_vel - 1)

    next_idx = np.empty((S, n_act), dtype=np.int64)
    rewards = np.empty((S, n_act))
    for j, a in enumerate(actions):
        th = th_flat.copy()
        vel = vel_flat.copy()
        r = np.zeros(S)
        for _ in range(env.spec.action_repeat):
            vel = vel + env.dt * (env.g_over_l * np.sin(th) + env.torque_scale * a)
            th = th + env.dt * vel
            th = (th + np.pi) % (2.0 * np.pi) - np.pi
            r += (1.0 + np.cos(th)) / 2.0 - 0.01 * a * a
        vel = np.clip(vel, -env.vel_limit, env.vel_limit)
        ti = np.rint((th + np.pi) / d_theta).astype(np.int64) % n_theta
        vi = np.rint((vel + env.vel_limit) / d_vel).astype(np.int64)
        next_idx[:, j] = ti * n_vel + vi
        rewards[:, j] = r

    decisions = env.spec.episode_len // env.spec.action_repeat
    policy = np.empty((decisions, S), dtype=np.int8)
    V = np.zeros(S)
    for t in range(decisions - 1, -1, -1):
        Q = rewards + V[next_idx]
        policy[t] = np.argmax(Q, axis=1)
        V = Q[np.arange(S), policy[t]]
    return thetas, vels, actions, policy


def _pendulum_oracle(refine: int = 1, resets: int = 10, seed: int = 123) -> float:
    env = PendulumSwingup()
    n_theta = 201 * refine
    n_vel = 201 * refine
    n_act = 21 * refine - (refine - 1)  # 21 at base, 41 at x2
    thetas, vels, actions, policy = _pendulum_tables(env, n_theta, n_vel, n_act)
    d_theta = 2.0 * np.pi / n_theta
    d_vel = 2.0 * env.vel_limit / (n_vel - 1)

    returns = []
    for k in range(resets):
        env.reset((seed, k))
        total = 0.0
        for t in range(env.spec.episode_len // env.spec.action_repeat):
            ti = int(np.rint((env.theta + np.pi) / d_theta)) % n_theta
            vi = int(np.clip(np.rint((env.theta_dot + env.vel_limit) / d_vel), 0, n_vel - 1))
            a = actions[policy[t, ti * n_vel + vi]]
            _, r, _ = env.step(a)
            total += r
        returns.append(total)
    return float(np.mean(returns))


def _pointmass_controller(pos, vel, goal):
    """Per-axis near-time-optimal accel: bang-bang far out, PD capture near."""
    e = pos - goal
    u = np.empty(2)
    for i in range(2):
        if abs(e[i]) < 0.15 and abs(vel[i]) < 0.6:
            u[i] = -5.0 * e[i] - 4.0 * vel[i]
        else:
            u[i] = -np.sign(e[i] + vel[i] * abs(vel[i]) / 2.0)
    return np.clip(u, -1.0, 1.0)


def _pointmass_oracle(resets: int = 10, seed: int = 123) -> float:
    env = PointMassEasy()
    returns = []
    for k in range(resets):
        env.reset((seed, k))
        total = 0.0
        done = False
        while not done:
            a = _pointmass_controller(env.pos, env.vel, env.goal)
            _, r, done = env.step(a)
            total += r
        returns.append(total)
    return float(np.mean(returns))


def oracle_return(env_name: str, refine: int = 1) -> float:
    """Near-optimal undiscounted episode return for a built-in env.

    Pendulum: value iteration on a discretized grid, greedy policy rolled out
    in the continuous env. Point mass: analytic bang-bang/PD controller
    rollout. Results are cached per (env, refinement).
    """
    key = (env_name, refine)
    if key not in _oracle_cache:
        if env_name == "pendulum_swingup":
            _oracle_cache[key] = _pendulum_oracle(refine=refine)
        elif env_name == "pointmass_easy":
            _oracle_cache[key] = _pointmass_oracle()
        else:
            raise ValueError(f"no oracle for {env_name!r}")
    return _oracle_cache[key]
