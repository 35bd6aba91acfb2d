"""Toy environments, the block-trajectory replay buffer and sampling oracles."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp


class UsageError(ValueError):
    pass


class EnvelopeError(RuntimeError):
    pass


@dataclass
class GaussMixBandit:
    """One-step bandit whose reward is a clamped Gaussian-mixture log-density.

    Modes sit evenly on a circle.  The reward is
    ``reward_scale * max(log p_mix(a), floor)``; with ``reward_scale = alpha``
    the Gibbs policy ``exp(r / alpha)`` is the mixture itself (restricted to
    the action box, plus a negligible floor).
    """

    n_modes: int = 8
    radius: float = 2.0
    std: float = 0.15
    floor: float = -10.0
    reward_scale: float = 1.0
    bound: float = 6.0
    state_dim: int = 0
    action_dim: int = 2
    horizon: int = 1
    name: str = "bandit"

    @property
    def means(self):
        ang = 2.0 * np.pi * np.arange(self.n_modes) / self.n_modes
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    @property
    def action_low(self):
        return np.full(self.action_dim, -self.bound)

    @property
    def action_high(self):
        return np.full(self.action_dim, self.bound)

    def mixture_logpdf(self, a):
        a = np.atleast_2d(a)
        d2 = ((a[:, None, :] - self.means[None]) ** 2).sum(-1)
        comp = -0.5 * d2 / self.std ** 2 - np.log(2.0 * np.pi * self.std ** 2)
        return logsumexp(comp, axis=1) - np.log(self.n_modes)

    def reward(self, s, a):
        return self.reward_scale * np.maximum(self.mixture_logpdf(a), self.floor)

    @property
    def reward_bounds(self):
        top = -np.log(2.0 * np.pi * self.std ** 2) - np.log(self.n_modes)
        # a mode's own component dominates its peak; neighbours add at most n_modes-1 copies
        top += np.log1p((self.n_modes - 1) * np.exp(-0.5 * self._min_sep2() / self.std ** 2))
        return self.reward_scale * self.floor, self.reward_scale * top

    def _min_sep2(self):
        m = self.means
        d2 = ((m[:, None] - m[None]) ** 2).sum(-1)
        return d2[~np.eye(len(m), dtype=bool)].min()

    def sample_data(self, n, rng):
        idx = rng.integers(0, self.n_modes, size=n)
        return self.means[idx] + self.std * rng.standard_normal((n, 2))

    def reset(self, rng, n=1):
        return np.zeros((n, 0))

    def step(self, s, a):
        """Returns ``(s_next, reward, done, clipped)`` for a batch."""
        a = np.atleast_2d(a)
        a_c = np.clip(a, -self.bound, self.bound)
        clipped = np.any(a_c != a, axis=1)
        r = self.reward(s, a_c)
        n = a.shape[0]
        return np.zeros((n, 0)), r, np.ones(n, dtype=bool), clipped


@dataclass
class PointMassMDP:
    """Point mass in the plane driven by a velocity action.

    ``s' = s + dt * B a + noise``; with a 1-D action only the x coordinate
    is driven.  Reward ``-min(|s'|^2, cap) - action_cost * |a|^2``.
    """

    action_dim: int = 1
    dt: float = 0.2
    noise_std: float = 0.0
    horizon: int = 20
    cap: float = 8.0
    action_cost: float = 0.1
    bound: float = 1.0
    reset_scale: float = 1.0
    state_dim: int = 2
    name: str = "pointmass"

    def __post_init__(self):
        if self.action_dim not in (1, 2):
            raise UsageError("point mass supports 1-D or 2-D actions")

    @property
    def action_low(self):
        return np.full(self.action_dim, -self.bound)

    @property
    def action_high(self):
        return np.full(self.action_dim, self.bound)

    @property
    def reward_bounds(self):
        return -self.cap - self.action_cost * self.action_dim * self.bound ** 2, 0.0

    def drive(self, a):
        a = np.atleast_2d(a)
        if self.action_dim == 2:
            return a
        return np.concatenate([a, np.zeros_like(a)], axis=1)

    def transition(self, s, a, rng=None):
        s_next = np.atleast_2d(s) + self.dt * self.drive(a)
        if self.noise_std > 0:
            if rng is None:
                raise UsageError("noisy dynamics need an rng")
            s_next = s_next + self.noise_std * rng.standard_normal(s_next.shape)
        return s_next

    def reward_of(self, s_next, a):
        a = np.atleast_2d(a)
        return -np.minimum((s_next ** 2).sum(1), self.cap) - self.action_cost * (a ** 2).sum(1)

    def reset(self, rng, n=1):
        return rng.uniform(-self.reset_scale, self.reset_scale, size=(n, 2))

    def step(self, s, a, rng=None, t=0):
        a = np.atleast_2d(a)
        a_c = np.clip(a, -self.bound, self.bound)
        clipped = np.any(a_c != a, axis=1)
        s_next = self.transition(s, a_c, rng)
        r = self.reward_of(s_next, a_c)
        done = np.full(a.shape[0], t + 1 >= self.horizon)
        return s_next, r, done, clipped


def make_env(name, **kw):
    if name == "bandit":
        return GaussMixBandit(**kw)
    if name == "pointmass":
        return PointMassMDP(**kw)
    raise UsageError(f"unknown env {name!r}")


def env_reset(env, seed=None, rng=None, n=1):
    rng = rng if rng is not None else np.random.default_rng(seed)
    return env.reset(rng, n)


def env_step(env, state, action, **kw):
    action = np.atleast_2d(action)
    if action.shape[1] != env.action_dim:
        raise UsageError(f"action dim {action.shape[1]} != {env.action_dim}")
    return env.step(state, action, **kw)


# -- replay ----------------------------------------------------------------------


@dataclass
class Transition:
    s: np.ndarray
    trajectory: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool


@dataclass
class Batch:
    s: np.ndarray
    trajectory: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __len__(self):
        return self.r.shape[0]

    @property
    def actions(self):
        return self.trajectory[:, -1]


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions with block trajectories."""

    def __init__(self, capacity, state_dim, action_dim, block_count):
        if capacity < 1:
            raise UsageError("capacity must be positive")
        self.capacity = int(capacity)
        self.block_count = block_count
        self.s = np.zeros((capacity, state_dim))
        self.traj = np.zeros((capacity, block_count + 1, action_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.ptr = 0

    def __len__(self):
        return self.size

    def push(self, t: Transition):
        self.push_batch(np.atleast_2d(t.s), np.asarray(t.trajectory)[None],
                        np.atleast_1d(t.r), np.atleast_2d(t.s_next), np.atleast_1d(t.done))

    def push_batch(self, s, traj, r, s_next, done):
        traj = np.asarray(traj)
        if traj.ndim != 3 or traj.shape[1:] != self.traj.shape[1:]:
            raise UsageError(f"trajectory shape {traj.shape[1:]} != {self.traj.shape[1:]}")
        s = np.asarray(s).reshape(len(traj), -1)
        s_next = np.asarray(s_next).reshape(len(traj), -1)
        for i in range(len(traj)):
            j = self.ptr
            self.s[j] = s[i]
            self.traj[j] = traj[i]
            self.r[j] = r[i]
            self.s_next[j] = s_next[i]
            self.done[j] = done[i]
            self.ptr = (j + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def _order(self):
        # oldest first
        if self.size < self.capacity:
            return np.arange(self.size)
        return (self.ptr + np.arange(self.capacity)) % self.capacity

    def items(self):
        idx = self._order()
        return [Transition(self.s[i].copy(), self.traj[i].copy(), float(self.r[i]),
                           self.s_next[i].copy(), bool(self.done[i])) for i in idx]

    def sample(self, batch_size, rng=None, seed=None):
        if self.size == 0:
            raise UsageError("cannot sample from an empty buffer")
        rng = rng if rng is not None else np.random.default_rng(seed)
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(self.s[idx], self.traj[idx], self.r[idx], self.s_next[idx], self.done[idx])


# -- oracles ----------------------------------------------------------------------


@dataclass
class GibbsOracle:
    """Rejection sampler for ``pi*(a) ∝ exp(reward(a) / alpha)`` on a box.

    The envelope is an isotropic Gaussian; its domination constant is the
    maximum log-ratio over a dense grid (plus any ``extra_points``, e.g. the
    reward's known maximisers) and a safety margin.
    """

    log_target: callable
    low: np.ndarray
    high: np.ndarray
    envelope_std: float = 2.5
    grid: int = 401
    margin: float = 0.05
    extra_points: np.ndarray | None = None
    log_const: float = field(init=False, default=np.nan)

    def __post_init__(self):
        self.low = np.asarray(self.low, dtype=np.float64)
        self.high = np.asarray(self.high, dtype=np.float64)
        axes = [np.linspace(lo, hi, self.grid) for lo, hi in zip(self.low, self.high)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(axes))
        if self.extra_points is not None:
            pts = np.concatenate([pts, np.atleast_2d(self.extra_points)])
        self.log_const = float(np.max(self.log_target(pts) - self._env_logpdf(pts))) + self.margin

    def _env_logpdf(self, a):
        d = a.shape[1]
        return (-0.5 * (a ** 2).sum(1) / self.envelope_std ** 2
                - d * np.log(self.envelope_std) - 0.5 * d * np.log(2 * np.pi))

    def sample(self, M, rng, chunk=200_000, min_rate=1e-4):
        d = len(self.low)
        out, drawn, got = [], 0, 0
        while got < M:
            x = self.envelope_std * rng.standard_normal((chunk, d))
            inside = np.all((x >= self.low) & (x <= self.high), axis=1)
            x = x[inside]
            log_ratio = self.log_target(x) - self._env_logpdf(x) - self.log_const
            keep = np.log(rng.uniform(size=x.shape[0])) < log_ratio
            out.append(x[keep])
            got += int(keep.sum())
            drawn += chunk
            if drawn >= 10 * chunk and got / drawn < min_rate:
                raise EnvelopeError(f"acceptance rate {got / drawn:.2e} below {min_rate}")
        return np.concatenate(out)[:M]


def bandit_oracle(env: GaussMixBandit, alpha):
    return GibbsOracle(lambda a: env.reward(None, a) / alpha, env.action_low, env.action_high,
                       extra_points=env.means)


def gibbs_oracle_sample(reward, alpha, M, seed=None, low=None, high=None, rng=None,
                        **kw):
    """M exact samples from ``exp(reward(a) / alpha)`` restricted to ``[low, high]``."""
    if alpha <= 0:
        raise UsageError("alpha must be positive")
    if isinstance(reward, GaussMixBandit):
        oracle = bandit_oracle(reward, alpha)
    else:
        oracle = GibbsOracle(lambda a: reward(a) / alpha, low, high, **kw)
    rng = rng if rng is not None else np.random.default_rng(seed)
    return oracle.sample(M, rng)


def grid_log_partition(log_target, low, high, n=400):
    """log of the integral of exp(log_target) over a box, midpoint grid."""
    axes = [lo + (np.arange(n) + 0.5) * (hi - lo) / n for lo, hi in zip(low, high)]
    cell = np.prod([(hi - lo) / n for lo, hi in zip(low, high)])
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(axes))
    return float(logsumexp(log_target(pts)) + np.log(cell))


def mode_coverage(particles, centers, radius):
    """Per-centre counts of particles within ``radius``, and the unassigned count.

    A particle is assigned to its nearest centre when within the radius.
    """
    if radius <= 0:
        raise UsageError("radius must be positive")
    centers = np.atleast_2d(centers)
    p = np.asarray(particles, dtype=np.float64).reshape(-1, centers.shape[1])
    if p.shape[0] == 0:
        return np.zeros(len(centers), dtype=int), 0
    d = np.sqrt(((p[:, None] - centers[None]) ** 2).sum(-1))
    nearest = d.argmin(1)
    hit = d[np.arange(len(p)), nearest] <= radius
    counts = np.bincount(nearest[hit], minlength=len(centers))
    return counts, int((~hit).sum())
