"""Block-decomposed flow policy.

A single velocity network ``v(t, s, a)`` (input ``[t, s, a]``) is integrated
over ``[0, 1]`` with fixed-step explicit midpoint.  The interval is cut into
``block_count`` equal blocks ``[t_{n-1}, t_n]`` with ``t_n = n / N``; block
``n`` is the map ``F_n`` that advances particles across its sub-interval in
``substeps`` midpoint steps.  All blocks share one global time grid so that
running the blocks back to back is bitwise identical to integrating the whole
interval in one go.

Pretraining fits one shared network.  ``FlowStack.untie`` hands every block
its own copy of it, so that later block-wise updates cannot leak into the
other blocks through the time input; an untied stack starts out computing
exactly the same map.

Log-densities follow the instantaneous change of variables
``d/dt log p = -div v``; the divergence is exact (one tangent direction per
action coordinate) and is integrated with the same midpoint rule as the
particles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .nn import Adam, ConfigurationError, DenseNet

MAX_EXACT_DIVERGENCE_DIM = 8
_LOG_2PI = np.log(2.0 * np.pi)


class IntegrationError(FloatingPointError):
    def __init__(self, block, substep):
        super().__init__(f"non-finite particles in block {block}, substep {substep}")
        self.block = block
        self.substep = substep


class UnsupportedDimensionError(ConfigurationError):
    pass


@dataclass
class FlowStack:
    net: DenseNet
    block_count: int
    action_dim: int
    state_dim: int = 0
    substeps: int = 4
    block_nets: list | None = None

    def __post_init__(self):
        if self.block_count < 1 or self.substeps < 1:
            raise ConfigurationError("block_count and substeps must be positive")
        if self.block_nets is not None:
            if len(self.block_nets) != self.block_count:
                raise ConfigurationError("need one block net per block")
            if any(b.layer_dims != self.net.layer_dims for b in self.block_nets):
                raise ConfigurationError("block nets must match the shared net's shape")
        if self.net.in_dim != 1 + self.state_dim + self.action_dim:
            raise ConfigurationError(
                f"velocity net takes {self.net.in_dim} inputs, expected "
                f"1 + {self.state_dim} + {self.action_dim}")
        if self.net.out_dim != self.action_dim:
            raise ConfigurationError("velocity net output must match action_dim")

    @classmethod
    def create(cls, action_dim, state_dim=0, block_count=5, hidden=(64, 64),
               substeps=4, activation="tanh", seed=0):
        net = DenseNet.init([1 + state_dim + action_dim, *hidden, action_dim],
                            activation, seed)
        return cls(net, block_count, action_dim, state_dim, substeps)

    def copy(self):
        blocks = None if self.block_nets is None else [b.copy() for b in self.block_nets]
        return FlowStack(self.net.copy(), self.block_count, self.action_dim,
                         self.state_dim, self.substeps, blocks)

    @property
    def tied(self):
        return self.block_nets is None

    def untie(self):
        """Copy with an independent net per block, initialised from the shared one."""
        return FlowStack(self.net.copy(), self.block_count, self.action_dim, self.state_dim,
                         self.substeps, [self.net.copy() for _ in range(self.block_count)])

    def net_for(self, n):
        return self.net if self.block_nets is None else self.block_nets[n - 1]

    def block_params(self, n):
        return self.net_for(n).params

    def with_blocks(self, block_count, substeps=None):
        """Same velocity field on a different block grid (parameters shared)."""
        if not self.tied:
            raise ConfigurationError("an untied stack has a fixed block grid")
        return FlowStack(self.net, block_count, self.action_dim, self.state_dim,
                         self.substeps if substeps is None else substeps)

    @property
    def schedule(self):
        return np.arange(self.block_count + 1) / self.block_count

    @property
    def time_grid(self):
        return np.linspace(0.0, 1.0, self.block_count * self.substeps + 1)

    def block_times(self, n):
        if not 1 <= n <= self.block_count:
            raise ConfigurationError(f"block index {n} outside 1..{self.block_count}")
        return self.time_grid[(n - 1) * self.substeps:n * self.substeps + 1]

    @property
    def action_slice(self):
        return slice(1 + self.state_dim, 1 + self.state_dim + self.action_dim)

    def inputs(self, t, s, a):
        t_col = np.full((a.shape[0], 1), t)
        return np.concatenate([t_col, s, a], axis=1)

    def block_of(self, t):
        return int(min(self.block_count, max(1, np.floor(t * self.block_count) + 1)))

    def velocity(self, t, s, a):
        s, a = self._prep(s, a)
        return self.net_for(self.block_of(t)).forward(self.inputs(t, s, a))

    def _prep(self, s, a):
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        if a.shape[1] != self.action_dim:
            raise ConfigurationError(f"actions have dim {a.shape[1]}, expected {self.action_dim}")
        return broadcast_states(s, a.shape[0], self.state_dim), a

    def _unit_tangents(self, k):
        if self.action_dim > MAX_EXACT_DIVERGENCE_DIM:
            raise UnsupportedDimensionError(
                f"exact divergence limited to action_dim <= {MAX_EXACT_DIVERGENCE_DIM}")
        e = np.zeros((self.action_dim, self.net.in_dim))
        e[np.arange(self.action_dim), 1 + self.state_dim + np.arange(self.action_dim)] = 1.0
        return np.broadcast_to(e, (k, *e.shape))


def broadcast_states(s, k, state_dim):
    if s is None:
        s = np.zeros((k, state_dim))
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 1:
        s = np.broadcast_to(s, (k, s.shape[0]))
    if s.shape == (1, state_dim) and k != 1:
        s = np.broadcast_to(s, (k, state_dim))
    if s.shape != (k, state_dim):
        raise ConfigurationError(f"states of shape {s.shape}, expected ({k}, {state_dim})")
    return s


def std_normal_logpdf(x):
    x = np.asarray(x)
    return -0.5 * np.sum(x * x, axis=-1) - 0.5 * x.shape[-1] * _LOG_2PI


# -- integration -------------------------------------------------------------------


def _midpoint_run(stack, s, a, times, with_div=False, tape=None, block=0):
    """Advance ``a`` across ``times``; returns ``(a, delta_logp)``.

    ``block = 0`` means the times may span several blocks; an untied stack
    then picks the net owning the midpoint of each step.  Descending
    ``times`` integrate backwards.
    """
    net = stack.net_for(block) if block else stack.net
    dlogp = np.zeros(a.shape[0])
    tangents = stack._unit_tangents(a.shape[0]) if with_div else None
    diag = np.arange(stack.action_dim)
    for k in range(len(times) - 1):
        t0 = times[k]
        h = times[k + 1] - t0
        if not block and not stack.tied:
            net = stack.net_for(stack.block_of(t0 + 0.5 * h))
        k1, c0 = net.forward(stack.inputs(t0, s, a), return_cache=True)
        a_mid = a + (0.5 * h) * k1
        x1 = stack.inputs(t0 + 0.5 * h, s, a_mid)
        if with_div:
            k2, jv, c1 = net.forward_tangent(x1, tangents)
            dlogp = dlogp - h * jv[:, diag, diag].sum(axis=1)
        else:
            k2, c1 = net.forward(x1, return_cache=True)
        a = a + h * k2
        if not np.all(np.isfinite(a)):
            raise IntegrationError(block, k)
        if tape is not None:
            tape.append((h, c0, c1))
    return a, dlogp


def integrate_block(stack, n, s, particles, with_div=False):
    """Push particles through block ``n`` (1-based).

    Returns the new particles, or ``(particles, delta_logp)`` when
    ``with_div`` is set.
    """
    s, a = stack._prep(s, particles)
    if not np.all(np.isfinite(a)):
        raise IntegrationError(n, -1)
    out, dlogp = _midpoint_run(stack, s, a, stack.block_times(n), with_div, block=n)
    return (out, dlogp) if with_div else out


def integrate(stack, s, particles, steps=None, with_div=False):
    """Integrate the whole interval [0, 1] in ``steps`` midpoint steps.

    With the default ``steps = N * substeps`` the grid coincides with the
    block grid.
    """
    s, a = stack._prep(s, particles)
    times = stack.time_grid if steps is None else np.linspace(0.0, 1.0, steps + 1)
    out, dlogp = _midpoint_run(stack, s, a, times, with_div)
    return (out, dlogp) if with_div else out


def inverse(stack, s, actions):
    """Approximate source points for ``actions``: the midpoint rule run from 1 to 0.

    This is not the exact inverse of the discrete forward map; the
    round-trip error is of the order of the local truncation error.
    """
    s, a = stack._prep(s, actions)
    out, _ = _midpoint_run(stack, s, a, stack.time_grid[::-1])
    return out


@dataclass
class ActionTrajectories:
    """Particle positions at every block boundary: ``points[i, n] = a_(n)``."""

    points: np.ndarray
    states: np.ndarray
    seed: int | None = None

    @property
    def source(self):
        return self.points[:, 0]

    @property
    def final(self):
        return self.points[:, -1]

    def __len__(self):
        return self.points.shape[0]

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for s, blocks in zip(self.states, self.points):
                fh.write(json.dumps({"seed": self.seed, "state": s.tolist(),
                                     "blocks": blocks.tolist()}) + "\n")

    @classmethod
    def from_jsonl(cls, path):
        rows = [json.loads(line) for line in open(path) if line.strip()]
        pts = np.array([r["blocks"] for r in rows], dtype=np.float64)
        states = np.array([r["state"] for r in rows], dtype=np.float64).reshape(len(rows), -1)
        return cls(pts, states, rows[0]["seed"] if rows else None)


def run_blocks(stack, s, a0, with_div=False, upto=None):
    """Run blocks 1..upto from ``a0``; returns ``(points, logp)``.

    ``points`` has shape ``(M, upto + 1, d)``; ``logp`` holds log-densities
    at every boundary (``None`` unless ``with_div``).
    """
    upto = stack.block_count if upto is None else upto
    s, a = stack._prep(s, a0)
    pts = [a]
    logps = [std_normal_logpdf(a)] if with_div else None
    for n in range(1, upto + 1):
        a, dl = _midpoint_run(stack, s, a, stack.block_times(n), with_div, block=n)
        pts.append(a)
        if with_div:
            logps.append(logps[-1] + dl)
    points = np.stack(pts, axis=1)
    return points, (np.stack(logps, axis=1) if with_div else None)


def sample_actions(stack, s, M, rng=None, seed=None, with_logp=False):
    """Draw M actions per call; returns ``(final_particles, trajectories[, logp])``."""
    if M < 1:
        raise ConfigurationError("M must be >= 1")
    if rng is None:
        rng = np.random.default_rng(seed)
    a0 = rng.standard_normal((M, stack.action_dim))
    states = broadcast_states(s, M, stack.state_dim)
    points, logps = run_blocks(stack, states, a0, with_div=with_logp)
    traj = ActionTrajectories(points, np.array(states), seed)
    if with_logp:
        return points[:, -1], traj, logps[:, -1]
    return points[:, -1], traj


def log_density(stack, s, trajectory):
    """log pi(a_(N) | s), re-integrated from the stored source points.

    ``trajectory`` is an :class:`ActionTrajectories` or an array of source
    noise ``a_(0)`` of shape ``(M, d)``.
    """
    a0 = trajectory.source if isinstance(trajectory, ActionTrajectories) else trajectory
    _, logps = run_blocks(stack, s, a0, with_div=True)
    return logps[:, -1]


# -- differentiable block pass ---------------------------------------------------------


def block_forward(stack, n, s, particles, with_div=True):
    """Block ``n`` with a tape for :func:`block_backward`.

    Returns ``(new_particles, delta_logp, tape)``.
    """
    s, a = stack._prep(s, particles)
    tape = []
    out, dlogp = _midpoint_run(stack, s, a, stack.block_times(n), with_div, tape, block=n)
    return out, dlogp, (tape, with_div, stack.net_for(n))


def block_backward(stack, tape, g_particles, g_dlogp=None):
    """Adjoint of :func:`block_forward`.

    Returns ``(param_grads, grad_wrt_input_particles)`` for the scalar
    ``sum(g_particles * out) + sum(g_dlogp * delta_logp)``.
    """
    steps, with_div, net = tape
    cols = stack.action_slice
    d = stack.action_dim
    g_a = np.array(g_particles, dtype=np.float64)
    grads = [np.zeros_like(p) for p in net.params]
    if with_div and g_dlogp is not None:
        g_dlogp = np.asarray(g_dlogp, dtype=np.float64)
    else:
        g_dlogp = None
    diag = np.arange(d)
    for h, c0, c1 in reversed(steps):
        g_k2 = h * g_a
        if with_div:
            g_jv = np.zeros((g_a.shape[0], d, d))
            if g_dlogp is not None:
                g_jv[:, diag, diag] = (-h * g_dlogp)[:, None]
            pg, gx1, _ = net.backward_tangent(c1, g_k2, g_jv)
        else:
            pg, gx1 = net.backward(None, g_k2, cache=c1)
        for acc, g in zip(grads, pg):
            acc += g
        g_mid = gx1[:, cols]
        pg, gx0 = net.backward(None, (0.5 * h) * g_mid, cache=c0)
        for acc, g in zip(grads, pg):
            acc += g
        g_a = g_a + g_mid + gx0[:, cols]
    return grads, g_a


# -- pretraining ---------------------------------------------------------------


def cfm_loss_and_grads(stack, s, a1, rng=None, a0=None, t=None):
    """Conditional flow-matching loss on the linear path and its gradient.

    ``a_t = (1 - t) a0 + t a1`` with target velocity ``a1 - a0``; the loss
    is the batch mean of the squared error summed over action coordinates.
    """
    s, a1 = stack._prep(s, a1)
    B = a1.shape[0]
    if B == 0:
        raise ConfigurationError("empty batch")
    rng = rng if rng is not None else np.random.default_rng()
    if a0 is None:
        a0 = rng.standard_normal(a1.shape)
    if t is None:
        t = rng.uniform(0.0, 1.0, size=(B, 1))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (B, 1))
    at = (1.0 - t) * a0 + t * a1
    x = np.concatenate([t, s, at], axis=1)
    pred, cache = stack.net.forward(x, return_cache=True)
    err = pred - (a1 - a0)
    loss = float(np.mean(np.sum(err * err, axis=1)))
    grads, _ = stack.net.backward(x, (2.0 / B) * err, cache=cache)
    return loss, grads


def cfm_pretrain_step(stack, s, a1, optimizer: Adam, rng=None, a0=None, t=None):
    loss, grads = cfm_loss_and_grads(stack, s, a1, rng, a0, t)
    optimizer.step(grads)
    return loss
