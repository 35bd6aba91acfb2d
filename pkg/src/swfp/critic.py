"""Soft Q critic with importance-weighted value targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .flow import broadcast_states, run_blocks
from .nn import Adam, ConfigurationError, DenseNet


@dataclass
class SoftQCritic:
    online: DenseNet
    target: DenseNet
    state_dim: int
    action_dim: int
    polyak_rate: float = 0.005
    gamma: float = 0.99
    value_samples: int = 32

    def __post_init__(self):
        if self.online.layer_dims != self.target.layer_dims:
            raise ConfigurationError("online and target nets differ in shape")
        if self.online.in_dim != self.state_dim + self.action_dim or self.online.out_dim != 1:
            raise ConfigurationError("critic net must map (s, a) to a scalar")

    @classmethod
    def create(cls, state_dim, action_dim, hidden=(64, 64), activation="tanh", seed=0, **kw):
        net = DenseNet.init([state_dim + action_dim, *hidden, 1], activation, seed)
        return cls(net, net.copy(), state_dim, action_dim, **kw)

    def _inputs(self, s, a):
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        if a.shape[1] != self.action_dim:
            raise ConfigurationError(f"action dim {a.shape[1]} != {self.action_dim}")
        return np.concatenate([broadcast_states(s, a.shape[0], self.state_dim), a], axis=1)


def q_value(critic: SoftQCritic, s, a, use_target=False):
    net = critic.target if use_target else critic.online
    return net.forward(critic._inputs(s, a))[:, 0]


def q_action_grad(critic: SoftQCritic, s, a, use_target=False):
    """Q(s, a) and dQ/da for a batch."""
    net = critic.target if use_target else critic.online
    x = critic._inputs(s, a)
    q, cache = net.forward(x, return_cache=True)
    _, gx = net.backward(x, np.ones_like(q), cache=cache)
    return q[:, 0], gx[:, critic.state_dim:]


# -- proposals ------------------------------------------------------------------
# A proposal returns actions (B, K, d) and their log-probabilities (B, K).


@dataclass
class GaussianProposal:
    action_dim: int
    std: float = 1.0

    def sample(self, states, K, rng):
        B = states.shape[0]
        a = self.std * rng.standard_normal((B, K, self.action_dim))
        logq = (-0.5 * (a ** 2).sum(-1) / self.std ** 2
                - self.action_dim * np.log(self.std) - 0.5 * self.action_dim * np.log(2 * np.pi))
        return a, logq


@dataclass
class UniformBoxProposal:
    low: np.ndarray
    high: np.ndarray

    def sample(self, states, K, rng):
        low, high = np.asarray(self.low, float), np.asarray(self.high, float)
        B = states.shape[0]
        a = rng.uniform(low, high, size=(B, K, len(low)))
        return a, np.full((B, K), -np.sum(np.log(high - low)))


@dataclass
class FlowProposal:
    """The flow policy itself, with exact change-of-variables log-probs."""

    stack: object

    def sample(self, states, K, rng):
        B, d = states.shape[0], self.stack.action_dim
        s = np.repeat(states, K, axis=0)
        a0 = rng.standard_normal((B * K, d))
        points, logps = run_blocks(self.stack, s, a0, with_div=True)
        return points[:, -1].reshape(B, K, d), logps[:, -1].reshape(B, K)


# -- value targets ----------------------------------------------------------------


def soft_value(critic: SoftQCritic, s_next, proposal_actions, proposal_logprobs):
    """log mean exp(Qbar - log q) + mean(log q), per state.

    ``proposal_actions`` is (B, K, d), ``proposal_logprobs`` (B, K).  States
    whose importance weights all underflow get ``-inf``.
    """
    acts = np.asarray(proposal_actions, dtype=np.float64)
    logq = np.asarray(proposal_logprobs, dtype=np.float64)
    if acts.ndim == 2:
        acts, logq = acts[None], logq[None]
    B, K, d = acts.shape
    if K < 1:
        raise ConfigurationError("need at least one proposal sample")
    s = np.repeat(broadcast_states(s_next, B, critic.state_dim), K, axis=0)
    q = q_value(critic, s, acts.reshape(B * K, d), use_target=True).reshape(B, K)
    with np.errstate(invalid="ignore"):
        v = logsumexp(q - logq, axis=1) - np.log(K) + logq.mean(axis=1)
    v = np.where(np.isfinite(v), v, -np.inf)
    return v


def bellman_target(critic: SoftQCritic, r, s_next, done, proposal=None, rng=None, K=None):
    """r + gamma * V(s'), with the bootstrap dropped on terminal transitions."""
    r = np.atleast_1d(np.asarray(r, dtype=np.float64))
    done = np.atleast_1d(np.asarray(done, dtype=bool))
    live = ~done
    target = r.copy()
    if critic.gamma > 0 and live.any():
        if proposal is None:
            raise ConfigurationError("non-terminal transitions need a value proposal")
        s_live = np.atleast_2d(s_next)[live] if critic.state_dim else np.zeros((live.sum(), 0))
        acts, logq = proposal.sample(s_live, K or critic.value_samples, rng)
        target[live] += critic.gamma * soft_value(critic, s_live, acts, logq)
    return target


def critic_update(critic: SoftQCritic, s, a, targets, optimizer: Adam):
    """One Adam step on 0.5 * mean((target - Q)^2); returns the pre-step loss.

    Returns NaN and leaves the network untouched when the loss is not finite.
    """
    x = critic._inputs(s, a)
    if x.shape[0] == 0:
        raise ConfigurationError("empty minibatch")
    q, cache = critic.online.forward(x, return_cache=True)
    err = q[:, 0] - targets
    loss = 0.5 * float(np.mean(err * err))
    if not np.isfinite(loss):
        optimizer.state.rejected += 1
        return float("nan")
    grads, _ = critic.online.backward(x, (err / len(err))[:, None], cache=cache)
    optimizer.step(grads)
    return loss


def polyak_update(critic: SoftQCritic, rate=None):
    rate = critic.polyak_rate if rate is None else rate
    if not 0.0 < rate <= 1.0:
        raise ConfigurationError("polyak rate must lie in (0, 1]")
    for pt, po in zip(critic.target.params, critic.online.params):
        if rate == 1.0:
            pt[...] = po
        else:
            pt *= 1.0 - rate
            pt += rate * po
