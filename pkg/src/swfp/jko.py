"""Wasserstein-proximal (JKO) policy objectives and block updates.

Each flow block is trained to take one proximal step of the free energy

    E(pi) = E_pi[log pi] - E_pi[Q(s, a)] / alpha

whose minimiser is the Gibbs policy ``exp(Q / alpha)``.  The Wasserstein
term uses the paired-particle displacement, weighted by
``eps_balance / (2 tau)`` and measured in units of ``action_range``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .critic import q_action_grad, q_value
from .flow import FlowStack, block_backward, block_forward, integrate_block, run_blocks
from .nn import Adam
from .ot import w2_displacement, w2_displacement_grad


class UsageError(ValueError):
    pass


@dataclass
class JkoConfig:
    tau: float = 0.1
    alpha: float = 4.0
    eps_balance: float = 0.4
    block_count: int = 5
    particle_count: int = 1024
    action_range: float | tuple = 1.0

    def __post_init__(self):
        if isinstance(self.action_range, list):
            self.action_range = tuple(self.action_range)
        if not np.all(np.asarray(self.action_range, dtype=float) > 0):
            raise UsageError("action_range must be positive")
        for name in ("tau", "alpha", "eps_balance"):
            if not getattr(self, name) > 0:
                raise UsageError(f"{name} must be positive")
        if self.block_count < 1 or self.particle_count < 1:
            raise UsageError("block_count and particle_count must be positive")

    @property
    def beta(self):
        # entropy temperature alias
        return self.alpha

    @property
    def proximal_weight(self):
        return self.eps_balance / (2.0 * self.tau)

    @property
    def metric_scale(self):
        return np.asarray(self.action_range, dtype=np.float64)


def _check(logpi, q_values):
    logpi = np.asarray(logpi, dtype=np.float64)
    q_values = np.asarray(q_values, dtype=np.float64)
    if logpi.size == 0:
        raise UsageError("free energy of an empty particle set")
    if logpi.shape != q_values.shape:
        raise UsageError("log-densities and Q values differ in length")
    return logpi, q_values


def entropy_estimate(logpi):
    logpi = np.asarray(logpi, dtype=np.float64)
    if logpi.size == 0:
        raise UsageError("entropy of an empty particle set")
    return float(-logpi.mean())


def potential_energy(q_values, alpha):
    return float(-np.mean(q_values) / alpha)


def free_energy(logpi, q_values, alpha):
    logpi, q_values = _check(logpi, q_values)
    return float(logpi.mean()) + potential_energy(q_values, alpha)


def gibbs_log_unnormalized(q_value, alpha):
    if alpha <= 0:
        raise UsageError("alpha must be positive")
    return np.asarray(q_value) / alpha


def jko_objective(prev, new, logpi, q_values, cfg: JkoConfig):
    return cfg.proximal_weight * w2_displacement(prev, new, cfg.metric_scale) + free_energy(logpi, q_values, cfg.alpha)


def parallel_objective(prev_epoch_n, prev_epoch_n1, new, logpi, q_values, cfg: JkoConfig):
    """Free energy plus proximal terms to both stored snapshots of the block.

    ``prev_epoch_n`` is the block's input under the snapshot parameters and
    ``prev_epoch_n1`` its output; all three sets are paired by index.
    """
    m = cfg.metric_scale
    w2 = w2_displacement(prev_epoch_n, new, m) + w2_displacement(prev_epoch_n1, new, m)
    return cfg.proximal_weight * w2 + free_energy(logpi, q_values, cfg.alpha)


# -- block update ---------------------------------------------------------------------


@dataclass
class PolicyStepReport:
    block: int
    w2_term: float
    entropy_term: float
    potential_term: float
    total: float
    fe_in: float
    fe_out: float
    fe_change_se: float = 0.0
    skipped: bool = False

    def free_energy_increased(self, z=2.0, tol=1e-3):
        """True when fe_out exceeds fe_in by more than ``tol`` and ``z`` paired standard errors."""
        return self.fe_out - self.fe_in > max(tol, z * self.fe_change_se)

    def as_dict(self):
        return asdict(self)


def _block_terms(stack, critic, states, start, old_end, base, n, cfg):
    new, dlogp, tape = block_forward(stack, n, states, start)
    logpi = base + dlogp
    q, dq = q_action_grad(critic, states, new)
    c, m = cfg.proximal_weight, cfg.metric_scale
    w2 = c * (w2_displacement(start, new, m) + w2_displacement(old_end, new, m))
    B = new.shape[0]
    g_new = (c * (w2_displacement_grad(start, new, m) + w2_displacement_grad(old_end, new, m))
             - dq / (cfg.alpha * B))
    return w2, logpi, q, g_new, tape


def policy_update_step(stack: FlowStack, target_stack: FlowStack, critic, batch, n,
                       cfg: JkoConfig, optimizer, inner_steps=1, minibatch=None, rng=None):
    """Approximately solve the parallel JKO problem for block ``n``.

    The snapshot stack ``target_stack`` supplies the block's input particles,
    their log-densities and the old block output; only block ``n`` of
    ``stack`` is differentiated.  The critic is read, never written.
    ``optimizer`` is one Adam over the shared net, or a sequence with one
    Adam per block of an untied stack.  ``inner_steps`` Adam iterations are
    taken, each on ``minibatch`` rows drawn from ``batch`` (all rows when
    None).  The loss terms are those of the first iteration; ``fe_out`` is
    measured on the whole batch after the last one.
    """
    states, traj = batch.s, batch.trajectory
    B = traj.shape[0]
    if B == 0:
        raise UsageError("empty minibatch")
    if traj.shape[1] != stack.block_count + 1:
        raise UsageError("trajectory length does not match the block count")
    if inner_steps < 1:
        raise UsageError("inner_steps must be positive")
    if isinstance(optimizer, Adam):
        opt = optimizer
    elif len(optimizer) == stack.block_count:
        opt = optimizer[n - 1]
    else:
        raise UsageError("need one optimizer per block")
    rng = rng if rng is not None else np.random.default_rng()
    states = np.asarray(states, dtype=np.float64).reshape(B, -1)
    pts, logps = run_blocks(target_stack, states, traj[:, 0], with_div=True, upto=n)
    start, old_end, base = pts[:, n - 1], pts[:, n], logps[:, n - 1]
    q_in = q_value(critic, states, start)
    fe_in = float(base.mean()) + potential_energy(q_in, cfg.alpha)

    report = None
    for k in range(inner_steps):
        rows = slice(None) if minibatch is None or minibatch >= B else rng.choice(B, minibatch, replace=False)
        w2, logpi, q, g_new, tape = _block_terms(stack, critic, states[rows], start[rows],
                                                 old_end[rows], base[rows], n, cfg)
        if k == 0:
            ent, pot = float(logpi.mean()), potential_energy(q, cfg.alpha)
            report = PolicyStepReport(n, w2, ent, pot, w2 + ent + pot, fe_in, np.nan)
        if not np.isfinite(w2 + logpi.mean() + q.mean()):
            report.skipped = True
            opt.state.rejected += 1
            break
        grads, _ = block_backward(stack, tape, g_new, np.full(len(logpi), 1.0 / len(logpi)))
        if not opt.step(grads):
            report.skipped = True
            break

    new, dlogp, _ = block_forward(stack, n, states, start)
    q_out = q_value(critic, states, new)
    logpi = base + dlogp
    report.fe_out = float(logpi.mean()) + potential_energy(q_out, cfg.alpha)
    change = (logpi - q_out / cfg.alpha) - (base - q_in / cfg.alpha)
    report.fe_change_se = float(change.std() / np.sqrt(B)) if B > 1 else 0.0
    return report


@dataclass
class BlockAudit:
    block: int
    fe_in: float
    fe_out: float
    se: float

    @property
    def change(self):
        return self.fe_out - self.fe_in

    def increased(self, z=2.0, tol=1e-3):
        """True when the free energy rose by more than ``tol`` and ``z`` paired standard errors."""
        return self.change > max(tol, z * self.se)


def audit_block(stack: FlowStack, target_stack: FlowStack, critic, batch, n, cfg: JkoConfig):
    """Free energy entering block ``n`` (snapshot chain) and leaving it (current block).

    Use a batch the update did not see so the comparison is out of sample.
    """
    states, traj = batch.s, batch.trajectory
    B = traj.shape[0]
    if B == 0:
        raise UsageError("empty audit batch")
    states = np.asarray(states, dtype=np.float64).reshape(B, -1)
    pts, logps = run_blocks(target_stack, states, traj[:, 0], with_div=True, upto=n - 1)
    start, base = pts[:, -1], logps[:, -1]
    new, dlogp = integrate_block(stack, n, states, start, with_div=True)
    f_in = base - q_value(critic, states, start) / cfg.alpha
    f_out = base + dlogp - q_value(critic, states, new) / cfg.alpha
    se = float((f_out - f_in).std() / np.sqrt(B)) if B > 1 else 0.0
    return BlockAudit(n, float(f_in.mean()), float(f_out.mean()), se)


# -- stand-alone particle JKO steps ------------------------------------------------------


def zero_output_block(action_dim, hidden=(32, 32), substeps=4, seed=0, activation="tanh"):
    """A one-block flow whose velocity starts at exactly zero."""
    stack = FlowStack.create(action_dim, 0, block_count=1, hidden=hidden,
                             substeps=substeps, activation=activation, seed=seed)
    stack.net.params[-2][...] = 0.0
    stack.net.params[-1][...] = 0.0
    return stack


def jko_particle_step(particles, logp, potential, cfg: JkoConfig, iters=100, lr=1e-2,
                      hidden=(32, 32), substeps=4, seed=0, return_block=False,
                      optimizer="adam"):
    """Approximately solve one JKO step for a particle cloud.

    A fresh zero-initialised block is fitted to minimise ``jko_objective``
    starting from ``particles`` with known log-densities ``logp``.
    ``potential(a)`` returns ``(Q(a), dQ/da)``.  Returns
    ``(new_particles, new_logp, objective_history)``, plus the fitted
    one-block stack when ``return_block`` is set (to push fresh particles
    through the same map).

    ``optimizer="gd"`` uses plain gradient descent.  Adam rescales every
    coordinate to a step of about ``lr`` however small the gradient, so near
    a stationary cloud it turns pure sampling noise into a finite move.
    """
    if optimizer not in ("adam", "gd"):
        raise UsageError(f"unknown optimizer {optimizer!r}")
    x = np.asarray(particles, dtype=np.float64)
    logp = np.asarray(logp, dtype=np.float64)
    M = x.shape[0]
    stack = zero_output_block(x.shape[1], hidden, substeps, seed)
    opt = Adam(stack.net.params, lr=lr) if optimizer == "adam" else None
    history = []
    for _ in range(iters):
        new, dl, tape = block_forward(stack, 1, None, x)
        q, dq = potential(new)
        history.append(jko_objective(x, new, logp + dl, q, cfg))
        g_new = cfg.proximal_weight * w2_displacement_grad(x, new, cfg.metric_scale) - dq / (cfg.alpha * M)
        grads, _ = block_backward(stack, tape, g_new, np.full(M, 1.0 / M))
        if opt is None:
            for p, g in zip(stack.net.params, grads):
                p -= lr * g
        else:
            opt.step(grads)
    new, dl, _ = block_forward(stack, 1, None, x)
    q, _ = potential(new)
    history.append(jko_objective(x, new, logp + dl, q, cfg))
    if return_block:
        return new, logp + dl, history, stack
    return new, logp + dl, history
