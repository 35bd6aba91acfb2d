"""Soft Bellman consistency of the critic on the 1-D action point mass.

    python scripts/bellman_check.py --steps 3000

Trains the critic against sampled soft targets with a uniform proposal on
[-1, 1], then compares Q(s, a) with r + gamma * (log int exp Q(s', .) - log 2)
on a held-out grid, the log-integral taken by quadrature.
"""

import argparse

import numpy as np

from swfp.critic import (SoftQCritic, UniformBoxProposal, bellman_target, critic_update,
                         polyak_update, q_value, soft_value)
from swfp.env import PointMassMDP, grid_log_partition
from swfp.nn import Adam
from swfp.trainer import cosine_lr


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--polyak", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    env = PointMassMDP(action_dim=1)
    rng = np.random.default_rng(args.seed)
    c = SoftQCritic.create(2, 1, hidden=(64, 64), seed=args.seed + 1, gamma=args.gamma,
                           polyak_rate=args.polyak, value_samples=32)
    opt = Adam(c.online.params, lr=args.lr)
    prop = UniformBoxProposal(env.action_low, env.action_high)
    for i in range(args.steps):
        opt.lr = cosine_lr(i, args.steps, args.lr, 1e-4)
        s, a = rng.uniform(-1.5, 1.5, (128, 2)), rng.uniform(-1, 1, (128, 1))
        s2, r, _, _ = env.step(s, a)
        loss = critic_update(c, s, a, bellman_target(c, r, s2, np.zeros(128, bool), prop, rng), opt)
        polyak_update(c)
        if (i + 1) % 500 == 0:
            print(f"step {i + 1:5d} loss {loss:.5f}")

    def v_quad(states, target=False):
        return np.array([grid_log_partition(
            lambda a: q_value(c, np.repeat(si[None], len(a), 0), a, use_target=target),
            env.action_low, env.action_high, 2001) for si in states])

    g = np.linspace(-1, 1, 21)
    S = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    resid = []
    for a in np.linspace(-0.95, 0.95, 9):
        aa = np.full((len(S), 1), a)
        s2, r, _, _ = env.step(S, aa)
        resid.append(q_value(c, S, aa) - (r + args.gamma * (v_quad(s2) - np.log(2))))
    resid = np.abs(resid)
    probe = S[::22]
    acts, logq = prop.sample(probe, 16384, np.random.default_rng(5))
    gap = np.abs(soft_value(c, probe, acts, logq) + np.log(2) - v_quad(probe, target=True))
    print(f"Bellman residual max {resid.max():.4f} mean {resid.mean():.4f}")
    print(f"sampled vs quadrature soft value, max gap {gap.max():.2e}")


if __name__ == "__main__":
    main()
