import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import softmax

from swfp.critic import SoftQCritic
from swfp.env import Batch, GaussMixBandit, bandit_oracle, grid_log_partition
from swfp.flow import block_backward, block_forward, run_blocks, sample_actions
from swfp.jko import (JkoConfig, UsageError, audit_block, entropy_estimate, free_energy,
                      gibbs_log_unnormalized, jko_objective, jko_particle_step, parallel_objective,
                      policy_update_step, potential_energy, zero_output_block)
from swfp.nn import Adam
from swfp.ot import w2_displacement, w2_displacement_grad

GAUSS_ENTROPY_2D = np.log(2 * np.pi * np.e)  # (d/2) ln(2 pi e) at d = 2


def bandit_potential(env):
    """Reward and its action gradient (zero on the clamped floor)."""
    def pot(x):
        d2 = ((x[:, None, :] - env.means[None]) ** 2).sum(-1)
        w = softmax(-0.5 * d2 / env.std ** 2, axis=1)
        g = (w[:, :, None] * (env.means[None] - x[:, None, :])).sum(1) / env.std ** 2
        live = env.mixture_logpdf(x) > env.floor
        return env.reward(None, x), env.reward_scale * g * live[:, None]
    return pot


def test_config_validation():
    with pytest.raises(UsageError):
        JkoConfig(tau=0.0)
    with pytest.raises(UsageError):
        JkoConfig(action_range=[1.0, -2.0])
    cfg = JkoConfig(tau=0.1, eps_balance=0.4, alpha=5.0, action_range=[2.0, 3.0])
    assert cfg.proximal_weight == pytest.approx(2.0) and cfg.beta == 5.0
    assert cfg.action_range == (2.0, 3.0)


# -- free energy and entropy -----------------------------------------------------------


def test_free_energy_of_standard_normal():
    x = np.random.default_rng(0).standard_normal((100_000, 2))
    logp = -0.5 * (x ** 2).sum(1) - np.log(2 * np.pi)
    assert free_energy(logp, np.zeros(len(x)), 1.0) == pytest.approx(-GAUSS_ENTROPY_2D, abs=0.02)


def test_free_energy_small_examples():
    assert free_energy(np.zeros(3), np.full(3, 2.5), 2.5) == -1.0
    with pytest.raises(UsageError):
        free_energy([], [], 1.0)
    with pytest.raises(UsageError):
        free_energy([0.0, 1.0], [0.0], 1.0)


def test_entropy_examples():
    x = np.random.default_rng(1).standard_normal((10_000, 2))
    assert abs(entropy_estimate(-0.5 * (x ** 2).sum(1) - np.log(2 * np.pi)) - GAUSS_ENTROPY_2D) < 0.05
    assert entropy_estimate(np.zeros(5)) == 0.0
    assert entropy_estimate(np.full(4, -np.log(36.0))) == pytest.approx(np.log(36.0))


def test_gibbs_log_unnormalized():
    assert gibbs_log_unnormalized(0.0, 3.0) == 0.0
    assert gibbs_log_unnormalized(3.0, 3.0) == 1.0
    with pytest.raises(UsageError):
        gibbs_log_unnormalized(1.0, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=10), st.floats(0.1, 10), st.sampled_from([2.0, 0.5, 4.0]))
def test_potential_scale_invariance(q, alpha, c):
    # powers of two keep the products exact
    q = np.array(q)
    assert potential_energy(c * q, c * alpha) == potential_energy(q, alpha)


def test_free_energy_at_gibbs_is_minus_log_z():
    env = GaussMixBandit()
    reward = lambda a: env.reward(None, a)
    coarse = grid_log_partition(reward, env.action_low, env.action_high, n=200)
    fine = grid_log_partition(reward, env.action_low, env.action_high, n=1000)
    x = bandit_oracle(env, 1.0).sample(20_000, np.random.default_rng(0))
    fe = free_energy(env.reward(None, x) - coarse, env.reward(None, x), 1.0)
    assert fe == pytest.approx(-fine, abs=1e-3)


# -- objectives ----------------------------------------------------------------------


def _cloud(seed, M=32):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((M, 2)), rng.standard_normal((M, 2)), rng.standard_normal(M), rng.standard_normal(M)


def test_objective_reduces_to_free_energy():
    x, y, lp, q = _cloud(0)
    cfg = JkoConfig()
    assert jko_objective(x, x, lp, q, cfg) == free_energy(lp, q, cfg.alpha)
    assert parallel_objective(x, x, x, lp, q, cfg) == free_energy(lp, q, cfg.alpha)
    huge = JkoConfig(tau=1e12)
    assert abs(jko_objective(x, y, lp, q, huge) - free_energy(lp, q, huge.alpha)) < 1e-9


def test_coincident_snapshots_double_weight():
    x, y, lp, q = _cloud(1)
    cfg = JkoConfig(tau=0.2)
    doubled = JkoConfig(tau=0.1)
    assert parallel_objective(x, x, y, lp, q, cfg) == pytest.approx(jko_objective(x, y, lp, q, doubled), rel=1e-14)


def test_action_range_rescales_proximal_term():
    x, y, lp, q = _cloud(2)
    cfg = JkoConfig(action_range=(2.0, 4.0))
    w2 = w2_displacement(x / [2.0, 4.0], y / [2.0, 4.0])
    assert jko_objective(x, y, lp, q, cfg) == pytest.approx(cfg.proximal_weight * w2 + free_energy(lp, q, cfg.alpha))


def test_tau_limit_direction():
    # block-parameter gradient at tau = 1e6 points along the free-energy gradient
    rng = np.random.default_rng(3)
    stack = zero_output_block(2, hidden=(8,), seed=3)
    for p in stack.net.params:
        p += 0.1 * rng.standard_normal(p.shape)
    x = rng.standard_normal((64, 2))
    pot = bandit_potential(GaussMixBandit())
    new, _, tape = block_forward(stack, 1, None, x)
    _, dq = pot(new)
    cfg = JkoConfig(tau=1e6, alpha=1.0)
    w = np.full(64, 1 / 64)
    fe_g, _ = block_backward(stack, tape, -dq / 64, w)
    full_g, _ = block_backward(stack, tape, cfg.proximal_weight * w2_displacement_grad(x, new) - dq / 64, w)
    a, b = np.concatenate([g.ravel() for g in fe_g]), np.concatenate([g.ravel() for g in full_g])
    assert a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) > 1 - 1e-9


# -- stationarity at the Gibbs measure -------------------------------------------------


def _param_grad(x, pot, cfg, seed=0):
    stack = zero_output_block(2, hidden=(16,), seed=seed)
    new, _, tape = block_forward(stack, 1, None, x)
    _, dq = pot(new)
    M = len(x)
    g = cfg.proximal_weight * w2_displacement_grad(x, new) - dq / (cfg.alpha * M)
    grads, _ = block_backward(stack, tape, g, np.full(M, 1.0 / M))
    return np.concatenate([q.ravel() for q in grads])


def _gradient_stats(draw, pot, cfg, K=10):
    grads = np.array([_param_grad(draw(), pot, cfg) for _ in range(K)])
    noise = np.sqrt(((grads - grads.mean(0)) ** 2).sum(1).mean())
    return grads, noise


def test_gibbs_gradient_within_noise_floor():
    env = GaussMixBandit()
    pot, cfg = bandit_potential(env), JkoConfig(alpha=1.0)
    oracle = bandit_oracle(env, 1.0)
    rng = np.random.default_rng(0)
    K = 10
    grads, noise = _gradient_stats(lambda: oracle.sample(512, rng), pot, cfg, K)
    assert np.linalg.norm(grads, axis=1).mean() < 10 * noise
    # sharper: the K-draw mean gradient sits at the level of its own noise
    assert np.linalg.norm(grads.mean(0)) < 2 * noise / np.sqrt(K)
    # negative control: modes twice too wide give a systematic gradient
    wide, noise = _gradient_stats(
        lambda: env.means[rng.integers(0, 8, 512)] + 2 * env.std * rng.standard_normal((512, 2)), pot, cfg, K)
    assert np.linalg.norm(wide.mean(0)) > 2 * noise / np.sqrt(K)


def test_one_gradient_step_from_gibbs_is_small():
    env = GaussMixBandit()
    logz = grid_log_partition(lambda a: env.reward(None, a), env.action_low, env.action_high, n=800)
    x = bandit_oracle(env, 1.0).sample(8192, np.random.default_rng(1))
    cfg = JkoConfig(alpha=1.0)
    _, _, hist = jko_particle_step(x, env.reward(None, x) - logz, bandit_potential(env), cfg,
                                   iters=1, lr=1e-2, optimizer="gd")
    assert abs(hist[1] - hist[0]) < 1e-3


def test_particle_step_rejects_unknown_optimizer():
    with pytest.raises(UsageError):
        jko_particle_step(np.zeros((2, 2)), np.zeros(2), bandit_potential(GaussMixBandit()),
                          JkoConfig(), optimizer="lbfgs")


def test_proximal_iterations_decrease_free_energy():
    env = GaussMixBandit()
    pot, cfg = bandit_potential(env), JkoConfig(alpha=1.0)
    rng = np.random.default_rng(2)
    x = 2.0 * rng.standard_normal((512, 2))
    logp = -0.5 * (x ** 2).sum(1) / 4.0 - np.log(2 * np.pi * 4.0)
    fes = [free_energy(logp, pot(x)[0], 1.0)]
    for k in range(8):
        x, logp, _ = jko_particle_step(x, logp, pot, cfg, iters=20, lr=1e-2, seed=k)
        fes.append(free_energy(logp, pot(x)[0], 1.0))
    steps = np.diff(fes)
    assert np.mean(steps <= 1e-3) >= 0.95
    assert fes[-1] < fes[0] - 0.5


# -- block updates ---------------------------------------------------------------------


def _zero_critic():
    critic = SoftQCritic.create(0, 2, hidden=(4,), seed=0)
    for net in (critic.online, critic.target):
        net.params[-2][...] = 0.0
        net.params[-1][...] = 0.0
    return critic


def _batch(stack, M, seed):
    _, traj = sample_actions(stack, None, M, seed=seed)
    return Batch(np.zeros((M, 0)), traj.points, np.zeros(M), np.zeros((M, 0)), np.ones(M, bool))


def test_policy_step_rejects_empty_batch(pretrained_toy):
    stack = pretrained_toy[0].untie()
    opts = [Adam(stack.block_params(n)) for n in range(1, 7)]
    empty = Batch(np.zeros((0, 0)), np.zeros((0, 7, 2)), np.zeros(0), np.zeros((0, 0)), np.zeros(0, bool))
    with pytest.raises(UsageError):
        policy_update_step(stack, stack.copy(), _zero_critic(), empty, 1, JkoConfig(), opts)
    with pytest.raises(UsageError):
        policy_update_step(stack, stack.copy(), _zero_critic(), _batch(stack, 4, 0), 1, JkoConfig(), opts[:2])


def test_flat_q_raises_entropy(pretrained_toy):
    stack = pretrained_toy[0].untie()
    critic, cfg = _zero_critic(), JkoConfig(alpha=1.0, block_count=6)
    rng = np.random.default_rng(0)
    opts = [Adam(stack.block_params(n), lr=3e-3) for n in range(1, 7)]

    def entropy():
        _, _, logp = sample_actions(stack, None, 4000, seed=99, with_logp=True)
        return entropy_estimate(logp)

    before = entropy()
    for epoch in range(5):
        target = stack.copy()
        for _ in range(12):
            policy_update_step(stack, target, critic, _batch(target, 256, int(rng.integers(1 << 30))),
                               int(rng.integers(1, 7)), cfg, opts)
    assert entropy() > before + 0.05


def test_step_reports_and_audit_agree_on_direction(pretrained_toy):
    stack = pretrained_toy[0].untie()
    critic, cfg = _zero_critic(), JkoConfig(alpha=1.0, block_count=6)
    opts = [Adam(stack.block_params(n), lr=3e-3) for n in range(1, 7)]
    target = stack.copy()
    rep = policy_update_step(stack, target, critic, _batch(target, 256, 0), 3, cfg, opts, inner_steps=5)
    assert rep.fe_out < rep.fe_in and not rep.free_energy_increased()
    audit = audit_block(stack, target, critic, _batch(target, 2048, 1), 3, cfg)
    assert audit.change < 0 and not audit.increased()


def test_triangle_on_recorded_snapshots(pretrained_toy):
    # the root displacement is a Euclidean norm over paired particles
    stack = pretrained_toy[0].untie()
    critic, cfg = _zero_critic(), JkoConfig(alpha=1.0, block_count=6)
    opts = [Adam(stack.block_params(n), lr=3e-3) for n in range(1, 7)]
    old = stack.copy()
    rng = np.random.default_rng(4)
    for _ in range(30):
        policy_update_step(stack, old, critic, _batch(old, 128, int(rng.integers(1 << 30))),
                           int(rng.integers(1, 7)), cfg, opts)
    z = np.random.default_rng(5).standard_normal((1000, 2))
    new_pts, _ = run_blocks(stack, None, z)
    old_pts, _ = run_blocks(old, None, z)
    d = lambda a, b: np.sqrt(w2_displacement(a, b))
    for n in range(2, 7):
        lhs = d(new_pts[:, n - 1], new_pts[:, n])
        assert lhs <= d(new_pts[:, n - 1], old_pts[:, n - 1]) + d(old_pts[:, n - 1], new_pts[:, n]) + 1e-12
