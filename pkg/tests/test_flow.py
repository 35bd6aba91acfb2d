import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swfp.flow import (ActionTrajectories, FlowStack, IntegrationError, UnsupportedDimensionError,
                       block_backward, block_forward, cfm_loss_and_grads, cfm_pretrain_step,
                       integrate, integrate_block, inverse, log_density, run_blocks, sample_actions,
                       std_normal_logpdf)
from swfp.env import mode_coverage
from swfp.nn import Adam, ConfigurationError, DenseNet
from swfp.ot import mmd_rbf


def linear_field(A, b=None, block_count=1, substeps=4):
    """Stack whose velocity is ``A a + b`` regardless of t."""
    A = np.atleast_2d(A)
    d = A.shape[0]
    W = np.vstack([np.zeros((1, d)), A.T])
    b = np.zeros(d) if b is None else np.asarray(b, dtype=float)
    return FlowStack(DenseNet([d + 1, d], [W, b]), block_count, d, 0, substeps)


def zero_field(d=2, block_count=3, substeps=4):
    return linear_field(np.zeros((d, d)), block_count=block_count, substeps=substeps)


# -- integration -------------------------------------------------------------------


def test_zero_field_leaves_particles():
    x = np.random.default_rng(0).standard_normal((20, 2))
    stack = zero_field()
    for n in (1, 2, 3):
        assert np.array_equal(integrate_block(stack, n, None, x), x)


def test_constant_field_moves_by_c_over_n():
    c = np.array([0.7, -1.3])
    stack = linear_field(np.zeros((2, 2)), c, block_count=5)
    x = np.random.default_rng(1).standard_normal((10, 2))
    assert np.allclose(integrate_block(stack, 2, None, x), x + c / 5, atol=1e-14)


def test_linear_field_substep_map():
    # midpoint on v = -a multiplies by 1 - h + h^2/2 per substep
    stack = linear_field(-np.eye(2), block_count=2, substeps=4)
    x = np.random.default_rng(2).standard_normal((5, 2))
    h = 1.0 / 8
    out = integrate_block(stack, 1, None, x)
    assert np.allclose(out, x * (1 - h + h * h / 2) ** 4, rtol=1e-13)
    assert np.allclose(out, x * np.exp(-0.5), atol=10 * h ** 2)


def test_midpoint_order():
    stack = linear_field(-np.eye(2))
    x = np.array([[1.0, -2.0]])
    exact = x * np.exp(-1.0)
    errs = [np.abs(integrate(stack, None, x, steps=k) - exact).max() for k in (8, 16, 32)]
    for coarse, fine in zip(errs, errs[1:]):
        assert 3.5 <= coarse / fine <= 4.5


def test_blocks_compose_bitwise():
    stack = FlowStack.create(2, 0, block_count=4, hidden=(16,), seed=3)
    x = np.random.default_rng(3).standard_normal((50, 2))
    points, _ = run_blocks(stack, None, x)
    assert np.array_equal(points[:, -1], integrate(stack, None, x))
    y = x
    for n in range(1, 5):
        y = integrate_block(stack, n, None, y)
    assert np.array_equal(y, points[:, -1])


def test_untied_stack_is_same_map():
    stack = FlowStack.create(2, 1, block_count=3, hidden=(16,), seed=4)
    x = np.random.default_rng(4).standard_normal((30, 2))
    s = np.random.default_rng(5).standard_normal((30, 1))
    untied = stack.untie()
    a, la = run_blocks(stack, s, x, with_div=True)
    b, lb = run_blocks(untied, s, x, with_div=True)
    assert np.array_equal(a, b) and np.array_equal(la, lb)
    assert np.array_equal(integrate(untied, s, x), a[:, -1])


def test_untied_blocks_update_independently():
    untied = FlowStack.create(2, 0, block_count=3, hidden=(8,), seed=0).untie()
    before = untied.copy()
    untied.block_params(2)[0] += 1.0
    x = np.ones((4, 2))
    assert np.array_equal(integrate_block(untied, 1, None, x), integrate_block(before, 1, None, x))
    assert not np.array_equal(integrate_block(untied, 2, None, x), integrate_block(before, 2, None, x))
    with pytest.raises(ConfigurationError):
        untied.with_blocks(2)


def test_non_finite_input_raises_with_block():
    stack = zero_field()
    with pytest.raises(IntegrationError) as info:
        integrate_block(stack, 2, None, np.array([[np.nan, 0.0]]))
    assert info.value.block == 2


def test_overflow_reports_substep():
    stack = linear_field(1e300 * np.eye(1), block_count=2, substeps=3)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(IntegrationError) as info:
            integrate_block(stack, 1, None, np.array([[1e10]]))
    assert info.value.substep == 0


def test_block_index_checked():
    with pytest.raises(ConfigurationError):
        integrate_block(zero_field(block_count=3), 4, None, np.zeros((1, 2)))


# -- sampling and log-density ----------------------------------------------------------


def test_zero_field_samples_are_source_draws():
    stack = zero_field(block_count=1)
    acts, traj = sample_actions(stack, None, 100, seed=9)
    assert np.array_equal(acts, np.random.default_rng(9).standard_normal((100, 2)))
    assert traj.points.shape == (100, 2, 2)


def test_sampling_reproducible(tmp_path):
    stack = FlowStack.create(2, 0, block_count=3, hidden=(8,), seed=1)
    a1, t1 = sample_actions(stack, None, 40, seed=5)
    a2, t2 = sample_actions(stack, None, 40, seed=5)
    assert np.array_equal(a1, a2) and np.array_equal(t1.points, t2.points)
    t1.to_jsonl(tmp_path / "traj.jsonl")
    back = ActionTrajectories.from_jsonl(tmp_path / "traj.jsonl")
    assert np.array_equal(back.points, t1.points) and back.seed == 5
    assert np.array_equal(log_density(stack, None, back), log_density(stack, None, t1))


def test_sample_rejects_zero_m():
    with pytest.raises(ConfigurationError):
        sample_actions(zero_field(), None, 0, seed=0)


def test_zero_field_log_density_is_gaussian():
    stack = zero_field()
    x = np.random.default_rng(6).standard_normal((25, 2))
    assert np.array_equal(log_density(stack, None, x), std_normal_logpdf(x))


def test_contracting_field_adds_d():
    for d in (1, 2, 3):
        stack = linear_field(-np.eye(d), block_count=2)
        x = np.random.default_rng(d).standard_normal((7, d))
        assert np.allclose(log_density(stack, None, x) - std_normal_logpdf(x), d, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4), st.lists(st.floats(-2, 2), min_size=2, max_size=2))
def test_affine_field_density(entries, b):
    # along a trajectory of a' = A a + b the density scales by exp(-t tr A)
    A = np.array(entries).reshape(2, 2)
    stack = linear_field(A, b, block_count=3)
    x = np.random.default_rng(0).standard_normal((6, 2))
    assert np.allclose(log_density(stack, None, x), std_normal_logpdf(x) - np.trace(A), atol=1e-6)


def test_shear_field_density_matches_pushforward():
    # A nilpotent: the midpoint map equals the exact flow a -> (I + A) a + b
    A, b = np.array([[0.0, 0.8], [0.0, 0.0]]), np.array([0.3, -0.2])
    stack = linear_field(A, b, block_count=2)
    x = np.random.default_rng(7).standard_normal((30, 2))
    y = integrate(stack, None, x)
    assert np.allclose(y, x @ (np.eye(2) + A).T + b + 0.5 * b @ A.T, atol=1e-12)
    src = np.linalg.solve(np.eye(2) + A, (y - b - 0.5 * b @ A.T).T).T
    assert np.allclose(log_density(stack, None, x), std_normal_logpdf(src), atol=1e-6)


def test_divergence_dimension_limit():
    stack = FlowStack.create(9, 0, block_count=1, hidden=(4,))
    with pytest.raises(UnsupportedDimensionError):
        log_density(stack, None, np.zeros((1, 9)))
    integrate(stack, None, np.zeros((1, 9)))  # particles alone are fine


def test_inverse_round_trip_small_error():
    stack = FlowStack.create(2, 0, block_count=4, hidden=(16,), seed=2)
    x = np.random.default_rng(8).standard_normal((20, 2))
    assert np.abs(inverse(stack, None, integrate(stack, None, x)) - x).max() < 1e-3


def test_trained_density_integrates_to_one(pretrained_toy):
    stack, _ = pretrained_toy
    n, lo, hi = 120, -6.0, 6.0
    axis = lo + (np.arange(n) + 0.5) * (hi - lo) / n
    grid = np.stack(np.meshgrid(axis, axis, indexing="ij"), -1).reshape(-1, 2)
    logp = log_density(stack, None, inverse(stack, None, grid))
    total = np.exp(logp).sum() * ((hi - lo) / n) ** 2
    assert abs(total - 1.0) < 0.02


# -- gradients through a block ---------------------------------------------------------


def _block_loss(stack, x, wp, wl):
    out, dl, _ = block_forward(stack, 2, None, x)
    return float((wp * out).sum() + (wl * dl).sum())


@pytest.mark.parametrize("seed", range(10))
def test_block_backward_matches_finite_difference(seed):
    rng = np.random.default_rng(seed)
    stack = FlowStack.create(2, 0, block_count=3, hidden=(6,), substeps=2, seed=seed)
    x = rng.standard_normal((4, 2))
    wp, wl = rng.standard_normal((4, 2)), rng.standard_normal(4)
    _, _, tape = block_forward(stack, 2, None, x)
    grads, gx = block_backward(stack, tape, wp, wl)
    eps = 1e-6
    for p, g in zip(stack.net.params, grads):
        for idx in np.ndindex(*p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = _block_loss(stack, x, wp, wl)
            p[idx] = old - eps
            down = _block_loss(stack, x, wp, wl)
            p[idx] = old
            fd = (up - down) / (2 * eps)
            assert abs(fd - g[idx]) <= 1e-4 * max(abs(fd), abs(g[idx]), 1e-6)
    for idx in np.ndindex(*x.shape):
        e = np.zeros_like(x)
        e[idx] = eps
        fd = (_block_loss(stack, x + e, wp, wl) - _block_loss(stack, x - e, wp, wl)) / (2 * eps)
        assert abs(fd - gx[idx]) <= 1e-4 * max(abs(fd), 1e-6)


# -- pretraining ---------------------------------------------------------------------


def test_cfm_zero_loss_on_interpolant():
    a0, a1 = np.array([[0.2, -0.4]]), np.array([[1.0, 1.5]])
    net = DenseNet([3, 2], [np.zeros((3, 2)), (a1 - a0)[0]])
    stack = FlowStack(net, 2, 2)
    loss, _ = cfm_loss_and_grads(stack, None, a1, a0=a0, t=0.3)
    assert loss == 0.0


def test_cfm_zero_net_expected_loss():
    stack = zero_field()
    a1 = np.ones((200_000, 2))
    loss, _ = cfm_loss_and_grads(stack, None, a1, rng=np.random.default_rng(0))
    assert loss == pytest.approx(4.0, abs=0.03)


def test_cfm_gradient_finite_difference():
    rng = np.random.default_rng(1)
    stack = FlowStack.create(2, 1, block_count=2, hidden=(5,), seed=1)
    s, a1 = rng.standard_normal((8, 1)), rng.standard_normal((8, 2))
    a0, t = rng.standard_normal((8, 2)), rng.uniform(size=8)
    _, grads = cfm_loss_and_grads(stack, s, a1, a0=a0, t=t)
    eps = 1e-6
    for p, g in zip(stack.net.params, grads):
        for idx in np.ndindex(*p.shape):
            old = p[idx]
            p[idx] = old + eps
            up, _ = cfm_loss_and_grads(stack, s, a1, a0=a0, t=t)
            p[idx] = old - eps
            down, _ = cfm_loss_and_grads(stack, s, a1, a0=a0, t=t)
            p[idx] = old
            assert abs((up - down) / (2 * eps) - g[idx]) < 1e-4 * max(1.0, abs(g[idx]))


def test_cfm_step_reduces_loss_on_fixed_batch():
    rng = np.random.default_rng(2)
    stack = FlowStack.create(2, 0, block_count=2, hidden=(16,), seed=2)
    a1, a0, t = rng.standard_normal((64, 2)) + 3.0, rng.standard_normal((64, 2)), rng.uniform(size=64)
    opt = Adam(stack.net.params, lr=1e-2)
    first = cfm_pretrain_step(stack, None, a1, opt, a0=a0, t=t)
    for _ in range(50):
        last = cfm_pretrain_step(stack, None, a1, opt, a0=a0, t=t)
    assert last < 0.5 * first


def test_empty_cfm_batch_rejected():
    with pytest.raises(ConfigurationError):
        cfm_loss_and_grads(zero_field(), None, np.zeros((0, 2)))


def test_pretraining_plateau_and_pushforward(pretrained_toy, toy_env):
    stack, losses = pretrained_toy
    assert losses[-300:].mean() < 0.75 * losses[:100].mean()
    assert abs(losses[-300:].mean() - losses[-600:-300].mean()) < 0.05
    data = toy_env.sample_data(1000, np.random.default_rng(5))
    acts, _ = sample_actions(stack, None, 1000, seed=1)
    # two independent 1000-draw mixture samples give |MMD| below 1e-3
    assert mmd_rbf(acts, data) < 5e-3
    counts, _ = mode_coverage(acts, toy_env.means, 3 * toy_env.std)
    assert (counts > 0).sum() >= 7
