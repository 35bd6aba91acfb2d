"""Pretraining, the online SWFP loop, evaluation and sensitivity sweeps.

One online epoch follows the usual actor-critic ordering:

1. interact with the snapshot policy and store block trajectories,
2. regress the soft critic onto Bellman targets,
3. draw blocks uniformly and take parallel JKO steps on them,
4. refresh the snapshot policy and Polyak-average the target critic.

Every policy step is followed by an out-of-sample audit of the block's
free-energy change; the monotonicity check reads those audits.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import env as envs
from .critic import (FlowProposal, SoftQCritic, bellman_target, critic_update,
                     polyak_update)
from .env import GaussMixBandit, ReplayBuffer, bandit_oracle, grid_log_partition, mode_coverage
from .flow import FlowStack, cfm_pretrain_step, run_blocks, sample_actions
from .jko import JkoConfig, audit_block, policy_update_step
from .nn import Adam, ConfigurationError, load_nets, save_nets
from .ot import energy_distance

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Bad configuration file or value; carries the offending line when known."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class CompatibilityError(ValueError):
    """A checkpoint that does not fit the environment or block grid."""


# -- configuration ------------------------------------------------------------


@dataclass
class TrainConfig:
    jko: JkoConfig = field(default_factory=JkoConfig)
    env: str = "bandit"
    scale: str = "toy"
    seed: int = 0
    env_kwargs: dict = field(default_factory=dict)
    hidden: tuple = (64, 64)
    critic_hidden: tuple = (64, 64)
    activation: str = "tanh"
    substeps: int = 4
    # pretraining
    dataset_size: int = 1000
    pretrain_steps: int = 3000
    pretrain_batch: int = 256
    pretrain_lr: float = 2e-3
    pretrain_lr_final: float = 1e-4
    # online loop
    epochs: int = 300
    rollouts: int = 256
    actor_lr: float = 1e-4
    actor_lr_final: float = 1e-5
    critic_lr: float = 1e-2
    actor_batch: int = 256
    q_batch: int = 256
    audit_batch: int = 256
    critic_steps: int = 10
    policy_steps: int = 10
    critic_warmup: int = 1000
    prior_samples: int = 1000
    buffer_capacity: int = 100_000
    gamma: float = 0.99
    polyak: float = 0.005
    value_samples: int = 32
    clip_norm: float = 10.0
    audit: bool = True
    normalize_w2: bool = True  # W2 in units of the demonstration action range
    # evaluation
    eval_every: int = 10  # 0 disables in-loop evaluation
    eval_episodes: int = 2000
    oracle_samples: int = 2000
    # sweep
    sweep_epochs: int = 60
    sweep_actor_lr: float = 3e-4
    sweep_actor_batch: int = 128
    sweep_block_steps: int = 2  # policy steps per epoch are at least this times N
    sweep_eval_episodes: int = 10_000

    def __post_init__(self):
        if isinstance(self.jko, dict):
            self.jko = JkoConfig(**self.jko)
        self.hidden = tuple(self.hidden)
        self.critic_hidden = tuple(self.critic_hidden)
        if self.env not in ("bandit", "pointmass"):
            raise ConfigError(f"unknown env {self.env!r}")
        if self.scale not in ("toy", "paper"):
            raise ConfigError(f"unknown scale {self.scale!r}")
        for name in ("actor_lr", "actor_lr_final", "critic_lr", "pretrain_lr", "pretrain_lr_final", "polyak",
                     "sweep_actor_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("rollouts", "actor_batch", "q_batch", "audit_batch", "buffer_capacity",
                     "pretrain_batch", "dataset_size", "eval_episodes",
                     "sweep_actor_batch", "sweep_eval_episodes",
                     "value_samples", "substeps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        for name in ("epochs", "critic_steps", "policy_steps", "critic_warmup",
                     "prior_samples", "pretrain_steps", "sweep_epochs", "eval_every",
                     "sweep_block_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.policy_steps > 0 and self.critic_steps < 1:
            raise ConfigError("policy steps need at least one critic step per epoch")

    @property
    def block_count(self):
        return self.jko.block_count

    def with_overrides(self, **kw):
        jko_kw = {k: kw.pop(k) for k in list(kw) if k in _JKO_FIELDS}
        cfg = replace(self, **kw)
        if jko_kw:
            cfg = replace(cfg, jko=replace(cfg.jko, **jko_kw))
        return cfg

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["critic_hidden"] = list(self.critic_hidden)
        if isinstance(self.jko.action_range, tuple):
            d["jko"]["action_range"] = list(self.jko.action_range)
        return d


_JKO_FIELDS = {f.name for f in fields(JkoConfig)}


def toy_config(**kw):
    """Desk-scale profile: the 8-mode bandit with N = 6 blocks."""
    cfg = TrainConfig(jko=JkoConfig(tau=0.1, alpha=1.0, eps_balance=0.4, block_count=6,
                                    particle_count=256))
    return cfg.with_overrides(**kw)


def paper_config(**kw):
    """Full-size hyper-parameters (three 512-unit layers, N = 5, alpha = 4)."""
    cfg = TrainConfig(
        jko=JkoConfig(tau=0.1, alpha=4.0, eps_balance=0.4, block_count=5, particle_count=1024),
        scale="paper", env_kwargs={"reward_scale": 4.0}, hidden=(512, 512, 512),
        critic_hidden=(512, 512, 512), pretrain_lr=1e-4, pretrain_lr_final=1e-5,
        actor_lr=1e-5, critic_lr=3e-4, actor_batch=1024, q_batch=256,
        buffer_capacity=1_000_000, gamma=0.99, epochs=1000)
    return cfg.with_overrides(**kw)


PROFILES = {"toy": toy_config, "paper": paper_config}


def load_config(path, scale="toy", **overrides):
    """Read a YAML mapping of TrainConfig fields on top of a profile.

    ``jko`` may be a nested mapping.  Unknown keys and bad values raise
    :class:`ConfigError` with the line number of the offending entry.
    """
    text = Path(path).read_text()
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(str(getattr(exc, "problem", exc)),
                          None if mark is None else mark.line + 1) from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping", 1)
    lines = {}
    if node is not None:
        for key, value in node.value:
            lines[key.value] = key.start_mark.line + 1
            if key.value == "jko" and isinstance(value, yaml.MappingNode):
                for k2, _ in value.value:
                    lines[k2.value] = k2.start_mark.line + 1
    scale = raw.pop("scale", scale)
    if scale not in PROFILES:
        raise ConfigError(f"unknown scale {scale!r}", lines.get("scale"))
    flat = {}
    for key, value in raw.items():
        if key == "jko":
            if not isinstance(value, dict):
                raise ConfigError("jko must be a mapping", lines.get(key))
            for k2, v2 in value.items():
                if k2 not in _JKO_FIELDS:
                    raise ConfigError(f"unknown jko key {k2!r}", lines.get(k2))
                flat[k2] = v2
        elif key in _JKO_FIELDS or key in _TRAIN_FIELDS:
            flat[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}", lines.get(key))
    flat.update(overrides)
    try:
        return PROFILES[scale](**flat)
    except (ValueError, TypeError) as exc:
        bad = next((k for k in flat if k in str(exc)), None)
        raise ConfigError(str(exc), lines.get(bad)) from None


_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)} - {"jko"}


# -- environments and data -----------------------------------------------------


def build_env(cfg: TrainConfig):
    kw = dict(cfg.env_kwargs)
    if cfg.env == "bandit":
        kw.setdefault("reward_scale", cfg.jko.alpha)
    return envs.make_env(cfg.env, **kw)


def behaviour_dataset(env, n, rng):
    """Demonstrations: mixture draws on the bandit, a noisy homing controller on the point mass."""
    if isinstance(env, GaussMixBandit):
        return np.zeros((n, 0)), env.sample_data(n, rng)
    s = env.reset(rng, n)
    gain = 4.0 / (env.dt * env.horizon)
    a = -gain * s[:, :env.action_dim] + 0.1 * rng.standard_normal((n, env.action_dim))
    return s, np.clip(a, env.action_low, env.action_high)


def write_dataset(path, states, actions):
    with open(path, "w") as fh:
        for s, a in zip(states, actions):
            fh.write(json.dumps({"state": np.asarray(s).tolist(),
                                 "action": np.asarray(a).tolist()}) + "\n")


def read_dataset(path, state_dim, action_dim):
    """JSON-lines of ``{state, action}``; raises ConfigError naming the bad line."""
    states, actions = [], []
    with open(path) as fh:
        for i, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                s = np.asarray(rec["state"], dtype=np.float64).reshape(-1)
                a = np.asarray(rec["action"], dtype=np.float64).reshape(-1)
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"bad dataset record: {exc}", i) from None
            if s.size != state_dim or a.size != action_dim:
                raise ConfigError(f"record has state dim {s.size} and action dim {a.size}, "
                                  f"expected {state_dim} and {action_dim}", i)
            states.append(s)
            actions.append(a)
    if not actions:
        raise ConfigError("dataset is empty")
    return np.array(states).reshape(len(actions), state_dim), np.array(actions)


def demo_action_range(cfg: TrainConfig, env, actions=None):
    """Per-dimension extent of the demonstration actions."""
    if actions is None:
        _, actions = behaviour_dataset(env, cfg.dataset_size, _seeds(cfg.seed, 2)[0])
    actions = np.atleast_2d(actions)
    return tuple(float(max(x, 1e-6)) for x in actions.max(0) - actions.min(0))


def _seeds(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


# -- pretraining -----------------------------------------------------------------


def cosine_lr(step, total, lr0, lr1):
    if total <= 1:
        return lr0
    return lr1 + 0.5 * (lr0 - lr1) * (1.0 + math.cos(math.pi * step / (total - 1)))


def new_stack(cfg: TrainConfig, env, block_count=None, seed=None):
    return FlowStack.create(env.action_dim, env.state_dim,
                            block_count=block_count or cfg.block_count, hidden=cfg.hidden,
                            substeps=cfg.substeps, activation=cfg.activation,
                            seed=cfg.seed if seed is None else seed)


def pretrain(cfg: TrainConfig, env, states=None, actions=None, stack=None, rng=None):
    """Flow-matching behaviour cloning with a cosine learning-rate schedule.

    Returns ``(stack, losses)``.  Without data, ``cfg.dataset_size``
    demonstrations are drawn from :func:`behaviour_dataset`.
    """
    data_rng, init_rng = _seeds(cfg.seed, 2)
    rng = rng if rng is not None else init_rng
    if actions is None:
        states, actions = behaviour_dataset(env, cfg.dataset_size, data_rng)
    actions = np.atleast_2d(actions)
    if actions.shape[0] == 0:
        raise ConfigError("empty pretraining dataset")
    states = np.zeros((len(actions), 0)) if states is None else np.asarray(states).reshape(len(actions), -1)
    stack = stack if stack is not None else new_stack(cfg, env)
    opt = Adam(stack.net.params, lr=cfg.pretrain_lr, clip_norm=cfg.clip_norm)
    losses = np.empty(cfg.pretrain_steps)
    n = len(actions)
    for i in range(cfg.pretrain_steps):
        opt.lr = cosine_lr(i, cfg.pretrain_steps, cfg.pretrain_lr, cfg.pretrain_lr_final)
        idx = rng.integers(0, n, size=min(cfg.pretrain_batch, n))
        losses[i] = cfm_pretrain_step(stack, states[idx], actions[idx], opt, rng)
    return stack, losses


# -- evaluation -------------------------------------------------------------------


_ORACLE_CACHE = {}


def oracle_samples(env: GaussMixBandit, alpha, M, seed=12345):
    key = (env.n_modes, env.radius, env.std, env.floor, env.reward_scale, env.bound, alpha, M, seed)
    if key not in _ORACLE_CACHE:
        _ORACLE_CACHE[key] = bandit_oracle(env, alpha).sample(M, np.random.default_rng(seed))
    return _ORACLE_CACHE[key]


def evaluate(stack: FlowStack, env, episodes=1000, seed=0, alpha=None, oracle_M=2000):
    """Return, entropy and (on the bandit) mode coverage and oracle distance.

    ``success`` is the fraction of bandit actions within three standard
    deviations of a mode.
    """
    if episodes < 1:
        raise ConfigError("episodes must be at least 1")
    rng = np.random.default_rng(seed)
    out = {}
    if isinstance(env, GaussMixBandit):
        a, _, logp = sample_actions(stack, None, episodes, rng=rng, with_logp=True)
        _, r, _, _ = env.step(None, a)
        counts, unassigned = mode_coverage(a, env.means, 3.0 * env.std)
        out.update(return_mean=float(r.mean()), return_std=float(r.std()),
                   entropy=float(-logp.mean()), success=1.0 - unassigned / episodes,
                   min_mode_mass=float(counts.min() / episodes),
                   modes_covered=int((counts / episodes >= 0.05).sum()),
                   mode_coverage=[int(c) for c in counts], unassigned=int(unassigned))
        if alpha is not None:
            ref = oracle_samples(env, alpha, oracle_M)
            out["energy_distance"] = energy_distance(a[:oracle_M], ref)
            out["free_energy"] = float(logp.mean() - r.mean() / alpha)
        return out
    s = env.reset(rng, episodes)
    total = np.zeros(episodes)
    neg_logp = []
    for t in range(env.horizon):
        a, _, logp = sample_actions(stack, s, episodes, rng=rng, with_logp=True)
        s, r, _, _ = env.step(s, a, rng=rng, t=t)
        total += r
        neg_logp.append(-logp)
    out.update(return_mean=float(total.mean()), return_std=float(total.std()),
               entropy=float(np.mean(neg_logp)))
    return out


def figure_data(stack: FlowStack, env: GaussMixBandit, alpha, M=1000, seed=0, grid=201):
    """Particle clouds at every block boundary plus the normalised Gibbs density on a grid.

    Returns ``(iterations, density)``; ``iterations[n]`` is the ``(M, 2)``
    cloud after ``n`` blocks and ``density`` holds the grid axes and values.
    """
    a0 = np.random.default_rng(seed).standard_normal((M, stack.action_dim))
    points, _ = run_blocks(stack, None, a0)
    lo, hi = env.action_low, env.action_high
    log_z = grid_log_partition(lambda a: env.reward(None, a) / alpha, lo, hi, n=400)
    axes = [np.linspace(l, h, grid) for l, h in zip(lo, hi)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(axes))
    dens = np.exp(env.reward(None, mesh) / alpha - log_z).reshape(grid, grid)
    iterations = [points[:, n] for n in range(stack.block_count + 1)]
    return iterations, {"x": axes[0], "y": axes[1], "density": dens, "log_partition": log_z}


# -- metrics -------------------------------------------------------------------


METRIC_COLUMNS = ("epoch", "critic_loss", "actor_objective", "w2_term", "entropy_term",
                  "potential_term", "fe_in", "fe_out", "fe_increases", "policy_steps",
                  "skipped_actor", "skipped_critic", "return_mean", "return_std", "entropy",
                  "success", "min_mode_mass", "energy_distance")


@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)
    audits: list = field(default_factory=list)

    def log(self, **row):
        self.rows.append({k: row.get(k, float("nan")) for k in METRIC_COLUMNS})

    def audit_pass_rate(self):
        if not self.audits:
            return float("nan")
        return 1.0 - float(np.mean([a["increased"] for a in self.audits]))

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _fmt(v) for k, v in r.items()})

    def audits_to_csv(self, path):
        cols = ("step", "epoch", "block", "fe_in", "fe_out", "se", "increased")
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for a in self.audits:
                w.writerow({k: _fmt(a[k]) for k in cols})

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = [{k: float(v) if v != "" else float("nan") for k, v in r.items()}
                    for r in csv.DictReader(fh)]
        return cls(rows)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return "" if not np.isfinite(v) else repr(float(v))
    return v


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(path, stack: FlowStack, critic: SoftQCritic | None = None, extra=None):
    nets = {"velocity": (stack.net, "velocity")}
    for i, b in enumerate(stack.block_nets or [], 1):
        nets[f"block_{i}"] = (b, "block")
    if critic is not None:
        nets["critic"] = (critic.online, "critic")
        nets["critic_target"] = (critic.target, "critic_target")
    meta = {"block_count": stack.block_count, "action_dim": stack.action_dim,
            "state_dim": stack.state_dim, "substeps": stack.substeps,
            **({} if critic is None else {"gamma": critic.gamma, "polyak": critic.polyak_rate,
                                          "value_samples": critic.value_samples}),
            **(extra or {})}
    save_nets(path, nets, meta)


def load_checkpoint(path):
    """Returns ``(stack, critic_or_None, meta)``."""
    nets, _, meta = load_nets(path)
    if "velocity" not in nets:
        raise ConfigurationError(f"{path} holds no velocity network")
    blocks = [nets[f"block_{i}"] for i in range(1, meta["block_count"] + 1)] \
        if "block_1" in nets else None
    stack = FlowStack(nets["velocity"], meta["block_count"], meta["action_dim"],
                      meta["state_dim"], meta["substeps"], blocks)
    critic = None
    if "critic" in nets:
        critic = SoftQCritic(nets["critic"], nets["critic_target"], meta["state_dim"],
                             meta["action_dim"], meta.get("polyak", 0.005),
                             meta.get("gamma", 0.99), meta.get("value_samples", 32))
    return stack, critic, meta


def file_digest(*paths):
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


# -- online training -----------------------------------------------------------


@dataclass
class TrainResult:
    stack: FlowStack
    critic: SoftQCritic
    metrics: RunMetrics
    flagged: bool = False
    seconds: float = 0.0
    config: TrainConfig | None = None  # as run, with the W2 action range resolved


class _PriorPool:
    """Transitions from the demonstrations plus broad random actions, for the critic."""

    def __init__(self, env, cfg, rng, states=None, actions=None):
        n = cfg.prior_samples
        if n == 0:
            self.s = None
            return
        if actions is None:
            states, actions = behaviour_dataset(env, n, rng)
        lo, hi = actions.min(0), actions.max(0)
        pad = 0.5 * (hi - lo) + 1e-3
        lo = np.maximum(lo - pad, env.action_low)
        hi = np.minimum(hi + pad, env.action_high)
        idx = rng.integers(0, len(actions), size=n)
        s = np.concatenate([states[idx], states[rng.integers(0, len(actions), size=n)]])
        a = np.concatenate([actions[idx], rng.uniform(lo, hi, size=(n, env.action_dim))])
        if isinstance(env, GaussMixBandit):
            s_next, r, done, _ = env.step(s, a)
        else:
            s_next, r, done, _ = env.step(s, a, rng=rng, t=0)
        self.s, self.a, self.r, self.s_next, self.done = s, a, r, s_next, done

    def sample(self, k, rng):
        i = rng.integers(0, len(self.r), size=k)
        return self.s[i], self.a[i], self.r[i], self.s_next[i], self.done[i]


def _critic_step(critic, opt, buffer, prior, target_stack, cfg, rng):
    parts = []
    if len(buffer):
        b = buffer.sample(cfg.q_batch, rng)
        parts.append((b.s, b.actions, b.r, b.s_next, b.done))
    if prior is not None and prior.s is not None:
        parts.append(prior.sample(max(1, cfg.q_batch // 2), rng))
    s, a, r, s_next, done = (np.concatenate(x) for x in zip(*parts))
    proposal = FlowProposal(target_stack) if not done.all() else None
    targets = bellman_target(critic, r, s_next, done, proposal, rng, cfg.value_samples)
    loss = critic_update(critic, s, a, targets, opt)
    polyak_update(critic)
    return loss


class _Rollouts:
    """Parallel episodes driven by the snapshot policy."""

    def __init__(self, env, n, rng):
        self.env, self.n = env, n
        self.s = env.reset(rng, n)
        self.t = np.zeros(n, dtype=int)

    def collect(self, stack, buffer, rng):
        env = self.env
        a, traj = sample_actions(stack, self.s, self.n, rng=rng)
        if isinstance(env, GaussMixBandit):
            s_next, r, done, _ = env.step(self.s, a)
        else:
            s_next, r, done, _ = env.step(self.s, a, rng=rng, t=0)
            done = self.t + 1 >= env.horizon
        buffer.push_batch(self.s, traj.points, r, s_next, done)
        self.t = np.where(done, 0, self.t + 1)
        fresh = env.reset(rng, self.n)
        self.s = np.where(done[:, None], fresh, s_next) if env.state_dim else s_next
        return r


def train_online(cfg: TrainConfig, stack: FlowStack, env=None, states=None, actions=None,
                 epochs=None, actor_lr=None, progress=None):
    """Fine-tune a pretrained stack with the parallel JKO scheme.

    Blocks are untied first, so each has its own copy of the pretrained
    velocity network.  Returns a :class:`TrainResult`; the run is flagged
    when more than 1% of actor or critic updates were skipped.
    """
    env = env if env is not None else build_env(cfg)
    if stack.action_dim != env.action_dim or stack.state_dim != env.state_dim:
        raise CompatibilityError(
            f"policy has state/action dims ({stack.state_dim}, {stack.action_dim}), "
            f"environment has ({env.state_dim}, {env.action_dim})")
    if stack.block_count != cfg.block_count:
        raise CompatibilityError(f"policy has {stack.block_count} blocks, config says {cfg.block_count}")
    epochs = cfg.epochs if epochs is None else epochs
    actor_lr = cfg.actor_lr if actor_lr is None else actor_lr
    if cfg.normalize_w2:
        cfg = cfg.with_overrides(action_range=demo_action_range(cfg, env, actions), normalize_w2=False)
    t0 = time.perf_counter()
    critic_rng, roll_rng, policy_rng, prior_rng = _seeds(cfg.seed + 1, 4)
    critic = SoftQCritic.create(env.state_dim, env.action_dim, cfg.critic_hidden, cfg.activation,
                                seed=cfg.seed + 7, polyak_rate=cfg.polyak,
                                gamma=cfg.gamma if env.horizon > 1 else 0.0,
                                value_samples=cfg.value_samples)
    metrics = RunMetrics()
    if epochs == 0:
        return TrainResult(stack, critic, metrics, False, time.perf_counter() - t0, cfg)

    stack = stack.untie() if stack.tied else stack.copy()
    snapshot = stack.copy()
    actor_opts = [Adam(stack.block_params(n), lr=actor_lr, clip_norm=cfg.clip_norm)
                  for n in range(1, stack.block_count + 1)]
    critic_opt = Adam(critic.online.params, lr=cfg.critic_lr, clip_norm=cfg.clip_norm)
    buffer = ReplayBuffer(cfg.buffer_capacity, env.state_dim, env.action_dim, stack.block_count)
    prior = _PriorPool(env, cfg, prior_rng, states, actions)
    rollouts = _Rollouts(env, cfg.rollouts, roll_rng)
    rollouts.collect(snapshot, buffer, roll_rng)
    for _ in range(cfg.critic_warmup):
        _critic_step(critic, critic_opt, buffer, prior, snapshot, cfg, critic_rng)

    n_actor = n_critic = skipped_actor = skipped_critic = 0
    lr_final = min(actor_lr, cfg.actor_lr_final)
    for epoch in range(epochs):
        for opt in actor_opts:
            opt.lr = cosine_lr(epoch, epochs, actor_lr, lr_final)
        rollouts.collect(snapshot, buffer, roll_rng)
        closs = []
        for _ in range(cfg.critic_steps):
            loss = _critic_step(critic, critic_opt, buffer, prior, snapshot, cfg, critic_rng)
            n_critic += 1
            if np.isfinite(loss):
                closs.append(loss)
            else:
                skipped_critic += 1
        reports, increases = [], 0
        for _ in range(cfg.policy_steps):
            n = int(policy_rng.integers(1, stack.block_count + 1))
            rep = policy_update_step(stack, snapshot, critic, buffer.sample(cfg.actor_batch, policy_rng),
                                     n, cfg.jko, actor_opts, rng=policy_rng)
            n_actor += 1
            skipped_actor += rep.skipped
            reports.append(rep)
            if not cfg.audit:
                continue
            au = audit_block(stack, snapshot, critic, buffer.sample(cfg.audit_batch, policy_rng),
                             n, cfg.jko)
            inc = au.increased()
            increases += inc
            metrics.audits.append({"step": n_actor, "epoch": epoch, "block": n, "fe_in": au.fe_in,
                                   "fe_out": au.fe_out, "se": au.se, "increased": inc})
        snapshot = stack.copy()

        row = dict(epoch=epoch, critic_loss=np.mean(closs) if closs else float("nan"),
                   fe_increases=increases, policy_steps=len(reports),
                   skipped_actor=skipped_actor, skipped_critic=skipped_critic)
        if reports:
            row.update(actor_objective=np.mean([r.total for r in reports]),
                       w2_term=np.mean([r.w2_term for r in reports]),
                       entropy_term=np.mean([r.entropy_term for r in reports]),
                       potential_term=np.mean([r.potential_term for r in reports]))
        if reports and cfg.audit:
            recent = metrics.audits[-len(reports):]
            row.update(fe_in=np.mean([a["fe_in"] for a in recent]),
                       fe_out=np.mean([a["fe_out"] for a in recent]))
        if cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or epoch == epochs - 1):
            ev = evaluate(stack, env, cfg.eval_episodes, seed=cfg.seed + 1000,
                          alpha=cfg.jko.alpha, oracle_M=cfg.oracle_samples)
            row.update({k: ev[k] for k in METRIC_COLUMNS if k in ev})
        metrics.log(**row)
        if progress is not None:
            progress(metrics.rows[-1])

    flagged = (skipped_actor > 0.01 * max(n_actor, 1)) or (skipped_critic > 0.01 * max(n_critic, 1))
    if flagged:
        log.warning("run flagged: %d/%d actor and %d/%d critic updates skipped",
                    skipped_actor, n_actor, skipped_critic, n_critic)
    return TrainResult(stack, critic, metrics, flagged, time.perf_counter() - t0, cfg)


def write_run(out_dir, cfg: TrainConfig, result: TrainResult, pretrained_digest=None):
    """Checkpoint, metrics CSVs and a manifest keyed by a content hash."""
    cfg = result.config or cfg
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, mcsv, acsv = out / "policy.ckpt", out / "metrics.csv", out / "audit.csv"
    save_checkpoint(ckpt, result.stack, result.critic, {"config": cfg.to_dict()})
    result.metrics.to_csv(mcsv)
    result.metrics.audits_to_csv(acsv)
    manifest = {"config": cfg.to_dict(), "flagged": result.flagged,
                "audit_pass_rate": result.metrics.audit_pass_rate(),
                "files": {p.name: file_digest(p) for p in (ckpt, mcsv, acsv)},
                "content_hash": file_digest(ckpt, mcsv, acsv),
                "pretrained": pretrained_digest}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


# -- sweeps -------------------------------------------------------------------------


SWEEP_COLUMNS = ("kind", "seed", "block_count", "w2_scale", "success", "return_mean",
                 "energy_distance", "flagged", "error")


@dataclass
class SweepResult:
    rows: list
    seconds: float = 0.0

    def aggregate(self):
        """Mean and std of success per (kind, block_count, w2_scale)."""
        groups = {}
        for r in self.rows:
            if r["error"]:
                continue
            groups.setdefault((r["kind"], r["block_count"], r["w2_scale"]), []).append(r["success"])
        return [{"kind": k[0], "block_count": k[1], "w2_scale": k[2], "runs": len(v),
                 "success_mean": float(np.mean(v)), "success_std": float(np.std(v))}
                for k, v in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1], str(kv[0][2])))]

    def mean(self, kind, block_count, w2_scale=""):
        for g in self.aggregate():
            if (g["kind"], g["block_count"], g["w2_scale"]) == (kind, block_count, w2_scale):
                return g["success_mean"]
        return float("nan")

    def to_csv(self, path, aggregate_path=None, baseline_path=None):
        """Write the rows; pretrained baselines go to ``baseline_path`` when given."""
        def write(p, rows):
            with open(p, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
                w.writeheader()
                for r in rows:
                    w.writerow({k: _fmt(r[k]) for k in SWEEP_COLUMNS})

        if baseline_path is None:
            write(path, self.rows)
        else:
            write(path, [r for r in self.rows if r["kind"] != "pretrained"])
            write(baseline_path, [r for r in self.rows if r["kind"] == "pretrained"])
        if aggregate_path is not None:
            agg = self.aggregate()
            with open(aggregate_path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(agg[0]) if agg else ["kind"])
                w.writeheader()
                for g in agg:
                    w.writerow({k: _fmt(v) for k, v in g.items()})

    @classmethod
    def from_csv(cls, *paths, seconds=float("nan")):
        rows = []
        for p in paths:
            with open(p, newline="") as fh:
                for r in csv.DictReader(fh):
                    rows.append({"kind": r["kind"], "seed": int(r["seed"]),
                                 "block_count": int(r["block_count"]),
                                 "w2_scale": float(r["w2_scale"]) if r["w2_scale"] else "",
                                 "success": float(r["success"]) if r["success"] else float("nan"),
                                 "return_mean": float(r["return_mean"]) if r["return_mean"] else float("nan"),
                                 "energy_distance": float(r["energy_distance"]) if r["energy_distance"] else float("nan"),
                                 "flagged": bool(int(r["flagged"])), "error": r["error"]})
        return cls(rows, seconds)


def sweep(cfg: TrainConfig, block_counts=range(1, 9), w2_scales=(0.1, 0.4, 1.0, 5.0),
          seeds=range(10), epochs=None, actor_lr=None, progress=None, workers=1):
    """Fine-tune every (N, W2 scale, seed) cell and score the pretrained baselines.

    Pretraining is shared across cells of one seed: the velocity network
    does not depend on the block grid.  Each seed's pretrained policy is
    evaluated at every N with the same evaluation noise as its cells.  Blocks
    are drawn uniformly, so a cell runs ``max(policy_steps, sweep_block_steps
    * N)`` policy steps per epoch to keep the per-block budget from shrinking
    as N grows.  With
    ``workers > 1`` the cells run in separate processes.  A failing cell is
    recorded with its error message and the sweep moves on.
    """
    block_counts, w2_scales, seeds = list(block_counts), list(w2_scales), list(seeds)
    if not block_counts or not w2_scales or not seeds:
        raise ConfigError("sweep grid is empty")
    epochs = cfg.sweep_epochs if epochs is None else epochs
    actor_lr = cfg.sweep_actor_lr if actor_lr is None else actor_lr
    t0 = time.perf_counter()
    env = build_env(cfg)
    rows, jobs = [], []
    for seed in seeds:
        base_cfg = cfg.with_overrides(seed=seed, actor_batch=cfg.sweep_actor_batch,
                                      eval_every=0, audit=False)
        pre, _ = pretrain(base_cfg, env)
        for N in block_counts:
            ev = evaluate(pre.with_blocks(N), env, cfg.sweep_eval_episodes, seed=seed + 1000,
                          alpha=cfg.jko.alpha, oracle_M=cfg.oracle_samples)
            rows.append(_sweep_row("pretrained", seed, N, "", ev, False, ""))
            steps = max(cfg.policy_steps, cfg.sweep_block_steps * N)
            jobs += [(base_cfg.with_overrides(block_count=N, eps_balance=scale, policy_steps=steps),
                      pre.with_blocks(N), epochs, actor_lr) for scale in w2_scales]

    def done(row):
        rows.append(row)
        if progress is not None:
            progress(row)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for row in pool.map(_sweep_cell, jobs):
                done(row)
    else:
        for job in jobs:
            done(_sweep_cell(job))
    return SweepResult(rows, time.perf_counter() - t0)


def _sweep_cell(job):
    cfg, stack, epochs, actor_lr = job
    N, scale, seed = cfg.block_count, cfg.jko.eps_balance, cfg.seed
    env = build_env(cfg)
    try:
        res = train_online(cfg, stack, env, epochs=epochs, actor_lr=actor_lr)
        ev = evaluate(res.stack, env, cfg.sweep_eval_episodes, seed=seed + 1000,
                      alpha=cfg.jko.alpha, oracle_M=cfg.oracle_samples)
        return _sweep_row("finetuned", seed, N, scale, ev, res.flagged, "")
    except (FloatingPointError, ValueError, RuntimeError) as exc:
        log.warning("sweep cell N=%d scale=%s seed=%d failed: %s", N, scale, seed, exc)
        return _sweep_row("finetuned", seed, N, scale, {}, True, repr(exc))


def _sweep_row(kind, seed, N, scale, ev, flagged, error):
    return {"kind": kind, "seed": seed, "block_count": N, "w2_scale": scale,
            "success": ev.get("success", float("nan")),
            "return_mean": ev.get("return_mean", float("nan")),
            "energy_distance": ev.get("energy_distance", float("nan")),
            "flagged": flagged, "error": error}


def sweep_checks(result: SweepResult, plateau_from=5, reference=8, plateau_tol=0.05,
                 spread_tol=0.10, default_scale=0.4):
    """The three sweep properties as a dict of (value, passed).

    * plateau: worst relative gap between N >= ``plateau_from`` and N =
      ``reference`` at the default W2 scale,
    * spread: worst (max - min) / mean across W2 scales at fixed N,
    * baseline: smallest margin of a fine-tuned cell over the pretrained
      policy with the same N.
    """
    agg = result.aggregate()
    fine = {(g["block_count"], g["w2_scale"]): g["success_mean"] for g in agg if g["kind"] == "finetuned"}
    base = {g["block_count"]: g["success_mean"] for g in agg if g["kind"] == "pretrained"}
    Ns = sorted({k[0] for k in fine})
    scales = sorted({k[1] for k in fine})
    ref = fine.get((reference, default_scale), float("nan"))
    gaps = [abs(fine[(N, default_scale)] - ref) / ref for N in Ns
            if N >= plateau_from and (N, default_scale) in fine]
    spreads = []
    for N in Ns:
        vals = np.array([fine[(N, s)] for s in scales if (N, s) in fine])
        if len(vals) > 1:
            spreads.append((vals.max() - vals.min()) / vals.mean())
    margins = [v - base[N] for (N, _), v in fine.items() if N in base]
    plateau = max(gaps) if gaps else float("nan")
    spread = max(spreads) if spreads else float("nan")
    margin = min(margins) if margins else float("nan")
    return {"plateau": (plateau, bool(plateau <= plateau_tol)),
            "spread": (spread, bool(spread < spread_tol)),
            "baseline_margin": (margin, bool(margin > 0))}
