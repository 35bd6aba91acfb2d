"""Dense feed-forward networks with hand-written reverse-mode gradients.

Besides the usual forward/backward pair, :class:`DenseNet` supports a
forward-mode tangent pass (Jacobian-vector products for a handful of
directions) together with its reverse-mode adjoint.  The flow module uses
this to get an exact divergence of the velocity field and the gradient of
that divergence with respect to parameters and inputs.

Parameters are stored as a flat list ``[W0, b0, W1, b1, ...]`` with
``W_l`` of shape ``(fan_in, fan_out)`` and a row-vector convention
``h_{l+1} = act(h_l @ W_l + b_l)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

ACTIVATIONS = ("tanh", "gelu", "relu")

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ConfigurationError(ValueError):
    """Raised on shape or dimension mismatches."""


def _act(name, z):
    """Return (act(z), act'(z), act''(z))."""
    if name == "tanh":
        h = np.tanh(z)
        d1 = 1.0 - h * h
        return h, d1, -2.0 * h * d1
    if name == "relu":
        pos = (z > 0).astype(z.dtype)
        return z * pos, pos, np.zeros_like(z)
    if name == "gelu":
        cdf = 0.5 * (1.0 + erf(z * _INV_SQRT2))
        pdf = _INV_SQRT2PI * np.exp(-0.5 * z * z)
        return z * cdf, cdf + z * pdf, pdf * (2.0 - z * z)
    raise ConfigurationError(f"unknown activation {name!r}")


@dataclass
class DenseNet:
    layer_dims: list[int]
    params: list[np.ndarray]
    activation: str = "tanh"
    seed: int | None = None

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ConfigurationError(f"bad layer dims {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if len(self.params) != 2 * self.n_layers:
            raise ConfigurationError("parameter list does not match layer dims")
        for l, (din, dout) in enumerate(zip(self.layer_dims[:-1], self.layer_dims[1:])):
            if self.params[2 * l].shape != (din, dout) or self.params[2 * l + 1].shape != (dout,):
                raise ConfigurationError(f"layer {l} parameters have wrong shape")

    @classmethod
    def init(cls, layer_dims, activation="tanh", seed=0):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation."""
        rng = np.random.default_rng(seed)
        params = []
        for din, dout in zip(layer_dims[:-1], layer_dims[1:]):
            bound = 1.0 / np.sqrt(din)
            params.append(rng.uniform(-bound, bound, size=(din, dout)))
            params.append(rng.uniform(-bound, bound, size=(dout,)))
        return cls(list(layer_dims), params, activation, seed)

    @classmethod
    def zeros(cls, layer_dims, activation="tanh"):
        params = []
        for din, dout in zip(layer_dims[:-1], layer_dims[1:]):
            params += [np.zeros((din, dout)), np.zeros(dout)]
        return cls(list(layer_dims), params, activation)

    @property
    def n_layers(self):
        return len(self.layer_dims) - 1

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    def copy(self):
        return DenseNet(list(self.layer_dims), [p.copy() for p in self.params],
                        self.activation, self.seed)

    def get_flat(self):
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ConfigurationError(f"expected {self.n_params} values, got {flat.size}")
        i = 0
        for p in self.params:
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ConfigurationError(
                f"expected inputs of shape (k, {self.in_dim}), got {x.shape}")
        return x

    # -- plain pass ---------------------------------------------------------

    def forward(self, x, return_cache=False):
        x = self._check_input(x)
        hs, ds = [x], []
        h = x
        for l in range(self.n_layers):
            z = h @ self.params[2 * l] + self.params[2 * l + 1]
            if l < self.n_layers - 1:
                h, d1, _ = _act(self.activation, z)
                ds.append(d1)
            else:
                h = z
            hs.append(h)
        if return_cache:
            return h, (hs, ds)
        return h

    def __call__(self, x):
        return self.forward(x)

    def backward(self, x, upstream, cache=None):
        """Gradients of ``sum(forward(x) * upstream)``.

        Returns ``(param_grads, input_grads)`` with ``param_grads`` aligned
        with ``self.params``.
        """
        if cache is None:
            _, cache = self.forward(x, return_cache=True)
        hs, ds = cache
        g = np.asarray(upstream, dtype=np.float64)
        if g.shape != (hs[0].shape[0], self.out_dim):
            raise ConfigurationError(f"upstream shape {g.shape} does not match output")
        grads = [None] * len(self.params)
        for l in reversed(range(self.n_layers)):
            if l < self.n_layers - 1:
                g = g * ds[l]
            grads[2 * l] = hs[l].T @ g
            grads[2 * l + 1] = g.sum(axis=0)
            g = g @ self.params[2 * l].T
        return grads, g

    # -- tangent (forward-mode) pass ----------------------------------------

    def forward_tangent(self, x, tangents):
        """Outputs and Jacobian-vector products.

        ``tangents`` has shape ``(k, m, in_dim)``: m input directions per
        sample.  Returns ``(y, ty, cache)`` with ``ty`` of shape
        ``(k, m, out_dim)``.
        """
        x = self._check_input(x)
        t = np.asarray(tangents, dtype=np.float64)
        if t.ndim != 3 or t.shape[0] != x.shape[0] or t.shape[2] != self.in_dim:
            raise ConfigurationError(f"tangent shape {t.shape} does not match inputs")
        hs, ts, acts = [x], [t], []
        h = x
        for l in range(self.n_layers):
            W, b = self.params[2 * l], self.params[2 * l + 1]
            z = h @ W + b
            zt = t @ W
            if l < self.n_layers - 1:
                h, d1, d2 = _act(self.activation, z)
                acts.append((d1, d2, zt))
                t = d1[:, None, :] * zt
            else:
                h, t = z, zt
            hs.append(h)
            ts.append(t)
        return h, t, (hs, ts, acts)

    def backward_tangent(self, cache, g_out, g_tangent):
        """Adjoint of :meth:`forward_tangent`.

        Returns ``(param_grads, input_grads, tangent_grads)`` for the scalar
        ``sum(y * g_out) + sum(ty * g_tangent)``.
        """
        hs, ts, acts = cache
        g = np.asarray(g_out, dtype=np.float64)
        gt = np.asarray(g_tangent, dtype=np.float64)
        grads = [None] * len(self.params)
        for l in reversed(range(self.n_layers)):
            W = self.params[2 * l]
            if l < self.n_layers - 1:
                d1, d2, zt = acts[l]
                # h = act(z), t_out = act'(z) * zt
                g = g * d1 + d2 * np.einsum("kmj,kmj->kj", gt, zt)
                gt = d1[:, None, :] * gt
            grads[2 * l] = hs[l].T @ g + np.einsum("kmi,kmj->ij", ts[l], gt)
            grads[2 * l + 1] = g.sum(axis=0)
            g = g @ W.T
            gt = gt @ W.T
        return grads, g, gt


# -- optimiser -----------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_adam: float = 1e-8
    rejected: int = 0

    @classmethod
    def like(cls, params, **kw):
        return cls([np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params], **kw)


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def adam_step(params, grads, state: AdamState, clip_norm=None):
    """Bias-corrected Adam, applied in place.

    Returns False (and leaves everything untouched apart from
    ``state.rejected``) when a gradient is non-finite.
    """
    if len(grads) != len(params):
        raise ConfigurationError("gradient list does not match parameters")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ConfigurationError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    norm = global_norm(grads)
    if not np.isfinite(norm):
        state.rejected += 1
        return False
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step_count
    c2 = 1.0 - b2 ** state.step_count
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if scale != 1.0:
            g = g * scale
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon_adam)
    return True


class Adam:
    """Thin owner of an :class:`AdamState` bound to one parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=10.0):
        self.params = params
        self.clip_norm = clip_norm
        self.state = AdamState.like(params, learning_rate=lr, beta1=beta1,
                                    beta2=beta2, epsilon_adam=eps)

    @property
    def lr(self):
        return self.state.learning_rate

    @lr.setter
    def lr(self, value):
        self.state.learning_rate = float(value)

    def step(self, grads):
        return adam_step(self.params, grads, self.state, self.clip_norm)


# -- gradient checking -----------------------------------------------------------


@dataclass
class GradCheckReport:
    block_errors: dict[str, float] = field(default_factory=dict)
    input_error: float = 0.0
    tol: float = 1e-4

    @property
    def max_error(self):
        return max([self.input_error, *self.block_errors.values()])

    @property
    def passed(self):
        return self.max_error <= self.tol


def rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a).max(), np.abs(b).max()), floor)
    return float(np.abs(a - b).max() / denom)


def grad_check(net: DenseNet, inputs, tol=1e-4, step=1e-5, upstream=None, backward=None, seed=0):
    """Compare ``backward`` against central finite differences.

    The checked scalar is ``sum(net(inputs) * upstream)``; ``upstream``
    defaults to a fixed random matrix.  ``backward`` can be swapped out
    (used by the tests to plant a broken implementation).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = np.asarray(inputs, dtype=np.float64)
    if upstream is None:
        upstream = np.random.default_rng(seed).standard_normal((x.shape[0], net.out_dim))
    backward = backward or net.backward
    p_grads, x_grad = backward(x, upstream)

    def objective():
        return float(np.sum(net.forward(x) * upstream))

    report = GradCheckReport(tol=tol)
    names = [f"{'W' if i % 2 == 0 else 'b'}{i // 2}" for i in range(len(net.params))]
    for name, p, g in zip(names, net.params, p_grads):
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            up = objective()
            p[idx] = old - step
            down = objective()
            p[idx] = old
            fd[idx] = (up - down) / (2 * step)
        report.block_errors[name] = rel_error(g, fd)
    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + step
        up = objective()
        x[idx] = old - step
        down = objective()
        x[idx] = old
        fd[idx] = (up - down) / (2 * step)
    report.input_error = rel_error(x_grad, fd)
    return report


# -- checkpoints -------------------------------------------------------------------

_MAGIC = "swfp-checkpoint-v1"


def save_nets(path, nets, extra=None):
    """Write named networks to one file.

    Layout: a single JSON header line, then the concatenated parameters of
    every network as little-endian float64.  ``nets`` maps a name to either
    a DenseNet or a ``(DenseNet, role)`` pair.
    """
    entries, blobs, offset = [], [], 0
    for name, item in nets.items():
        net, role = item if isinstance(item, tuple) else (item, None)
        flat = net.get_flat().astype("<f8")
        entries.append({"name": name, "role": role, "layer_dims": net.layer_dims,
                        "activation": net.activation, "seed": net.seed,
                        "offset": offset, "count": int(flat.size)})
        blobs.append(flat.tobytes())
        offset += flat.size
    header = {"format": _MAGIC, "nets": entries, "extra": extra or {}}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for b in blobs:
            fh.write(b)


def load_nets(path):
    """Inverse of :func:`save_nets`; returns ``(nets, roles, extra)``."""
    raw = Path(path).read_bytes()
    cut = raw.index(b"\n")
    header = json.loads(raw[:cut])
    if header.get("format") != _MAGIC:
        raise ConfigurationError(f"{path}: not a checkpoint")
    blob = np.frombuffer(raw[cut + 1:], dtype="<f8")
    nets, roles = {}, {}
    for e in header["nets"]:
        net = DenseNet.zeros(e["layer_dims"], e["activation"])
        net.seed = e["seed"]
        net.set_flat(blob[e["offset"]:e["offset"] + e["count"]].astype(np.float64))
        nets[e["name"]] = net
        roles[e["name"]] = e["role"]
    return nets, roles, header["extra"]
