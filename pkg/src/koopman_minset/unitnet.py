"""Unit manifolds learned by a small tanh network.

The network maps a state to N outputs ``yhat_i``; training drives every
output towards unit time derivative, ``<grad yhat_i, P> = 1``, while an
orthogonality penalty on ``<grad yhat_i, grad yhat_j>`` keeps the outputs
from collapsing onto one another::

    L = sum_i mean (<grad yhat_i, P> - 1)^2
        + orth_weight * sum_{i<j} mean <grad yhat_i, grad yhat_j>^2

Input gradients inside the loss are central differences of the network, so
the parameter gradient is plain first-order backprop through 2N shifted
forward passes. The analytic input Jacobian is kept separately as a check.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .dynamics import evaluate_field
from .errors import ConfigError, ContractViolation, DivergenceError
from .linear_analysis import CoordinateChart, flowbox_rotation
from .validation import equilibria_in_patch, foliation_check

_ACTIVATIONS = ("identity", "tanh")


@dataclass(frozen=True)
class Mlp:
    """Weights are ``(n_in, n_out)`` so a batch ``X`` maps as ``X @ W + b``."""

    weights: tuple
    biases: tuple
    output_activation: str = "identity"

    def __post_init__(self):
        if self.output_activation not in _ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.output_activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ContractViolation("need one bias per weight matrix")
        for w, nxt in zip(self.weights[:-1], self.weights[1:]):
            if w.shape[1] != nxt.shape[0]:
                raise ContractViolation("consecutive layer shapes do not chain")

    @classmethod
    def init(cls, layer_sizes, rng, output_activation="identity"):
        """Glorot-uniform weights, zero biases."""
        ws, bs = [], []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            lim = math.sqrt(6.0 / (n_in + n_out))
            ws.append(rng.uniform(-lim, lim, size=(n_in, n_out)))
            bs.append(np.zeros(n_out))
        return cls(tuple(ws), tuple(bs), output_activation)

    @classmethod
    def from_flat(cls, theta, layer_sizes, output_activation="identity"):
        ws, bs = _unflatten(np.asarray(theta, dtype=float), layer_sizes)
        return cls(tuple(w.copy() for w in ws), tuple(b.copy() for b in bs), output_activation)

    @property
    def layer_sizes(self):
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat(self):
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def __call__(self, x):
        return forward(self, x)


def _unflatten(theta, sizes):
    need = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    if theta.size != need:
        raise ContractViolation(f"parameter vector has {theta.size} entries, layers need {need}")
    ws, bs, k = [], [], 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        ws.append(theta[k : k + n_in * n_out].reshape(n_in, n_out))
        k += n_in * n_out
        bs.append(theta[k : k + n_out])
        k += n_out
    return ws, bs


def _forward_layers(ws, bs, x, out_act):
    acts = [x]
    a = x
    for w, b in zip(ws[:-1], bs[:-1]):
        a = np.tanh(a @ w + b)
        acts.append(a)
    y = a @ ws[-1] + bs[-1]
    if out_act == "tanh":
        y = np.tanh(y)
    return acts, y


def _backward_layers(ws, acts, y, dy, out_act):
    """Parameter gradients (flat, same layout as ``Mlp.flat``) for upstream ``dy``."""
    grads = []
    dz = dy * (1.0 - y * y) if out_act == "tanh" else dy
    for layer in range(len(ws) - 1, -1, -1):
        a_prev = acts[layer]
        grads.append((a_prev.T @ dz, dz.sum(axis=0)))
        if layer:
            dz = (dz @ ws[layer].T) * (1.0 - a_prev * a_prev)
    grads.reverse()
    return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])


def _check_input(model, x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != model.layer_sizes[0]:
        raise ContractViolation(f"input has shape {x.shape}, network expects {model.layer_sizes[0]}")
    return x


def forward(model, x):
    x = _check_input(model, x)
    lead = x.shape[:-1]
    _, y = _forward_layers(model.weights, model.biases, x.reshape(-1, x.shape[-1]), model.output_activation)
    return y.reshape(lead + (y.shape[-1],))


def _shifted(x, h):
    """``(2N, M, N)`` copies of ``x``: ``x + h e_j`` at ``2j``, ``x - h e_j`` at ``2j + 1``."""
    n = x.shape[-1]
    out = np.repeat(x[None], 2 * n, axis=0)
    for j in range(n):
        out[2 * j, :, j] += h
        out[2 * j + 1, :, j] -= h
    return out


def input_gradient(model, x, fd_step=1e-4):
    """``d yhat_i / d x_j`` by central differences, shape ``(..., n_out, n_in)``."""
    x = _check_input(model, x)
    lead, n = x.shape[:-1], x.shape[-1]
    flat = x.reshape(-1, n)
    ys = forward(model, _shifted(flat, fd_step).reshape(-1, n)).reshape(2 * n, flat.shape[0], -1)
    g = (ys[0::2] - ys[1::2]) / (2.0 * fd_step)  # (n_in, M, n_out)
    return np.transpose(g, (1, 2, 0)).reshape(lead + (g.shape[-1], n))


def analytic_input_jacobian(model, x):
    """Exact input Jacobian by forward-mode chain rule (validation oracle)."""
    x = _check_input(model, x)
    lead, n = x.shape[:-1], x.shape[-1]
    a = x.reshape(-1, n)
    jac = np.broadcast_to(np.eye(n), (a.shape[0], n, n))
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        jac = np.einsum("io,bij->boj", w, jac)
        last = i == len(model.weights) - 1
        if not last or model.output_activation == "tanh":
            a = np.tanh(z)
            jac = (1.0 - a * a)[:, :, None] * jac
        else:
            a = z
    return jac.reshape(lead + jac.shape[1:])


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossBreakdown:
    unit_terms: tuple
    orth_terms: tuple
    total: float
    orth_weight: float

    @property
    def unit_sum(self):
        return float(sum(self.unit_terms))

    def to_dict(self):
        return {
            "unit_terms": list(self.unit_terms),
            "orth_terms": list(self.orth_terms),
            "total": self.total,
            "orth_weight": self.orth_weight,
        }


def _pairs(k):
    return [(i, j) for i in range(k) for j in range(i + 1, k)]


def _terms_from_gradients(g, p, orth_weight):
    """Loss terms and ``dL/dG`` for input gradients ``g`` (B, K, N) and velocities ``p`` (B, N)."""
    bsz, k, _ = g.shape
    u = np.einsum("bkn,bn->bk", g, p) - 1.0
    unit = np.mean(u * u, axis=0)
    dg = (2.0 / bsz) * u[:, :, None] * p[:, None, :]
    orth = []
    for i, j in _pairs(k):
        c = np.einsum("bn,bn->b", g[:, i], g[:, j])
        orth.append(np.mean(c * c))
        coef = (2.0 * orth_weight / bsz) * c[:, None]
        dg[:, i] += coef * g[:, j]
        dg[:, j] += coef * g[:, i]
    orth = np.array(orth)
    total = float(unit.sum() + orth_weight * orth.sum())
    return unit, orth, total, dg


def loss_from_gradients(gradients, velocities, orth_weight):
    """Loss terms for given input gradients ``(B, K, N)``, e.g. of a closed-form chart."""
    g = np.real(np.asarray(gradients))
    unit, orth, total, _ = _terms_from_gradients(g, np.asarray(velocities, dtype=float), orth_weight)
    return LossBreakdown(tuple(unit.tolist()), tuple(orth.tolist()), total, orth_weight)


def loss_and_grad(model, field, batch, orth_weight, fd_step=1e-4, velocities=None):
    """Loss breakdown and exact parameter gradient of the finite-difference loss."""
    batch = _check_input(model, batch).reshape(-1, model.layer_sizes[0])
    p = evaluate_field(field, batch) if velocities is None else velocities
    ws, bs = model.weights, model.biases
    bsz, n = batch.shape
    xs = _shifted(batch, fd_step).reshape(-1, n)
    acts, y = _forward_layers(ws, bs, xs, model.output_activation)
    ys = y.reshape(2 * n, bsz, -1)
    g = np.transpose((ys[0::2] - ys[1::2]) / (2.0 * fd_step), (1, 2, 0))
    unit, orth, total, dg = _terms_from_gradients(g, p, orth_weight)
    d = np.transpose(dg, (2, 0, 1)) / (2.0 * fd_step)  # (N, B, K)
    dy = np.empty_like(ys)
    dy[0::2] = d
    dy[1::2] = -d
    grad = _backward_layers(ws, acts, y, dy.reshape(y.shape), model.output_activation)
    return LossBreakdown(tuple(unit.tolist()), tuple(orth.tolist()), total, orth_weight), grad


def loss(model, field, batch, orth_weight, fd_step=1e-4):
    """Batch means of the unit and orthogonality terms."""
    batch = _check_input(model, batch).reshape(-1, model.layer_sizes[0])
    if batch.shape[0] == 0:
        raise ContractViolation("empty batch")
    g = input_gradient(model, batch, fd_step)
    unit, orth, total, _ = _terms_from_gradients(g, evaluate_field(field, batch), orth_weight)
    return LossBreakdown(tuple(unit.tolist()), tuple(orth.tolist()), total, orth_weight)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingConfig:
    patch: tuple = ((4.0, 6.0), (1.0, 3.0))
    batch_size: int = 256
    epochs: int = 5000
    learning_rate: float = 1e-3
    orth_weight: float = 0.1
    fd_step: float = 1e-4
    seed: int = 0
    hidden: tuple = (64, 64)
    eval_size: int = 4096
    lr_final: Optional[float] = None  # exponential decay towards this rate; None keeps it constant

    def __post_init__(self):
        patch = tuple(tuple(float(v) for v in axis) for axis in self.patch)
        object.__setattr__(self, "patch", patch)
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not patch or any(len(a) != 2 or not a[0] < a[1] for a in patch):
            raise ConfigError(f"patch must be nonempty lo<hi pairs, got {self.patch}")
        if not 0.0 < self.orth_weight < 1.0:
            raise ConfigError(f"orth_weight must lie in (0, 1), got {self.orth_weight}")
        if not 1e-6 <= self.fd_step <= 1e-2:
            raise ConfigError(f"fd_step must lie in [1e-6, 1e-2], got {self.fd_step}")
        for name in ("batch_size", "epochs", "eval_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.lr_final is not None and not self.lr_final > 0:
            raise ConfigError("lr_final must be positive")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be positive")

    @property
    def lo(self):
        return np.array([a[0] for a in self.patch])

    @property
    def hi(self):
        return np.array([a[1] for a in self.patch])

    def rate(self, epoch):
        if self.lr_final is None or self.epochs < 2:
            return self.learning_rate
        frac = epoch / (self.epochs - 1)
        return self.learning_rate * (self.lr_final / self.learning_rate) ** frac

    def to_dict(self):
        d = asdict(self)
        d["patch"] = [list(a) for a in self.patch]
        d["hidden"] = list(self.hidden)
        return d


@dataclass(frozen=True)
class TrainedUnitManifolds:
    model: Mlp
    config: TrainingConfig
    final_loss: LossBreakdown
    training_curve: np.ndarray
    curve_terms: np.ndarray  # (epochs, K + K(K-1)/2): unit terms then orth terms
    warnings: tuple = ()
    system: str = ""


class Adam:
    def __init__(self, n, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * grad
        self.v = self.b2 * self.v + (1.0 - self.b2) * grad * grad
        mhat = self.m / (1.0 - self.b1**self.t)
        vhat = self.v / (1.0 - self.b2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train(field, config: Optional[TrainingConfig] = None):
    """Fit N unit manifolds on ``config.patch``.

    One epoch is one Adam step on a fresh minibatch drawn uniformly from the
    patch; every random draw comes from one generator seeded by
    ``config.seed``, so identical configs give identical runs. The final
    breakdown is measured on ``eval_size`` further draws from the same stream.
    """
    config = config or TrainingConfig()
    n = field.dim
    if len(config.patch) != n:
        raise ConfigError(f"patch has {len(config.patch)} axes, field has dimension {n}")
    lo, hi = config.lo, config.hi
    warns = list(foliation_check(field, config.patch).warnings)
    if field.invariant_sets is None:
        warns.extend(equilibria_in_patch(field, lo, hi))

    rng = np.random.default_rng(config.seed)
    sizes = (n,) + config.hidden + (n,)
    model = Mlp.init(sizes, rng)
    theta = model.flat()
    opt = Adam(theta.size, config.learning_rate)
    k = n + n * (n - 1) // 2
    curve = np.empty(config.epochs)
    terms = np.empty((config.epochs, k))
    for epoch in range(config.epochs):
        batch = rng.uniform(lo, hi, size=(config.batch_size, n))
        current = Mlp(*(tuple(a) for a in _unflatten(theta, sizes)))
        with np.errstate(over="ignore", invalid="ignore"):
            br, grad = loss_and_grad(current, field, batch, config.orth_weight, config.fd_step)
        if not (math.isfinite(br.total) and np.all(np.isfinite(grad))):
            raise DivergenceError(f"non-finite loss at epoch {epoch}", where=epoch)
        curve[epoch] = br.total
        terms[epoch] = br.unit_terms + br.orth_terms
        opt.lr = config.rate(epoch)
        theta = opt.step(theta, grad)

    model = Mlp.from_flat(theta, sizes)
    eval_batch = rng.uniform(lo, hi, size=(config.eval_size, n))
    final = loss(model, field, eval_batch, config.orth_weight, config.fd_step)
    if not math.isfinite(final.total):
        raise DivergenceError("non-finite loss after training", where=config.epochs)
    return TrainedUnitManifolds(model, config, final, curve, terms, tuple(warns), field.name)


def flowbox_from_unit_manifolds(trained, fd_step=None):
    """Flowbox chart ``z = R yhat`` over the learned unit manifolds."""
    model = trained.model if isinstance(trained, TrainedUnitManifolds) else trained
    h = fd_step or (trained.config.fd_step if isinstance(trained, TrainedUnitManifolds) else 1e-4)
    k = model.layer_sizes[-1]
    r = flowbox_rotation(k)
    return CoordinateChart(
        kind="flowbox",
        forward=lambda x: forward(model, x) @ r.T,
        gradient=lambda x: np.einsum("kj,...jn->...kn", r, input_gradient(model, x, h)),
        domain_guard=lambda x: np.ones(np.shape(x)[:-1] + (1,), dtype=bool),
        dim=k,
        guard_names=("network",),
        rotation=r,
        name="flowbox(learned)",
        metadata={"rotation": "scaled-helmert", "fd_step": h},
    )


# ---------------------------------------------------------------------------
# checkpoints and curves
# ---------------------------------------------------------------------------


def checkpoint_dict(trained, metrics=None, metadata=None):
    m = trained.model
    return {
        "format": "koopman-minset-unitnet/1",
        "system": trained.system,
        "layer_sizes": list(m.layer_sizes),
        "output_activation": m.output_activation,
        "weights": [w.tolist() for w in m.weights],
        "biases": [b.tolist() for b in m.biases],
        "config": trained.config.to_dict(),
        "final_loss": trained.final_loss.to_dict(),
        "warnings": [w.to_dict() for w in trained.warnings],
        "metrics": metrics or {},
        "metadata": metadata or {},
    }


def save_checkpoint(path, trained, metrics=None, metadata=None):
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(trained, metrics, metadata), fh, indent=1, sort_keys=True)


def load_checkpoint(path):
    """Rebuild ``(model, config, payload)``; malformed files raise ``ContractViolation``."""
    try:
        with open(path) as fh:
            data = json.load(fh)
        sizes = [int(s) for s in data["layer_sizes"]]
        ws = tuple(np.asarray(w, dtype=float).reshape(a, b) for w, a, b in zip(data["weights"], sizes[:-1], sizes[1:]))
        bs = tuple(np.asarray(b, dtype=float).reshape(n) for b, n in zip(data["biases"], sizes[1:]))
        if len(ws) != len(sizes) - 1 or len(bs) != len(ws):
            raise ValueError("layer count mismatch")
        model = Mlp(ws, bs, data.get("output_activation", "identity"))
        cfg = data.get("config", {})
        config = TrainingConfig(**cfg) if cfg else TrainingConfig()
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise ContractViolation(f"unreadable checkpoint {path}: {exc}") from exc
    return model, config, data


def write_curve_csv(path, trained):
    n = trained.model.layer_sizes[-1]
    header = ["epoch", "total"] + [f"unit_{i + 1}" for i in range(n)]
    header += [f"orth_{i + 1}_{j + 1}" for i, j in _pairs(n)]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for e, (tot, row) in enumerate(zip(trained.training_curve, trained.curve_terms)):
            fh.write(",".join([str(e), repr(float(tot))] + [repr(float(v)) for v in row]) + "\n")
