"""Conditional flow matching with a hand-written MLP, Adam and minibatch OT pairing."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .domain import (
    DomainError,
    LatentSpec,
    RngState,
    ShapeError,
    TargetSpec,
    interp_et,
    sample_latent,
    sample_target,
)
from .flows import NonFiniteError, VelocityField

log = logging.getLogger(__name__)

MINIBATCH_OT = "minibatch_ot"
INDEPENDENT = "independent"
MAX_OT_BATCH = 512


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...] = (256, 256)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1:
            raise DomainError("input_dim must be >= 1")
        if not self.hidden or min(self.hidden) < 1:
            raise DomainError("need at least one hidden layer of width >= 1")

    @property
    def layer_sizes(self) -> list[tuple[int, int]]:
        widths = [self.input_dim + 3, *self.hidden, self.input_dim]
        return list(zip(widths[:-1], widths[1:]))


@dataclass
class MlpParams:
    """Weights ``W[i]`` of shape ``(fan_in, fan_out)`` and biases ``b[i]``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @classmethod
    def zeros(cls, spec: MlpSpec) -> "MlpParams":
        return cls([np.zeros(s) for s in spec.layer_sizes],
                   [np.zeros(s[1]) for s in spec.layer_sizes])


def init_params(spec: MlpSpec, rng: RngState) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(spec.layer_sizes):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.fork(i).uniform((fan_in, fan_out), -bound, bound))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def time_features(t, n: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (n,))
    return np.stack([t, np.sin(2 * np.pi * t), np.cos(2 * np.pi * t)], axis=1)


def mlp_forward(params: MlpParams, spec: MlpSpec, t, x) -> tuple[np.ndarray, dict]:
    """Evaluate the network on a batch ``x`` of shape ``(n, d)``.

    Hidden layers use ``u * sigmoid(u)``; the output layer is affine. The
    returned cache holds the layer inputs and pre-activations.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"expected (n, {spec.input_dim}) input, got {x.shape}")
    h = np.concatenate([x, time_features(t, x.shape[0])], axis=1)
    inputs, pre = [], []
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        u = h @ w + b
        if i == n_layers - 1:
            h = u
        else:
            pre.append(u)
            h = u * _sigmoid(u)
    return h, {"inputs": inputs, "pre": pre}


def mlp_backward(params: MlpParams, cache: dict, grad_out: np.ndarray) -> MlpParams:
    """Reverse-mode pass; ``grad_out`` is dLoss/dOutput for the whole batch."""
    n_layers = len(params.weights)
    gw: list = [None] * n_layers
    gb: list = [None] * n_layers
    g = grad_out
    for i in reversed(range(n_layers)):
        gw[i] = cache["inputs"][i].T @ g
        gb[i] = g.sum(axis=0)
        if not (np.all(np.isfinite(gw[i])) and np.all(np.isfinite(gb[i]))):
            raise NonFiniteError(f"non-finite gradient in layer {i}")
        if i == 0:
            break
        g = g @ params.weights[i].T
        u = cache["pre"][i - 1]
        sig = _sigmoid(u)
        g = g * (sig * (1 + u * (1 - sig)))
    return MlpParams(gw, gb)


def mlp_param_grads(params: MlpParams, spec: MlpSpec, t_batch, x_batch,
                    target_batch) -> tuple[MlpParams, float]:
    """Gradients of ``mean_i ||v(t_i, x_i) - target_i||^2``; returns (grads, loss)."""
    out, cache = mlp_forward(params, spec, t_batch, x_batch)
    target_batch = np.asarray(target_batch, dtype=np.float64)
    if target_batch.shape != out.shape:
        raise ShapeError("target batch shape does not match the output")
    resid = out - target_batch
    n = out.shape[0]
    loss = float(np.sum(resid**2) / n)
    return mlp_backward(params, cache, 2.0 * resid / n), loss


class MlpField(VelocityField):
    """A trained network exposed as a velocity field."""

    def __init__(self, params: MlpParams, spec: MlpSpec):
        self.params = params
        self.spec = spec
        self.dim = spec.input_dim

    def _velocity(self, t, x):
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        return mlp_forward(self.params, self.spec, t, x)[0]


# --------------------------------------------------------------------------
# Loss, assignment, optimizer
# --------------------------------------------------------------------------


def cfm_loss(field: Callable, x0_batch, x1_batch, t_batch) -> float:
    """Mean over the batch of ``||v_t(e_t(x0, x1)) - (x1 - x0)||^2``."""
    x0 = np.asarray(x0_batch, dtype=np.float64)
    x1 = np.asarray(x1_batch, dtype=np.float64)
    t = np.asarray(t_batch, dtype=np.float64).reshape(-1)
    if x0.shape != x1.shape or t.size != x0.shape[0]:
        raise ShapeError("x0, x1 and t batches must agree")
    xt = interp_et(x0, x1, t)
    resid = np.asarray(field(t, xt)) - (x1 - x0)
    return float(np.mean(np.sum(resid**2, axis=1)))


def assignment_cost(x0_batch, x1_batch, perm) -> float:
    return float(np.sum((np.asarray(x0_batch) - np.asarray(x1_batch)[perm]) ** 2))


def minibatch_ot_assign(x0_batch, x1_batch) -> np.ndarray:
    """Permutation ``perm`` minimising ``sum_i ||x0_i - x1_perm(i)||^2``."""
    x0 = np.asarray(x0_batch, dtype=np.float64)
    x1 = np.asarray(x1_batch, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ShapeError("batches must have equal shapes")
    if x0.shape[0] > MAX_OT_BATCH:
        raise DomainError(f"exact assignment limited to batches of {MAX_OT_BATCH}")
    cost = np.sum((x0[:, None, :] - x1[None, :, :]) ** 2, axis=-1)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(x0.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Optional[list] = None
    v: Optional[list] = None


def adam_step(state: AdamState, params: list[np.ndarray],
              grads: list[np.ndarray]) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update over a flat list of arrays."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    m = state.m or [np.zeros_like(p) for p in params]
    v = state.v or [np.zeros_like(p) for p in params]
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        if p.shape != g.shape:
            raise ShapeError("gradient shape does not match parameter")
        mi = b1 * mi + (1 - b1) * g
        vi = b2 * vi + (1 - b2) * g * g
        m_hat = mi / (1 - b1**step)
        v_hat = vi / (1 - b2**step)
        update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if not np.all(np.isfinite(update)):
            raise NonFiniteError("non-finite Adam update")
        new_params.append(p - update)
        new_m.append(mi)
        new_v.append(vi)
    return new_params, AdamState(state.lr, b1, b2, state.eps, step, new_m, new_v)


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    latent: LatentSpec
    target: TargetSpec
    batch_size: int = 128
    steps: int = 2000
    steps_per_epoch: int = 100
    seed: int = 0
    coupling: str = INDEPENDENT
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    def validate(self):
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if self.coupling not in (INDEPENDENT, MINIBATCH_OT):
            raise DomainError(f"unknown coupling {self.coupling!r}")
        if self.coupling == MINIBATCH_OT and self.batch_size > MAX_OT_BATCH:
            raise DomainError(f"minibatch OT needs batch_size <= {MAX_OT_BATCH}")
        if self.latent.dim != self.target.dim:
            raise ShapeError("latent and target dimensions differ")


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainResult:
    field: MlpField
    epoch_losses: list[float]
    step_losses: np.ndarray = field(repr=False)


def train_cfm(config: TrainConfig, spec: MlpSpec, rng: Optional[RngState] = None,
              callback: Optional[Callable[[int, MlpParams], None]] = None) -> TrainResult:
    """Fit an MLP velocity field by descending the CFM loss with Adam.

    Every step draws fresh latent and target batches (re-paired by exact
    assignment for minibatch OT) and one uniform time per item.
    ``callback(step, params)`` runs before the first and after every step.
    """
    config.validate()
    if spec.input_dim != config.target.dim:
        raise ShapeError("network input_dim must equal the data dimension")
    rng = rng or RngState(config.seed)
    params = init_params(spec, rng.fork(0))
    state = AdamState(config.lr, config.beta1, config.beta2, config.eps)
    data_rng = rng.fork(1)
    losses = np.empty(config.steps)
    if callback:
        callback(0, params)
    for step in range(config.steps):
        x0 = sample_latent(config.latent, config.batch_size, data_rng)
        x1 = sample_target(config.target, config.batch_size, data_rng)
        if config.coupling == MINIBATCH_OT:
            x1 = x1[minibatch_ot_assign(x0, x1)]
        t = data_rng.uniform(config.batch_size)
        xt = interp_et(x0, x1, t)
        grads, loss = mlp_param_grads(params, spec, t, xt, x1 - x0)
        if not np.isfinite(loss) or loss > 1e6:
            raise DivergenceError(f"training diverged at step {step}: loss={loss}")
        flat, state = adam_step(state, params.arrays(), grads.arrays())
        params = MlpParams(flat[0::2], flat[1::2])
        losses[step] = loss
        if callback:
            callback(step + 1, params)
        if (step + 1) % config.steps_per_epoch == 0:
            log.debug("step %d loss %.5f", step + 1, loss)
    epoch = config.steps_per_epoch
    epoch_losses = [float(losses[i:i + epoch].mean()) for i in range(0, config.steps, epoch)]
    return TrainResult(MlpField(params, spec), epoch_losses, losses)


def cfm_loss_floor(scale: float, dim: int, n_nodes: int = 200) -> float:
    """Minimum CFM loss for N(0, I) -> N(m, s^2 I) under the independent coupling.

    ``d * int_0^1 Var(X1 - X0 | Xt) dt`` by Gauss-Legendre quadrature.
    """
    from .flows import gaussian_conditional_variance

    nodes, w = np.polynomial.legendre.leggauss(n_nodes)
    t = 0.5 * (nodes + 1)
    return float(dim * 0.5 * np.sum(w * gaussian_conditional_variance(scale, t)))


# --------------------------------------------------------------------------
# Parameter file and loss CSV
# --------------------------------------------------------------------------

MAGIC = b"PNPFMLP\x00"
FORMAT_VERSION = 1


def save_params(path, field: MlpField) -> None:
    """Binary layout: magic, u32 version, u32 d, u32 L, L x u32 widths, then
    per layer the row-major ``(fan_in, fan_out)`` weights and the biases, all
    little-endian float64."""
    spec = field.spec
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, spec.input_dim, len(spec.hidden)))
        fh.write(struct.pack(f"<{len(spec.hidden)}I", *spec.hidden))
        for arr in field.params.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path) -> MlpField:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a parameter file (bad magic)")
    version, dim, n_hidden = struct.unpack_from("<III", data, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    offset = 20
    hidden = struct.unpack_from(f"<{n_hidden}I", data, offset)
    offset += 4 * n_hidden
    spec = MlpSpec(dim, hidden)
    weights, biases = [], []
    for fan_in, fan_out in spec.layer_sizes:
        for shape, out in (((fan_in, fan_out), weights), ((fan_out,), biases)):
            count = int(np.prod(shape))
            if offset + 8 * count > len(data):
                raise ValueError(f"{path}: truncated parameter payload")
            out.append(np.frombuffer(data, dtype="<f8", count=count,
                                     offset=offset).reshape(shape).astype(np.float64))
            offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after parameters")
    return MlpField(MlpParams(weights, biases), spec)


def write_loss_csv(path, losses) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(losses):
            writer.writerow([i, repr(float(loss))])
