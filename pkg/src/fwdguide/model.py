"""Toy ε-prediction denoiser: a 2-hidden-layer ReLU MLP with sinusoidal time features."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .autodiff import value_and_grad
from .diffusion import NoiseSchedule
from .numerics import ContractError, NumericError, RngState, Tensor, add_row, concat

log = logging.getLogger(__name__)

CKPT_VERSION = "fwdguide-ckpt-v1"
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W_out", "b_out")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDivergedError(ArithmeticError):
    def __init__(self, step: int, detail: str = "") -> None:
        super().__init__(f"training diverged at step {step}" + (f": {detail}" if detail else ""))
        self.step = step


class CheckpointError(ValueError):
    """Checkpoint file could not be parsed."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint header names an unsupported format version."""


def embed_time(t, T: int, freqs: int) -> np.ndarray:
    """Sinusoidal features [sin(ω_k τ)..., cos(ω_k τ)...] with τ = t/T, ω_k = 2^k π.

    ``t`` may be an int (returns shape [2·freqs]) or an int array of shape
    [n] (returns [n, 2·freqs]).
    """
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > T):
        raise ContractError(f"time step outside 1..{T}")
    omega = (2.0 ** np.arange(freqs)) * math.pi
    ang = (t_arr.astype(np.float64) / T)[..., None] * omega
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass(frozen=True)
class DenoiserParams:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    W_out: Tensor
    b_out: Tensor
    T: int
    freqs: int = 8

    @property
    def in_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    def tensors(self) -> tuple[Tensor, ...]:
        return tuple(getattr(self, k) for k in PARAM_NAMES)

    def replace(self, tensors) -> "DenoiserParams":
        return DenoiserParams(*tensors, T=self.T, freqs=self.freqs)

    def hidden_layer_widths(self) -> list[int]:
        # (W1, b1) and (W2, b2) feed ReLUs; (W_out, b_out) is the linear head
        return [self.W1.shape[1], self.W2.shape[1]]

    def __call__(self, z, t):
        return forward(self, z, t)


def _time_features(params: DenoiserParams, t, n: int) -> Tensor:
    if isinstance(t, (int, np.integer)):
        feats = embed_time(int(t), params.T, params.freqs)
        return Tensor._wrap(np.broadcast_to(feats, (n, feats.shape[0])).copy())
    t = np.asarray(t)
    if t.shape != (n,):
        raise ContractError(f"per-row time steps must have shape ({n},), got {t.shape}")
    return Tensor._wrap(embed_time(t, params.T, params.freqs))


def mlp(z, t, W1, b1, W2, b2, W_out, b_out, params: DenoiserParams):
    """Network body with the weights passed explicitly (traced during training)."""
    n = z.shape[0]
    x = concat([z, _time_features(params, t, n)], axis=1)
    h = add_row(x @ W1, b1).relu()
    h = add_row(h @ W2, b2).relu()
    return add_row(h @ W_out, b_out)


def forward(params: DenoiserParams, z, t):
    """ε prediction for a batch ``z`` of shape [n, 2] at step ``t``."""
    if len(z.shape) != 2 or z.shape[1] != params.W_out.shape[1]:
        raise ContractError(f"denoiser expects [n, {params.W_out.shape[1]}] input, got {z.shape}")
    return mlp(z, t, *params.tensors(), params=params)


def init_params(rng: RngState, T: int, freqs: int = 8, hidden: int = 64, dim: int = 2) -> DenoiserParams:
    """He-uniform weights (bound √(6 / fan_in)), zero biases."""
    in_dim = dim + 2 * freqs

    def he(fan_in, fan_out):
        bound = math.sqrt(6.0 / fan_in)
        return Tensor(rng.uniform((fan_in, fan_out), -bound, bound))

    return DenoiserParams(
        W1=he(in_dim, hidden),
        b1=Tensor(np.zeros(hidden)),
        W2=he(hidden, hidden),
        b2=Tensor(np.zeros(hidden)),
        W_out=he(hidden, dim),
        b_out=Tensor(np.zeros(dim)),
        T=T,
        freqs=freqs,
    )


@dataclass
class TrainReport:
    epoch_losses: list[tuple[int, float]]
    final_loss: float
    steps: int
    seed: int

    @property
    def initial_loss(self) -> float:
        return self.epoch_losses[0][1]


def train(
    data: Tensor,
    s: NoiseSchedule,
    steps: int = 4000,
    batch: int = 128,
    lr: float = 1e-3,
    seed: int = 7,
    freqs: int = 8,
    hidden: int = 64,
) -> tuple[DenoiserParams, TrainReport]:
    """Fit ε_θ on ``data`` with the DDPM noise-prediction MSE and Adam.

    Losses are averaged per epoch (``ceil(n / batch)`` steps); a trailing
    partial epoch is reported too.
    """
    n = data.shape[0]
    if not n >= batch >= 1:
        raise ContractError(f"need n >= batch >= 1, got n={n}, batch={batch}")
    if steps < 1:
        raise ContractError("steps must be positive")
    rng = RngState(seed, "train")
    params = init_params(rng.substream("init"), s.T, freqs=freqs, hidden=hidden, dim=data.shape[1])
    batch_rng = rng.substream("batch")

    flat = [np.array(t.numpy(), dtype=np.float64).reshape(-1) for t in params.tensors()]
    shapes = [t.shape for t in params.tensors()]
    m = [np.zeros_like(p) for p in flat]
    v = [np.zeros_like(p) for p in flat]
    x = data.numpy()
    sqrt_ab = np.sqrt(s.alpha_bar)
    sqrt_1m = np.sqrt(1.0 - s.alpha_bar)

    per_epoch = math.ceil(n / batch)
    epoch_losses: list[tuple[int, float]] = []
    acc = 0.0
    count = 0
    for step in range(1, steps + 1):
        idx = batch_rng.integers(0, n, batch)
        t = batch_rng.integers(1, s.T + 1, batch)
        eps = batch_rng.normal((batch, x.shape[1]))
        zt = Tensor._wrap(sqrt_ab[t][:, None] * x[idx] + sqrt_1m[t][:, None] * eps)
        target = Tensor._wrap(eps)
        weights = tuple(Tensor(p.reshape(sh)) for p, sh in zip(flat, shapes))

        def loss_fn(*w):
            pred = mlp(zt, t, *w, params=params)
            return (pred - target).square().mean()

        try:
            loss, grads = value_and_grad(loss_fn, weights)
        except NumericError as exc:
            raise TrainingDivergedError(step, str(exc)) from exc
        loss = loss.item()
        for p, g, mi, vi in zip(flat, grads, m, v):
            _kernels.adam_update(p, g.numpy().reshape(-1), mi, vi, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, step)
        if not all(np.isfinite(p).all() for p in flat):
            raise TrainingDivergedError(step, "non-finite weights")
        acc += loss
        count += 1
        if step % per_epoch == 0 or step == steps:
            epoch_losses.append((step, acc / count))
            acc, count = 0.0, 0

    final = params.replace(Tensor(p.reshape(sh)) for p, sh in zip(flat, shapes))
    report = TrainReport(epoch_losses, epoch_losses[-1][1], steps, seed)
    log.info("trained %d steps, loss %.4f -> %.4f", steps, report.initial_loss, report.final_loss)
    return final, report


# --------------------------------------------------------------------------
# checkpoint files
# --------------------------------------------------------------------------


def dumps_params(params: DenoiserParams) -> str:
    lines = [CKPT_VERSION, f"T {params.T}", f"freqs {params.freqs}"]
    for name in PARAM_NAMES:
        arr = getattr(params, name).numpy()
        lines.append(f"array {name} {' '.join(str(d) for d in arr.shape)}")
        rows = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(1, -1)
        for row in rows:
            lines.append(" ".join(repr(float(v)) for v in row))
    lines.append("end")
    return "\n".join(lines) + "\n"


def loads_params(text: str) -> DenoiserParams:
    lines = text.splitlines()
    if not lines:
        raise CheckpointError("empty checkpoint")
    if lines[0].strip() != CKPT_VERSION:
        if lines[0].startswith("fwdguide-ckpt-"):
            raise CheckpointVersionError(f"unsupported checkpoint version {lines[0].strip()!r}")
        raise CheckpointError(f"missing {CKPT_VERSION!r} header")
    pos = 1

    def take() -> str:
        nonlocal pos
        if pos >= len(lines):
            raise CheckpointError("checkpoint is truncated")
        pos += 1
        return lines[pos - 1]

    try:
        key, val = take().split()
        if key != "T":
            raise CheckpointError("expected 'T' line")
        T = int(val)
        key, val = take().split()
        if key != "freqs":
            raise CheckpointError("expected 'freqs' line")
        freqs = int(val)
        arrays = {}
        for name in PARAM_NAMES:
            head = take().split()
            if len(head) < 3 or head[0] != "array" or head[1] != name:
                raise CheckpointError(f"expected array {name!r}")
            shape = tuple(int(d) for d in head[2:])
            nrows = shape[0] if len(shape) > 1 else 1
            ncols = int(np.prod(shape)) // nrows
            vals = []
            for _ in range(nrows):
                row = [float(tok) for tok in take().split()]
                if len(row) != ncols:
                    raise CheckpointError(f"array {name!r}: row has {len(row)} values, expected {ncols}")
                vals.extend(row)
            arrays[name] = Tensor(np.array(vals).reshape(shape))
        if take().strip() != "end":
            raise CheckpointError("missing end marker")
    except CheckpointError:
        raise
    except (ValueError, NumericError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    return DenoiserParams(**arrays, T=T, freqs=freqs)


def save_params(params: DenoiserParams, path) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="ascii") as fh:
        fh.write(dumps_params(params))
    os.replace(tmp, path)


def load_params(path) -> DenoiserParams:
    with open(path, encoding="ascii") as fh:
        return loads_params(fh.read())
