"""Training-free guidance: objectives, gradient guesses, forward-gradient updates and baselines.

Strategies
    ``unguided``  plain ancestral sampling.
    ``tweedie``   z ← z − λ ∇_z L(Tweedie estimate), reverse mode.
    ``direct``    z ← z − λ ∇_z L(unroll to 0), reverse mode through the unroll.
    ``titan``     z ← z − λ ⟨∇_z L(unroll to 0), V⟩ V, one forward-mode pass.

Coupling
    ``sample`` treats every batch row as its own latent: the objective is the
    per-row loss, guesses are normalised per row and ``h`` is a per-row
    directional derivative.  ``batch`` treats the whole [n, 2] batch as one
    latent with a mean-reduced scalar objective (rows play the role of video
    frames).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff
from .autodiff import grad, jvp
from .diffusion import ANCESTRAL, STEP_KINDS, NoiseSchedule, denoise_step, sample_to_zero, tweedie
from .numerics import (
    ContractError,
    MemMeter,
    RngState,
    Tensor,
    gaussian,
    row_norms,
    scale_rows,
    tile_rows,
)

log = logging.getLogger(__name__)

STRATEGIES = ("unguided", "tweedie", "direct", "titan")
GUESSES = ("random", "score", "sampled")
TEST_GUESSES = ("oracle",)  # exact-direction hook, not a practical guess
COUPLINGS = ("sample", "batch")


class DegenerateDirectionError(ArithmeticError):
    """A deterministic guess came out as the zero vector."""


# --------------------------------------------------------------------------
# objectives
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Objective:
    """Loss on clean 2-D points.

    ``circle``: (x² + y² − c)² per row.
    ``masked``: ‖mask ⊙ p − mask ⊙ target‖² per row (unmasked coordinates
    are free), the squared form of an exp(−‖A(X) − y‖) likelihood.
    """

    kind: str = "circle"
    c: float = 0.3
    mask: tuple[float, ...] = (1.0, 0.0)
    target: tuple[float, ...] = (0.7, 0.0)

    def __post_init__(self) -> None:
        if self.kind == "circle":
            if not self.c > 0:
                raise ContractError(f"circle objective needs c > 0, got {self.c}")
        elif self.kind == "masked":
            if any(m not in (0.0, 1.0) for m in self.mask):
                raise ContractError(f"mask entries must be 0 or 1, got {self.mask}")
            if len(self.mask) != len(self.target) or not all(math.isfinite(v) for v in self.target):
                raise ContractError("masked objective needs a finite target matching the mask")
        else:
            raise ContractError(f"unknown objective kind {self.kind!r}")

    def per_row(self, points):
        if self.kind == "circle":
            return (points.square().sum(axis=1) - self.c).square()
        n = points.shape[0]
        mask = np.asarray(self.mask, dtype=np.float64)
        m = Tensor._wrap(np.broadcast_to(mask, (n, mask.size)).copy())
        y = Tensor._wrap(np.broadcast_to(mask * np.asarray(self.target), (n, mask.size)).copy())
        return (points * m - y).square().sum(axis=1)

    def __call__(self, points):
        return self.per_row(points).mean()

    def likelihood(self, points: Tensor) -> float:
        """Mean of exp(−‖A(p) − y‖) over rows; reported, never optimised."""
        r = self.per_row(points).sqrt()
        return float((-r).exp().mean())


def circle(c: float = 0.3) -> Objective:
    return Objective("circle", c=c)


def masked(mask=(1.0, 0.0), target=(0.7, 0.0)) -> Objective:
    return Objective("masked", mask=tuple(float(v) for v in mask), target=tuple(float(v) for v in target))


def objective_eval(obj: Objective, points):
    return obj(points)


# --------------------------------------------------------------------------
# configuration and diagnostics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GuidanceConfig:
    strategy: str = "titan"
    guess: str = "random"
    lam: float = 0.1
    stride: int = 1
    sampler: str = ANCESTRAL
    frames: int = 2
    coupling: str = "sample"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}")
        if self.guess not in GUESSES + TEST_GUESSES:
            raise ContractError(f"unknown guess {self.guess!r}")
        if not self.lam >= 0 or not math.isfinite(self.lam):
            raise ContractError(f"step size must be a finite non-negative number, got {self.lam}")
        if self.stride < 1:
            raise ContractError(f"stride must be positive, got {self.stride}")
        if self.sampler not in STEP_KINDS:
            raise ContractError(f"unknown sampler {self.sampler!r}")
        if self.frames < 1:
            raise ContractError(f"sampled frames must be >= 1, got {self.frames}")
        if self.coupling not in COUPLINGS:
            raise ContractError(f"unknown coupling {self.coupling!r}")

    def with_(self, **changes) -> "GuidanceConfig":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return GuidanceConfig(**fields)


@dataclass
class StepDiagnostics:
    t: int
    loss: float
    h: float
    update_norm: float
    fallback: bool = False
    peak_scalars: int = 0
    tape_scalars: int = 0
    guess_tape_scalars: int = 0


@dataclass
class Trajectory:
    latents: list[np.ndarray] = field(default_factory=list)  # Z_T .. Z_0
    steps: list[StepDiagnostics] = field(default_factory=list)

    @property
    def peak_scalars(self) -> int:
        return max((d.peak_scalars for d in self.steps), default=0)

    @property
    def tape_scalars(self) -> int:
        return max((d.tape_scalars for d in self.steps), default=0)


@dataclass(frozen=True)
class MemRow:
    strategy: str
    depth: int
    peak_scalars: int
    tape_scalars: int
    forward_scalars: int = 0


@dataclass
class MemReport:
    rows: list[MemRow] = field(default_factory=list)

    def select(self, strategy: str) -> list[MemRow]:
        return [r for r in self.rows if r.strategy == strategy]

    def peak(self, strategy: str, depth: int) -> int:
        for r in self.rows:
            if r.strategy == strategy and r.depth == depth:
                return r.peak_scalars
        raise KeyError((strategy, depth))


# --------------------------------------------------------------------------
# objective programs
# --------------------------------------------------------------------------


def _reduce(obj: Objective, coupling: str):
    """Scalar objective used by reverse mode: sum of row losses or their mean."""
    if coupling == "sample":
        return lambda pts: obj.per_row(pts).sum()
    return obj


def unroll_program(model, obj: Objective, t: int, stride: int, s: NoiseSchedule, coupling: str = "sample") -> Callable:
    """f(z) = L(sample_to_zero(z)); per-row losses under sample coupling."""
    loss = obj.per_row if coupling == "sample" else obj
    return lambda z: loss(sample_to_zero(model, z, t, stride, s))


def tweedie_program(model, obj: Objective, t: int, s: NoiseSchedule, coupling: str = "sample") -> Callable:
    loss = obj.per_row if coupling == "sample" else obj
    return lambda z: loss(tweedie(z, t, model(z, t), s))


# --------------------------------------------------------------------------
# gradient guesses
# --------------------------------------------------------------------------


def guess_random(rng: RngState, shape) -> Tensor:
    """V ~ N(0, I), deliberately not normalised (keeps the estimator unbiased)."""
    return gaussian(rng, shape)


def _normalise(v: Tensor, coupling: str) -> Tensor:
    if coupling == "sample":
        norms = row_norms(v).numpy()
        if np.any(norms == 0.0):
            raise DegenerateDirectionError("zero row in guess direction")
        return Tensor._wrap(v.numpy() / norms[:, None])
    n = v.norm().item()
    if n == 0.0:
        raise DegenerateDirectionError("zero guess direction")
    return v * (1.0 / n)


def guess_score(model, z_t: Tensor, t: int, coupling: str = "batch") -> Tensor:
    """Normalised denoiser output ε_θ(z_t, t) / ‖ε_θ(z_t, t)‖."""
    return _normalise(model(z_t, t), coupling)


def guess_sampled(
    model,
    z_t: Tensor,
    t: int,
    obj: Objective,
    frames: int,
    rng: RngState,
    s: NoiseSchedule,
    coupling: str = "batch",
) -> Tensor:
    """Gradient of the Tweedie objective on a few rows, normalised and tiled.

    ``frames`` distinct rows are drawn from ``rng``; their loss gradient is
    taken through the one-step Tweedie estimate only (a shallow tape), scaled
    to unit norm (stacked under batch coupling, per row under sample
    coupling) and repeated cyclically over all rows.
    """
    n = z_t.shape[0]
    if not 1 <= frames <= n:
        raise ContractError(f"sampled guess needs 1 <= frames <= {n}, got {frames}")
    idx = np.sort(rng.choice(n, frames))
    sub = z_t.rows(idx)
    g = grad(lambda zs: _reduce(obj, coupling)(tweedie(zs, t, model(zs, t), s)), sub, tag="guess")
    return tile_rows(_normalise(g, coupling), n)


def guess_oracle(model, z_t: Tensor, t: int, obj: Objective, stride: int, s: NoiseSchedule, coupling: str) -> Tensor:
    """∇f / ‖∇f‖ for the unroll objective; used to check the estimator is exact."""
    f = _reduce(obj, coupling)
    g = grad(lambda z: f(sample_to_zero(model, z, t, stride, s)), z_t, tag="oracle")
    if coupling == "sample":
        norms = row_norms(g).numpy()
        safe = np.where(norms > 0, norms, 1.0)
        return Tensor._wrap(g.numpy() / safe[:, None])
    n = g.norm().item()
    return g * (1.0 / n) if n > 0 else g


def make_guess(model, z_t: Tensor, t: int, obj: Objective, cfg: GuidanceConfig, rng: RngState, s: NoiseSchedule):
    """Build V_t for ``cfg.guess``; returns ``(V, fell_back_to_random)``."""
    if cfg.guess == "random":
        return guess_random(rng, z_t.shape), False
    try:
        if cfg.guess == "score":
            return guess_score(model, z_t, t, cfg.coupling), False
        if cfg.guess == "sampled":
            return guess_sampled(model, z_t, t, obj, cfg.frames, rng, s, cfg.coupling), False
        return guess_oracle(model, z_t, t, obj, cfg.stride, s, cfg.coupling), False
    except DegenerateDirectionError as exc:
        log.warning("t=%d: %s guess degenerate (%s); using a random guess", t, cfg.guess, exc)
        return guess_random(rng, z_t.shape), True


# --------------------------------------------------------------------------
# updates
# --------------------------------------------------------------------------


def _mean_loss(value: Tensor) -> float:
    return float(value.numpy().mean())


def titan_step(model, z_t: Tensor, t: int, obj: Objective, cfg: GuidanceConfig, rng: RngState,
               s: NoiseSchedule, meter: MemMeter | None = None, guess: Tensor | None = None):
    """Forward-gradient update z_t − λ ⟨∇f, V⟩ V with f the unroll objective.

    ``guess`` overrides the configured guess construction.  Returns the
    updated latent and its diagnostics.  No reverse-mode tape is built for
    the JVP itself.
    """
    t = s.check_step(t)
    fallback = False
    guess_tape = meter.tape_peak() if meter is not None else 0
    if guess is None:
        guess, fallback = make_guess(model, z_t, t, obj, cfg, rng, s)
    if guess.shape != z_t.shape:
        raise ContractError(f"guess shape {guess.shape} != latent shape {z_t.shape}")
    if meter is not None:
        guess_tape = meter.tape_peak() - guess_tape

    f = unroll_program(model, obj, t, cfg.stride, s, cfg.coupling)
    tapes_before = autodiff.Tape.created
    tape_live_before = meter.tape_live() if meter is not None else 0
    value, h = jvp(f, z_t, guess)
    if autodiff.Tape.created != tapes_before or (meter is not None and meter.tape_live() != tape_live_before):
        raise AssertionError("forward-gradient step recorded a reverse-mode tape")

    if cfg.coupling == "sample":
        G = scale_rows(guess, h)
        h_total = float(h.numpy().sum())
    else:
        G = guess * h.item()
        h_total = h.item()
    z_new = z_t - G * cfg.lam
    diag = StepDiagnostics(
        t=t,
        loss=_mean_loss(value),
        h=h_total,
        update_norm=cfg.lam * G.norm().item(),
        fallback=fallback,
        guess_tape_scalars=guess_tape,
    )
    return z_new, diag


def _reverse_update(z_t: Tensor, t: int, obj: Objective, cfg: GuidanceConfig, s, model, tweedie_only: bool):
    f = _reduce(obj, cfg.coupling)
    if tweedie_only:
        inner = lambda z: tweedie(z, t, model(z, t), s)
    else:
        inner = lambda z: sample_to_zero(model, z, t, cfg.stride, s)
    value, g = autodiff.value_and_grad(lambda z: f(inner(z)), z_t, tag="guidance")
    z_new = z_t - g * cfg.lam
    loss = float(value) / z_t.shape[0] if cfg.coupling == "sample" else float(value)
    gn = g.norm().item()
    return z_new, StepDiagnostics(t=t, loss=loss, h=gn, update_norm=cfg.lam * gn)


def tweedie_step(model, z_t: Tensor, t: int, obj: Objective, cfg: GuidanceConfig, s: NoiseSchedule):
    """Baseline: gradient of the loss on the one-step Tweedie estimate."""
    return _reverse_update(z_t, s.check_step(t), obj, cfg, s, model, tweedie_only=True)


def direct_step(model, z_t: Tensor, t: int, obj: Objective, cfg: GuidanceConfig, s: NoiseSchedule):
    """Baseline: exact gradient through the full unroll, by backpropagation."""
    return _reverse_update(z_t, s.check_step(t), obj, cfg, s, model, tweedie_only=False)


def guidance_update(strategy: str, model, z_t: Tensor, t: int, obj: Objective, cfg: GuidanceConfig,
                    rng: RngState, s: NoiseSchedule, meter: MemMeter | None = None):
    """One guidance update of ``strategy`` at level ``t``; ``None`` diagnostics when unguided."""
    if strategy == "unguided":
        return z_t, None
    if strategy == "tweedie":
        return tweedie_step(model, z_t, t, obj, cfg, s)
    if strategy == "direct":
        return direct_step(model, z_t, t, obj, cfg, s)
    if strategy == "titan":
        return titan_step(model, z_t, t, obj, cfg, rng, s, meter)
    raise ContractError(f"unknown strategy {strategy!r}")


def run(strategy: str, model, obj: Objective, cfg: GuidanceConfig, rng: RngState, s: NoiseSchedule,
        n: int = 256, meter_factory: Callable[[], MemMeter] = MemMeter, dim: int = 2):
    """Guided sampling from Z_T ~ N(0, I) down to Z_0.

    At each level t = T..1 the latent receives one guidance update and then
    one outer denoising step to t − 1.  Noise streams: ``init`` for Z_T,
    ``steps`` for ancestral noise, ``guess`` for gradient guesses, so the
    unguided run is bitwise identical to :func:`diffusion.sample`.

    Returns ``(samples, trajectory, mem_report)``; the report has one row per
    guided step with the peak live scalars charged to that guidance update.
    """
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown strategy {strategy!r}")
    z = gaussian(rng.substream("init"), (n, dim))
    step_rng = rng.substream("steps")
    guess_rng = rng.substream("guess")
    traj = Trajectory(latents=[z.numpy().copy()])
    report = MemReport()
    for t in range(s.T, 0, -1):
        if strategy != "unguided":
            meter = meter_factory()
            with meter.activate():
                z_new, diag = guidance_update(strategy, model, z, t, obj, cfg, guess_rng, s, meter)
            diag.peak_scalars = meter.peak_scalars
            diag.tape_scalars = meter.tape_peak()
            traj.steps.append(diag)
            report.rows.append(MemRow(strategy, t, meter.peak_scalars, meter.tape_peak()))
            z = Tensor(z_new.numpy())
            del z_new
        z = denoise_step(model, z, t, cfg.sampler, step_rng, s)
        traj.latents.append(z.numpy().copy())
    return z, traj, report
