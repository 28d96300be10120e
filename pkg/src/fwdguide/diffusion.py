"""Linear-β DDPM schedule, forward noising, reverse steps and the unroll to t = 0.

All functions here are written against the generic tensor operator set, so a
noisy latent may be a plain :class:`Tensor`, a :class:`DualTensor` or a tape
``Var``; the same code path then serves sampling, forward-mode guidance and
the reverse-mode baselines.

``model`` arguments are callables ``model(z, t) -> eps_pred``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import ContractError, RngState, Tensor, gaussian

EpsModel = Callable[[object, int], object]

ANCESTRAL = "ancestral-ddpm"
DETERMINISTIC = "deterministic-ddim"
STEP_KINDS = (ANCESTRAL, DETERMINISTIC)


@dataclass(frozen=True)
class NoiseSchedule:
    """β_1..β_T with α_t = 1 − β_t and ᾱ_t = ∏_{s≤t} α_s (ᾱ_0 = 1).

    Arrays are indexed by step: ``beta[t - 1]`` is β_t, ``alpha_bar[t]`` is ᾱ_t.
    """

    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    def check_step(self, t: int) -> int:
        if not isinstance(t, (int, np.integer)) or not 1 <= t <= self.T:
            raise ContractError(f"step {t!r} outside 1..{self.T}")
        return int(t)

    def sqrt_ab(self, t: int) -> float:
        return math.sqrt(self.alpha_bar[t])

    def sqrt_1m_ab(self, t: int) -> float:
        return math.sqrt(1.0 - self.alpha_bar[t])


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ContractError(f"schedule needs T >= 2, got {T!r}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ContractError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    beta = np.linspace(beta_start, beta_end, int(T))
    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    for arr in (beta, alpha, alpha_bar):
        arr.flags.writeable = False
    return NoiseSchedule(int(T), float(beta_start), float(beta_end), beta, alpha, alpha_bar)


def q_sample(z0, t: int, eps, s: NoiseSchedule):
    """√ᾱ_t · z0 + √(1 − ᾱ_t) · eps."""
    t = s.check_step(t)
    if z0.shape != eps.shape:
        raise ContractError(f"q_sample: z0 shape {z0.shape} != eps shape {eps.shape}")
    return z0 * s.sqrt_ab(t) + eps * s.sqrt_1m_ab(t)


def tweedie(z_t, t: int, eps_pred, s: NoiseSchedule):
    """Clean-sample estimate (z_t − √(1 − ᾱ_t) · eps_pred) / √ᾱ_t."""
    t = s.check_step(t)
    if z_t.shape != eps_pred.shape:
        raise ContractError(f"tweedie: z_t shape {z_t.shape} != eps shape {eps_pred.shape}")
    return (z_t - eps_pred * s.sqrt_1m_ab(t)) * (1.0 / s.sqrt_ab(t))


def ddim_jump(z_t, t: int, t_next: int, eps_pred, s: NoiseSchedule):
    """Deterministic (η = 0) move from level ``t`` to a lower level ``t_next``.

    The clean estimate is re-noised to ``t_next`` with the same predicted
    noise; landing on level 0 returns the Tweedie estimate itself.
    """
    x0 = tweedie(z_t, t, eps_pred, s)
    if t_next == 0:
        return x0
    if not 0 < t_next < t:
        raise ContractError(f"ddim jump must go down: {t} -> {t_next}")
    return x0 * s.sqrt_ab(t_next) + eps_pred * s.sqrt_1m_ab(t_next)


def denoise_step(model: EpsModel, z_t, t: int, kind: str, rng: RngState | None, s: NoiseSchedule):
    """One reverse step z_t -> z_{t-1}.

    ``ancestral-ddpm`` adds fresh noise with σ_t = √β_t (σ_1 = 0);
    ``deterministic-ddim`` is the η = 0 step through the Tweedie estimate.
    """
    t = s.check_step(t)
    if kind not in STEP_KINDS:
        raise ContractError(f"unknown step kind {kind!r}")
    eps = model(z_t, t)
    if kind == DETERMINISTIC:
        return ddim_jump(z_t, t, t - 1, eps, s)
    if t > 1 and rng is None:
        raise ContractError("ancestral step above t = 1 needs an rng")
    beta_t = s.beta[t - 1]
    coef = beta_t / s.sqrt_1m_ab(t)
    mean = (z_t - eps * coef) * (1.0 / math.sqrt(s.alpha[t - 1]))
    if t == 1:
        return mean
    return mean + gaussian(rng, z_t.shape) * math.sqrt(beta_t)


def unroll_levels(t: int, stride: int) -> list[int]:
    """Levels visited by the unroll: t, t − stride, ... (all > 0), then 0."""
    if stride < 1:
        raise ContractError(f"stride must be positive, got {stride}")
    return list(range(t, 0, -stride)) + [0]


def sample_to_zero(model: EpsModel, z_t, t: int, stride: int, s: NoiseSchedule):
    """Run deterministic DDIM jumps from level ``t`` down to 0.

    ``stride = 1`` visits every level; ``stride >= t`` collapses to a single
    jump, which is exactly the Tweedie estimate.
    """
    t = s.check_step(t)
    levels = unroll_levels(t, stride)
    z = z_t
    for cur, nxt in zip(levels[:-1], levels[1:]):
        z = ddim_jump(z, cur, nxt, model(z, cur), s)
    return z


def sample(model: EpsModel, n: int, rng: RngState, s: NoiseSchedule, kind: str = ANCESTRAL, dim: int = 2) -> Tensor:
    """Plain unguided sampling from Z_T ~ N(0, I); the reference for guided runs."""
    z = gaussian(rng.substream("init"), (n, dim))
    step_rng = rng.substream("steps")
    for t in range(s.T, 0, -1):
        z = denoise_step(model, z, t, kind, step_rng, s)
    return z
