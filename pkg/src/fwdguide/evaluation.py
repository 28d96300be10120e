"""Toy data, guidance-quality metrics and the guidance memory benchmark."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from . import _kernels
from .diffusion import NoiseSchedule, sample_to_zero, tweedie
from .guidance import (
    STRATEGIES,
    GuidanceConfig,
    MemReport,
    MemRow,
    Objective,
    guidance_update,
)
from .numerics import ContractError, MemMeter, RngState, Tensor, gaussian


def moons_raw(theta_outer: np.ndarray, theta_inner: np.ndarray) -> np.ndarray:
    """Un-jittered, un-rescaled two-moons points for the given angles."""
    outer = np.stack([np.cos(theta_outer), np.sin(theta_outer)], axis=1)
    inner = np.stack([1.0 - np.cos(theta_inner), 0.5 - np.sin(theta_inner)], axis=1)
    return np.concatenate([outer, inner], axis=0)


def make_moons(n: int, noise_sigma: float = 0.05, seed: int = 0) -> Tensor:
    """Two interleaved half circles, jittered, then centred with max-abs 1 per axis."""
    if n < 2:
        raise ContractError(f"make_moons needs n >= 2, got {n}")
    rng = RngState(seed, "moons")
    n_out = n // 2
    theta = rng.uniform(n, 0.0, math.pi)
    pts = moons_raw(theta[:n_out], theta[n_out:])
    if noise_sigma > 0:
        pts = pts + noise_sigma * rng.normal(pts.shape)
    pts = pts - pts.mean(axis=0)
    pts = pts / np.abs(pts).max(axis=0)
    return Tensor(pts)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    satisfaction_rate: float
    median_abs_residual: float
    energy_distance: float
    dispersion: float


def residuals(samples: Tensor, c: float) -> np.ndarray:
    """|‖p‖² − c| per row."""
    p = samples.numpy()
    return np.abs(np.einsum("ij,ij->i", p, p) - c)


def _pair_mean(a: np.ndarray, b: np.ndarray) -> float:
    # fixed argument order so ed(X, Y) and ed(Y, X) sum in the same order
    if (a.shape[0], a.tobytes()) > (b.shape[0], b.tobytes()):
        a, b = b, a
    return _kernels.pair_dist_mean(a, b)


def energy_distance(x: Tensor, y: Tensor) -> float:
    """2·E‖X − Y‖ − E‖X − X′‖ − E‖Y − Y′‖ over all ordered pairs (V-statistic)."""
    a, b = x.numpy(), y.numpy()
    if a.size == 0 or b.size == 0:
        raise ContractError("energy distance of an empty set")
    cross = _pair_mean(a, b)
    return 2.0 * cross - (_pair_mean(a, a) + _pair_mean(b, b))


def angular_dispersion(points: np.ndarray) -> float:
    """Circular standard deviation of the polar angle; nan below two points."""
    if points.shape[0] < 2:
        return float("nan")
    ang = np.arctan2(points[:, 1], points[:, 0])
    return float(stats.circstd(ang, high=math.pi, low=-math.pi))


def compute_metrics(samples: Tensor, reference: Tensor, c: float = 0.3, tol: float = 0.1) -> Metrics:
    if samples.size == 0:
        raise ContractError("metrics need at least one sample")
    r = residuals(samples, c)
    ok = r < tol
    return Metrics(
        satisfaction_rate=float(ok.mean()),
        median_abs_residual=float(np.median(r)),
        energy_distance=energy_distance(samples, reference),
        dispersion=angular_dispersion(samples.numpy()[ok]),
    )


# --------------------------------------------------------------------------
# memory benchmark
# --------------------------------------------------------------------------


def _forward_peak(strategy: str, model, obj: Objective, z: Tensor, t: int, cfg: GuidanceConfig, s: NoiseSchedule) -> int:
    """Peak live scalars of evaluating the strategy's objective with no AD at all."""
    if strategy == "unguided":
        return 0
    meter = MemMeter()
    with meter.activate():
        if strategy == "tweedie":
            out = obj(tweedie(z, t, model(z, t), s))
        else:
            out = obj(sample_to_zero(model, z, t, cfg.stride, s))
        del out
    return meter.peak_scalars


def memory_bench(
    model,
    obj: Objective,
    depths: Sequence[int],
    strategies: Sequence[str] = STRATEGIES,
    n: int = 256,
    s: NoiseSchedule | None = None,
    cfg: GuidanceConfig | None = None,
    seed: int = 0,
) -> MemReport:
    """One guidance update per (strategy, depth) on a fresh meter.

    ``depth`` is the level t the update starts from, so the unroll has
    ``ceil(t / stride)`` denoiser evaluations.
    """
    if s is None:
        raise ContractError("memory_bench needs a noise schedule")
    cfg = cfg or GuidanceConfig()
    rng = RngState(seed, "membench")
    z = gaussian(rng.substream("latent"), (n, 2))
    report = MemReport()
    for strategy in strategies:
        if strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {strategy!r}")
        for depth in depths:
            t = s.check_step(depth)
            guess_rng = rng.substream(f"guess/{strategy}/{t}")
            meter = MemMeter()
            with meter.activate():
                z_new, _ = guidance_update(strategy, model, z, t, obj, cfg, guess_rng, s, meter)
                del z_new
            report.rows.append(
                MemRow(
                    strategy=strategy,
                    depth=t,
                    peak_scalars=meter.peak_scalars if strategy != "unguided" else 0,
                    tape_scalars=meter.tape_peak(),
                    forward_scalars=_forward_peak(strategy, model, obj, z, t, cfg, s),
                )
            )
    return report


def slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of ys against xs."""
    return float(np.polyfit(np.asarray(xs, float), np.asarray(ys, float), 1)[0])
