import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fwdguide.diffusion import (
    ANCESTRAL,
    DETERMINISTIC,
    ddim_jump,
    denoise_step,
    make_schedule,
    q_sample,
    sample,
    sample_to_zero,
    tweedie,
    unroll_levels,
)
from fwdguide.guidance import circle
from fwdguide.numerics import ContractError, RngState, Tensor, gaussian


def test_alpha_bar_matches_direct_product(sched):
    betas = [1e-4 + (0.02 - 1e-4) * i / 99 for i in range(100)]
    prod = 1.0
    for b in betas:
        prod *= 1.0 - b
    assert sched.alpha_bar[100] == pytest.approx(prod, rel=1e-12)
    assert sched.alpha_bar[0] == 1.0


def test_two_step_constant_schedule():
    s = make_schedule(2, 0.5, 0.5)
    np.testing.assert_allclose(s.alpha_bar, [1.0, 0.5, 0.25])


@pytest.mark.parametrize("args", [(100, 0.02, 1e-4), (1, 1e-4, 0.02), (10, 0.0, 0.1), (10, 0.1, 1.0)])
def test_bad_schedule(args):
    with pytest.raises(ContractError):
        make_schedule(*args)


def test_q_sample_cases(sched):
    z0 = Tensor([[0.5, -1.0]])
    np.testing.assert_array_equal(q_sample(z0, 10, Tensor([[0.0, 0.0]]), sched).numpy(), z0.numpy() * sched.sqrt_ab(10))
    e1 = Tensor([[1.0, 0.0]])
    out = q_sample(Tensor([[0.0, 0.0]]), 7, e1, sched)
    assert out.tolist() == [[math.sqrt(1 - sched.alpha_bar[7]), 0.0]]
    # near t = 0 the latent is nearly clean
    assert np.abs(q_sample(z0, 1, Tensor([[0.3, 0.3]]), sched).numpy() - z0.numpy()).max() < 0.01
    with pytest.raises(ContractError):
        q_sample(z0, 0, e1, sched)


def test_tweedie_zero_eps(sched):
    z = Tensor([[1.0, 2.0]])
    np.testing.assert_allclose(tweedie(z, 30, Tensor([[0.0, 0.0]]), sched).numpy(), z.numpy() / sched.sqrt_ab(30))


pts = arrays(np.float64, (4, 2), elements=st.floats(-3, 3))


@given(pts, pts, st.integers(1, 100))
@settings(max_examples=100)
def test_tweedie_inverts_q_sample(z0, eps, t):
    s = make_schedule(100)
    back = tweedie(q_sample(Tensor(z0), t, Tensor(eps), s), t, Tensor(eps), s)
    assert np.abs(back.numpy() - z0).max() <= 1e-12


def test_last_step_adds_no_noise(small_model, sched):
    z = Tensor(np.random.default_rng(0).normal(size=(5, 2)))
    a = denoise_step(small_model, z, 1, ANCESTRAL, RngState(1), sched)
    b = denoise_step(small_model, z, 1, ANCESTRAL, RngState(2), sched)
    assert np.array_equal(a.numpy(), b.numpy())
    c = denoise_step(small_model, z, 1, DETERMINISTIC, None, sched)
    np.testing.assert_allclose(c.numpy(), tweedie(z, 1, small_model(z, 1), sched).numpy(), rtol=0, atol=0)


def test_ddim_step_with_oracle_denoiser(sched):
    rng = np.random.default_rng(3)
    z0, eps = Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=(4, 2)))
    t = 40
    zt = q_sample(z0, t, eps, sched)
    oracle = lambda z, tt: eps
    out = denoise_step(oracle, zt, t, DETERMINISTIC, None, sched)
    expect = q_sample(z0, t - 1, eps, sched)
    np.testing.assert_allclose(out.numpy(), expect.numpy(), atol=1e-12)


def test_ancestral_step_deterministic_per_seed(small_model, sched):
    z = Tensor(np.ones((3, 2)))
    a = denoise_step(small_model, z, 50, ANCESTRAL, RngState(4), sched)
    b = denoise_step(small_model, z, 50, ANCESTRAL, RngState(4), sched)
    assert a.numpy().tobytes() == b.numpy().tobytes()
    with pytest.raises(ContractError):
        denoise_step(small_model, z, 50, ANCESTRAL, None, sched)
    with pytest.raises(ContractError):
        denoise_step(small_model, z, 50, "euler", None, sched)


def test_ancestral_mean_and_variance(sched):
    # with eps_pred = 0 the step is N(z / √α_t, β_t)
    t, n = 60, 200_000
    z = Tensor(np.full((n, 2), 0.5))
    out = denoise_step(lambda zz, tt: Tensor(np.zeros(zz.shape)), z, t, ANCESTRAL, RngState(8), sched).numpy()
    assert out.mean() == pytest.approx(0.5 / math.sqrt(sched.alpha[t - 1]), abs=5 * math.sqrt(sched.beta[t - 1] / (2 * n)))
    assert out.var() == pytest.approx(sched.beta[t - 1], rel=0.02)


def test_unroll_levels():
    assert unroll_levels(5, 1) == [5, 4, 3, 2, 1, 0]
    assert unroll_levels(5, 2) == [5, 3, 1, 0]
    assert unroll_levels(5, 5) == [5, 0]
    assert unroll_levels(5, 9) == [5, 0]
    with pytest.raises(ContractError):
        unroll_levels(5, 0)


def test_unroll_t1_is_one_step(small_model, sched):
    z = Tensor(np.random.default_rng(1).normal(size=(3, 2)))
    assert np.array_equal(sample_to_zero(small_model, z, 1, 1, sched).numpy(),
                          tweedie(z, 1, small_model(z, 1), sched).numpy())


@pytest.mark.parametrize("t", [1, 7, 50, 100])
def test_stride_t_is_tweedie_exactly(small_model, sched, t):
    z = Tensor(np.random.default_rng(t).normal(size=(8, 2)))
    a = sample_to_zero(small_model, z, t, t, sched).numpy()
    b = tweedie(z, t, small_model(z, t), sched).numpy()
    assert np.array_equal(a, b)


def test_ddim_jump_rejects_upward(small_model, sched):
    z = Tensor(np.zeros((1, 2)))
    with pytest.raises(ContractError):
        ddim_jump(z, 5, 6, z, sched)


def test_stride_1_vs_2_with_trained_model(trained, sched, moons):
    params, _ = trained
    r = RngState(0, "stride")
    x0 = Tensor(moons.numpy()[r.choice(moons.shape[0], 256)])
    z = q_sample(x0, 20, gaussian(r, (256, 2)), sched)
    a = sample_to_zero(params, z, 20, 1, sched)
    b = sample_to_zero(params, z, 20, 2, sched)
    assert not np.array_equal(a.numpy(), b.numpy())
    assert np.isfinite(a.numpy()).all() and np.isfinite(b.numpy()).all()
    # fixtures from the oracle run; the unguided unroll does not favour
    # stride 1 on this objective (stride 2 comes out marginally lower)
    assert circle(0.3)(a).item() == pytest.approx(0.171568, abs=1e-5)
    assert circle(0.3)(b).item() == pytest.approx(0.169264, abs=1e-5)


def test_sample_shape_and_determinism():
    from fwdguide.model import init_params

    s = make_schedule(10)
    m = init_params(RngState(0), 10, freqs=2, hidden=8)
    a = sample(m, 7, RngState(3), s)
    b = sample(m, 7, RngState(3), s)
    assert a.shape == (7, 2) and a.numpy().tobytes() == b.numpy().tobytes()
