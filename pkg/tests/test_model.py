import math

import numpy as np
import pytest

from fwdguide.autodiff import finite_diff, value_and_grad
from fwdguide.diffusion import make_schedule
from fwdguide.model import (
    CKPT_VERSION,
    CheckpointError,
    CheckpointVersionError,
    DenoiserParams,
    TrainingDivergedError,
    dumps_params,
    embed_time,
    forward,
    init_params,
    load_params,
    loads_params,
    mlp,
    save_params,
    train,
)
from fwdguide.numerics import ContractError, RngState, Tensor


def test_embed_time_endpoint():
    e = embed_time(100, 100, 8)
    assert abs(e[0]) <= 1e-15 and e[8] == -1.0
    assert e.shape == (16,)


def test_embed_time_injective():
    feats = embed_time(np.arange(1, 101), 100, 1)
    assert len({tuple(r) for r in feats}) == 100
    with pytest.raises(ContractError):
        embed_time(0, 100, 8)


def test_zero_weights_give_zero_output():
    p = init_params(RngState(0), 100)
    zero = p.replace(Tensor(np.zeros(t.shape)) for t in p.tensors())
    out = forward(zero, Tensor(np.random.default_rng(0).normal(size=(5, 2))), 37)
    assert out.shape == (5, 2) and not out.numpy().any()


def test_rows_permute_with_input(small_model):
    rng = np.random.default_rng(2)
    z = rng.normal(size=(9, 2))
    perm = rng.permutation(9)
    a = small_model(Tensor(z), 12).numpy()
    b = small_model(Tensor(z[perm]), 12).numpy()
    np.testing.assert_allclose(a[perm], b, rtol=0, atol=1e-13)


def test_architecture_widths():
    p = init_params(RngState(0), 100)
    assert p.hidden_layer_widths() == [64, 64]
    assert p.in_dim == 18 and p.W_out.shape == (64, 2)


def test_input_shape_checked(small_model):
    with pytest.raises(ContractError):
        small_model(Tensor(np.zeros((3, 3))), 1)


def test_training_gradient_matches_fd():
    s = make_schedule(100)
    p = init_params(RngState(5), 100, freqs=2, hidden=6)
    rng = np.random.default_rng(0)
    z, t, eps = Tensor(rng.normal(size=(4, 2))), rng.integers(1, 101, 4), Tensor(rng.normal(size=(4, 2)))
    weights = p.tensors()

    def loss(*w):
        return (mlp(z, t, *w, params=p) - eps).square().mean()

    _, grads = value_and_grad(loss, weights)
    for k, w in enumerate(weights):
        def only(x, k=k):
            ws = list(weights)
            ws[k] = x
            return loss(*ws)
        fd = finite_diff(only, w).numpy()
        g = grads[k].numpy()
        assert np.abs(fd - g).max() <= 1e-5 * max(np.abs(g).max(), 1e-3)


def test_train_fixture_values(trained):
    _, report = trained
    assert report.steps == 4000 and report.seed == 7
    assert report.final_loss < report.initial_loss
    # oracle-run fixture
    assert report.initial_loss == pytest.approx(1.16388, abs=1e-4)
    assert report.final_loss == pytest.approx(0.5002, abs=1e-3)
    assert all(math.isfinite(l) for _, l in report.epoch_losses)


def test_train_deterministic():
    s = make_schedule(20)
    data = Tensor(np.random.default_rng(0).normal(size=(64, 2)))
    a, _ = train(data, s, steps=30, batch=16, seed=3, hidden=8)
    b, _ = train(data, s, steps=30, batch=16, seed=3, hidden=8)
    assert dumps_params(a) == dumps_params(b)


def test_single_point_loss_falls_toward_floor():
    # one distinct point: eps is recoverable from z_t, so the floor is 0
    s = make_schedule(100)
    data = Tensor(np.tile([[0.5, -0.5]], (32, 1)))
    _, report = train(data, s, steps=1500, batch=32, seed=1)
    losses = np.array([l for _, l in report.epoch_losses])
    blocks = losses.reshape(5, 300).mean(axis=1)
    assert np.all(np.diff(blocks) < 0)
    assert blocks[-1] < 0.15


def test_train_contract_and_divergence():
    s = make_schedule(10)
    with pytest.raises(ContractError):
        train(Tensor(np.zeros((3, 2))), s, batch=4)
    with pytest.raises(TrainingDivergedError) as info, np.errstate(over="ignore"):
        train(Tensor(np.full((8, 2), 1e155)), s, steps=5, batch=4, hidden=4)
    assert info.value.step == 1


def test_checkpoint_roundtrip_bitwise(tmp_path):
    p = init_params(RngState(11), 50, freqs=3, hidden=5)
    path = tmp_path / "m.ckpt"
    save_params(p, path)
    q = load_params(path)
    for a, b in zip(p.tensors(), q.tensors()):
        assert a.numpy().tobytes() == b.numpy().tobytes()
    assert (q.T, q.freqs) == (50, 3)
    assert path.read_text().splitlines()[0] == CKPT_VERSION
    assert not (tmp_path / "m.ckpt.tmp").exists()


def test_checkpoint_errors():
    text = dumps_params(init_params(RngState(1), 10, freqs=1, hidden=2))
    with pytest.raises(CheckpointError):
        loads_params(text[: len(text) // 2])
    with pytest.raises(CheckpointVersionError):
        loads_params(text.replace(CKPT_VERSION, "fwdguide-ckpt-v9"))
    with pytest.raises(CheckpointError):
        loads_params("\n".join(text.splitlines()[1:]))
    with pytest.raises(CheckpointError):
        loads_params(text.replace("array W2", "array W3"))
    with pytest.raises(CheckpointError):
        loads_params("")
