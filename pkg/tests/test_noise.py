import pytest
import torch
from hypothesis import given, settings, strategies as st

from bannoise.errors import ConfigurationError
from bannoise.model import ParamSelection
from bannoise.noise import frozen, init_noise, noise_loss, pgd_maximize, zero_noise


def test_zero_noise_loss_is_clean_loss(trained_cnn, small_data):
    import torch.nn.functional as F

    trained_cnn.eval()
    with torch.no_grad():
        clean = F.cross_entropy(trained_cnn(small_data.val.inputs), small_data.val.labels).item()
    assert noise_loss(trained_cnn, zero_noise(trained_cnn), small_data.val) == pytest.approx(clean, abs=1e-6)


@settings(max_examples=20, deadline=None)
@given(eps=st.floats(0.0, 1.0), seed=st.integers(0, 10_000))
def test_random_start_lies_in_ball(trained_cnn, eps, seed):
    n = init_noise(trained_cnn, eps, seed=seed)
    assert n.in_ball()
    n.check(trained_cnn)


@pytest.mark.parametrize("signed", [True, False])
def test_pgd_stays_in_ball_and_gains(trained_cnn, small_data, signed):
    n = pgd_maximize(trained_cnn, small_data.val, 0.3, steps=10, seed=1, signed=signed)
    assert n.in_ball(1e-7)
    assert n.gain >= 0
    assert noise_loss(trained_cnn, n, small_data.val) >= noise_loss(trained_cnn, zero_noise(trained_cnn),
                                                                     small_data.val)


def test_signed_pgd_raises_loss_more_than_random(trained_cnn, small_data):
    n = pgd_maximize(trained_cnn, small_data.val, 0.3, steps=15, seed=2, signed=True)
    start = noise_loss(trained_cnn, init_noise(trained_cnn, 0.3, seed=2), small_data.val)
    assert noise_loss(trained_cnn, n, small_data.val) > start


def test_pgd_is_deterministic(trained_cnn, small_data):
    a = pgd_maximize(trained_cnn, small_data.val, 0.3, steps=5, seed=7)
    b = pgd_maximize(trained_cnn, small_data.val, 0.3, steps=5, seed=7)
    assert torch.equal(a.delta, b.delta) and torch.equal(a.xi, b.xi)


def test_pgd_leaves_model_untouched(trained_cnn, small_data):
    before = [p.clone() for p in trained_cnn.parameters()]
    flags = [p.requires_grad for p in trained_cnn.parameters()]
    pgd_maximize(trained_cnn, small_data.val, 0.3, steps=3)
    assert all(torch.equal(p, q) for p, q in zip(before, trained_cnn.parameters()))
    assert flags == [p.requires_grad for p in trained_cnn.parameters()]


def test_zero_steps_returns_random_start(trained_cnn, small_data):
    n = pgd_maximize(trained_cnn, small_data.val, 0.2, steps=0, seed=3)
    start = init_noise(trained_cnn, 0.2, seed=3)
    assert torch.equal(n.delta, start.delta)


def test_zero_epsilon_gives_zero_noise(trained_cnn, small_data):
    n = pgd_maximize(trained_cnn, small_data.val, 0.0, steps=3)
    assert not n.delta.any() and not n.xi.any()


def test_negative_epsilon_rejected(trained_cnn):
    with pytest.raises(ConfigurationError):
        init_noise(trained_cnn, -0.1)


def test_empty_data_rejected(trained_cnn, small_data):
    with pytest.raises(ConfigurationError):
        pgd_maximize(trained_cnn, small_data.val.subset([]), 0.3)


def test_frozen_restores_training_mode(trained_cnn):
    trained_cnn.train()
    with frozen(trained_cnn):
        assert not trained_cnn.training
        assert not any(p.requires_grad for p in trained_cnn.parameters())
    assert trained_cnn.training
    trained_cnn.eval()


def test_norm_affine_selection_changes_size(trained_cnn, small_data):
    sel = ParamSelection(include_norm_affine=True)
    n = pgd_maximize(trained_cnn, small_data.val, 0.1, steps=2, selection=sel)
    assert n.delta.numel() == trained_cnn.noise_sizes(sel)[0]
