import csv
import warnings

import pytest
import torch

from bannoise.decouple import (
    FeatureMask, btidbf_mask, feature_loss_diagnostics, masked_noised_predict, optimize_mask, select_lambda1,
    write_sweep_csv,
)
from bannoise.errors import ConfigurationError
from bannoise.model import masked_head
from bannoise.noise import zero_noise


def test_mask_is_clamped_and_shaped(trained_cnn, small_data):
    mask = optimize_mask(trained_cnn, small_data.val, lambda1=0.5, epochs=3)
    assert mask.m.shape == trained_cnn.latent_shape
    assert mask.m.min() >= 0 and mask.m.max() <= 1
    assert 0 <= mask.l1_fraction <= 1
    assert mask.l1_norm == pytest.approx(mask.l1_fraction * mask.m.numel())


def test_mask_is_deterministic(trained_cnn, small_data):
    a = optimize_mask(trained_cnn, small_data.val, epochs=2, seed=3)
    b = optimize_mask(trained_cnn, small_data.val, epochs=2, seed=3)
    assert torch.equal(a.m, b.m)


def test_penalty_shrinks_mask(trained_cnn, small_data):
    dense = btidbf_mask(trained_cnn, small_data.val, epochs=10)
    sparse = optimize_mask(trained_cnn, small_data.val, lambda1=5.0, epochs=10)
    assert dense.lambda1 == 0.0
    assert dense.l1_fraction > sparse.l1_fraction


def test_positive_branch_keeps_accuracy(trained_cnn, small_data):
    mask = optimize_mask(trained_cnn, small_data.val, lambda1=0.0, epochs=10)
    d = feature_loss_diagnostics(trained_cnn, mask, small_data.val)
    assert d.pos_loss < d.neg_loss


def test_negative_lambda_rejected(trained_cnn, small_data):
    with pytest.raises(ConfigurationError):
        optimize_mask(trained_cnn, small_data.val, lambda1=-1)


def test_zero_mask_zero_noise_is_plain_negative_branch(trained_cnn, small_data):
    x = small_data.test.inputs[:20]
    mask = FeatureMask(torch.zeros(trained_cnn.latent_shape))
    out = masked_noised_predict(trained_cnn, zero_noise(trained_cnn), mask, x)
    with torch.no_grad():
        trained_cnn.eval()
        assert torch.equal(out, trained_cnn(x))
        feats = trained_cnn.features(x)
        full = FeatureMask(torch.ones(trained_cnn.latent_shape))
        assert torch.equal(masked_noised_predict(trained_cnn, zero_noise(trained_cnn), full, x),
                           masked_head(trained_cnn, feats, torch.zeros(trained_cnn.latent_shape)))


def test_wrong_mask_shape(trained_cnn, small_data):
    with pytest.raises(ConfigurationError):
        masked_noised_predict(trained_cnn, zero_noise(trained_cnn), FeatureMask(torch.ones(2)),
                              small_data.test.inputs[:2])


def test_select_lambda1_picks_midpoint_of_knee(trained_cnn, small_data, tmp_path):
    chosen, rows = select_lambda1(trained_cnn, small_data.val, grid=[0.0, 2.0, 20.0], attack="clean", epochs=5)
    fracs = [r.l1_fraction for r in rows]
    assert fracs[0] > fracs[-1]
    knee = next(i for i, f in enumerate(fracs) if f < 0.5)
    expected = 0.0 if knee == 0 else ([0.0, 2.0, 20.0][knee - 1] + [0.0, 2.0, 20.0][knee]) / 2
    assert chosen == expected
    path = write_sweep_csv(rows, tmp_path / "sweep.csv")
    with path.open() as fh:
        table = list(csv.DictReader(fh))
    assert [r["attack"] for r in table] == ["clean"] * 3
    assert set(table[0]) == {"attack", "lambda1", "l1_norm", "pos_loss", "neg_loss"}


def test_select_lambda1_without_collapse_warns(trained_cnn, small_data):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        chosen, _ = select_lambda1(trained_cnn, small_data.val, grid=[0.0], epochs=2)
    assert chosen == 0.0
    assert any("never collapsed" in str(w.message) for w in caught)


def test_grid_must_be_sorted(trained_cnn, small_data):
    with pytest.raises(ConfigurationError):
        select_lambda1(trained_cnn, small_data.val, grid=[0.5, 0.1])
