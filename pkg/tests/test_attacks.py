import pytest
import torch
from hypothesis import given, settings, strategies as st

from bannoise.attacks import (
    TRIGGERS, AdaptiveBlendTrigger, BlendTrigger, LabelMap, PatchTrigger, PoisonSpec, QuantDitherTrigger,
    WarpTrigger, asr, benign_accuracy, floyd_steinberg, poison_count, poison_dataset, trigger_from_dict,
)
from bannoise.errors import ConfigurationError, EvaluationError, InputError
from bannoise.model import Batch

ALL_TRIGGERS = [PatchTrigger(), BlendTrigger(alpha=0.2, seed=1), QuantDitherTrigger(bits=2),
                QuantDitherTrigger(bits=3, dither=False), WarpTrigger(k=4, s=0.5, grid_seed=2),
                AdaptiveBlendTrigger(seed=3)]


def images(n=4, c=3, size=8, seed=0):
    return torch.rand(n, c, size, size, generator=torch.Generator().manual_seed(seed))


@pytest.mark.parametrize("trigger", ALL_TRIGGERS, ids=lambda t: t.variant)
def test_triggers_keep_shape_and_range(trigger):
    x = images()
    for phase in ("train", "test"):
        out = trigger.apply(x, phase, torch.Generator().manual_seed(0))
        assert out.shape == x.shape
        assert out.min() >= 0 and out.max() <= 1


@pytest.mark.parametrize("trigger", ALL_TRIGGERS, ids=lambda t: t.variant)
def test_trigger_round_trips_through_dict(trigger):
    again = trigger_from_dict(trigger.to_dict())
    x = images(seed=5)
    assert torch.equal(again.apply(x), trigger.apply(x))


def test_single_image_is_accepted():
    x = images(1)[0]
    assert PatchTrigger().apply(x).shape == x.shape


def test_patch_stamps_checkerboard_bottom_right():
    x = torch.full((1, 1, 8, 8), 0.5)
    out = PatchTrigger(size=3, margin=1).apply(x)
    expected = torch.tensor([[1.0, 0, 1], [0, 1, 0], [1, 0, 1]])
    assert torch.equal(out[0, 0, 4:7, 4:7], expected)
    untouched = out.clone()
    untouched[0, 0, 4:7, 4:7] = 0.5
    assert torch.equal(untouched, x)


def test_patch_too_big():
    with pytest.raises(ConfigurationError):
        PatchTrigger(size=8).apply(images())


def test_blend_is_convex_mix():
    t = BlendTrigger(alpha=0.2, seed=4)
    x = images()
    p = t.pattern_tensor(tuple(x.shape[1:]))
    assert torch.allclose(t.apply(x), (0.8 * x + 0.2 * p).clamp(0, 1), atol=1e-6)
    assert torch.equal(BlendTrigger(alpha=0.0).apply(x), x)


def test_blend_alpha_out_of_range():
    with pytest.raises(ConfigurationError):
        BlendTrigger(alpha=1.5).apply(images())


def test_quantisation_without_dither_has_few_levels():
    out = QuantDitherTrigger(bits=1, dither=False).apply(images())
    assert set(out.unique().tolist()) <= {0.0, 1.0}


def test_dithering_preserves_mean_better_than_rounding():
    x = torch.full((1, 1, 16, 16), 0.3)
    dithered = floyd_steinberg(x, 2)
    rounded = QuantDitherTrigger(bits=1, dither=False).apply(x)
    assert abs(dithered.mean() - 0.3) < abs(rounded.mean() - 0.3)


def test_warp_grid_is_fixed_by_seed():
    a = WarpTrigger(grid_seed=1).apply(images())
    b = WarpTrigger(grid_seed=1).apply(images())
    c = WarpTrigger(grid_seed=2).apply(images())
    assert torch.equal(a, b) and not torch.equal(a, c)


def test_adaptive_blend_test_phase_uses_every_piece():
    t = AdaptiveBlendTrigger(alpha=0.2, seed=5)
    x = images()
    full = BlendTrigger(alpha=0.2, seed=5).apply(x)
    assert torch.allclose(t.apply(x, "test"), full, atol=1e-6)
    assert not torch.allclose(t.apply(x, "train", torch.Generator().manual_seed(1)), full, atol=1e-6)


def test_trigger_rejects_out_of_range_input():
    with pytest.raises(InputError):
        PatchTrigger().apply(images() + 2)


def test_unknown_variant_and_phase():
    with pytest.raises(ConfigurationError):
        trigger_from_dict({"variant": "sticker"})
    with pytest.raises(ConfigurationError):
        PatchTrigger().apply(images(), phase="deploy")
    assert set(TRIGGERS) == {"patch", "blend", "quant_dither", "warp", "adaptive_blend"}


def test_label_maps():
    y = torch.tensor([0, 1, 2, 9])
    assert LabelMap("all_to_one", 3)(y, 10).tolist() == [3, 3, 3, 3]
    assert LabelMap("all_to_all")(y, 10).tolist() == [1, 2, 3, 0]
    with pytest.raises(ConfigurationError):
        LabelMap("some_to_some")


def test_poison_spec_json_round_trip():
    spec = PoisonSpec(BlendTrigger(alpha=0.2, seed=3), LabelMap("all_to_all"), rate=0.1, seed=8)
    again = PoisonSpec.from_json(spec.to_json())
    assert again.to_dict() == spec.to_dict()


def test_rate_must_be_a_fraction():
    with pytest.raises(ConfigurationError):
        PoisonSpec(PatchTrigger(), rate=1.2)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 300), rate=st.floats(0, 1), seed=st.integers(0, 1000))
def test_poison_dataset_changes_exactly_the_poisoned_rows(n, rate, seed):
    x = torch.full((n, 1, 6, 6), 0.5)
    y = torch.arange(n) % 3
    spec = PoisonSpec(PatchTrigger(size=2), LabelMap("all_to_one", 2), rate=rate, seed=seed)
    out = poison_dataset(Batch(x, y), spec, 3)
    assert int(out.poisoned.sum()) == poison_count(rate, n)
    changed = (out.data.inputs != 0.5).flatten(1).any(1)
    assert torch.equal(changed, out.poisoned)
    assert (out.data.labels[out.poisoned] == 2).all()
    assert torch.equal(out.data.labels[~out.poisoned], y[out.source_index][~out.poisoned])


def test_poison_dataset_is_seeded():
    data = Batch(images(20), torch.arange(20) % 4)
    spec = PoisonSpec(PatchTrigger(), rate=0.25, seed=3)
    a, b = poison_dataset(data, spec, 4), poison_dataset(data, spec, 4)
    assert torch.equal(a.data.inputs, b.data.inputs) and torch.equal(a.poisoned, b.poisoned)


def test_empty_dataset_cannot_be_poisoned():
    with pytest.raises(InputError):
        poison_dataset(Batch(torch.zeros(0, 1, 4, 4), torch.zeros(0)), PoisonSpec(PatchTrigger(size=2)), 2)


def test_backdoor_is_learned(backdoored_cnn, trained_cnn, small_data, badnets_spec):
    assert asr(backdoored_cnn, small_data.test, badnets_spec) >= 0.9
    assert asr(trained_cnn, small_data.test, badnets_spec) < 0.6
    assert benign_accuracy(backdoored_cnn, small_data.test) > 0.8


def test_asr_needs_eligible_samples(trained_cnn, small_data, badnets_spec):
    only_target = small_data.test.subset((small_data.test.labels == 1).nonzero().squeeze(1))
    with pytest.raises(EvaluationError):
        asr(trained_cnn, only_target, badnets_spec)
    with pytest.raises(EvaluationError):
        benign_accuracy(trained_cnn, small_data.test.subset([]))
