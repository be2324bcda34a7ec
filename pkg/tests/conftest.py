import pytest
import torch

from bannoise.attacks import LabelMap, PatchTrigger, PoisonSpec, poison_dataset, train_backdoor
from bannoise.data import make_synthetic_dataset
from bannoise.model import TrainHyper, build_model


@pytest.fixture(scope="session")
def small_data():
    """Four classes of 8x8 images; big enough to train on in a couple of seconds."""
    return make_synthetic_dataset(classes=4, per_class=60, image_size=8, seed=3)


@pytest.fixture(scope="session")
def trained_cnn(small_data):
    model = build_model("cnn", 4, small_data.image_shape, seed=1, channels=(8, 16), norm=True, global_pool=True)
    model, _ = train_backdoor(model, small_data.train, TrainHyper(lr=0.05, epochs=8, batch_size=32, seed=2))
    return model


@pytest.fixture(scope="session")
def badnets_spec():
    return PoisonSpec(PatchTrigger(size=2), LabelMap("all_to_one", 1), rate=0.1, seed=4)


@pytest.fixture(scope="session")
def backdoored_cnn(small_data, badnets_spec):
    model = build_model("cnn", 4, small_data.image_shape, seed=1, channels=(8, 16), norm=True, global_pool=True)
    poisoned = poison_dataset(small_data.train, badnets_spec, 4).data
    model, _ = train_backdoor(model, poisoned, TrainHyper(lr=0.05, epochs=10, batch_size=32, seed=2))
    return model


@pytest.fixture
def tiny_net():
    """47 parameters in float64, for finite-difference checks."""
    torch.manual_seed(0)
    return build_model("cnn", 3, (1, 4, 4), seed=0, channels=(2,)).double()


@pytest.fixture
def tiny_batch():
    gen = torch.Generator().manual_seed(11)
    from bannoise.model import Batch
    return Batch(torch.rand(9, 1, 4, 4, generator=gen, dtype=torch.float64), torch.arange(9) % 3)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
